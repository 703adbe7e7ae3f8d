//! Delay-dependent LMI blocks, definiteness checks, a bounded gain search and the
//! Lyapunov-Krasovskii diagnostic.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LmiBlocks {
    /// Symmetric `4n x 4n` block.
    pub block_psi11: DMatrix<f64>,
    pub block_psi12: DMatrix<f64>,
    pub block_psi22: DMatrix<f64>,
    /// The `n x 4n` row block multiplying `theta(k)`.
    pub row_f: DMatrix<f64>,
}

impl LmiBlocks {
    pub fn assemble(&self) -> DMatrix<f64> {
        let a = self.block_psi11.nrows();
        let b = self.block_psi22.nrows();
        let mut psi = DMatrix::zeros(a + b, a + b);
        psi.view_mut((0, 0), (a, a)).copy_from(&self.block_psi11);
        psi.view_mut((0, a), (a, b)).copy_from(&self.block_psi12);
        psi.view_mut((a, 0), (b, a)).copy_from(&self.block_psi12.transpose());
        psi.view_mut((a, a), (b, b)).copy_from(&self.block_psi22);
        psi
    }
}

fn check_square(m: &DMatrix<f64>, n: usize, what: &str) -> Result<()> {
    if m.shape() != (n, n) {
        return Err(Error::Dimension(format!("{what} is {}x{}, expected {n}x{n}", m.nrows(), m.ncols())));
    }
    Ok(())
}

/// Places `(row, col, block)` entries into a `4n x 4n` matrix and keeps its symmetric part.
fn symmetric_from_blocks(n: usize, entries: &[(usize, usize, DMatrix<f64>)]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(4 * n, 4 * n);
    for (i, j, blk) in entries {
        let mut view = m.view_mut((i * n, j * n), (n, n));
        view += blk;
    }
    (&m + m.transpose()) * 0.5
}

fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks[0].nrows();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        out.view_mut((0, c), (rows, b.ncols())).copy_from(*b);
        c += b.ncols();
    }
    out
}

fn block_diag2(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (na, nb) = (a.nrows(), b.nrows());
    let mut out = DMatrix::zeros(na + nb, na + nb);
    out.view_mut((0, 0), (na, na)).copy_from(a);
    out.view_mut((na, na), (nb, nb)).copy_from(b);
    out
}

/// Blocks for a given gain and decision matrices `P*, R*, T*, U`.
///
/// The row block uses the constant part `[A - I, BK, 0, BK]`; the switching term is
/// accounted for as slack in [`lkf_evaluate`].
#[allow(clippy::too_many_arguments)]
pub fn assemble_theorem3(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    k: &DMatrix<f64>,
    mu: f64,
    upsilon: &DMatrix<f64>,
    delta_bar: f64,
    p_star: &DMatrix<f64>,
    r_star: &DMatrix<f64>,
    t_star: &DMatrix<f64>,
) -> Result<LmiBlocks> {
    let n = a.nrows();
    check_square(a, n, "A")?;
    if b.nrows() != n || k.shape() != (b.ncols(), n) {
        return Err(Error::Dimension("B and K do not match A".into()));
    }
    for (m, w) in [(upsilon, "Upsilon"), (p_star, "P*"), (r_star, "R*"), (t_star, "T*")] {
        check_square(m, n, w)?;
    }
    let i = DMatrix::identity(n, n);
    let am = a - &i;
    let bk = b * k;
    let pbk = p_star * &bk;
    let psi11 = symmetric_from_blocks(
        n,
        &[
            (0, 0, p_star * &am + am.transpose() * p_star + r_star - t_star),
            (0, 1, &pbk * 2.0 + t_star),
            (0, 3, &pbk * 2.0),
            (1, 0, t_star.clone()),
            (1, 1, t_star * -2.0 + upsilon * mu),
            (1, 2, t_star.clone()),
            (2, 1, t_star.clone()),
            (2, 2, -t_star - r_star),
            (3, 3, -upsilon),
        ],
    );
    let zero = DMatrix::zeros(n, n);
    let row_f = hstack(&[&am, &bk, &zero, &bk]);
    let ft = row_f.transpose();
    let psi12 = hstack(&[&(&ft * p_star), &(&ft * t_star * delta_bar)]);
    let psi22 = block_diag2(&-p_star, &-t_star);
    Ok(LmiBlocks { block_psi11: psi11, block_psi12: psi12, block_psi22: psi22, row_f })
}

/// Congruence-transformed blocks in `E = P*^-1`, `Y = K E`.
///
/// The row block is `[(A - I)E, BY, 0, BY]`, i.e. the constant Theorem-3 row times `diag(E, E, E, E)`.
#[allow(clippy::too_many_arguments)]
pub fn assemble_theorem4(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    mu: f64,
    delta_bar: f64,
    e: &DMatrix<f64>,
    q_hat: &DMatrix<f64>,
    r_hat: &DMatrix<f64>,
    ups_hat: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> Result<LmiBlocks> {
    let n = a.nrows();
    check_square(a, n, "A")?;
    if b.nrows() != n || y.shape() != (b.ncols(), n) {
        return Err(Error::Dimension("B and Y do not match A".into()));
    }
    for (m, w) in [(e, "E"), (q_hat, "Q^"), (r_hat, "R^"), (ups_hat, "Upsilon^")] {
        check_square(m, n, w)?;
    }
    let i = DMatrix::identity(n, n);
    let am = a - &i;
    let ame = &am * e;
    let by = b * y;
    let psi11 = symmetric_from_blocks(
        n,
        &[
            (0, 0, &ame + ame.transpose() + q_hat - r_hat),
            (0, 1, &by * 2.0 + r_hat),
            (0, 3, &by * 2.0),
            (1, 0, r_hat.clone()),
            (1, 1, r_hat * -2.0 + ups_hat * mu),
            (1, 2, r_hat.clone()),
            (2, 1, r_hat.clone()),
            (2, 2, -r_hat - q_hat),
            (3, 3, -ups_hat),
        ],
    );
    let zero = DMatrix::zeros(n, n);
    let row_f = hstack(&[&ame, &by, &zero, &by]);
    let ft = row_f.transpose();
    let psi12 = hstack(&[&ft, &(&ft * delta_bar)]);
    let psi22 = block_diag2(&-e, &(r_hat - e * 2.0));
    Ok(LmiBlocks { block_psi11: psi11, block_psi12: psi12, block_psi22: psi22, row_f })
}

fn ensure_symmetric(m: &DMatrix<f64>, tol: f64) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Dimension("matrix must be square".into()));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > tol.max(1e-12) * scale {
        return Err(Error::InvalidParameter("matrix is not symmetric".into()));
    }
    Ok(())
}

/// True iff every eigenvalue is below `-tol * ||M||_2`.
pub fn check_negative_definite(m: &DMatrix<f64>, tol: f64) -> Result<bool> {
    ensure_symmetric(m, tol)?;
    if m.is_empty() {
        return Ok(false);
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigenvalues();
    let norm = eig.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if norm == 0.0 {
        return Ok(false);
    }
    Ok(eig.max() < -tol * norm)
}

/// Same test through a Cholesky factorization of `-M - tol ||M||_2 I`.
pub fn check_negative_definite_cholesky(m: &DMatrix<f64>, tol: f64) -> Result<bool> {
    ensure_symmetric(m, tol)?;
    if m.is_empty() {
        return Ok(false);
    }
    let sym = (m + m.transpose()) * 0.5;
    let norm = sym.clone().symmetric_eigenvalues().amax();
    if norm == 0.0 {
        return Ok(false);
    }
    let n = sym.nrows();
    let shifted = -sym - DMatrix::identity(n, n) * (tol * norm);
    Ok(shifted.cholesky().is_some())
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    ((m + m.transpose()) * 0.5).symmetric_eigenvalues().max()
}

pub const DEFINITENESS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchBudget {
    pub iterations: usize,
}

impl Default for SearchBudget {
    fn default() -> Self {
        Self { iterations: 4000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub mat_e: DMatrix<f64>,
    pub mat_y: DMatrix<f64>,
    pub gain_k: DMatrix<f64>,
    pub q_hat: DMatrix<f64>,
    pub r_hat: DMatrix<f64>,
    pub ups_hat: DMatrix<f64>,
    pub mu: f64,
    pub delta_bar: f64,
    /// Largest eigenvalue of the certified block-diagonal system.
    pub max_eigenvalue: f64,
    pub iterations: usize,
}

impl Certificate {
    /// Reassembles every block from the stored matrices and checks it again.
    pub fn verify(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<bool> {
        let blocks = assemble_theorem4(a, b, self.mu, self.delta_bar, &self.mat_e, &self.q_hat, &self.r_hat, &self.ups_hat, &self.mat_y)?;
        let psi = blocks.assemble();
        let mut ok = check_negative_definite(&psi, DEFINITENESS_TOL)?;
        for m in [&self.mat_e, &self.q_hat, &self.r_hat, &self.ups_hat] {
            ok &= check_negative_definite(&-m, DEFINITENESS_TOL)?;
        }
        let e_inv = self.mat_e.clone().try_inverse().ok_or_else(|| Error::Singular("E".into()))?;
        let k = &self.mat_y * e_inv;
        ok &= (k - &self.gain_k).amax() <= 1e-9 * (1.0 + self.gain_k.amax());
        Ok(ok)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfeasibleReport {
    pub best_max_eigenvalue: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SynthesisOutcome {
    Feasible(Certificate),
    Infeasible(InfeasibleReport),
}

impl SynthesisOutcome {
    pub fn is_feasible(&self) -> bool {
        matches!(self, SynthesisOutcome::Feasible(_))
    }
}

/// Coordinates: four symmetric `n x n` matrices (upper triangles) then `Y` row-major.
struct DecisionLayout {
    n: usize,
    p: usize,
    sym: usize,
}

impl DecisionLayout {
    fn new(n: usize, p: usize) -> Self {
        Self { n, p, sym: n * (n + 1) / 2 }
    }
    fn len(&self) -> usize {
        4 * self.sym + self.p * self.n
    }
    fn sym_matrix(&self, x: &[f64], which: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        let mut idx = which * self.sym;
        for i in 0..self.n {
            for j in i..self.n {
                m[(i, j)] = x[idx];
                m[(j, i)] = x[idx];
                idx += 1;
            }
        }
        m
    }
    fn y(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.p, self.n, &x[4 * self.sym..])
    }
    fn pack(&self, e: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, u: &DMatrix<f64>, y: &DMatrix<f64>) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.len());
        for m in [e, q, r, u] {
            for i in 0..self.n {
                for j in i..self.n {
                    x.push(m[(i, j)]);
                }
            }
        }
        for i in 0..self.p {
            for j in 0..self.n {
                x.push(y[(i, j)]);
            }
        }
        x
    }
}

struct SearchProblem<'a> {
    a: &'a DMatrix<f64>,
    b: &'a DMatrix<f64>,
    mu: f64,
    delta_bar: f64,
    layout: DecisionLayout,
}

impl SearchProblem<'_> {
    fn unpack(&self, x: &[f64]) -> [DMatrix<f64>; 5] {
        let l = &self.layout;
        [l.sym_matrix(x, 0), l.sym_matrix(x, 1), l.sym_matrix(x, 2), l.sym_matrix(x, 3), l.y(x)]
    }

    /// `blockdiag(Psi^, -E, -Q^, -R^, -U^)`; linear in the decision vector.
    fn system(&self, x: &[f64]) -> DMatrix<f64> {
        let [e, q, r, u, y] = self.unpack(x);
        let psi = assemble_theorem4(self.a, self.b, self.mu, self.delta_bar, &e, &q, &r, &u, &y)
            .expect("shapes fixed by layout")
            .assemble();
        let n = self.layout.n;
        let s = psi.nrows();
        let mut out = DMatrix::zeros(s + 4 * n, s + 4 * n);
        out.view_mut((0, 0), (s, s)).copy_from(&psi);
        for (i, m) in [e, q, r, u].iter().enumerate() {
            out.view_mut((s + i * n, s + i * n), (n, n)).copy_from(&-m);
        }
        out
    }
}

fn diag_positions(layout: &DecisionLayout, which: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(layout.n);
    let mut idx = which * layout.sym;
    for i in 0..layout.n {
        out.push(idx);
        idx += layout.n - i;
    }
    out
}

/// Minimizes the largest eigenvalue of `blockdiag(Psi^, -E, -Q^, -R^, -U^)` under `tr E = n`
/// with a smoothed (log-sum-exp) first-order method until the system is certified negative
/// definite or the iteration budget is spent. Fully deterministic.
pub fn search_feasible_theorem4(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    mu: f64,
    delta_bar: f64,
    budget: SearchBudget,
    warm_gain: Option<&DMatrix<f64>>,
) -> Result<SynthesisOutcome> {
    let n = a.nrows();
    check_square(a, n, "A")?;
    if b.nrows() != n || b.ncols() == 0 {
        return Err(Error::Dimension("B does not match A".into()));
    }
    if budget.iterations == 0 {
        return Err(Error::InvalidParameter("search budget must be > 0".into()));
    }
    let p = b.ncols();
    let layout = DecisionLayout::new(n, p);
    let dim = layout.len();
    let prob = SearchProblem { a, b, mu, delta_bar, layout };

    // The map x -> M(x) is linear, so its basis images give exact gradients.
    let basis: Vec<DMatrix<f64>> = (0..dim)
        .map(|j| {
            let mut x = vec![0.0; dim];
            x[j] = 1.0;
            prob.system(&x)
        })
        .collect();
    let combine = |x: &[f64]| {
        let mut m: DMatrix<f64> = DMatrix::zeros(basis[0].nrows(), basis[0].ncols());
        for (xj, bj) in x.iter().zip(basis.iter()) {
            if *xj != 0.0 {
                m.zip_apply(bj, |acc, v| *acc += *xj * v);
            }
        }
        m
    };

    let eye = DMatrix::identity(n, n);
    let y0 = match warm_gain {
        Some(k) if k.shape() == (p, n) => k.clone(),
        _ => DMatrix::zeros(p, n),
    };
    let mut x = prob.layout.pack(&eye, &(&eye * 0.1), &(&eye * 0.1), &(&eye * 0.1), &y0);
    let e_diag = diag_positions(&prob.layout, 0);
    let project = |x: &mut [f64]| {
        let tr: f64 = e_diag.iter().map(|&i| x[i]).sum();
        let shift = (n as f64 - tr) / n as f64;
        for &i in &e_diag {
            x[i] += shift;
        }
    };
    project(&mut x);

    let mut best = f64::INFINITY;
    let mut best_x = x.clone();
    let (beta1, beta2, adam_eps) = (0.9, 0.999, 1e-12);
    let mut m1 = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    let lr0 = 0.02;

    for it in 0..budget.iterations {
        let m = combine(&x);
        let eig = m.clone().symmetric_eigen();
        let lmax = eig.eigenvalues.max();
        if lmax < best {
            best = lmax;
            best_x = x.clone();
        }
        if lmax < 0.0 {
            if let Some(cert) = certify(&prob, &x, it + 1)? {
                return Ok(SynthesisOutcome::Feasible(cert));
            }
        }
        // temperature shrinks geometrically from 1e-2 to 1e-5 of the spectral scale
        let scale = eig.eigenvalues.amax().max(1e-12);
        let frac = it as f64 / budget.iterations as f64;
        let temp = scale * 1e-2 * (1e-3f64).powf(frac);
        let weights: Vec<f64> = eig.eigenvalues.iter().map(|l| ((l - lmax) / temp).exp()).collect();
        let wsum: f64 = weights.iter().sum();
        let mut w_mat = DMatrix::zeros(m.nrows(), m.ncols());
        for (i, w) in weights.iter().enumerate() {
            if *w / wsum < 1e-12 {
                continue;
            }
            let v = eig.eigenvectors.column(i);
            w_mat.ger(*w / wsum, &v, &v, 1.0);
        }
        let grad: Vec<f64> = basis.iter().map(|bj| bj.dot(&w_mat)).collect();

        let t = (it + 1) as i32;
        let lr = lr0 * (1.0 - 0.9 * frac);
        for j in 0..dim {
            m1[j] = beta1 * m1[j] + (1.0 - beta1) * grad[j];
            m2[j] = beta2 * m2[j] + (1.0 - beta2) * grad[j] * grad[j];
            let mh = m1[j] / (1.0 - beta1.powi(t));
            let vh = m2[j] / (1.0 - beta2.powi(t));
            x[j] -= lr * mh / (vh.sqrt() + adam_eps);
        }
        project(&mut x);
    }
    if best < 0.0 {
        if let Some(cert) = certify(&prob, &best_x, budget.iterations)? {
            return Ok(SynthesisOutcome::Feasible(cert));
        }
    }
    Ok(SynthesisOutcome::Infeasible(InfeasibleReport { best_max_eigenvalue: best, iterations: budget.iterations }))
}

fn certify(prob: &SearchProblem<'_>, x: &[f64], iterations: usize) -> Result<Option<Certificate>> {
    let [e, q, r, u, y] = prob.unpack(x);
    let Some(e_inv) = e.clone().try_inverse() else { return Ok(None) };
    let k = &y * e_inv;
    let cert = Certificate {
        max_eigenvalue: max_eigenvalue(&prob.system(x)),
        mat_e: e,
        mat_y: y,
        gain_k: k,
        q_hat: q,
        r_hat: r,
        ups_hat: u,
        mu: prob.mu,
        delta_bar: prob.delta_bar,
        iterations,
    };
    Ok(cert.verify(prob.a, prob.b)?.then_some(cert))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LkfComponents {
    pub step: usize,
    pub v1: f64,
    pub v2: f64,
    pub v3: f64,
    /// `V(k+1) - V(k)`.
    pub delta_v: f64,
    /// `[chi(k); chi(k - delta(k)); chi(k - delta_bar); e(k)]`.
    pub col_theta: DVector<f64>,
    pub increasing: bool,
}

impl LkfComponents {
    pub fn total(&self) -> f64 {
        self.v1 + self.v2 + self.v3
    }
}

fn quad(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(m * v))
}

/// `V1 = x'P x`, `V2 = sum_{j=k-db}^{k-1} x(j)'R x(j)`,
/// `V3 = db sum_{s=-db+1}^{0} sum_{j=k+s-1}^{k-1} z(j)'T z(j)` with `z(j) = x(j+1) - x(j)`.
/// Sums that would reach before the start of the trace are truncated.
pub fn lkf_value(states: &[DVector<f64>], k: usize, p: &DMatrix<f64>, r: &DMatrix<f64>, t: &DMatrix<f64>, delta_bar: usize) -> (f64, f64, f64) {
    let v1 = quad(p, &states[k]);
    let lo = k.saturating_sub(delta_bar);
    let v2: f64 = (lo..k).map(|j| quad(r, &states[j])).sum();
    let mut v3 = 0.0;
    if delta_bar > 0 {
        for s in 0..delta_bar {
            // s runs over -db+1..=0 as -(s)
            let start = (k as i64) - (s as i64) - 1;
            for j in start.max(0)..(k as i64) {
                let j = j as usize;
                let z = &states[j + 1] - &states[j];
                v3 += quad(t, &z);
            }
        }
        v3 *= delta_bar as f64;
    }
    (v1, v2, v3)
}

/// Evaluates the functional for every `k` in `[delta_bar, len - 2]`.
#[allow(clippy::too_many_arguments)]
pub fn lkf_evaluate(
    states: &[DVector<f64>],
    delays: &[usize],
    errors: &[DVector<f64>],
    p_star: &DMatrix<f64>,
    r_star: &DMatrix<f64>,
    t_star: &DMatrix<f64>,
    delta_bar: usize,
) -> Result<Vec<LkfComponents>> {
    let len = states.len();
    if len <= delta_bar + 1 {
        return Err(Error::InvalidParameter(format!("trace of length {len} too short for delay bound {delta_bar}")));
    }
    if delays.len() != len || errors.len() != len {
        return Err(Error::Dimension("delays and errors must match the state trace".into()));
    }
    let n = states[0].len();
    let mut out = Vec::with_capacity(len - delta_bar - 1);
    for k in delta_bar..len - 1 {
        let (v1, v2, v3) = lkf_value(states, k, p_star, r_star, t_star, delta_bar);
        let (w1, w2, w3) = lkf_value(states, k + 1, p_star, r_star, t_star, delta_bar);
        let delta_v = (w1 + w2 + w3) - (v1 + v2 + v3);
        let mut theta = DVector::zeros(4 * n);
        theta.rows_mut(0, n).copy_from(&states[k]);
        theta.rows_mut(n, n).copy_from(&states[k.saturating_sub(delays[k])]);
        theta.rows_mut(2 * n, n).copy_from(&states[k - delta_bar]);
        theta.rows_mut(3 * n, n).copy_from(&errors[k]);
        let increasing = delta_v >= 0.0 && theta.norm() > 0.0;
        out.push(LkfComponents { step: k, v1, v2, v3, delta_v, col_theta: theta, increasing });
    }
    Ok(out)
}
