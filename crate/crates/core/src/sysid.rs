//! Snapshot matrices and DMD-with-control identification of `(A, B)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::StateVector;

pub const DEFAULT_ENERGY_THRESHOLD: f64 = 0.9999;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMatrices {
    /// Samples `1..m-1` as columns.
    pub snap_x: DMatrix<f64>,
    /// Samples `2..m` as columns.
    pub snap_xp: DMatrix<f64>,
    pub input_xi: DMatrix<f64>,
    pub sample_period_s: f64,
}

impl DatasetMatrices {
    pub fn n_states(&self) -> usize {
        self.snap_x.nrows()
    }
    pub fn n_inputs(&self) -> usize {
        self.input_xi.nrows()
    }
    pub fn width(&self) -> usize {
        self.snap_x.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifiedModel {
    pub mat_a: DMatrix<f64>,
    pub mat_b: DMatrix<f64>,
    pub trunc_order: usize,
    pub residual_fro: f64,
    pub sample_period_s: f64,
}

impl IdentifiedModel {
    /// Discrete lateral model used as the default ground truth at 100 Hz.
    pub fn nominal() -> Self {
        #[rustfmt::skip]
        let mat_a = DMatrix::from_row_slice(4, 4, &[
            0.999, 0.01, 0.0,   0.0,
            -0.05, 0.99, 0.05,  0.0,
            0.0,   0.0,  0.999, 0.01,
            -0.01, 0.0,  -0.08, 0.995,
        ]);
        let mat_b = DMatrix::from_column_slice(4, 1, &[0.0, 0.1, 0.0, 0.05]);
        Self { mat_a, mat_b, trunc_order: 5, residual_fro: 0.0, sample_period_s: 0.01 }
    }

    pub fn from_matrices(mat_a: DMatrix<f64>, mat_b: DMatrix<f64>, sample_period_s: f64) -> Result<Self> {
        let n = mat_a.nrows();
        if mat_a.ncols() != n || mat_b.nrows() != n || mat_b.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "A is {}x{}, B is {}x{}",
                mat_a.nrows(),
                mat_a.ncols(),
                mat_b.nrows(),
                mat_b.ncols()
            )));
        }
        let r = n + mat_b.ncols();
        Ok(Self { mat_a, mat_b, trunc_order: r, residual_fro: 0.0, sample_period_s })
    }

    pub fn n_states(&self) -> usize {
        self.mat_a.nrows()
    }
    pub fn n_inputs(&self) -> usize {
        self.mat_b.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Truncation {
    Rank(usize),
    Auto,
}

impl std::str::FromStr for Truncation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Truncation::Auto);
        }
        s.parse::<usize>()
            .map(Truncation::Rank)
            .map_err(|_| Error::InvalidParameter(format!("truncation must be a rank or 'auto', got '{s}'")))
    }
}

/// Stacks states (one per column) and inputs into the shifted snapshot matrices.
pub fn build_matrices_general(states: &DMatrix<f64>, inputs: &DMatrix<f64>, sample_period_s: f64) -> Result<DatasetMatrices> {
    let m = states.ncols();
    if m < 2 {
        return Err(Error::Dimension(format!("need at least 2 samples, got {m}")));
    }
    if inputs.ncols() < m - 1 {
        return Err(Error::Dimension(format!("need at least {} inputs, got {}", m - 1, inputs.ncols())));
    }
    if !states.iter().chain(inputs.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("dataset".into()));
    }
    Ok(DatasetMatrices {
        snap_x: states.columns(0, m - 1).into_owned(),
        snap_xp: states.columns(1, m - 1).into_owned(),
        input_xi: inputs.columns(0, m - 1).into_owned(),
        sample_period_s,
    })
}

pub fn build_matrices(states: &[StateVector], inputs: &[f64], sample_period_s: f64) -> Result<DatasetMatrices> {
    let x = DMatrix::from_fn(4, states.len(), |i, j| states[j][i]);
    let u = DMatrix::from_row_slice(1, inputs.len(), inputs);
    build_matrices_general(&x, &u, sample_period_s)
}

fn rank_tolerance(sv: &DVector<f64>, rows: usize, cols: usize) -> f64 {
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    rows.max(cols) as f64 * smax * f64::EPSILON
}

pub fn numerical_rank(mat: &DMatrix<f64>) -> usize {
    if mat.is_empty() {
        return 0;
    }
    let sv = mat.singular_values();
    let tol = rank_tolerance(&sv, mat.nrows(), mat.ncols());
    sv.iter().filter(|&&s| s > tol).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistencyReport {
    pub passed: bool,
    pub length_ok: bool,
    pub hankel_rank: usize,
    pub required_rank: usize,
}

/// Length condition `m >= (n_s+1)(l_s+1) - 1` plus full row rank of the input Hankel matrix of depth `l_s+1`.
pub fn persistency_check(data: &DatasetMatrices, order_ns: usize, window_ls: usize) -> PersistencyReport {
    let p = data.n_inputs();
    let m = data.width() + 1;
    let depth = window_ls + 1;
    let required_rank = p * depth;
    let length_ok = m + 1 >= (order_ns + 1) * (window_ls + 1);
    let cols = data.width().saturating_sub(window_ls);
    let hankel_rank = if cols == 0 {
        0
    } else {
        let h = DMatrix::from_fn(required_rank, cols, |i, j| data.input_xi[(i % p, j + i / p)]);
        numerical_rank(&h)
    };
    PersistencyReport { passed: length_ok && hankel_rank == required_rank, length_ok, hankel_rank, required_rank }
}

/// Smallest `r` with retained energy fraction at least `threshold`.
pub fn select_truncation_with(singular_values: &[f64], threshold: f64) -> Result<usize> {
    if singular_values.is_empty() {
        return Err(Error::InvalidParameter("empty singular value list".into()));
    }
    if singular_values.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::InvalidParameter("singular values must be finite and non-negative".into()));
    }
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Err(Error::InvalidParameter("all-zero spectrum".into()));
    }
    let mut acc = 0.0;
    for (i, s) in singular_values.iter().enumerate() {
        acc += s * s;
        if acc / total >= threshold {
            return Ok(i + 1);
        }
    }
    Ok(singular_values.len())
}

pub fn select_truncation(singular_values: &[f64]) -> Result<usize> {
    select_truncation_with(singular_values, DEFAULT_ENERGY_THRESHOLD)
}

pub fn dmd_identify(data: &DatasetMatrices, trunc: Truncation) -> Result<IdentifiedModel> {
    let n = data.n_states();
    let p = data.n_inputs();
    let w = data.width();
    if w == 0 || n == 0 {
        return Err(Error::Dimension("empty dataset".into()));
    }
    let mut theta = DMatrix::zeros(n + p, w);
    theta.rows_mut(0, n).copy_from(&data.snap_x);
    theta.rows_mut(n, p).copy_from(&data.input_xi);

    let svd = theta.clone().svd(true, true);
    let u = svd.u.as_ref().ok_or_else(|| Error::Singular("SVD U".into()))?;
    let v_t = svd.v_t.as_ref().ok_or_else(|| Error::Singular("SVD V".into()))?;

    // nalgebra does not sort singular values; order them descending.
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let tol = rank_tolerance(&svd.singular_values, n + p, w);
    let rank = sv.iter().filter(|&&s| s > tol).count();

    let r = match trunc {
        Truncation::Rank(r) => {
            if r == 0 || r > n + p {
                return Err(Error::InvalidParameter(format!("truncation order {r} outside [1, {}]", n + p)));
            }
            if r > rank {
                return Err(Error::RankDeficient { rank, requested: r });
            }
            r
        }
        Truncation::Auto => select_truncation(&sv)?.min(rank).max(1),
    };
    if rank == 0 {
        return Err(Error::RankDeficient { rank, requested: r });
    }

    // Gamma = X' V_r S_r^-1 U_r^T
    let mut pinv = DMatrix::zeros(w, n + p);
    for &i in order.iter().take(r) {
        let s = svd.singular_values[i];
        let vi = v_t.row(i).transpose();
        let ui = u.column(i);
        pinv += (vi / s) * ui.transpose();
    }
    let gamma = &data.snap_xp * pinv;
    let mat_a = gamma.columns(0, n).into_owned();
    let mat_b = gamma.columns(n, p).into_owned();
    let residual_fro = (&data.snap_xp - &gamma * &theta).norm();
    Ok(IdentifiedModel { mat_a, mat_b, trunc_order: r, residual_fro, sample_period_s: data.sample_period_s })
}

/// Simulates `x+ = A x + B u` from `x0`; column `k` is the state before `inputs[:, k]`.
pub fn simulate_discrete(a: &DMatrix<f64>, b: &DMatrix<f64>, x0: &DVector<f64>, inputs: &DMatrix<f64>) -> DMatrix<f64> {
    let m = inputs.ncols() + 1;
    let mut out = DMatrix::zeros(a.nrows(), m);
    out.set_column(0, x0);
    for k in 0..inputs.ncols() {
        let next = a * out.column(k) + b * inputs.column(k);
        out.set_column(k + 1, &next);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_inputs(p: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(p, m, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn minimal_layout() {
        let x1 = StateVector::new(1.0, 2.0, 3.0, 4.0);
        let x2 = StateVector::new(5.0, 6.0, 7.0, 8.0);
        let d = build_matrices(&[x1, x2], &[0.5], 0.01).unwrap();
        assert_eq!(d.snap_x.column(0).into_owned(), DVector::from_column_slice(x1.as_slice()));
        assert_eq!(d.snap_xp.column(0).into_owned(), DVector::from_column_slice(x2.as_slice()));
        assert_eq!(d.input_xi[(0, 0)], 0.5);
    }

    #[test]
    fn width_and_length_checks() {
        let xs = vec![StateVector::zeros(); 5000];
        let us = vec![0.0; 4999];
        let d = build_matrices(&xs, &us, 0.01).unwrap();
        assert_eq!(d.width(), 4999);
        assert!(build_matrices(&xs, &us[..4998], 0.01).is_err());
        assert!(build_matrices(&xs[..1], &us, 0.01).is_err());
    }

    #[test]
    fn truncation_rule() {
        assert_eq!(select_truncation(&[1.0, 0.0, 0.0]).unwrap(), 1);
        assert_eq!(select_truncation(&[10.0, 10.0, 10.0, 10.0, 1e-12]).unwrap(), 4);
        assert_eq!(select_truncation_with(&[3.0, 1.0], 0.9).unwrap(), 1);
        assert!(select_truncation(&[0.0, 0.0]).is_err());
        assert!(select_truncation(&[]).is_err());
    }

    #[test]
    fn persistency() {
        let m = 200;
        let xs = DMatrix::zeros(4, m);
        let constant = DMatrix::from_element(1, m, 0.3);
        let d = build_matrices_general(&xs, &constant, 0.01).unwrap();
        let rep = persistency_check(&d, 4, 1);
        assert!(!rep.passed);
        assert_eq!(rep.hankel_rank, 1);

        let rnd = random_inputs(1, m, 3);
        let d = build_matrices_general(&xs, &rnd, 0.01).unwrap();
        let rep = persistency_check(&d, 4, 4);
        assert!(rep.passed);
        assert_eq!(rep.hankel_rank, 5);

        // (4+1)(1+1) - 1 = 9 <= 5000
        let big = build_matrices_general(&DMatrix::zeros(4, 5000), &random_inputs(1, 5000, 4), 0.01).unwrap();
        assert!(persistency_check(&big, 4, 1).length_ok);
        let short = build_matrices_general(&DMatrix::zeros(4, 8), &random_inputs(1, 8, 4), 0.01).unwrap();
        assert!(!persistency_check(&short, 4, 1).length_ok);
    }

    #[test]
    fn identity_plant_recovered() {
        let a = DMatrix::<f64>::identity(4, 4);
        let b = DMatrix::from_column_slice(4, 1, &[0.0, 1.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = DMatrix::from_fn(4, 300, |_, _| rng.gen_range(-1.0..1.0));
        let u = random_inputs(1, 300, 12);
        let xp = &a * &x + &b * &u;
        let d = DatasetMatrices { snap_x: x, snap_xp: xp, input_xi: u, sample_period_s: 0.01 };
        let id = dmd_identify(&d, Truncation::Rank(5)).unwrap();
        assert!((id.mat_a - a).norm() < 1e-10);
        assert!((id.mat_b - b).norm() < 1e-10);
    }

    #[test]
    fn truncation_increases_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DMatrix::from_fn(4, 200, |_, _| rng.gen_range(-1.0..1.0));
        let xp = DMatrix::from_fn(4, 200, |_, _| rng.gen_range(-1.0..1.0));
        let u = random_inputs(1, 200, 6);
        let d = DatasetMatrices { snap_x: x, snap_xp: xp, input_xi: u, sample_period_s: 0.01 };
        let full = dmd_identify(&d, Truncation::Rank(5)).unwrap();
        let low = dmd_identify(&d, Truncation::Rank(1)).unwrap();
        assert!(low.residual_fro > full.residual_fro);
    }

    #[test]
    fn rank_deficient_rejected() {
        let x = DMatrix::zeros(4, 50);
        let u = random_inputs(1, 50, 1);
        let d = DatasetMatrices { snap_x: x.clone(), snap_xp: x, input_xi: u, sample_period_s: 0.01 };
        assert!(matches!(dmd_identify(&d, Truncation::Rank(3)), Err(Error::RankDeficient { .. })));
        assert_eq!(dmd_identify(&d, Truncation::Auto).unwrap().trunc_order, 1);
    }

    #[test]
    fn nominal_round_trip() {
        let nom = IdentifiedModel::nominal();
        let u = random_inputs(1, 4999, 42);
        let x0 = DVector::from_column_slice(&[0.5, 0.0, 0.5, 0.0]);
        let xs = simulate_discrete(&nom.mat_a, &nom.mat_b, &x0, &u);
        let d = build_matrices_general(&xs, &u, 0.01).unwrap();
        let id = dmd_identify(&d, Truncation::Auto).unwrap();
        assert_eq!(id.trunc_order, 5);
        assert!((&id.mat_a - &nom.mat_a).norm() < 1e-8);
        assert!((&id.mat_b - &nom.mat_b).norm() < 1e-8);
        assert!(id.residual_fro < 1e-8);
    }

    #[test]
    fn parse_truncation() {
        assert_eq!("auto".parse::<Truncation>().unwrap(), Truncation::Auto);
        assert_eq!("3".parse::<Truncation>().unwrap(), Truncation::Rank(3));
        assert!("x".parse::<Truncation>().is_err());
    }
}
