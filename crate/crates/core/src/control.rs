//! Riccati-based fractional sliding surface and the sliding-mode control laws.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How `eps(0)` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurfaceInit {
    /// `eps(0) = -F chi(0)` so that `S(0) = 0` follows from the surface formula;
    /// the fractional term acts on `eps - eps(0)`.
    Consistent,
    /// `eps(0) = 0` and `S(0)` is pinned to zero.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlidingParams {
    pub frac_order_gamma: f64,
    pub frac_weight_lambda: f64,
    pub switch_kappa: f64,
    pub switch_rho: f64,
    pub attack_bound_qatt: f64,
    pub memory_len_l: usize,
    /// `sgn(S)` is replaced by `S / (|S| + phi)` when set.
    pub boundary_layer_phi: Option<f64>,
    pub surface_init: SurfaceInit,
}

impl Default for SlidingParams {
    fn default() -> Self {
        Self {
            frac_order_gamma: 0.5,
            frac_weight_lambda: 0.2,
            switch_kappa: 0.15,
            switch_rho: 0.2,
            attack_bound_qatt: 0.15,
            memory_len_l: 500,
            boundary_layer_phi: Some(0.2),
            surface_init: SurfaceInit::Consistent,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlidingConfig {
    /// `F = B^T P`.
    pub surface_row_f: RowDVector<f64>,
    pub riccati_p: DMatrix<f64>,
    pub weight_q: DMatrix<f64>,
    pub weight_r: DMatrix<f64>,
    /// Scalar `F B`.
    pub surface_input_gain: f64,
    pub frac_order_gamma: f64,
    pub frac_weight_lambda: f64,
    pub switch_kappa: f64,
    pub switch_rho: f64,
    pub attack_bound_qatt: f64,
    pub memory_len_l: usize,
    pub boundary_layer_phi: Option<f64>,
    pub surface_init: SurfaceInit,
}

impl SlidingConfig {
    pub fn design(
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        weight_q: &DMatrix<f64>,
        weight_r: &DMatrix<f64>,
        params: &SlidingParams,
    ) -> Result<Self> {
        if b.ncols() != 1 {
            return Err(Error::Dimension(format!("sliding surface needs a single input, got {}", b.ncols())));
        }
        let p = riccati_solve(a, b, weight_q, weight_r, DEFAULT_RICCATI_TOL, DEFAULT_RICCATI_MAX_ITER)?;
        let f = b.transpose() * &p;
        let surface_row_f = RowDVector::from_iterator(f.ncols(), f.iter().copied());
        let surface_input_gain = (&surface_row_f * b)[(0, 0)];
        let cfg = Self {
            surface_row_f,
            riccati_p: p,
            weight_q: weight_q.clone(),
            weight_r: weight_r.clone(),
            surface_input_gain,
            frac_order_gamma: params.frac_order_gamma,
            frac_weight_lambda: params.frac_weight_lambda,
            switch_kappa: params.switch_kappa,
            switch_rho: params.switch_rho,
            attack_bound_qatt: params.attack_bound_qatt,
            memory_len_l: params.memory_len_l,
            boundary_layer_phi: params.boundary_layer_phi,
            surface_init: params.surface_init,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.frac_order_gamma > 0.0 && self.frac_order_gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.frac_order_gamma));
        }
        if !(self.frac_weight_lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.frac_weight_lambda));
        }
        if !(self.switch_kappa > 0.0 && self.switch_kappa < 1.0) {
            return bad(format!("kappa must lie in (0, 1), got {}", self.switch_kappa));
        }
        if !(self.switch_rho > 0.0 && self.switch_rho < 1.0) {
            return bad(format!("rho must lie in (0, 1), got {}", self.switch_rho));
        }
        if !(self.attack_bound_qatt >= 0.0) {
            return bad(format!("attack bound must be >= 0, got {}", self.attack_bound_qatt));
        }
        if self.memory_len_l == 0 {
            return bad("memory length must be >= 1".into());
        }
        if let Some(phi) = self.boundary_layer_phi {
            if !(phi > 0.0) {
                return bad(format!("boundary layer must be > 0, got {phi}"));
            }
        }
        Ok(())
    }

    /// Row `F (I - A - B K)` driving the integral part of the surface.
    pub fn eps_row(&self, a: &DMatrix<f64>, b: &DMatrix<f64>, gain_k: &RowDVector<f64>) -> RowDVector<f64> {
        let n = a.nrows();
        let m = DMatrix::identity(n, n) - a - b * gain_k;
        &self.surface_row_f * m
    }

    pub fn switch(&self, s: f64) -> f64 {
        switch_fn(s, self.boundary_layer_phi)
    }
}

pub const DEFAULT_RICCATI_TOL: f64 = 1e-11;
pub const DEFAULT_RICCATI_MAX_ITER: usize = 200_000;

fn require_spd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() || (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
        return Err(Error::InvalidParameter(format!("{what} must be symmetric")));
    }
    if m.clone().cholesky().is_none() {
        return Err(Error::InvalidParameter(format!("{what} must be positive definite")));
    }
    Ok(())
}

/// Fixed-point iteration on the discrete algebraic Riccati equation from `P0 = Q`.
pub fn riccati_solve(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::Dimension("Riccati operands have inconsistent shapes".into()));
    }
    require_spd(q, "Q")?;
    require_spd(r, "R")?;
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = q.clone();
    let mut last = f64::INFINITY;
    for _ in 0..max_iter {
        let next = riccati_map(a, &at, b, &bt, q, r, &p)?;
        last = (&next - &p).norm();
        p = next;
        if !last.is_finite() {
            break;
        }
        if last < tol {
            let p = (&p + p.transpose()) * 0.5;
            return Ok(p);
        }
    }
    Err(Error::NotConverged { iterations: max_iter, last_increment: last })
}

fn riccati_map(
    a: &DMatrix<f64>,
    at: &DMatrix<f64>,
    b: &DMatrix<f64>,
    bt: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let pa = p * a;
    let s = r + bt * p * b;
    let s_inv = s.try_inverse().ok_or_else(|| Error::Singular("R + B^T P B".into()))?;
    Ok(at * &pa - at * p * b * s_inv * bt * &pa + q)
}

/// Frobenius norm of `P - A^T P A + A^T P B (R + B^T P B)^-1 B^T P A - Q`.
pub fn riccati_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    match riccati_map(a, &a.transpose(), b, &b.transpose(), q, r, p) {
        Ok(next) => (p - next).norm(),
        Err(_) => f64::INFINITY,
    }
}

/// State feedback `u = K x` with `K = -(R + B^T P B)^-1 B^T P A`.
pub fn lqr_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = riccati_solve(a, b, q, r, DEFAULT_RICCATI_TOL, DEFAULT_RICCATI_MAX_ITER)?;
    let bt = b.transpose();
    let s = r + &bt * &p * b;
    let s_inv = s.try_inverse().ok_or_else(|| Error::Singular("R + B^T P B".into()))?;
    Ok(-(s_inv * bt * p * a))
}

/// Signed Grünwald-Letnikov weights `w_0 = 1`, `w_j = w_{j-1} (1 - (gamma+1)/j)`.
pub fn gl_weights(gamma: f64, count: usize) -> Vec<f64> {
    let mut w = Vec::with_capacity(count);
    if count == 0 {
        return w;
    }
    w.push(1.0);
    for j in 1..count {
        let prev = w[j - 1];
        w.push(prev * (1.0 - (gamma + 1.0) / j as f64));
    }
    w
}

/// `ell^-gamma * sum_j w_j h[k-j]` over at most `memory_len` most recent samples (most recent last).
pub fn gl_derivative(history: &[f64], gamma: f64, ell: f64, memory_len: usize) -> f64 {
    let terms = history.len().min(memory_len);
    let w = gl_weights(gamma, terms);
    gl_derivative_with(history.iter().rev().take(terms), &w, gamma, ell)
}

fn gl_derivative_with<'a>(recent_first: impl Iterator<Item = &'a f64>, w: &[f64], gamma: f64, ell: f64) -> f64 {
    let sum: f64 = recent_first.zip(w.iter()).map(|(h, wj)| h * wj).sum();
    ell.powf(-gamma) * sum
}

/// Memoryless surrogate for `sgn`; `sgn(0) = 0`.
pub fn switch_fn(s: f64, phi: Option<f64>) -> f64 {
    match phi {
        Some(phi) => s / (s.abs() + phi),
        None => {
            if s > 0.0 {
                1.0
            } else if s < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlidingState {
    pub surface_s: Vec<f64>,
    /// Most recent `memory_len_l` values of `eps`, oldest first.
    pub eps_history: VecDeque<f64>,
    pub eps_current: f64,
    pub eps_origin: f64,
    prev_state: DVector<f64>,
    weights: Vec<f64>,
    ell: f64,
}

impl SlidingState {
    pub fn new(cfg: &SlidingConfig, initial: &DVector<f64>, ell: f64) -> Self {
        let eps0 = match cfg.surface_init {
            SurfaceInit::Consistent => -(&cfg.surface_row_f * initial)[(0, 0)],
            SurfaceInit::Zero => 0.0,
        };
        let mut eps_history = VecDeque::with_capacity(cfg.memory_len_l);
        eps_history.push_back(eps0);
        Self {
            surface_s: vec![0.0],
            eps_history,
            eps_current: eps0,
            eps_origin: eps0,
            prev_state: initial.clone(),
            weights: gl_weights(cfg.frac_order_gamma, cfg.memory_len_l),
            ell,
        }
    }

    pub fn current(&self) -> f64 {
        *self.surface_s.last().unwrap_or(&0.0)
    }

    pub fn frac_term(&self, gamma: f64) -> f64 {
        let origin = self.eps_origin;
        let shifted: Vec<f64> = self.eps_history.iter().rev().map(|e| e - origin).collect();
        gl_derivative_with(shifted.iter(), &self.weights, gamma, self.ell)
    }

    /// Advances to step `k` given `chi(k)`; `eps_row` is `F (I - A - B K)`.
    pub fn step(&mut self, cfg: &SlidingConfig, state: &DVector<f64>, eps_row: &RowDVector<f64>) -> f64 {
        self.eps_current += (eps_row * &self.prev_state)[(0, 0)];
        if self.eps_history.len() == cfg.memory_len_l {
            self.eps_history.pop_front();
        }
        self.eps_history.push_back(self.eps_current);
        self.prev_state = state.clone();
        let fx = (&cfg.surface_row_f * state)[(0, 0)];
        let s = fx + self.eps_current + cfg.frac_weight_lambda * self.frac_term(cfg.frac_order_gamma);
        self.surface_s.push(s);
        s
    }
}

/// `eps(k) = eps(k-1) + F (I - A - B K) chi(k-1)`, then `S(k) = F chi(k) + eps(k) + lambda D^gamma eps(k)`.
pub fn sliding_surface_step(
    cfg: &SlidingConfig,
    state: &DVector<f64>,
    sl: &mut SlidingState,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    gain_k: &RowDVector<f64>,
) -> f64 {
    let row = cfg.eps_row(a, b, gain_k);
    sl.step(cfg, state, &row)
}

/// `-kappa sgn(S) + K chi(k_s)`.
pub fn equivalent_control(gain_k: &RowDVector<f64>, last_sent: &DVector<f64>, s: f64, kappa: f64, phi: Option<f64>) -> f64 {
    -kappa * switch_fn(s, phi) + (gain_k * last_sent)[(0, 0)]
}

/// `-kappa sgn(S) - (FB)^-1 (rho + Q_att |FB|) sgn(S)`.
pub fn switching_control(cfg: &SlidingConfig, s: f64) -> Result<f64> {
    let fb = cfg.surface_input_gain;
    if fb == 0.0 {
        return Err(Error::Singular("F B = 0".into()));
    }
    let sw = cfg.switch(s);
    Ok(-cfg.switch_kappa * sw - (cfg.switch_rho + cfg.attack_bound_qatt * fb.abs()) / fb * sw)
}

/// `Y E^-1 chi(k_s) - kappa sgn(S) - (FB)^-1 (rho + Q_att |FB|) sgn(S)`.
pub fn composite_control(cfg: &SlidingConfig, y: &DMatrix<f64>, e: &DMatrix<f64>, last_sent: &DVector<f64>, s: f64) -> Result<f64> {
    let e_inv = e.clone().try_inverse().ok_or_else(|| Error::Singular("E".into()))?;
    let k = y * e_inv;
    let k = RowDVector::from_iterator(k.ncols(), k.iter().copied());
    composite_control_gain(cfg, &k, last_sent, s)
}

pub fn composite_control_gain(cfg: &SlidingConfig, gain_k: &RowDVector<f64>, last_sent: &DVector<f64>, s: f64) -> Result<f64> {
    Ok((gain_k * last_sent)[(0, 0)] + switching_control(cfg, s)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecureDomain {
    pub level_xi: f64,
}

/// `xi = (rho + 2 Q_att |FB|) / (1 - kappa)`.
pub fn secure_domain(cfg: &SlidingConfig) -> Result<SecureDomain> {
    secure_domain_level(cfg.switch_rho, cfg.attack_bound_qatt, cfg.switch_kappa, cfg.surface_input_gain)
}

pub fn secure_domain_level(rho: f64, qatt: f64, kappa: f64, fb: f64) -> Result<SecureDomain> {
    if kappa >= 1.0 {
        return Err(Error::InvalidParameter(format!("kappa must be < 1, got {kappa}")));
    }
    Ok(SecureDomain { level_xi: (rho + 2.0 * qatt * fb.abs()) / (1.0 - kappa) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmcLyapunovReport {
    /// `S(k) (S(k+1) - S(k))`.
    pub delta_v: Vec<f64>,
    /// Fraction of steps with `|S(k)| > band` on which `delta_v < 0`; `None` if there are none.
    pub frac_decreasing_outside_band: Option<f64>,
}

pub fn lyapunov_smc_diagnostic(s: &[f64], band: f64) -> SmcLyapunovReport {
    let delta_v: Vec<f64> = s.windows(2).map(|w| w[0] * (w[1] - w[0])).collect();
    let mut outside = 0usize;
    let mut decreasing = 0usize;
    for (k, dv) in delta_v.iter().enumerate() {
        if s[k].abs() > band {
            outside += 1;
            if *dv < 0.0 {
                decreasing += 1;
            }
        }
    }
    let frac = (outside > 0).then(|| decreasing as f64 / outside as f64);
    SmcLyapunovReport { delta_v, frac_decreasing_outside_band: frac }
}
