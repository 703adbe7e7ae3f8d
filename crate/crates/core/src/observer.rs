//! Extended state observer on `[chi; alpha]` and actuator-attack signals.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sysid::{numerical_rank, IdentifiedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    None,
    Sinusoid,
    Constant,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackModel {
    pub kind: AttackKind,
    pub amplitude: f64,
    pub freq_hz: f64,
    pub start_time_s: f64,
    pub bound_qatt: f64,
    /// Enforce the slow-variation bound window and `amplitude <= bound_qatt`.
    pub compliance: bool,
    /// Samples for `Custom`, indexed by step from `start_time_s` at `custom_dt_s`.
    pub custom: Vec<f64>,
    pub custom_dt_s: f64,
}

impl Default for AttackModel {
    fn default() -> Self {
        Self {
            kind: AttackKind::Sinusoid,
            amplitude: 0.15,
            freq_hz: 0.5,
            start_time_s: 10.0,
            bound_qatt: 0.15,
            compliance: true,
            custom: Vec::new(),
            custom_dt_s: 0.01,
        }
    }
}

impl AttackModel {
    pub fn none() -> Self {
        Self { kind: AttackKind::None, amplitude: 0.0, ..Self::default() }
    }

    pub fn constant(amplitude: f64, start_time_s: f64) -> Self {
        Self { kind: AttackKind::Constant, amplitude, start_time_s, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let out_of_window = !(0.05..=0.2).contains(&self.bound_qatt);
        let over_bound = self.kind == AttackKind::Sinusoid && self.amplitude.abs() > self.bound_qatt;
        if self.compliance {
            if out_of_window {
                return Err(Error::InvalidParameter(format!(
                    "attack bound {} outside [0.05, 0.2]",
                    self.bound_qatt
                )));
            }
            if over_bound {
                return Err(Error::InvalidParameter(format!(
                    "sinusoid amplitude {} exceeds bound {}",
                    self.amplitude, self.bound_qatt
                )));
            }
        } else if out_of_window || over_bound {
            log::warn!("attack exceeds its declared bound; stability guarantees no longer apply");
        }
        Ok(())
    }
}

pub fn attack_signal(attack: &AttackModel, t_s: f64) -> f64 {
    if attack.kind == AttackKind::None || t_s < attack.start_time_s {
        return 0.0;
    }
    match attack.kind {
        AttackKind::None => 0.0,
        AttackKind::Sinusoid => attack.amplitude * (2.0 * std::f64::consts::PI * attack.freq_hz * t_s).sin(),
        AttackKind::Constant => attack.amplitude,
        AttackKind::Custom => {
            let idx = ((t_s - attack.start_time_s) / attack.custom_dt_s).round() as usize;
            attack.custom.get(idx).copied().unwrap_or(0.0)
        }
    }
}

/// `A_aug = [[A, B], [0, I]]`, `B_aug = [[B], [0]]`.
pub fn augment(model: &IdentifiedModel) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = model.n_states();
    let p = model.n_inputs();
    let mut a_aug = DMatrix::zeros(n + p, n + p);
    a_aug.view_mut((0, 0), (n, n)).copy_from(&model.mat_a);
    a_aug.view_mut((0, n), (n, p)).copy_from(&model.mat_b);
    a_aug.view_mut((n, n), (p, p)).fill_with_identity();
    let mut b_aug = DMatrix::zeros(n + p, p);
    b_aug.view_mut((0, 0), (n, p)).copy_from(&model.mat_b);
    (a_aug, b_aug)
}

/// `C_aug = [I_n 0]` for full state measurement.
pub fn full_state_output(n: usize, p: usize) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(n, n + p);
    c.view_mut((0, 0), (n, n)).fill_with_identity();
    c
}

pub fn observability_matrix(a: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let q = c.nrows();
    let mut o = DMatrix::zeros(n * q, n);
    let mut block = c.clone();
    for i in 0..n {
        o.view_mut((i * q, 0), (q, n)).copy_from(&block);
        block = &block * a;
    }
    o
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Observer gain placing the error poles at `r (1 - i / (2N))`, `i = 0..N`.
///
/// Solves the dual Sylvester equation `A^T X - X L = C^T G` and returns `(G X^-1)^T`.
/// This avoids the ill-conditioned observability inverse of an Ackermann formula.
pub fn design_gain(a_aug: &DMatrix<f64>, c_aug: &DMatrix<f64>, target_radius: f64) -> Result<DMatrix<f64>> {
    let nn = a_aug.nrows();
    let q = c_aug.nrows();
    if !a_aug.is_square() || c_aug.ncols() != nn || q == 0 {
        return Err(Error::Dimension(format!(
            "A is {}x{}, C is {}x{}",
            a_aug.nrows(),
            a_aug.ncols(),
            c_aug.nrows(),
            c_aug.ncols()
        )));
    }
    if !(target_radius > 0.0 && target_radius < 1.0) {
        return Err(Error::InvalidParameter(format!("target radius must lie in (0, 1), got {target_radius}")));
    }
    let rank = numerical_rank(&observability_matrix(a_aug, c_aug));
    if rank < nn {
        return Err(Error::Unobservable { rank, required: nn });
    }

    let poles: Vec<f64> = (0..nn).map(|i| target_radius * (1.0 - i as f64 / (2.0 * nn as f64))).collect();
    let ac = a_aug.transpose();
    let bc = c_aug.transpose();

    // Candidate parameter matrices G (q x N); the first that gives a well-conditioned X wins.
    let candidates: Vec<DMatrix<f64>> = vec![
        DMatrix::from_fn(q, nn, |i, j| if i == j || j >= q { 1.0 } else { 0.0 }),
        DMatrix::from_fn(q, nn, |i, j| 1.0 + ((i * 7 + j * 3) % 5) as f64 * 0.25),
        DMatrix::from_fn(q, nn, |i, j| ((i + 1) as f64 * (j + 2) as f64).sin()),
    ];
    let eye = DMatrix::<f64>::identity(nn, nn);
    let lam = DMatrix::from_diagonal(&DVector::from_vec(poles.clone()));
    // vec(A X - X L) = (I kron A - L^T kron I) vec X
    let sys = eye.kronecker(&ac) - lam.transpose().kronecker(&eye);
    let lu = sys.lu();
    for g in candidates {
        let rhs = &bc * &g;
        let rhs_vec = DVector::from_column_slice(rhs.as_slice());
        let Some(x_vec) = lu.solve(&rhs_vec) else { continue };
        let x = DMatrix::from_column_slice(nn, nn, x_vec.as_slice());
        let sv = x.singular_values();
        let smin = sv.min();
        if !(smin > 1e-10 * sv.max()) {
            continue;
        }
        let Some(x_inv) = x.try_inverse() else { continue };
        let gain = (g * x_inv).transpose();
        let achieved = spectral_radius(&(a_aug - &gain * c_aug));
        if gain.iter().all(|v| v.is_finite()) && achieved <= target_radius + 1e-9 {
            return Ok(gain);
        }
    }
    Err(Error::InvalidParameter(format!("could not place observer poles inside radius {target_radius}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EsoState {
    pub a_aug: DMatrix<f64>,
    pub b_aug: DMatrix<f64>,
    pub out_map_c: DMatrix<f64>,
    pub gain_l: DMatrix<f64>,
    /// Stacked estimate `[chi_hat; alpha_hat]`.
    pub zeta_hat: DVector<f64>,
    n: usize,
}

impl EsoState {
    /// Full-state measurement observer with gain placed inside `target_radius`.
    pub fn design(model: &IdentifiedModel, target_radius: f64, initial_state: &DVector<f64>) -> Result<Self> {
        let n = model.n_states();
        let p = model.n_inputs();
        let (a_aug, b_aug) = augment(model);
        let c = full_state_output(n, p);
        let gain_l = design_gain(&a_aug, &c, target_radius)?;
        let mut zeta_hat = DVector::zeros(n + p);
        zeta_hat.rows_mut(0, n).copy_from(initial_state);
        Ok(Self { a_aug, b_aug, out_map_c: c, gain_l, zeta_hat, n })
    }

    pub fn est_state(&self) -> DVector<f64> {
        self.zeta_hat.rows(0, self.n).into_owned()
    }

    pub fn est_attack(&self) -> DVector<f64> {
        self.zeta_hat.rows(self.n, self.zeta_hat.len() - self.n).into_owned()
    }

    pub fn error_matrix(&self) -> DMatrix<f64> {
        &self.a_aug - &self.gain_l * &self.out_map_c
    }
}

/// `zeta_hat+ = A_aug zeta_hat + B_aug u + L (y - C zeta_hat)`.
pub fn eso_step(eso: &mut EsoState, measurement: &DVector<f64>, applied_input: &DVector<f64>) {
    let innovation = measurement - &eso.out_map_c * &eso.zeta_hat;
    eso.zeta_hat = &eso.a_aug * &eso.zeta_hat + &eso.b_aug * applied_input + &eso.gain_l * innovation;
}

/// `u - alpha_hat`.
pub fn compensate(control_nominal: &DVector<f64>, est_attack: &DVector<f64>) -> DVector<f64> {
    control_nominal - est_attack
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn augmentation_blocks() {
        let nom = IdentifiedModel::nominal();
        let (a, b) = augment(&nom);
        assert_eq!(a.shape(), (5, 5));
        assert_eq!(a.row(4).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(a[(1, 4)], 0.1);
        assert_eq!(b[(1, 0)], 0.1);
        assert_eq!(b[(4, 0)], 0.0);
        let zero_b = IdentifiedModel::from_matrices(nom.mat_a.clone(), DMatrix::zeros(4, 1), 0.01).unwrap();
        let (a0, _) = augment(&zero_b);
        assert!(a0.view((0, 4), (4, 1)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_placement() {
        let a = DMatrix::from_element(1, 1, 1.0);
        let c = DMatrix::from_element(1, 1, 1.0);
        let l = design_gain(&a, &c, 0.5).unwrap();
        assert!((l[(0, 0)] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn nominal_placement_radius() {
        let nom = IdentifiedModel::nominal();
        let (a, _) = augment(&nom);
        let c = full_state_output(4, 1);
        for r in [0.5, 0.9, 0.99] {
            let l = design_gain(&a, &c, r).unwrap();
            let rho = spectral_radius(&(&a - &l * &c));
            assert!(rho <= r + 1e-9, "r={r} rho={rho}");
        }
    }

    #[test]
    fn unobservable_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.5]);
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(design_gain(&a, &c, 0.9), Err(Error::Unobservable { rank: 1, required: 2 })));
        let (a_nom, _) = augment(&IdentifiedModel::nominal());
        let empty = DMatrix::zeros(1, 5);
        assert!(matches!(design_gain(&a_nom, &empty, 0.9), Err(Error::Unobservable { .. })));
        assert!(design_gain(&a_nom, &full_state_output(4, 1), 1.0).is_err());
    }

    #[test]
    fn zero_attack_stays_zero() {
        let nom = IdentifiedModel::nominal();
        let x0 = DVector::from_column_slice(&[0.5, 0.0, 0.5, 0.0]);
        let mut eso = EsoState::design(&nom, 0.9, &x0).unwrap();
        let mut x = x0;
        for k in 0..300 {
            let u = DVector::from_element(1, 0.01 * (k as f64 * 0.1).sin());
            eso_step(&mut eso, &x, &u);
            x = &nom.mat_a * &x + &nom.mat_b * &u;
            assert!(eso.est_attack()[0].abs() < 1e-14);
        }
    }

    #[test]
    fn error_dynamics_are_linear() {
        let nom = IdentifiedModel::nominal();
        let x0 = DVector::from_column_slice(&[0.5, 0.0, 0.5, 0.0]);
        let mut eso = EsoState::design(&nom, 0.9, &DVector::zeros(4)).unwrap();
        let alpha = 0.1;
        let mut x = x0.clone();
        let e0 = {
            let mut z = DVector::zeros(5);
            z.rows_mut(0, 4).copy_from(&x0);
            z[4] = alpha;
            z - &eso.zeta_hat
        };
        let m = eso.error_matrix();
        let mut power = DMatrix::identity(5, 5);
        for k in 0..100 {
            let u = DVector::from_element(1, 0.02 * (k as f64 * 0.3).cos());
            eso_step(&mut eso, &x, &u);
            x = &nom.mat_a * &x + &nom.mat_b * (&u + DVector::from_element(1, alpha));
            power = &m * power;
            let mut z = DVector::zeros(5);
            z.rows_mut(0, 4).copy_from(&x);
            z[4] = alpha;
            let err = z - &eso.zeta_hat;
            assert!((err - &power * &e0).norm() < 1e-10);
        }
    }

    #[test]
    fn attack_signal_values() {
        let a = AttackModel::default();
        assert_eq!(attack_signal(&a, 5.0), 0.0);
        assert!((attack_signal(&a, 10.5) - 0.15).abs() < 1e-12);
        assert!(attack_signal(&a, 11.0).abs() < 1e-12);
        assert_eq!(attack_signal(&AttackModel::none(), 15.0), 0.0);
        assert_eq!(attack_signal(&AttackModel::constant(0.1, 0.0), 3.0), 0.1);
    }

    #[test]
    fn attack_validation() {
        let mut a = AttackModel::default();
        assert!(a.validate().is_ok());
        a.bound_qatt = 0.3;
        assert!(a.validate().is_err());
        a.compliance = false;
        assert!(a.validate().is_ok());
        let mut b = AttackModel::default();
        b.amplitude = 0.18;
        assert!(b.validate().is_err());
    }

    #[test]
    fn compensation() {
        let u = DVector::from_element(1, 0.2);
        assert_eq!(compensate(&u, &DVector::zeros(1)), u);
        assert!((compensate(&u, &DVector::from_element(1, 0.15))[0] - 0.05).abs() < 1e-15);
    }
}
