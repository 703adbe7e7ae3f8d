//! Continuous-time bicycle model of lateral and heading error dynamics.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// State `[e_d, e_d_dot, e_phi, e_phi_dot]`.
pub type StateVector = Vector4<f64>;

/// Front steering angle above which the small-angle linearization is questionable.
pub const SMALL_ANGLE_LIMIT_RAD: f64 = 5.0 * std::f64::consts::PI / 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    pub mass_kg: f64,
    pub inertia_z_kgm2: f64,
    pub dist_front_m: f64,
    pub dist_rear_m: f64,
    pub stiff_front_n_per_rad: f64,
    pub stiff_rear_n_per_rad: f64,
    pub speed_long_m_per_s: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass_kg: 1573.0,
            inertia_z_kgm2: 2873.0,
            dist_front_m: 1.10,
            dist_rear_m: 1.58,
            stiff_front_n_per_rad: 80000.0,
            stiff_rear_n_per_rad: 80000.0,
            speed_long_m_per_s: 30.0,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("mass_kg", self.mass_kg),
            ("inertia_z_kgm2", self.inertia_z_kgm2),
            ("dist_front_m", self.dist_front_m),
            ("dist_rear_m", self.dist_rear_m),
            ("stiff_front_n_per_rad", self.stiff_front_n_per_rad),
            ("stiff_rear_n_per_rad", self.stiff_rear_n_per_rad),
            ("speed_long_m_per_s", self.speed_long_m_per_s),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidParameter(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `chi_dot = H chi + G u + W phi_dot_des`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousModel {
    pub mat_h: Matrix4<f64>,
    pub mat_g: Vector4<f64>,
    /// Feedforward column for a desired yaw rate (zero on a straight road).
    pub mat_w: Vector4<f64>,
}

pub fn continuous_matrices(params: &VehicleParams) -> Result<ContinuousModel> {
    params.validate()?;
    let m = params.mass_kg;
    let iz = params.inertia_z_kgm2;
    let lf = params.dist_front_m;
    let lr = params.dist_rear_m;
    let cf = params.stiff_front_n_per_rad;
    let cr = params.stiff_rear_n_per_rad;
    let vx = params.speed_long_m_per_s;

    let c_sum = cf + cr;
    let c_mom = lf * cf - lr * cr;
    let c_sq = lf * lf * cf + lr * lr * cr;

    #[rustfmt::skip]
    let mat_h = Matrix4::new(
        0.0, 1.0,                 0.0,          0.0,
        0.0, -c_sum / (m * vx),   c_sum / m,    -c_mom / (m * vx),
        0.0, 0.0,                 0.0,          1.0,
        0.0, -c_mom / (iz * vx),  c_mom / iz,   -c_sq / (iz * vx),
    );
    let mat_g = Vector4::new(0.0, cf / m, 0.0, lf * cf / iz);
    let mat_w = Vector4::new(0.0, -vx - c_mom / (m * vx), 0.0, -c_sq / (iz * vx));
    Ok(ContinuousModel { mat_h, mat_g, mat_w })
}

fn warn_large_steer(input_rad: f64) {
    if input_rad.abs() > SMALL_ANGLE_LIMIT_RAD {
        log::warn!(
            "steering input {input_rad:.4} rad exceeds the small-angle regime ({SMALL_ANGLE_LIMIT_RAD:.4} rad)"
        );
    }
}

/// One classical RK4 step with the input held constant over `dt_s`.
pub fn step_continuous(model: &ContinuousModel, state: &StateVector, input_rad: f64, dt_s: f64) -> Result<StateVector> {
    step_continuous_ref(model, state, input_rad, 0.0, dt_s)
}

/// RK4 step including a desired yaw-rate feedforward term.
pub fn step_continuous_ref(
    model: &ContinuousModel,
    state: &StateVector,
    input_rad: f64,
    yaw_rate_des: f64,
    dt_s: f64,
) -> Result<StateVector> {
    if !(dt_s > 0.0) || !dt_s.is_finite() {
        return Err(Error::InvalidParameter(format!("dt_s must be > 0, got {dt_s}")));
    }
    ensure_finite(state.as_slice(), "state")?;
    ensure_finite(&[input_rad, yaw_rate_des], "input")?;
    warn_large_steer(input_rad);

    let forcing = model.mat_g * input_rad + model.mat_w * yaw_rate_des;
    let f = |x: &StateVector| model.mat_h * x + forcing;
    let k1 = f(state);
    let k2 = f(&(state + k1 * (0.5 * dt_s)));
    let k3 = f(&(state + k2 * (0.5 * dt_s)));
    let k4 = f(&(state + k3 * dt_s));
    let next = state + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt_s / 6.0);
    ensure_finite(next.as_slice(), "state")?;
    Ok(next)
}

/// Entry `k` of the result is the state before `inputs[k]` is applied; length is `inputs.len() + 1`.
pub fn generate_trajectory(
    model: &ContinuousModel,
    initial: &StateVector,
    inputs: &[f64],
    dt_s: f64,
) -> Result<Vec<StateVector>> {
    if inputs.is_empty() {
        return Err(Error::InvalidParameter("inputs must be non-empty".into()));
    }
    let mut out = Vec::with_capacity(inputs.len() + 1);
    let mut x = *initial;
    out.push(x);
    for &u in inputs {
        x = step_continuous(model, &x, u, dt_s)?;
        out.push(x);
    }
    Ok(out)
}

/// Exact one-step map of the RK4 scheme for a linear plant: `x+ = Phi x + Gamma u`.
pub fn rk4_discretize(model: &ContinuousModel, dt_s: f64) -> (Matrix4<f64>, Vector4<f64>) {
    let h = model.mat_h * dt_s;
    let h2 = h * h;
    let h3 = h2 * h;
    let h4 = h3 * h;
    let i = Matrix4::identity();
    let phi = i + h + h2 / 2.0 + h3 / 6.0 + h4 / 24.0;
    let gamma = (i + h / 2.0 + h2 / 6.0 + h3 / 24.0) * model.mat_g * dt_s;
    (phi, gamma)
}
