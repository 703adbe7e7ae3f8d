//! Sectioned `key = value` run configuration. Every key is optional and defaults to the
//! standard lateral-control setup.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::Deserialize;

use securelat_core::control::{lqr_gain, riccati_solve, secure_domain_level, DEFAULT_RICCATI_MAX_ITER, DEFAULT_RICCATI_TOL};
use securelat_core::sim::to_row;
use securelat_core::{
    AttackKind, AttackModel, CaseId, DelayMode, IdentifiedModel, PlantKind, ScenarioConfig, SlidingConfig,
    SlidingParams, SurfaceInit, TriggerConfig, VehicleParams,
};

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub plant: PlantSection,
    pub trigger: TriggerSection,
    pub observer: ObserverSection,
    pub control: ControlSection,
    pub attack: AttackSection,
    pub sim: SimSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Discrete,
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Excitation {
    Uniform,
    Zero,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantSection {
    pub mass_kg: f64,
    pub inertia_z_kgm2: f64,
    pub dist_front_m: f64,
    pub dist_rear_m: f64,
    pub stiff_front_n_per_rad: f64,
    pub stiff_rear_n_per_rad: f64,
    pub speed_long_m_per_s: f64,
    /// `"nominal"` or a path to an identified `model.json`.
    pub model: String,
    /// Inline matrices, one inner array per row; override `model`.
    pub a: Option<Vec<Vec<f64>>>,
    pub b: Option<Vec<Vec<f64>>>,
    pub data_source: Source,
    pub data_duration_s: f64,
    pub excitation: Excitation,
    pub excitation_amplitude: f64,
    pub data_initial_state: Vec<f64>,
}

impl Default for PlantSection {
    fn default() -> Self {
        let v = VehicleParams::default();
        Self {
            mass_kg: v.mass_kg,
            inertia_z_kgm2: v.inertia_z_kgm2,
            dist_front_m: v.dist_front_m,
            dist_rear_m: v.dist_rear_m,
            stiff_front_n_per_rad: v.stiff_front_n_per_rad,
            stiff_rear_n_per_rad: v.stiff_rear_n_per_rad,
            speed_long_m_per_s: v.speed_long_m_per_s,
            model: "nominal".into(),
            a: None,
            b: None,
            data_source: Source::Discrete,
            data_duration_s: 50.0,
            excitation: Excitation::Uniform,
            excitation_amplitude: 0.1,
            data_initial_state: vec![0.5, 0.0, 0.5, 0.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DelayKind {
    None,
    Uniform,
    Fixed,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriggerSection {
    pub mu: f64,
    /// Defaults to the identity.
    pub upsilon: Option<Vec<Vec<f64>>>,
    pub delay: DelayKind,
    pub delay_bound_s: f64,
    pub delay_sequence: Vec<usize>,
}

impl Default for TriggerSection {
    fn default() -> Self {
        Self { mu: 0.2, upsilon: None, delay: DelayKind::None, delay_bound_s: 0.1, delay_sequence: Vec::new() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObserverSection {
    pub target_radius: f64,
    pub oracle: bool,
}

impl Default for ObserverSection {
    fn default() -> Self {
        Self { target_radius: 0.9, oracle: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Consistent,
    Zero,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSection {
    pub gamma: f64,
    pub lambda: f64,
    pub kappa: f64,
    pub rho: f64,
    pub memory_len: usize,
    /// Boundary-layer width; 0 selects the pure sign function.
    pub phi: f64,
    pub surface_init: InitKind,
    pub surface_q: Vec<f64>,
    pub surface_r: f64,
    /// Explicit state-feedback gain; otherwise LQR with `gain_q`, `gain_r`.
    pub gain_k: Option<Vec<f64>>,
    pub gain_q: Vec<f64>,
    pub gain_r: f64,
}

impl Default for ControlSection {
    fn default() -> Self {
        let p = SlidingParams::default();
        Self {
            gamma: p.frac_order_gamma,
            lambda: p.frac_weight_lambda,
            kappa: p.switch_kappa,
            rho: p.switch_rho,
            memory_len: p.memory_len_l,
            phi: p.boundary_layer_phi.unwrap_or(0.0),
            surface_init: InitKind::Consistent,
            surface_q: securelat_core::sim::DEFAULT_SURFACE_Q.to_vec(),
            surface_r: securelat_core::sim::DEFAULT_SURFACE_R,
            gain_k: None,
            gain_q: securelat_core::sim::DEFAULT_GAIN_Q.to_vec(),
            gain_r: securelat_core::sim::DEFAULT_GAIN_R,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKindCfg {
    None,
    Sinusoid,
    Constant,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub kind: AttackKindCfg,
    pub amplitude: f64,
    pub freq_hz: f64,
    pub start_s: f64,
    pub bound_qatt: f64,
    pub compliance: bool,
}

impl Default for AttackSection {
    fn default() -> Self {
        let a = AttackModel::default();
        Self {
            kind: AttackKindCfg::Sinusoid,
            amplitude: a.amplitude,
            freq_hz: a.freq_hz,
            start_s: a.start_time_s,
            bound_qatt: a.bound_qatt,
            compliance: a.compliance,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub duration_s: f64,
    pub dt_s: f64,
    pub seed: Option<u64>,
    pub initial_state: Vec<f64>,
    pub plant: Source,
    pub disturbance_bound: f64,
    pub search_iterations: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            duration_s: 20.0,
            dt_s: 0.01,
            seed: None,
            initial_state: securelat_core::sim::DEFAULT_INITIAL_STATE.to_vec(),
            plant: Source::Discrete,
            disturbance_bound: 0.0,
            search_iterations: 4000,
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(path) = path else { return Ok(RunConfig::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
    parse(&text).map_err(|e| match e {
        CliError::Config(m) => cfg_err(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse(text: &str) -> Result<RunConfig, CliError> {
    toml::from_str(text).map_err(|e| cfg_err(e.to_string()))
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, CliError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(cfg_err(format!("{what} must be a non-empty rectangular array of rows")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn diag(v: &[f64], n: usize, what: &str) -> Result<DMatrix<f64>, CliError> {
    if v.len() != n {
        return Err(cfg_err(format!("{what} needs {n} entries, got {}", v.len())));
    }
    Ok(DMatrix::from_diagonal(&DVector::from_column_slice(v)))
}

#[derive(Debug, serde::Serialize, Deserialize)]
pub struct ModelFile {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    pub r: usize,
    pub residual_fro: f64,
    pub persistency: bool,
    pub sample_period_s: f64,
}

pub fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl RunConfig {
    pub fn vehicle(&self) -> VehicleParams {
        let p = &self.plant;
        VehicleParams {
            mass_kg: p.mass_kg,
            inertia_z_kgm2: p.inertia_z_kgm2,
            dist_front_m: p.dist_front_m,
            dist_rear_m: p.dist_rear_m,
            stiff_front_n_per_rad: p.stiff_front_n_per_rad,
            stiff_rear_n_per_rad: p.stiff_rear_n_per_rad,
            speed_long_m_per_s: p.speed_long_m_per_s,
        }
    }

    /// Inline matrices, the nominal model, or a `model.json` (relative paths resolve against `base`).
    pub fn model(&self, base: &Path) -> Result<IdentifiedModel, CliError> {
        let dt = self.sim.dt_s;
        match (&self.plant.a, &self.plant.b) {
            (Some(a), Some(b)) => {
                return IdentifiedModel::from_matrices(matrix(a, "plant.a")?, matrix(b, "plant.b")?, dt)
                    .map_err(|e| cfg_err(e.to_string()))
            }
            (None, None) => {}
            _ => return Err(cfg_err("plant.a and plant.b must be given together")),
        }
        if self.plant.model == "nominal" {
            let mut m = IdentifiedModel::nominal();
            m.sample_period_s = dt;
            return Ok(m);
        }
        let path = resolve(base, &self.plant.model);
        let text = std::fs::read_to_string(&path).map_err(|e| cfg_err(format!("cannot read model {}: {e}", path.display())))?;
        let file: ModelFile =
            serde_json::from_str(&text).map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
        IdentifiedModel::from_matrices(matrix(&file.a, "A")?, matrix(&file.b, "B")?, file.sample_period_s)
            .map_err(|e| cfg_err(e.to_string()))
    }

    pub fn sliding_params(&self) -> SlidingParams {
        let c = &self.control;
        SlidingParams {
            frac_order_gamma: c.gamma,
            frac_weight_lambda: c.lambda,
            switch_kappa: c.kappa,
            switch_rho: c.rho,
            attack_bound_qatt: self.attack.bound_qatt,
            memory_len_l: c.memory_len,
            boundary_layer_phi: (c.phi > 0.0).then_some(c.phi),
            surface_init: match c.surface_init {
                InitKind::Consistent => SurfaceInit::Consistent,
                InitKind::Zero => SurfaceInit::Zero,
            },
        }
    }

    pub fn gain(&self, model: &IdentifiedModel) -> Result<RowDVector<f64>, CliError> {
        let n = model.n_states();
        if let Some(k) = &self.control.gain_k {
            if k.len() != n {
                return Err(cfg_err(format!("control.gain_k needs {n} entries, got {}", k.len())));
            }
            return Ok(RowDVector::from_row_slice(k));
        }
        let q = diag(&self.control.gain_q, n, "control.gain_q")?;
        let r = DMatrix::from_element(1, 1, self.control.gain_r);
        let k = lqr_gain(&model.mat_a, &model.mat_b, &q, &r).map_err(|e| CliError::Runtime(format!("gain design: {e}")))?;
        Ok(to_row(&k))
    }

    pub fn sliding(&self, model: &IdentifiedModel) -> Result<SlidingConfig, CliError> {
        let q = diag(&self.control.surface_q, model.n_states(), "control.surface_q")?;
        let r = DMatrix::from_element(1, 1, self.control.surface_r);
        SlidingConfig::design(&model.mat_a, &model.mat_b, &q, &r, &self.sliding_params()).map_err(|e| match e {
            securelat_core::Error::InvalidParameter(m) => cfg_err(m),
            other => CliError::Runtime(format!("surface design: {other}")),
        })
    }

    /// Secure-domain level from the configured weights; `None` if the surface cannot be designed.
    pub fn level_xi(&self, model: &IdentifiedModel) -> Option<f64> {
        let q = diag(&self.control.surface_q, model.n_states(), "").ok()?;
        let r = DMatrix::from_element(1, 1, self.control.surface_r);
        let p = riccati_solve(&model.mat_a, &model.mat_b, &q, &r, DEFAULT_RICCATI_TOL, DEFAULT_RICCATI_MAX_ITER).ok()?;
        let fb = (model.mat_b.transpose() * &p * &model.mat_b)[(0, 0)];
        secure_domain_level(self.control.rho, self.attack.bound_qatt, self.control.kappa, fb).ok().map(|d| d.level_xi)
    }

    pub fn max_delay_steps(&self) -> Result<usize, CliError> {
        let b = self.trigger.delay_bound_s;
        if !(b >= 0.0 && b.is_finite()) {
            return Err(cfg_err("trigger.delay_bound_s must be >= 0"));
        }
        Ok((b / self.sim.dt_s).round() as usize)
    }

    fn attack(&self) -> AttackModel {
        let a = &self.attack;
        AttackModel {
            kind: match a.kind {
                AttackKindCfg::None => AttackKind::None,
                AttackKindCfg::Sinusoid => AttackKind::Sinusoid,
                AttackKindCfg::Constant => AttackKind::Constant,
            },
            amplitude: a.amplitude,
            freq_hz: a.freq_hz,
            start_time_s: a.start_s,
            bound_qatt: a.bound_qatt,
            compliance: a.compliance,
            ..AttackModel::default()
        }
    }

    pub fn scenario(&self, case: CaseId, base: &Path, seed: u64) -> Result<ScenarioConfig, CliError> {
        let model = self.model(base)?;
        let n = model.n_states();
        let upsilon = match &self.trigger.upsilon {
            Some(rows) => matrix(rows, "trigger.upsilon")?,
            None => DMatrix::identity(n, n),
        };
        let trigger_cfg = TriggerConfig::new(upsilon, self.trigger.mu).map_err(|e| cfg_err(e.to_string()))?;
        let delay_mode = match self.trigger.delay {
            DelayKind::None => DelayMode::None,
            DelayKind::Uniform => DelayMode::Uniform,
            DelayKind::Fixed => DelayMode::Fixed(self.trigger.delay_sequence.clone()),
        };
        if self.sim.initial_state.len() != n {
            return Err(cfg_err(format!("sim.initial_state needs {n} entries")));
        }
        let mut attack = self.attack();
        if case == CaseId::I {
            attack.kind = AttackKind::None;
        } else if attack.kind == AttackKind::None {
            return Err(cfg_err("attack.kind = none is only meaningful for case1"));
        }
        let cfg = ScenarioConfig {
            case_id: case,
            duration_s: self.sim.duration_s,
            dt_s: self.sim.dt_s,
            initial_state: DVector::from_column_slice(&self.sim.initial_state),
            gain_k: self.gain(&model)?,
            trigger_cfg,
            sliding_cfg: self.sliding(&model)?,
            attack,
            delay_mode,
            max_delay_steps: self.max_delay_steps()?,
            seed,
            observer_radius: self.observer.target_radius,
            oracle_compensation: self.observer.oracle,
            plant: match self.sim.plant {
                Source::Discrete => PlantKind::Discrete,
                Source::Continuous => PlantKind::Continuous(self.vehicle()),
            },
            disturbance_bound: self.sim.disturbance_bound,
            model,
        };
        cfg.validate().map_err(|e| cfg_err(e.to_string()))?;
        Ok(cfg)
    }
}

pub fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = PathBuf::from(p);
    if path.is_absolute() {
        path
    } else {
        base.join(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        let c = parse("").unwrap();
        assert_eq!(c.trigger.mu, 0.2);
        assert_eq!(c.max_delay_steps().unwrap(), 10);
        let s = c.scenario(CaseId::III, Path::new("."), 0).unwrap();
        let std = ScenarioConfig::standard(CaseId::III).unwrap();
        assert!((&s.gain_k - &std.gain_k).amax() < 1e-15);
        assert_eq!(s.sliding_cfg, std.sliding_cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_types() {
        assert!(matches!(parse("[sim]\nbogus = 1\n"), Err(CliError::Config(_))));
        assert!(matches!(parse("[nothing]\n"), Err(CliError::Config(_))));
        assert!(matches!(parse("[sim]\nduration_s = \"long\"\n"), Err(CliError::Config(_))));
        assert!(matches!(parse("[attack]\nkind = \"laser\"\n"), Err(CliError::Config(_))));
    }

    #[test]
    fn inline_model_and_gain() {
        let c = parse("[plant]\na = [[0.5]]\nb = [[1.0]]\n[control]\ngain_k = [-0.2]\nsurface_q = [1.0]\n[sim]\ninitial_state = [1.0]\n[trigger]\nupsilon = [[1.0]]\n")
            .unwrap();
        let s = c.scenario(CaseId::I, Path::new("."), 0).unwrap();
        assert_eq!(s.model.n_states(), 1);
        assert_eq!(s.gain_k[0], -0.2);
        let bad = parse("[control]\ngain_k = [1.0, 2.0]\n").unwrap();
        assert!(bad.scenario(CaseId::I, Path::new("."), 0).is_err());
    }
}
