//! Event-triggered transmission, inter-event error and the artificial-delay bookkeeping.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerConfig {
    pub weight_upsilon: DMatrix<f64>,
    pub sensitivity_mu: f64,
}

impl TriggerConfig {
    pub fn new(weight_upsilon: DMatrix<f64>, sensitivity_mu: f64) -> Result<Self> {
        let cfg = Self { weight_upsilon, sensitivity_mu };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn identity(n: usize, sensitivity_mu: f64) -> Result<Self> {
        Self::new(DMatrix::identity(n, n), sensitivity_mu)
    }

    pub fn validate(&self) -> Result<()> {
        let u = &self.weight_upsilon;
        if !u.is_square() {
            return Err(Error::Dimension("trigger weight must be square".into()));
        }
        if (u - u.transpose()).amax() > 1e-12 {
            return Err(Error::InvalidParameter("trigger weight must be symmetric".into()));
        }
        let min_eig = u.clone().symmetric_eigenvalues().min();
        if !(min_eig > 0.0) {
            return Err(Error::InvalidParameter(format!("trigger weight must be positive definite (min eig {min_eig})")));
        }
        if !(0.0..=1.0).contains(&self.sensitivity_mu) {
            return Err(Error::InvalidParameter(format!("mu must lie in [0, 1], got {}", self.sensitivity_mu)));
        }
        Ok(())
    }

    fn form(&self, v: &DVector<f64>) -> f64 {
        (v.transpose() * &self.weight_upsilon * v)[(0, 0)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerState {
    pub last_sent_state: DVector<f64>,
    pub last_sent_step: usize,
    /// `(step, steps since the previous event)`; the first entry is `(0, 0)`.
    pub event_log: Vec<(usize, usize)>,
}

impl TriggerState {
    /// Step 0 always transmits.
    pub fn new(initial: DVector<f64>) -> Self {
        Self { last_sent_state: initial, last_sent_step: 0, event_log: vec![(0, 0)] }
    }

    pub fn record_event(&mut self, step: usize, state: DVector<f64>) {
        let gap = step - self.last_sent_step;
        self.event_log.push((step, gap));
        self.last_sent_state = state;
        self.last_sent_step = step;
    }

    pub fn event_count(&self) -> usize {
        self.event_log.len()
    }
}

/// `e^T U e >= mu x_s^T U x_s`; a zero error never fires, so a state resting at the
/// origin is not retransmitted every step.
pub fn should_trigger(current: &DVector<f64>, cfg: &TriggerConfig, st: &TriggerState) -> bool {
    let e = current - &st.last_sent_state;
    let form = cfg.form(&e);
    form > 0.0 && form >= cfg.sensitivity_mu * cfg.form(&st.last_sent_state)
}

pub fn inter_event_error(current: &DVector<f64>, st: &TriggerState) -> DVector<f64> {
    current - &st.last_sent_state
}

/// Per-event network delays in steps, bounded by `max_delay_steps`.
#[derive(Debug, Clone)]
pub struct DelayModel {
    pub max_delay_steps: usize,
    source: DelaySource,
}

#[derive(Debug, Clone)]
enum DelaySource {
    Zero,
    Fixed { delays: Vec<usize>, next: usize },
    Uniform(ChaCha8Rng),
}

impl DelayModel {
    pub fn none() -> Self {
        Self { max_delay_steps: 0, source: DelaySource::Zero }
    }

    pub fn uniform(max_delay_steps: usize, seed: u64) -> Self {
        Self { max_delay_steps, source: DelaySource::Uniform(ChaCha8Rng::seed_from_u64(seed)) }
    }

    /// Replays `delays` cyclically.
    pub fn fixed(max_delay_steps: usize, delays: Vec<usize>) -> Result<Self> {
        if delays.is_empty() {
            return Err(Error::InvalidParameter("fixed delay sequence is empty".into()));
        }
        if let Some(d) = delays.iter().find(|&&d| d > max_delay_steps) {
            return Err(Error::InvalidParameter(format!("delay {d} exceeds bound {max_delay_steps}")));
        }
        Ok(Self { max_delay_steps, source: DelaySource::Fixed { delays, next: 0 } })
    }

    pub fn next_delay(&mut self) -> usize {
        match &mut self.source {
            DelaySource::Zero => 0,
            DelaySource::Fixed { delays, next } => {
                let d = delays[*next % delays.len()];
                *next += 1;
                d
            }
            DelaySource::Uniform(rng) => rng.gen_range(0..=self.max_delay_steps),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DelayRegime {
    CaseA,
    Lambda1,
    Lambda2,
    Lambda3,
}

/// Which expression defines `e(k)` on the current segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorRule {
    Zero,
    /// `e(k) = chi(k_s) - chi(k_s + offset)`.
    SinceEvent { offset: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtificialDelay {
    pub delay_steps: usize,
    pub regime: DelayRegime,
    pub error_rule: ErrorRule,
}

/// Artificial delay for `k` in `[k_s + d_s, k_{s+1} + d_{s+1} - 1]`.
///
/// In the long-interval case the middle windows overlap at their endpoints; the
/// smallest admissible `l` is taken, so `delta(k) = delta_bar + 1` there.
pub fn artificial_delay(
    event_steps: (usize, usize),
    delays: (usize, usize),
    delta_bar: usize,
    k: usize,
) -> Result<ArtificialDelay> {
    let (ks, ks1) = (event_steps.0 as i64, event_steps.1 as i64);
    let (ds, ds1) = (delays.0 as i64, delays.1 as i64);
    let db = delta_bar as i64;
    let k = k as i64;
    if ks1 <= ks {
        return Err(Error::InvalidParameter(format!("event steps must increase: {ks} -> {ks1}")));
    }
    if ds > db || ds1 > db {
        return Err(Error::InvalidParameter(format!("delays ({ds}, {ds1}) exceed bound {db}")));
    }
    let lo = ks + ds;
    let hi = ks1 + ds1 - 1;
    if k < lo || k > hi {
        return Err(Error::OutOfInterval { k, lo, hi });
    }
    if ks + db + 1 >= hi {
        return Ok(ArtificialDelay {
            delay_steps: (k - ks) as usize,
            regime: DelayRegime::CaseA,
            error_rule: ErrorRule::Zero,
        });
    }
    // d: ks + d + db < hi <= ks + d + db + 1
    let d = hi - ks - db - 1;
    if k <= ks + db + 1 {
        Ok(ArtificialDelay { delay_steps: (k - ks) as usize, regime: DelayRegime::Lambda1, error_rule: ErrorRule::Zero })
    } else if k >= ks + db + d {
        Ok(ArtificialDelay {
            delay_steps: (k - ks - d) as usize,
            regime: DelayRegime::Lambda3,
            error_rule: ErrorRule::SinceEvent { offset: d as usize },
        })
    } else {
        let l = k - ks - db - 1;
        Ok(ArtificialDelay {
            delay_steps: (k - ks - l) as usize,
            regime: DelayRegime::Lambda2,
            error_rule: ErrorRule::SinceEvent { offset: l as usize },
        })
    }
}

/// One step of a trace as seen by the delay-aware error bound.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSample {
    pub error: DVector<f64>,
    pub delayed_state: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    /// `e^T U e / (mu x_d^T U x_d)`; zero when both sides vanish.
    pub ratios: Vec<f64>,
    pub violations: Vec<usize>,
    /// `V(k) = e^T U e` along the trace, reported only.
    pub error_energy: Vec<f64>,
}

pub fn theorem1_diagnostic(samples: &[TriggerSample], cfg: &TriggerConfig) -> Theorem1Report {
    let tol = 1e-12;
    let mut ratios = Vec::with_capacity(samples.len());
    let mut violations = Vec::new();
    let mut error_energy = Vec::with_capacity(samples.len());
    for (k, s) in samples.iter().enumerate() {
        let lhs = cfg.form(&s.error);
        let rhs = cfg.sensitivity_mu * cfg.form(&s.delayed_state);
        error_energy.push(lhs);
        let ratio = if rhs > 0.0 {
            lhs / rhs
        } else if lhs > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        ratios.push(ratio);
        if lhs > rhs + tol * (1.0 + rhs) {
            violations.push(k);
        }
    }
    Theorem1Report { ratios, violations, error_energy }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn trigger_rule() {
        let cfg = TriggerConfig::identity(4, 0.2).unwrap();
        let st = TriggerState::new(v(&[1.0, 0.0, 0.0, 0.0]));
        assert!(!should_trigger(&v(&[1.0, 0.0, 0.0, 0.0]), &cfg, &st));
        assert!(should_trigger(&v(&[1.5, 0.0, 0.0, 0.0]), &cfg, &st));
        assert!(!should_trigger(&v(&[1.4, 0.0, 0.0, 0.0]), &cfg, &st));
        let zero = TriggerState::new(v(&[0.0; 4]));
        assert!(should_trigger(&v(&[1e-9, 0.0, 0.0, 0.0]), &cfg, &zero));
    }

    #[test]
    fn error_vector() {
        let st = TriggerState::new(v(&[1.0, 0.0, 1.0, 0.0]));
        assert_eq!(inter_event_error(&v(&[1.0, 1.0, 1.0, 1.0]), &st), v(&[0.0, 1.0, 0.0, 1.0]));
        assert_eq!(inter_event_error(&v(&[1.0, 0.0, 1.0, 0.0]), &st), v(&[0.0; 4]));
    }

    #[test]
    fn config_validation() {
        assert!(TriggerConfig::identity(4, 1.5).is_err());
        assert!(TriggerConfig::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]), 0.2).is_err());
        assert!(TriggerConfig::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]), 0.2).is_err());
    }

    #[test]
    fn event_log_bookkeeping() {
        let mut st = TriggerState::new(v(&[1.0]));
        st.record_event(7, v(&[2.0]));
        st.record_event(9, v(&[3.0]));
        assert_eq!(st.event_log, vec![(0, 0), (7, 7), (9, 2)]);
        assert_eq!(st.last_sent_step, 9);
    }

    #[test]
    fn delay_case_a_first_delivery() {
        let r = artificial_delay((0, 3), (1, 1), 3, 1).unwrap();
        assert_eq!(r.regime, DelayRegime::CaseA);
        assert_eq!(r.delay_steps, 1);
        assert_eq!(r.error_rule, ErrorRule::Zero);
    }

    #[test]
    fn delay_case_b_segments() {
        // ks=0, d_s=1, bound 3, ks1=10, d_s1=1: interval [1, 10], d = 6
        let r = artificial_delay((0, 10), (1, 1), 3, 2).unwrap();
        assert_eq!(r.regime, DelayRegime::Lambda1);
        assert_eq!(r.delay_steps, 2);
        let r = artificial_delay((0, 10), (1, 1), 3, 6).unwrap();
        assert_eq!(r.regime, DelayRegime::Lambda2);
        // smallest l with 3 + l <= 6 <= 4 + l is 2
        assert_eq!(r.error_rule, ErrorRule::SinceEvent { offset: 2 });
        assert_eq!(r.delay_steps, 4);
        let r = artificial_delay((0, 10), (1, 1), 3, 9).unwrap();
        assert_eq!(r.regime, DelayRegime::Lambda3);
        assert_eq!(r.error_rule, ErrorRule::SinceEvent { offset: 6 });
        assert_eq!(r.delay_steps, 3);
        assert!(artificial_delay((0, 10), (1, 1), 3, 11).is_err());
        assert!(artificial_delay((0, 10), (1, 1), 3, 0).is_err());
    }

    #[test]
    fn delay_bound_exhaustive() {
        for db in 0..6 {
            for ks1 in 1..30 {
                for ds in 0..=db {
                    for ds1 in 0..=db {
                        let lo = ds;
                        let hi = ks1 + ds1;
                        if hi == 0 || lo > hi - 1 {
                            continue;
                        }
                        for k in lo..hi {
                            let r = artificial_delay((0, ks1), (ds, ds1), db, k).unwrap();
                            assert!(r.delay_steps >= ds && r.delay_steps <= db + 1, "{r:?} db={db} k={k}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn theorem1_negative_control() {
        let cfg = TriggerConfig::identity(2, 0.2).unwrap();
        let good = TriggerSample { error: v(&[0.1, 0.0]), delayed_state: v(&[1.0, 0.0]) };
        let bad = TriggerSample { error: v(&[1.0, 0.0]), delayed_state: v(&[1.0, 0.0]) };
        let rep = theorem1_diagnostic(&[good.clone(), bad, good], &cfg);
        assert_eq!(rep.violations, vec![1]);
        let cont = TriggerConfig::identity(2, 0.0).unwrap();
        let zero = TriggerSample { error: v(&[0.0, 0.0]), delayed_state: v(&[1.0, 0.0]) };
        assert!(theorem1_diagnostic(&[zero], &cont).violations.is_empty());
    }

    #[test]
    fn delays_within_bound() {
        let mut d = DelayModel::uniform(10, 3);
        let mut seen = [false; 11];
        for _ in 0..2000 {
            let x = d.next_delay();
            assert!(x <= 10);
            seen[x] = true;
        }
        assert!(seen.iter().all(|&s| s));
        let mut f = DelayModel::fixed(3, vec![1, 3]).unwrap();
        assert_eq!((f.next_delay(), f.next_delay(), f.next_delay()), (1, 3, 1));
        assert!(DelayModel::fixed(2, vec![3]).is_err());
        assert_eq!(DelayModel::none().next_delay(), 0);
    }
}
