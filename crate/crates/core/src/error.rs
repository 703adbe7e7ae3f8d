use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("rank deficient: numerical rank {rank} below requested {requested}")]
    RankDeficient { rank: usize, requested: usize },

    #[error("no convergence after {iterations} iterations (last increment {last_increment:e})")]
    NotConverged { iterations: usize, last_increment: f64 },

    #[error("unobservable pair: observability rank {rank}, need {required}")]
    Unobservable { rank: usize, required: usize },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("index {k} outside delivery interval [{lo}, {hi}]")]
    OutOfInterval { k: i64, lo: i64, hi: i64 },

    #[error("state blow-up at step {step}: norm {norm:e}")]
    BlowUp { step: usize, norm: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
