use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("data length {actual} does not match grid size {expected}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("non-finite value at voxel {0}")]
    NonFinite(usize),

    #[error("probability {value} outside [0, 1] at voxel {index}")]
    OutOfRange { index: usize, value: f32 },

    #[error("geometry mismatch in {0}")]
    GeometryMismatch(&'static str),

    #[error("empty prior: {0}")]
    EmptyPrior(&'static str),

    #[error("{stage} optimization diverged at iteration {iteration}")]
    Diverged { stage: &'static str, iteration: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("backend error: {0}")]
    Backend(String),
}
