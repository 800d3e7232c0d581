use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty dimension in shape {0:?}")]
    EmptyDimension(Vec<usize>),

    #[error("imaginary residue {residue:e} exceeds tolerance {tolerance:e}")]
    ImaginaryResidue { residue: f64, tolerance: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error(transparent)]
    Container(#[from] crate::evalio::container::ContainerError),

    #[error(transparent)]
    Io(#[from] io::Error),
}
