use thiserror::Error;

use crate::format::FormatError;
use crate::numerics::NumericsError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("partition {b_h}x{b_w} does not divide spatial extent {h}x{w}")]
    Partition {
        b_h: usize,
        b_w: usize,
        h: usize,
        w: usize,
    },
    #[error("{what}: expected {expected:?}, found {found:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter `{0}` is missing")]
    MissingParam(String),
    #[error("insufficient class samples: class {class} has {available} correctly classified features, need {required}")]
    InsufficientClassSamples {
        class: usize,
        available: usize,
        required: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
}
