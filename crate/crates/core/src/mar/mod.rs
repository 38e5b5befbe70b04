//! Memory-augmented refinement.

mod bank;
mod refine;

pub(crate) use bank::argmax;
pub use bank::{
    build_memory, MemoryBank, BANK_HEADER_BYTES, BANK_MAGIC, BANK_VERSION, DEFAULT_K_HIGH,
    DEFAULT_K_LOW,
};
pub use refine::{mar_attend, mar_scores, Mar, MAR_PREFIX};
