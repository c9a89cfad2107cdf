//! Entropy coding of quantized latents.

pub mod bitstream;
pub mod gaussian;
pub mod rans;

use thiserror::Error;

pub use bitstream::{Bitstream, LevelShape};
pub use gaussian::{
    discretize_gaussian, estimate_rate, residual_table, GaussianPmfTable, PmfTable, DEFAULT_PRECISION, SIGMA_FLOOR,
    SUPPORT_MAX, SUPPORT_MIN,
};
pub use rans::{rans_decode, rans_encode, RANS_L};

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("symbol {value} at index {index} outside support [{min}, {max}]")]
    OutOfSupport { index: usize, value: i32, min: i32, max: i32 },
    #[error("{symbols} symbols but {tables} tables")]
    LengthMismatch { symbols: usize, tables: usize },
    #[error("invalid table: {0}")]
    InvalidTable(String),
    #[error("truncated stream: {0}")]
    Truncated(String),
    #[error("corrupt stream: {0}")]
    Corrupt(String),
    #[error("crc mismatch (stored {stored:08x}, computed {computed:08x})")]
    Crc { stored: u32, computed: u32 },
    #[error("bad header: {0}")]
    Header(String),
}
