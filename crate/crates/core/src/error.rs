use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("bulk load input is not strictly increasing at position {0}")]
    UnsortedInput(usize),

    #[error("keyset format error: {0}")]
    Format(String),

    #[error("payload size must be non-zero")]
    ZeroPayload,

    #[error(transparent)]
    Io(#[from] io::Error),
}
