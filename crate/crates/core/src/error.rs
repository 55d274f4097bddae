use thiserror::Error;

/// Errors raised by the engine and its kernels.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, indices, ids).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A model, generation or policy configuration is invalid.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A cache entry was read before anything was written to it.
    #[error("cold cache read: layer {layer}, {side} side")]
    ColdCache { layer: usize, side: &'static str },

    /// The unmasking schedule and the sequence state disagree.
    #[error("schedule error: {0}")]
    Schedule(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}

pub(crate) use contract;
