use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("invalid value {value:?} for {key}")]
    InvalidValue { key: String, value: String },
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("arc length {s} mm outside [0, {length}] mm")]
    ArcLengthOutOfRange { s: f64, length: f64 },
    #[error("{0}")]
    Invalid(String),
}
