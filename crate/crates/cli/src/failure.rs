//! Process-level error taxonomy: every failure carries the exit code the
//! process must end with. 2 = configuration or input problem, 3 = numeric
//! failure, 1 = everything else (I/O and such).

use std::fmt;

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Numeric(String),
    Other(String),
}

impl Failure {
    pub fn config(msg: impl Into<String>) -> Self {
        Failure::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Failure::Numeric(msg.into())
    }

    pub fn other(msg: impl Into<String>) -> Self {
        Failure::Other(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numeric(_) => 3,
            Failure::Other(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) | Failure::Numeric(m) | Failure::Other(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

impl From<dvdp_core::Error> for Failure {
    fn from(e: dvdp_core::Error) -> Self {
        use dvdp_core::Error as E;
        match e {
            E::NonFinite(_) | E::LambdaUnderflow(_) | E::Diverged { .. } => {
                Failure::Numeric(e.to_string())
            }
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

pub type CliResult<T> = Result<T, Failure>;
