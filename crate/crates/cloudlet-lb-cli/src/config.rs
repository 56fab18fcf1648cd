//! Config loading and the error type shared by every command.
//!
//! A config is the JSON form of `GameContext`:
//!
//! ```text
//! {
//!   "cloudlets": [{"provider": "a", "total_servers": 10,
//!                  "user_latency": [0.002, 0.002], "servers": [5.0, 5.0]}, ...],
//!   "classes": [{"service_rate": 250.0, "slot_multiple": 2, "bits_per_job": 1.6e6}, ...],
//!   "topology": {"latency": [[...]], "bandwidth": [[...]]},
//!   "prices": {"revenue": [[...]], "offload": [[[...]]],
//!              "latency_penalty": [[...]], "mediator_penalty": [[...]]},
//!   "arrivals": {"rates": [[...]], "revealed": [[...]], "max": [[...]]},
//!   "slot": 0.005,
//!   "interval": 1.0,
//!   "default_utility": [0.0, ...]
//! }
//! ```
//!
//! `servers`, `revealed` and `default_utility` may be omitted. Missing slices
//! are solved from the revealed rates. Times are seconds, rates jobs/s,
//! bandwidth bits/s and prices cost per unit load.

use std::fmt;
use std::path::Path;

use cloudlet_lb::game::{GameContext, GameError};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    NonConvergence(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::NonConvergence(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config: {m}"),
            CliError::NonConvergence(m) => write!(f, "did not converge: {m}"),
            CliError::Io(m) => write!(f, "io: {m}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<GameError> for CliError {
    fn from(e: GameError) -> Self {
        CliError::Config(e.to_string())
    }
}

pub fn parse_context(text: &str) -> Result<GameContext, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let ctx: GameContext = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("{path}: {}", e.into_inner()))
    })?;
    Ok(ctx.prepare()?)
}

pub fn load_context(path: &Path) -> Result<GameContext, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse_context(&text)
}
