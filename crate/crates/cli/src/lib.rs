//! Command-line surface over `ralm_core`: warm-start, pre-train, fine-tune,
//! evaluate, inspect retrievals and run ablations.

pub mod commands;
pub mod config;

use std::io;

pub use commands::{
    cmd_ablate, cmd_eval, cmd_finetune, cmd_inspect, cmd_pretrain, cmd_warmstart, GlobalArgs,
    PretrainArgs,
};
pub use config::RunConfig;

/// Failures grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error("interrupted at step {0}")]
    Interrupted(u64),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numeric(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Interrupted(_) => 130,
        }
    }
}

impl From<ralm_core::Error> for CliError {
    fn from(e: ralm_core::Error) -> Self {
        use ralm_core::Error as E;
        match e {
            E::Numeric { .. } => CliError::Numeric(e.to_string()),
            E::Config(_) => CliError::Config(e.to_string()),
            E::Contract(_) | E::Parse { .. } | E::Validation(_) | E::Format(_) | E::Io(_) => {
                CliError::Data(e.to_string())
            }
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Data(format!("i/o: {e}"))
    }
}
