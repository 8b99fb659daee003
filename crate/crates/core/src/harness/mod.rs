//! Scenario harness: declarative dispute experiments.
//!
//! A scenario file names a training program, a set of trainers (each
//! optionally carrying a [`FaultSpec`]), and an expected verdict. Running it
//! trains everyone, arbitrates, re-verifies the recorded transcript, and
//! renders a line-oriented report that is byte-stable across runs.

mod faults;
mod scenario;

pub use faults::{FaultSpec, Perturbation, ScenarioEndpoint};
pub use scenario::{
    load_program_file, render_report, run_scenario, Expect, Scenario, ScenarioOutcome,
    TrainerSetup,
};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Program(#[from] crate::trainer::ProgramError),
    #[error(transparent)]
    Train(#[from] crate::trainer::TrainerError),
    #[error(transparent)]
    Protocol(#[from] crate::protocol::ProtocolError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
