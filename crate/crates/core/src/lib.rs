pub mod diagnostics;
pub mod error;
pub mod flows;
pub mod harness;
pub mod integrator;
pub mod linalg;
pub mod network;

pub use diagnostics::{verify_table, verify_trajectory, RateFit, Tolerances, VerificationReport};
pub use error::{Error, Result};
pub use flows::FlowKind;
pub use harness::{
    compare, generate_dataset, run, DataLaw, FlowChoice, RunConfig, RunOutcome, RunRecord,
};
pub use integrator::{
    IntegratorConfig, Method, StopRule, Termination, Trajectory, TrajectoryTable,
};
pub use linalg::{Matrix, Vector};
pub use network::{Activation, NetworkSpec, TrainingSet};
