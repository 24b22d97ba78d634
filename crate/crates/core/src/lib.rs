//! Learning and verifying neural reach-avoid certificates (logRASMs and RASMs) for
//! discrete-time stochastic systems controlled by neural policies.

pub mod bounds;
pub mod certificate;
pub mod error;
pub mod fixtures;
pub mod interval;
pub mod learner;
pub mod nn;
pub mod orchestrator;
pub mod system;
pub mod verifier;

pub use error::{Error, Result};
