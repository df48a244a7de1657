//! Independent checks of the training machinery.

pub mod gradient;
pub mod l0;
pub mod suite;
pub mod swap;
pub mod topv;
pub mod trace;

pub use suite::{run_verification, OracleRow, OracleStatus, VerifyOptions};
