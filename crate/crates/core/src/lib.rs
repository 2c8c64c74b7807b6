//! Conditional importance sampling for off-policy evaluation on finite MDPs.
//!
//! The crate provides exact trajectory enumeration, per-trajectory
//! estimators (plain, per-decision and conditional importance sampling),
//! online conditional-weight regression, chain environments, online value
//! learning and the experiment harness behind the `cis` binary.

pub mod cli;
pub mod conditioner;
pub mod environments;
pub mod error;
pub mod estimators;
pub mod exact;
pub mod harness;
pub mod learning;
pub mod mdp;
pub mod mdp_io;
pub mod qfunction;
pub mod regression;
pub mod rng;
pub mod verify;

pub use error::{CisError, Result};
