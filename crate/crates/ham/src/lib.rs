//! IO, Monte-Carlo harness, verification suites and reporting around
//! [`ham_core`].

pub mod check;
pub mod cli;
pub mod compare;
pub mod config;
pub mod io;
pub mod rng;
pub mod sim;
pub mod synth;
