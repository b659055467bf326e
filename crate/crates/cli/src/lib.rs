//! Library surface of the experiment harness, shared between the `astar`
//! binary and the acceptance suite.

pub mod config;
pub mod experiment;
