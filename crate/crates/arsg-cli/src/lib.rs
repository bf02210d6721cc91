//! Library surface behind the `arsg` binary, exposed so integration and
//! acceptance tests can drive the commands in-process.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod trainer;
