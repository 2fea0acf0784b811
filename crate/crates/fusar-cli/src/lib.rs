//! Library surface for the `fusar` binary; exposed so integration tests and
//! the fixture generator drive the exact same command paths.

pub mod commands;
pub mod config;
