//! Library half of the `protoreg` binary, so the commands can be driven
//! from tests without spawning a process.

pub mod cli;
pub mod commands;
pub mod exit;
pub mod manifest;
pub mod slices;
