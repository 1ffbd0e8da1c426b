//! File formats, configuration, the command-line front end and the
//! synthetic acceptance suite for the `panda-core` engine.

pub mod bench;
pub mod cli;
pub mod config;
pub mod io;
