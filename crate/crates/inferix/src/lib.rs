//! Std side of the engine: profiler, threaded worker executor, stream server
//! and browser bridge, file formats, run configuration and the CLI.

pub mod cli;
pub mod config;
pub mod exec;
pub mod formats;
pub mod profiler;
pub mod run;
pub mod stream;

pub use inferix_core as core;
