//! Core of a block-diffusion (semi-autoregressive) video inference engine.
//!
//! Everything here is pure computation over `alloc` collections: attention
//! kernels, the paged KV store, the generate-and-cache decode loop with its
//! toy transformer, the in-process parallel attention simulation, the stream
//! wire codec and the drift metrics. IO, clocks, threads and sockets live in
//! the `inferix` crate.

#![no_std]

extern crate alloc;

pub mod attention;
pub mod engine;
pub mod frame;
pub mod kv;
pub mod metrics;
pub mod parallel;
pub mod tensor;
pub mod wire;

pub use tensor::{Tensor, TensorError};
