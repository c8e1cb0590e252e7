//! mrf — a desk-scale Mixture-of-Experts upcycling workbench.
//!
//! The pipeline: train a small byte-level dense transformer, collect
//! per-head attention key statistics from the frozen checkpoint, convert
//! the checkpoint into an MoE model whose routers are initialized from the
//! attention heads (or from baseline random routers), continue training,
//! and compare routing diversity and expert specialization across router
//! variants.
//!
//! Everything is deterministic under a fixed seed: tensors are `f64`,
//! random numbers come from a ChaCha8 stream, and all reductions run in a
//! fixed order, so repeated runs reproduce checkpoints and metrics logs
//! bit-exactly.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod manifest;
pub mod model;
pub mod moe;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod upcycle;

pub use error::Error;
pub use rng::SeedRng;
pub use tensor::Tensor;
