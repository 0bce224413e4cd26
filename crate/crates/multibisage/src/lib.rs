//! Multi-bipartite-graph pin embedding pipeline.
//!
//! The crate covers the full training loop at desk scale: bipartite graph
//! loading and degree pruning, restart random walks that precompute each
//! pin's most-visited neighbors, a two-level attention tower over pin and
//! neighbor features, bias-corrected sampled-softmax training with
//! count-min-sketch frequency estimates, and recall@k evaluation. A
//! planted-cluster synthetic generator makes the whole pipeline runnable
//! and testable without production data.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod features;
pub mod graph;
pub mod loss;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod seeds;
pub mod sketch;
pub mod synth;
pub mod train;
pub mod walk;
