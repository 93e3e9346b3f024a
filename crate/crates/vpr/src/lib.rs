//! Two-stage visual place recognition.
//!
//! Stage one retrieves candidate places by L2 distance between unit-norm
//! global descriptors (GeM-pooled ViT feature maps). Stage two re-ranks the
//! top candidates by counting mutual nearest neighbors between dense local
//! feature grids produced by a transposed-convolution head. The backbone is
//! a plain ViT whose weights stay frozen during training; lightweight
//! adapters inserted into each block plus the local head are the only parts
//! that learn. No RANSAC or other geometric verification is involved.
//!
//! Everything is built from scratch on f64 scalars: forward kernels, their
//! hand-derived backward passes, Adam, the mining/training loop, the binary
//! index and checkpoint formats, and a synthetic image world for end-to-end
//! experiments on a laptop.
//!
//! Runnable walkthroughs live in `examples/`:
//!
//! * `cargo run --example synthetic_world` -- render a geo-tagged toy world
//! * `cargo run --example extract_features` -- global + local features
//! * `cargo run --example two_stage_retrieval` -- retrieval and re-ranking
//! * `cargo run --example adapter_training` -- triplet training on adapters
//! * `cargo run --example gradient_check` -- finite-difference verification
//! * `cargo run --example rerank_benchmark` -- matcher scaling measurements
//! * `cargo run --example attention_heatmap` -- feature-map heat maps
//! * `cargo run --example parameter_report` -- tunable vs frozen param counts
//!
//! The same capabilities are scriptable through the thin `vpr` binary.

pub mod backbone;
pub mod bench;
pub mod config;
pub mod dataset;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod grid;
pub mod heads;
pub mod heatmap;
pub mod imageio;
pub mod index;
pub mod loss;
pub mod manifest;
pub mod matcher;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod wire;
pub mod world;

pub use error::{Error, Result};
