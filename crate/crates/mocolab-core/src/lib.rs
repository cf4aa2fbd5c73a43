//! Desk-scale workbench for momentum-contrast self-supervised learning with
//! intermediate-layer similarity losses, plus the analysis instruments used to
//! judge the learned features (CKA feature reuse, layer-wise probing, KS
//! output-distribution distance, bootstrap confidence intervals).
//!
//! The crate is organized around a small dense-tensor core with reverse-mode
//! automatic differentiation (`tensor`), a block CNN encoder with per-block
//! taps (`nn`), the SSL objectives (`loss`), the pretraining engine (`train`),
//! downstream evaluation (`eval`), feature analysis (`analysis`), and dataset
//! handling (`data`).
//!
//! With the default `parallel` feature the hot kernels fan out over rayon.
//! Parallelism is only ever applied across disjoint output regions with
//! fixed-order inner reductions, so results are bit-identical to the
//! sequential fallback (`--no-default-features`).

pub mod analysis;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Dtype, Scalar, Tensor};
