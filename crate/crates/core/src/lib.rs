//! Training library for factorized neural layers: spectral initialization,
//! Frobenius-norm decay, overcomplete factorizations, layer-wise adaptive
//! optimizers, and the diagnostics used to validate them — all at desk scale
//! with deterministic 64-bit arithmetic.

pub mod config;
pub mod data;
pub mod diag;
pub mod factor;
pub mod layers;
pub mod model;
pub mod opt;
pub mod reg;
pub mod rng;
pub mod svd;
pub mod tensor;
pub mod train;
