//! Unified map-prior encoder.
//!
//! Fuses any subset of four map priors (vectorized HD, vectorized SD,
//! satellite raster, rasterized SD) into bird's-eye-view feature tokens.
//! The vector branch pre-aligns polylines with a predicted SE(2) correction,
//! tokenizes them with sinusoidal point features and attends to them with a
//! log-confidence bias; the raster branch runs a FiLM-conditioned backbone,
//! micro-aligns with a differentiable affine warp and mixes sources with
//! presence-normalized gates. Both branches meet in a zero-initialized
//! residual so an untrained model reproduces the prior-free baseline.
//!
//! Besides the model the crate carries the synthetic benchmark, the
//! real-data ingestion path, metrics and the two-stage training harness.

pub mod conventions;
pub mod data;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod fusion;
pub mod gate;
pub mod geometry;
pub mod gradcheck;
pub mod head;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plot;
pub mod raster_encoder;
pub mod synth;
pub mod train;
pub mod vector_encoder;

pub use error::{Error, Result};
