//! Segment-wise sparse mixture-of-experts transformer for long-horizon
//! multivariate time-series forecasting.
//!
//! Layout:
//! - [`tensor`]: f64 tensors, reverse-mode autodiff, finite-difference checks
//! - [`data`]: CSV ingestion, splits, windowing, instance normalization, patching
//! - [`backbone`]: patch embedding, RMSNorm, RoPE, grouped-query attention, blocks
//! - [`segmoe`]: segment construction, top-K routing, shared expert, routing stats
//! - [`objective`]: Huber loss, balance loss, metrics
//! - [`trainer`]: AdamW, warmup + cosine schedule, early stopping, checkpoints

pub mod backbone;
pub mod data;
pub mod error;
pub mod objective;
pub mod params;
pub mod segmoe;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
