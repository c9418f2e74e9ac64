//! Dual-branch same-resolution segmentation networks built from atrous
//! convolutions, plus the static analysis that keeps their dilation schedules
//! honest.
//!
//! The crate provides:
//!
//! - [`config`]: declarative model descriptions, dilation-schedule notation,
//!   and static parameter / multiply-accumulate accounting.
//! - [`blocks`]: the differentiable building blocks (ConvBNAct, MFACB,
//!   MSA/MSAF fusion, SPASPP, heads) over a small f64 autodiff engine.
//! - [`backbone`]: assembly of the blocks into full segmentation and
//!   classification models, with checkpointing.
//! - [`rf`]: receptive-field arithmetic, an impulse-response oracle, the
//!   padding-fraction metric, and the three-guideline dilation linter.
//! - [`data`] / [`train`] / [`eval`]: desk-scale dataset handling, SGD
//!   training with a poly learning-rate schedule, and mIoU evaluation.

pub mod backbone;
pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod plan;
pub mod rf;
pub mod tensor;
pub mod train;

pub use error::{DsnetError, Result};
