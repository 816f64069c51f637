//! Joint dense semantic correspondence and photorealistic attribute transfer.
//!
//! The pipeline recurrently refines a per-pixel affine transformation field
//! from blended correlation volumes while synthesizing attribute-transferred
//! images through confidence-weighted neural patch blending, and trains
//! weakly from image pairs with a truncated cross-entropy matching loss.
//!
//! Module map:
//! - [`tensor`] — reverse-mode tape over `ndarray` (conv, bilinear sampling,
//!   window volumes) with finite-difference checking.
//! - [`backbone`] — feature pyramid extraction and the droplink-gated decoder.
//! - [`correlation`] — NCC / blended correlation volumes, confidence maps,
//!   winner-takes-all baseline.
//! - [`matching`] — differentiable warping, the residual field predictor and
//!   recurrent accumulation.
//! - [`blending`] — confidence-weighted neural patch blending and stylization.
//! - [`losses`] — matching, content, attribute, patch-softmax and smoothness
//!   objectives.
//! - [`pipeline`] — the recurrent loop, two-stage training, checkpoints.
//! - [`data`] — synthetic pair generation, photometric perturbation, dataset
//!   ingestion.
//! - [`metrics`] — PCK, endpoint error, flow accuracy, mask-transfer IoU.

pub mod backbone;
pub mod blending;
pub mod checkpoint;
pub mod correlation;
pub mod data;
pub mod error;
pub mod flowio;
pub mod imageio;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
