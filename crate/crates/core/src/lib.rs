//! Geometry-aware FP8 scale calibration for transformer attention.
//!
//! The attention logit `S_ij = x_iᵀ M x_j / √d_h` with `M = W^Q W^{K⊤}` is bounded by
//! `‖M‖₂ · d / √d_h` once tokens are normalized to norm `√d`. This crate estimates `‖M‖₂`
//! by implicit power iteration (including grouped-query attention), turns it into a
//! calibrated FP8 scale, and provides the machinery to check the resulting guarantees:
//!
//! - [`tensor`]: dense matrices, a Gram/Jacobi spectral-norm oracle, sphere sampling.
//! - [`spectral`]: implicit power iteration over `W^Q`/`W^K` without forming `M`.
//! - [`bounds`]: closed-form logit bounds and the rank-aware `(γ, α_min)` calibration.
//! - [`fp8`]: bit-exact E4M3 codec, tensor quantization, geometry and delayed scaling.
//! - [`attention`]: token normalization, per-head scores, RoPE, the geometry forward pass.
//! - [`calibration`]: auto-α burn-in calibration from observed slack ratios.
//! - [`harness`]: transient-scenario simulator and Monte-Carlo validators.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod bounds;
pub mod calibration;
pub mod error;
pub mod fp8;
pub mod harness;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
