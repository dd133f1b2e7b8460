//! Closed-form logit bounds and the rank-aware overflow calibration.
//!
//! With tokens on the sphere of radius `√d`, a single head overflows the calibrated bound
//! `B_α = α·σ·d/√d_h` with probability at most `T₁ + T₂`, where
//!
//! ```text
//! T₁ = L · exp(−(d_h/2)·h(γ))            h(γ) = γ − 1 − ln γ
//! T₂ = 2L² · exp(−d²α² / (2γ·d_h))
//! ```
//!
//! A union bound over `N` heads gives `N(T₁+T₂)`. Calibration splits the budget `δ*`
//! between the two terms (half each by default), solves the `T₁` constraint for the
//! smallest `γ`, then the `T₂` constraint for the smallest `α`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Architecture numbers the calibration depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d: usize,
    pub d_h: usize,
    pub n_layers: usize,
    /// Query heads per layer.
    pub n_heads: usize,
}

impl ModelDims {
    pub fn new(d: usize, d_h: usize, n_layers: usize, n_heads: usize) -> Result<Self> {
        let dims = Self {
            d,
            d_h,
            n_layers,
            n_heads,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_h == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(invalid("model dimensions must all be positive"));
        }
        Ok(())
    }

    /// Total head count `N = n_layers · n_heads`.
    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }
}

/// Target failure probability and sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTarget {
    pub delta_star: f64,
    pub seq_len: usize,
}

impl CalibrationTarget {
    pub fn new(delta_star: f64, seq_len: usize) -> Result<Self> {
        let t = Self { delta_star, seq_len };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta_star > 0.0 && self.delta_star < 1.0) {
            return Err(invalid(format!(
                "delta_star must lie in (0, 1), got {}",
                self.delta_star
            )));
        }
        if self.seq_len == 0 {
            return Err(invalid("sequence length must be at least 1"));
        }
        Ok(())
    }
}

/// Solved `(γ, α_min)` pair and the tail terms at that point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub gamma: f64,
    pub alpha_min: f64,
    pub t1: f64,
    pub t2: f64,
    /// Exponent ratio against the rank-agnostic bound, `d / (γ·d_h)`.
    pub improvement: f64,
    /// `N · (T₁ + T₂)`.
    pub overflow_bound: f64,
}

/// Fraction of `δ*` assigned to the `T₁` constraint.
pub const DEFAULT_SPLIT: f64 = 0.5;

/// `‖W^Q‖₂‖W^K‖₂ B_X² / √d_h`.
pub fn naive_bound(sigma_q: f64, sigma_k: f64, b_x: f64, d_h: usize) -> f64 {
    sigma_q * sigma_k * b_x * b_x / (d_h as f64).sqrt()
}

/// `‖W^Q W^{K⊤}‖₂ B_X² / √d_h`; with `B_X = √d` this is `B_max`.
pub fn interaction_bound(sigma_qk: f64, b_x: f64, d_h: usize) -> f64 {
    sigma_qk * b_x * b_x / (d_h as f64).sqrt()
}

/// `B_max = σ_QK · d / √d_h` for tokens normalized to norm `√d`.
pub fn worst_case_bound(sigma_qk: f64, d: usize, d_h: usize) -> f64 {
    sigma_qk * d as f64 / (d_h as f64).sqrt()
}

/// `B_α = α · B_max`.
pub fn calibrated_bound(alpha: f64, b_max: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(invalid(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    Ok(alpha * b_max)
}

/// `h(γ) = γ − 1 − ln γ`, zero at `γ = 1` and increasing on `(1, ∞)`.
pub fn h(gamma: f64) -> f64 {
    gamma - 1.0 - gamma.ln()
}

/// Right-hand side of the `γ` condition: `(2/d_h)·ln(N·L / (split·δ*))`.
fn gamma_rhs(dims: &ModelDims, target: &CalibrationTarget, split: f64) -> f64 {
    let n = dims.total_heads() as f64;
    let l = target.seq_len as f64;
    2.0 / dims.d_h as f64 * (n * l / (split * target.delta_star)).ln()
}

/// Smallest `γ > 1` with `N·T₁ ≤ δ*/2`.
pub fn solve_gamma(dims: &ModelDims, target: &CalibrationTarget) -> Result<f64> {
    solve_gamma_split(dims, target, DEFAULT_SPLIT)
}

/// [`solve_gamma`] with `split·δ*` allotted to `T₁`.
pub fn solve_gamma_split(
    dims: &ModelDims,
    target: &CalibrationTarget,
    split: f64,
) -> Result<f64> {
    dims.validate()?;
    target.validate()?;
    check_split(split)?;
    let rhs = gamma_rhs(dims, target, split);
    if !(rhs > 0.0) {
        return Err(Error::Infeasible(format!(
            "gamma condition has non-positive right-hand side {rhs}"
        )));
    }
    // h is strictly increasing on (1, ∞); grow the bracket until it straddles rhs.
    let mut lo = 1.0;
    let mut hi = 64.0;
    while h(hi) < rhs {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::Infeasible(format!(
                "no finite gamma satisfies h(gamma) >= {rhs}"
            )));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if h(mid) < rhs {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    Ok(hi)
}

/// `α_min = (√(2γ·d_h)/d) · √ln(4N·L²/δ*)`.
pub fn alpha_min(dims: &ModelDims, target: &CalibrationTarget, gamma: f64) -> Result<f64> {
    alpha_min_split(dims, target, gamma, DEFAULT_SPLIT)
}

/// [`alpha_min`] with `(1 − split)·δ*` allotted to `T₂`.
pub fn alpha_min_split(
    dims: &ModelDims,
    target: &CalibrationTarget,
    gamma: f64,
    split: f64,
) -> Result<f64> {
    check_gamma(gamma)?;
    check_split(split)?;
    let n = dims.total_heads() as f64;
    let l = target.seq_len as f64;
    let log_term = (2.0 * n * l * l / ((1.0 - split) * target.delta_star)).ln();
    Ok((2.0 * gamma * dims.d_h as f64).sqrt() / dims.d as f64 * log_term.sqrt())
}

/// `T₁ = L · exp(−(d_h/2)·h(γ))`: probability some key projection is atypically large.
pub fn tail_t1(dims: &ModelDims, seq_len: usize, gamma: f64) -> f64 {
    seq_len as f64 * (-(dims.d_h as f64) / 2.0 * h(gamma)).exp()
}

/// `T₂ = 2L² · exp(−d²α²/(2γ·d_h))`: overflow given typical keys.
pub fn tail_t2(dims: &ModelDims, seq_len: usize, gamma: f64, alpha: f64) -> f64 {
    let l = seq_len as f64;
    let d = dims.d as f64;
    2.0 * l * l * (-(d * d * alpha * alpha) / (2.0 * gamma * dims.d_h as f64)).exp()
}

/// `N · (T₁ + T₂)`.
pub fn overflow_prob_bound(
    dims: &ModelDims,
    target: &CalibrationTarget,
    gamma: f64,
    alpha: f64,
) -> f64 {
    dims.total_heads() as f64
        * (tail_t1(dims, target.seq_len, gamma) + tail_t2(dims, target.seq_len, gamma, alpha))
}

/// Rank-agnostic baseline `2L² · exp(−dα²/2)`.
pub fn rank_agnostic_bound(d: usize, seq_len: usize, alpha: f64) -> f64 {
    let l = seq_len as f64;
    2.0 * l * l * (-(d as f64) * alpha * alpha / 2.0).exp()
}

/// Chernoff bound `exp(−(k/2)·h(γ))` on `Pr(Beta(k/2, (d−k)/2) ≥ γk/d)`.
pub fn beta_tail_bound(k: usize, gamma: f64) -> f64 {
    (-(k as f64) / 2.0 * h(gamma)).exp()
}

/// Both calibration steps with the default even split.
pub fn calibrate(dims: &ModelDims, target: &CalibrationTarget) -> Result<CalibrationResult> {
    calibrate_split(dims, target, DEFAULT_SPLIT)
}

/// Both calibration steps; `split` is the share of `δ*` given to `T₁`.
///
/// Fails with [`Error::Infeasible`] when the resulting `α_min` is not below 1, i.e. the
/// target cannot be met by any calibrated bound tighter than the worst case.
pub fn calibrate_split(
    dims: &ModelDims,
    target: &CalibrationTarget,
    split: f64,
) -> Result<CalibrationResult> {
    let gamma = solve_gamma_split(dims, target, split)?;
    let alpha = alpha_min_split(dims, target, gamma, split)?;
    if !(alpha < 1.0) {
        return Err(Error::Infeasible(format!(
            "alpha_min = {alpha:.4} is not below 1 for d = {}, d_h = {}, N = {}, L = {}, delta* = {}",
            dims.d,
            dims.d_h,
            dims.total_heads(),
            target.seq_len,
            target.delta_star
        )));
    }
    let t1 = tail_t1(dims, target.seq_len, gamma);
    let t2 = tail_t2(dims, target.seq_len, gamma, alpha);
    Ok(CalibrationResult {
        gamma,
        alpha_min: alpha,
        t1,
        t2,
        improvement: dims.d as f64 / (gamma * dims.d_h as f64),
        overflow_bound: dims.total_heads() as f64 * (t1 + t2),
    })
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 1.0) {
        return Err(invalid(format!("gamma must exceed 1, got {gamma}")));
    }
    Ok(())
}

fn check_split(split: f64) -> Result<()> {
    if !(split > 0.0 && split < 1.0) {
        return Err(invalid(format!("split must lie in (0, 1), got {split}")));
    }
    Ok(())
}

/// Named architectures used throughout the examples and reports.
pub mod presets {
    use super::ModelDims;

    pub const GPT2_XL: ModelDims = ModelDims {
        d: 1600,
        d_h: 64,
        n_layers: 48,
        n_heads: 25,
    };
    pub const MISTRAL_7B: ModelDims = ModelDims {
        d: 4096,
        d_h: 128,
        n_layers: 32,
        n_heads: 32,
    };
    pub const LLAMA2_13B: ModelDims = ModelDims {
        d: 5120,
        d_h: 128,
        n_layers: 40,
        n_heads: 40,
    };
    pub const LLAMA2_70B: ModelDims = ModelDims {
        d: 8192,
        d_h: 128,
        n_layers: 80,
        n_heads: 64,
    };

    pub const ALL: [(&str, ModelDims); 4] = [
        ("gpt2-xl", GPT2_XL),
        ("mistral-7b", MISTRAL_7B),
        ("llama2-13b", LLAMA2_13B),
        ("llama2-70b", LLAMA2_70B),
    ];

    pub fn by_name(name: &str) -> Option<ModelDims> {
        ALL.iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, d)| *d)
    }
}
