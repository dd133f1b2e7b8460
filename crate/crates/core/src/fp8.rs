//! Software E4M3 and the two scale policies.
//!
//! Layout: 1 sign bit, 4 exponent bits (bias 7), 3 mantissa bits. There are no infinities;
//! `S.1111.111` is NaN, so the largest finite magnitude is `S.1111.110 = 2⁸·1.75 = 448`.
//! Exponent field zero encodes subnormals `m·2⁻⁹`. Rounding is to nearest, ties to even.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Matrix;

/// Largest finite E4M3 magnitude.
pub const E4M3_MAX: f64 = 448.0;
/// Smallest positive subnormal, `2⁻⁹`.
pub const E4M3_MIN_SUBNORMAL: f64 = 1.0 / 512.0;
/// Canonical positive NaN byte.
pub const NAN_CODE: u8 = 0x7F;
/// Default fraction of the FP8 range the geometry-aware scale targets.
pub const DEFAULT_ETA_FP8: f64 = 0.8;
/// Default delayed-scaling margin.
pub const DEFAULT_ETA_DELAYED: f64 = 0.9;
/// Default delayed-scaling history length.
pub const DEFAULT_HISTORY_LEN: usize = 16;

/// Parameters of the emulated format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fp8Spec {
    pub sign_bits: u32,
    pub exp_bits: u32,
    pub mantissa_bits: u32,
    pub exp_bias: i32,
    pub has_inf: bool,
}

impl Fp8Spec {
    pub const E4M3: Fp8Spec = Fp8Spec {
        sign_bits: 1,
        exp_bits: 4,
        mantissa_bits: 3,
        exp_bias: 7,
        has_inf: false,
    };

    /// `2^(15 − bias) · (1 + 6/8)`; the all-ones mantissa at the top exponent is NaN.
    pub fn max_finite(&self) -> f64 {
        let top_exp = (1 << self.exp_bits) - 1 - self.exp_bias;
        let mant_steps = (1u32 << self.mantissa_bits) as f64;
        2f64.powi(top_exp) * (1.0 + (mant_steps - 2.0) / mant_steps)
    }
}

impl Default for Fp8Spec {
    fn default() -> Self {
        Self::E4M3
    }
}

/// Raw E4M3 byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fp8Code(pub u8);

impl Fp8Code {
    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn is_nan(self) -> bool {
        self.0 & 0x7F == 0x7F
    }

    pub fn is_negative(self) -> bool {
        self.0 & 0x80 != 0
    }

    pub fn exponent_field(self) -> u8 {
        (self.0 >> 3) & 0x0F
    }

    pub fn mantissa_field(self) -> u8 {
        self.0 & 0x07
    }

    pub fn to_f64(self) -> f64 {
        decode(self)
    }
}

/// What to do with magnitudes above 448.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverflowMode {
    /// Produce the NaN code, as unguarded FP8 casts do.
    #[default]
    FlagNan,
    /// Clamp to ±448.
    Saturate,
}

/// Result of encoding one value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Encoded {
    pub code: Fp8Code,
    pub overflowed: bool,
}

/// Round-to-nearest-even encode. `|x| > 448` overflows regardless of mode; NaN maps to NaN
/// without counting as an overflow.
pub fn encode(x: f64, mode: OverflowMode) -> Encoded {
    if x.is_nan() {
        return Encoded {
            code: Fp8Code(NAN_CODE),
            overflowed: false,
        };
    }
    let sign: u8 = if x.is_sign_negative() { 0x80 } else { 0 };
    let a = x.abs();
    if a > E4M3_MAX {
        let code = match mode {
            OverflowMode::FlagNan => sign | NAN_CODE,
            OverflowMode::Saturate => sign | 0x7E,
        };
        return Encoded {
            code: Fp8Code(code),
            overflowed: true,
        };
    }
    Encoded {
        code: Fp8Code(sign | magnitude_code(a)),
        overflowed: false,
    }
}

/// Magnitude bits for `0 ≤ a ≤ 448`.
///
/// Codes are monotone in magnitude, so rounding `a` to an integer multiple of the local
/// spacing and adding the binade offset lands on the right code, including the carry into
/// the next binade when the mantissa rounds up to 8.
fn magnitude_code(a: f64) -> u8 {
    const MIN_NORMAL: f64 = 1.0 / 64.0;
    if a < MIN_NORMAL {
        // Subnormal spacing 2⁻⁹; m = 8 is exactly the smallest normal.
        return (a * 512.0).round_ties_even() as u8;
    }
    let e = ((a.to_bits() >> 52) & 0x7FF) as i32 - 1023;
    let spacing = 2f64.powi(e - 3);
    let n = (a / spacing).round_ties_even() as i32; // in [8, 16]
    ((e + 6) * 8 + n) as u8
}

/// Exact value of a code; NaN for the two NaN bytes.
pub fn decode(c: Fp8Code) -> f64 {
    if c.is_nan() {
        return f64::NAN;
    }
    let exp = c.exponent_field() as i32;
    let mant = c.mantissa_field() as f64;
    let mag = if exp == 0 {
        mant * E4M3_MIN_SUBNORMAL
    } else {
        (1.0 + mant / 8.0) * 2f64.powi(exp - 7)
    };
    if c.is_negative() {
        -mag
    } else {
        mag
    }
}

/// All 254 finite codes with their values, in byte order.
pub fn finite_codebook() -> Vec<(Fp8Code, f64)> {
    (0..=255u8)
        .map(Fp8Code)
        .filter(|c| !c.is_nan())
        .map(|c| (c, decode(c)))
        .collect()
}

/// Per-tensor overflow accounting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub overflow_count: usize,
    pub max_abs_input: f64,
    /// Largest `|x / scale|`, before clamping or NaN substitution.
    pub max_abs_scaled: f64,
    /// `min(max_abs_scaled / 448, 1)`.
    pub utilization: f64,
}

/// Encodes every `S_ij / scale`.
pub fn quantize_tensor(
    s: &Matrix,
    scale: f64,
    mode: OverflowMode,
) -> Result<(Vec<Fp8Code>, QuantReport)> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(invalid(format!("scale must be positive and finite, got {scale}")));
    }
    let mut codes = Vec::with_capacity(s.data().len());
    let mut overflow_count = 0;
    let mut max_abs_input: f64 = 0.0;
    let mut max_abs_scaled: f64 = 0.0;
    for &x in s.data() {
        let scaled = x / scale;
        max_abs_input = max_abs_input.max(x.abs());
        max_abs_scaled = max_abs_scaled.max(scaled.abs());
        let e = encode(scaled, mode);
        overflow_count += e.overflowed as usize;
        codes.push(e.code);
    }
    Ok((
        codes,
        QuantReport {
            overflow_count,
            max_abs_input,
            max_abs_scaled,
            utilization: (max_abs_scaled / E4M3_MAX).min(1.0),
        },
    ))
}

/// Geometry-aware scale `(α·σ_QK·d/√d_h) / (η_fp8·448)`.
pub fn geometry_scale(sigma_qk: f64, alpha: f64, d: usize, d_h: usize, eta_fp8: f64) -> f64 {
    alpha * sigma_qk * d as f64 / (d_h as f64).sqrt() / (eta_fp8 * E4M3_MAX)
}

/// History-based baseline: `max(history) / (448·η)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayedScaleState {
    history: VecDeque<f64>,
    eta: f64,
}

impl DelayedScaleState {
    /// A fresh buffer of `len` entries, all 1.0.
    pub fn new(len: usize, eta: f64) -> Result<Self> {
        if len == 0 {
            return Err(invalid("history length must be at least 1"));
        }
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(invalid(format!("eta must lie in (0, 1], got {eta}")));
        }
        Ok(Self {
            history: std::iter::repeat_n(1.0, len).collect(),
            eta,
        })
    }

    pub fn history(&self) -> impl Iterator<Item = f64> + '_ {
        self.history.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn max_history(&self) -> f64 {
        self.history.iter().copied().fold(0.0, f64::max)
    }

    /// Scale for the next step, from observations up to the previous one.
    pub fn scale(&self) -> f64 {
        self.max_history() / (E4M3_MAX * self.eta)
    }

    /// Pushes the newest observed amax and evicts the oldest.
    pub fn update(&mut self, observed_max: f64) -> Result<()> {
        if !(observed_max >= 0.0) {
            return Err(invalid(format!(
                "observed max must be non-negative, got {observed_max}"
            )));
        }
        self.history.pop_front();
        self.history.push_back(observed_max);
        Ok(())
    }

    /// Back to the all-ones buffer.
    pub fn reset(&mut self) {
        self.history.iter_mut().for_each(|h| *h = 1.0);
    }
}

impl Default for DelayedScaleState {
    fn default() -> Self {
        Self::new(DEFAULT_HISTORY_LEN, DEFAULT_ETA_DELAYED).expect("default parameters are valid")
    }
}
