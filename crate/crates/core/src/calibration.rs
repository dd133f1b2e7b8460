//! Empirical α from a burn-in phase.
//!
//! During burn-in the score matrix is materialized and each step's slack ratio
//! `r_t = max|S| / B_max` is recorded. Afterwards `α = Quantile_q(r) · κ` is frozen and
//! scaling goes back to depending on the weights alone. Outputs of this mode carry no
//! probabilistic guarantee.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Burn-in parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoAlphaConfig {
    /// α used while the burn-in is running.
    pub alpha0: f64,
    pub t_calib: usize,
    pub q: f64,
    pub kappa: f64,
}

impl Default for AutoAlphaConfig {
    fn default() -> Self {
        Self {
            alpha0: 1.0,
            t_calib: 100,
            q: 0.9999,
            kappa: 1.0,
        }
    }
}

impl AutoAlphaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(invalid(format!("quantile must lie in (0, 1), got {}", self.q)));
        }
        if !(self.kappa >= 1.0 && self.kappa.is_finite()) {
            return Err(invalid(format!("kappa must be at least 1, got {}", self.kappa)));
        }
        if self.t_calib == 0 {
            return Err(invalid("burn-in needs at least one step"));
        }
        if !(self.alpha0 > 0.0 && self.alpha0 <= 1.0) {
            return Err(invalid(format!("alpha0 must lie in (0, 1], got {}", self.alpha0)));
        }
        Ok(())
    }
}

/// Slack ratios in step order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SlackBuffer {
    ratios: Vec<f64>,
}

impl SlackBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn len(&self) -> usize {
        self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratios.is_empty()
    }

    /// Appends `max_logit / b_max`.
    pub fn record(&mut self, max_logit: f64, b_max: f64) -> Result<f64> {
        let r = slack_ratio(max_logit, b_max)?;
        self.ratios.push(r);
        Ok(r)
    }
}

/// `max_logit / b_max`.
pub fn slack_ratio(max_logit: f64, b_max: f64) -> Result<f64> {
    if !(b_max > 0.0 && b_max.is_finite()) {
        return Err(invalid(format!("B_max must be positive, got {b_max}")));
    }
    if !(max_logit >= 0.0 && max_logit.is_finite()) {
        return Err(invalid(format!("max logit must be non-negative, got {max_logit}")));
    }
    Ok(max_logit / b_max)
}

/// Functional form of [`SlackBuffer::record`].
pub fn record_slack(mut buf: SlackBuffer, max_logit: f64, b_max: f64) -> Result<SlackBuffer> {
    buf.record(max_logit, b_max)?;
    Ok(buf)
}

/// Empirical quantile, linearly interpolated between order statistics at position
/// `(n − 1)·q`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InsufficientSamples { have: 0, need: 1 });
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(invalid(format!("quantile must lie in (0, 1), got {q}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// `Quantile_q(buf) · κ`, once at least `t_calib` ratios exist.
pub fn finalize_alpha(buf: &SlackBuffer, cfg: &AutoAlphaConfig) -> Result<f64> {
    cfg.validate()?;
    if buf.len() < cfg.t_calib {
        return Err(Error::InsufficientSamples {
            have: buf.len(),
            need: cfg.t_calib,
        });
    }
    Ok(quantile(buf.ratios(), cfg.q)? * cfg.kappa)
}

/// Burn-in, then frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AutoAlphaPhase {
    BurnIn(SlackBuffer),
    Frozen { alpha: f64, samples: usize },
}

/// Drives the burn-in and freezes α exactly once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoAlphaCalibrator {
    cfg: AutoAlphaConfig,
    phase: AutoAlphaPhase,
}

impl AutoAlphaCalibrator {
    pub fn new(cfg: AutoAlphaConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            phase: AutoAlphaPhase::BurnIn(SlackBuffer::new()),
        })
    }

    pub fn config(&self) -> &AutoAlphaConfig {
        &self.cfg
    }

    pub fn phase(&self) -> &AutoAlphaPhase {
        &self.phase
    }

    pub fn is_frozen(&self) -> bool {
        matches!(self.phase, AutoAlphaPhase::Frozen { .. })
    }

    /// α in force for the current step.
    pub fn alpha(&self) -> f64 {
        match &self.phase {
            AutoAlphaPhase::BurnIn(_) => self.cfg.alpha0,
            AutoAlphaPhase::Frozen { alpha, .. } => *alpha,
        }
    }

    /// Records one burn-in observation and freezes when the buffer is full. Observations
    /// after freezing are ignored. Returns `true` if this call froze α.
    pub fn observe(&mut self, max_logit: f64, b_max: f64) -> Result<bool> {
        let AutoAlphaPhase::BurnIn(buf) = &mut self.phase else {
            return Ok(false);
        };
        buf.record(max_logit, b_max)?;
        if buf.len() < self.cfg.t_calib {
            return Ok(false);
        }
        let alpha = finalize_alpha(buf, &self.cfg)?;
        if !(alpha > 0.0) {
            return Err(invalid("calibrated alpha is zero; burn-in saw only zero logits"));
        }
        self.phase = AutoAlphaPhase::Frozen {
            alpha,
            samples: buf.len(),
        };
        Ok(true)
    }
}
