//! Synthetic scenario simulator and Monte-Carlo validators.
//!
//! [`run_scenario`] steps a small synthetic model through a transient (pretrained load,
//! checkpoint resume, learning-rate spike, weight spike) and quantizes every step's
//! scores under both scale policies on identical weights and tokens. The Monte-Carlo
//! routines sample the projection statistic `‖Vᵀu‖²` and the overflow event directly.

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_scores, layer_scores, TokenBatch};
use crate::bounds::{
    beta_tail_bound, calibrate, tail_t1, tail_t2, worst_case_bound, CalibrationTarget, ModelDims,
};
use crate::calibration::{AutoAlphaCalibrator, AutoAlphaConfig};
use crate::error::{invalid, Result};
use crate::fp8::{
    geometry_scale, quantize_tensor, DelayedScaleState, OverflowMode, DEFAULT_ETA_DELAYED,
    DEFAULT_ETA_FP8, DEFAULT_HISTORY_LEN,
};
use crate::spectral::{
    cold_start, converge, power_step, spectral_norm, AttentionWeights, Convergence,
    PowerIterState, COLD_START_ITERS,
};
use crate::tensor::{dot, sample_sphere, spectral_norm_oracle, Matrix, Rng, ORACLE_TOL};

/// Version of the serialized report layout.
pub const SCHEMA_VERSION: u32 = 1;

/// Convergence used to settle σ before the first reported step.
pub const SETTLE: Convergence = Convergence {
    tol: 1e-14,
    max_iters: 100_000,
};

/// Gaussian weights, optionally rescaled so `‖W^Q W^{K⊤}_exp‖₂` equals `target_sigma`.
///
/// `σ` is exactly quadratic in a common scalar on `W^Q` and `W^K`, so the rescale is
/// `√(target/σ₀)` with `σ₀` the converged norm of the raw draw.
pub fn synthetic_weights(
    d: usize,
    d_h: usize,
    n_q: usize,
    n_kv: usize,
    target_sigma: Option<f64>,
    rng: &mut Rng,
) -> Result<AttentionWeights> {
    let w = AttentionWeights::gaussian(d, d_h, n_q, n_kv, rng)?.scaled(1.0 / (d as f64).sqrt());
    let Some(target) = target_sigma else {
        return Ok(w);
    };
    if !(target > 0.0 && target.is_finite()) {
        return Err(invalid(format!("target sigma must be positive, got {target}")));
    }
    let seed = rng.next_u64();
    let sigma0 = spectral_norm(&w, &Rng::new(seed), SETTLE)?.sigma;
    Ok(w.scaled((target / sigma0).sqrt()))
}

/// Synthetic model shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub d_h: usize,
    pub n_q: usize,
    pub n_kv: usize,
    pub n_layers: usize,
    pub seq_len: usize,
    /// `σ` of every layer at step 0; `None` keeps the raw `N(0, 1/d)` draw.
    pub target_sigma: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 256,
            d_h: 32,
            n_q: 8,
            n_kv: 8,
            n_layers: 2,
            seq_len: 64,
            target_sigma: Some(20.0),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims()?;
        if self.n_kv == 0 || !self.n_q.is_multiple_of(self.n_kv) {
            return Err(invalid(format!(
                "n_q = {} must be a positive multiple of n_kv = {}",
                self.n_q, self.n_kv
            )));
        }
        if self.seq_len == 0 {
            return Err(invalid("seq_len must be at least 1"));
        }
        Ok(())
    }

    pub fn dims(&self) -> Result<ModelDims> {
        ModelDims::new(self.d, self.d_h, self.n_layers, self.n_q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Stationary weights, primed history.
    Null,
    /// Target-σ weights against an all-ones delayed history.
    PretrainedLoad,
    /// Delayed history and power-iteration state reset at `event_step`.
    CheckpointResume,
    /// Gaussian drift ∝ lr, with `lr_spike` for `spike_duration` steps from `event_step`.
    LrSpike,
    /// All `W^Q`, `W^K` multiplied by `spike_factor` at `event_step`.
    WeightSpike,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Null => "null",
            ScenarioKind::PretrainedLoad => "pretrained_load",
            ScenarioKind::CheckpointResume => "checkpoint_resume",
            ScenarioKind::LrSpike => "lr_spike",
            ScenarioKind::WeightSpike => "weight_spike",
        }
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "null" => ScenarioKind::Null,
            "pretrained_load" => ScenarioKind::PretrainedLoad,
            "checkpoint_resume" => ScenarioKind::CheckpointResume,
            "lr_spike" => ScenarioKind::LrSpike,
            "weight_spike" => ScenarioKind::WeightSpike,
            other => return Err(invalid(format!("unknown scenario {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub kind: ScenarioKind,
    /// Reported steps.
    pub steps: usize,
    /// Step at which the transient hits.
    pub event_step: usize,
    pub spike_factor: f64,
    pub lr_base: f64,
    pub lr_spike: f64,
    pub spike_duration: usize,
    /// Drift standard deviation per unit lr, relative to the RMS weight entry.
    pub drift_gain: f64,
    /// Unreported steps that fill the delayed history before step 0. Ignored for
    /// `pretrained_load`, whose point is the unprimed buffer.
    pub warmup_steps: usize,
    pub tokens: TokenMode,
}

/// Where each step's token batch comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMode {
    /// One batch per layer, reused every step: score changes come from the weights alone.
    #[default]
    Fixed,
    /// A fresh batch per (step, layer); the delayed policy then also sees sampling noise.
    Fresh,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::WeightSpike,
            steps: 20,
            event_step: 10,
            spike_factor: 4.0,
            lr_base: 1e-5,
            lr_spike: 1e-3,
            spike_duration: 3,
            drift_gain: 1000.0,
            warmup_steps: DEFAULT_HISTORY_LEN,
            tokens: TokenMode::Fixed,
        }
    }
}

impl Scenario {
    pub fn new(kind: ScenarioKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid("a scenario needs at least one step"));
        }
        if !(self.spike_factor > 0.0 && self.spike_factor.is_finite()) {
            return Err(invalid(format!("spike factor must be positive, got {}", self.spike_factor)));
        }
        if !(self.lr_base >= 0.0 && self.lr_spike >= 0.0 && self.drift_gain >= 0.0) {
            return Err(invalid("learning rates and drift gain must be non-negative"));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        let in_spike = step >= self.event_step && step < self.event_step + self.spike_duration;
        if in_spike {
            self.lr_spike
        } else {
            self.lr_base
        }
    }
}

/// How the geometry policy picks α.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum AlphaMode {
    /// `α_min` from the rank-aware calibration of the synthetic model.
    Calibrated,
    Fixed { alpha: f64 },
    /// Empirical burn-in; carries no probabilistic guarantee.
    Auto(AutoAlphaConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub alpha: AlphaMode,
    pub delta_star: f64,
    pub eta_fp8: f64,
    pub eta_delayed: f64,
    pub history_len: usize,
    pub overflow_mode: OverflowMode,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            alpha: AlphaMode::Calibrated,
            delta_star: 1e-6,
            eta_fp8: DEFAULT_ETA_FP8,
            eta_delayed: DEFAULT_ETA_DELAYED,
            history_len: DEFAULT_HISTORY_LEN,
            overflow_mode: OverflowMode::FlagNan,
        }
    }
}

/// Everything [`run_scenario`] needs besides the seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub model: ModelConfig,
    pub scenario: Scenario,
    pub policy: PolicyConfig,
}

/// One layer at one step, under both policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub layer: usize,
    pub sigma: f64,
    /// `max |S_ij|` of the whole-layer scores.
    pub max_logit: f64,
    /// `max_h max |S^{(h)}_ij|`.
    pub max_logit_per_head: f64,
    pub b_max: f64,
    pub alpha_geometry: f64,
    /// Auto-α burn-in: scores were materialized to observe slack.
    pub burn_in: bool,
    pub scale_geometry: f64,
    pub scale_delayed: f64,
    pub max_scaled_geometry: f64,
    pub max_scaled_delayed: f64,
    pub overflows_geometry: usize,
    pub overflows_delayed: usize,
    pub utilization_geometry: f64,
    pub utilization_delayed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub overflows_geometry: usize,
    pub overflows_delayed: usize,
    pub steps_with_overflow_geometry: usize,
    pub steps_with_overflow_delayed: usize,
    pub max_scaled_geometry: f64,
    pub max_scaled_delayed: f64,
    /// `calibrated`, `fixed` or `auto_alpha`; the last has no overflow guarantee.
    pub alpha_mode: String,
    /// α in force after burn-in (or throughout, for non-auto modes).
    pub final_alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub seed: u64,
    pub config: SimConfig,
    pub steps: Vec<StepReport>,
    pub summary: RunSummary,
}

impl RunSummary {
    fn from_steps(steps: &[StepReport], alpha_mode: &str, final_alpha: f64) -> Self {
        let mut per_step_g = std::collections::BTreeSet::new();
        let mut per_step_d = std::collections::BTreeSet::new();
        for s in steps {
            if s.overflows_geometry > 0 {
                per_step_g.insert(s.step);
            }
            if s.overflows_delayed > 0 {
                per_step_d.insert(s.step);
            }
        }
        Self {
            overflows_geometry: steps.iter().map(|s| s.overflows_geometry).sum(),
            overflows_delayed: steps.iter().map(|s| s.overflows_delayed).sum(),
            steps_with_overflow_geometry: per_step_g.len(),
            steps_with_overflow_delayed: per_step_d.len(),
            max_scaled_geometry: steps.iter().map(|s| s.max_scaled_geometry).fold(0.0, f64::max),
            max_scaled_delayed: steps.iter().map(|s| s.max_scaled_delayed).fold(0.0, f64::max),
            alpha_mode: alpha_mode.to_string(),
            final_alpha,
        }
    }
}

struct Seeds {
    weights: u64,
    power: u64,
    tokens: u64,
    drift: u64,
    warmup: u64,
}

impl Seeds {
    fn derive(seed: u64) -> Self {
        let mut m = Rng::new(seed);
        Self {
            weights: m.next_u64(),
            power: m.next_u64(),
            tokens: m.next_u64(),
            drift: m.next_u64(),
            warmup: m.next_u64(),
        }
    }
}

fn resolve_alpha(cfg: &SimConfig) -> Result<(f64, Option<AutoAlphaCalibrator>, &'static str)> {
    match cfg.policy.alpha {
        AlphaMode::Calibrated => {
            let target = CalibrationTarget::new(cfg.policy.delta_star, cfg.model.seq_len)?;
            let r = calibrate(&cfg.model.dims()?, &target)?;
            Ok((r.alpha_min, None, "calibrated"))
        }
        AlphaMode::Fixed { alpha } => {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(invalid(format!("alpha must lie in (0, 1], got {alpha}")));
            }
            Ok((alpha, None, "fixed"))
        }
        AlphaMode::Auto(a) => {
            let c = AutoAlphaCalibrator::new(a)?;
            Ok((c.alpha(), Some(c), "auto_alpha"))
        }
    }
}

fn drift(w: &AttentionWeights, lr: f64, gain: f64, rng: &mut Rng) -> Result<AttentionWeights> {
    let perturb = |m: &Matrix, rng: &mut Rng| -> Result<Matrix> {
        let rms = m.frobenius_norm() / (m.data().len() as f64).sqrt();
        let sd = lr * gain * rms;
        let data = m.data().iter().map(|x| x + sd * rng.standard_normal()).collect();
        Matrix::new(m.rows(), m.cols(), data)
    };
    let wq = perturb(w.wq(), rng)?;
    let wk = perturb(w.wk(), rng)?;
    w.with_matrices(wq, wk)
}

fn settle(w: &AttentionWeights, seed: u64) -> Result<PowerIterState> {
    let mut state = cold_start(w, &Rng::new(seed), COLD_START_ITERS)?;
    converge(w, &mut state, SETTLE)?;
    Ok(state)
}

/// Simulates `cfg.scenario` and reports every (step, layer) under both policies.
///
/// Both policies see the same weights and token batches; only the scale rule differs.
/// Deterministic in `(cfg, seed)`.
pub fn run_scenario(cfg: &SimConfig, seed: u64) -> Result<RunReport> {
    cfg.model.validate()?;
    cfg.scenario.validate()?;
    let m = &cfg.model;
    let sc = &cfg.scenario;
    let pol = &cfg.policy;
    let seeds = Seeds::derive(seed);
    let (mut alpha, mut auto, mode_name) = resolve_alpha(cfg)?;

    let mut layers = (0..m.n_layers)
        .map(|l| {
            let mut r = Rng::stream(seeds.weights, l as u64);
            synthetic_weights(m.d, m.d_h, m.n_q, m.n_kv, m.target_sigma, &mut r)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut power = layers
        .iter()
        .enumerate()
        .map(|(l, w)| settle(w, seeds.power.wrapping_add(l as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut delayed = (0..m.n_layers)
        .map(|_| DelayedScaleState::new(pol.history_len, pol.eta_delayed))
        .collect::<Result<Vec<_>>>()?;

    let batch = |base: u64, t: usize, l: usize| -> Result<TokenBatch> {
        let index = match sc.tokens {
            TokenMode::Fixed => l,
            TokenMode::Fresh => t * m.n_layers + l,
        };
        let seed = match sc.tokens {
            TokenMode::Fixed => seeds.tokens,
            TokenMode::Fresh => base,
        };
        TokenBatch::spherical(&mut Rng::stream(seed, index as u64), m.seq_len, m.d)
    };

    if sc.kind != ScenarioKind::PretrainedLoad {
        for t in 0..sc.warmup_steps {
            for (l, w) in layers.iter().enumerate() {
                let x = batch(seeds.warmup, t, l)?;
                delayed[l].update(layer_scores(&x, &x, w)?.max_abs())?;
            }
        }
    }

    let mut drift_rng = Rng::new(seeds.drift);
    let mut steps = Vec::with_capacity(sc.steps * m.n_layers);
    for t in 0..sc.steps {
        match sc.kind {
            ScenarioKind::WeightSpike if t == sc.event_step => {
                layers = layers.iter().map(|w| w.scaled(sc.spike_factor)).collect();
            }
            ScenarioKind::CheckpointResume if t == sc.event_step => {
                for (l, w) in layers.iter().enumerate() {
                    delayed[l].reset();
                    let s = seeds.power.wrapping_add((m.n_layers + l) as u64);
                    power[l] = cold_start(w, &Rng::new(s), COLD_START_ITERS)?;
                }
            }
            ScenarioKind::LrSpike if t > 0 => {
                let lr = sc.lr_at(t);
                layers = layers
                    .iter()
                    .map(|w| drift(w, lr, sc.drift_gain, &mut drift_rng))
                    .collect::<Result<_>>()?;
            }
            _ => {}
        }

        let burn_in = auto.as_ref().is_some_and(|c| !c.is_frozen());
        let mut step_max_slack: f64 = 0.0;
        for (l, w) in layers.iter().enumerate() {
            let x = batch(seeds.tokens, t, l)?;
            let sigma = power_step(w, &mut power[l])?;
            let b_max = worst_case_bound(sigma, m.d, m.d_h);
            let s = layer_scores(&x, &x, w)?;
            let max_logit = s.max_abs();
            let max_logit_per_head = (0..m.n_q)
                .map(|h| attention_scores(&x, &x, w, h).map(|a| a.max_abs()))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold(0.0, f64::max);

            let g_scale = geometry_scale(sigma, alpha, m.d, m.d_h, pol.eta_fp8);
            let d_scale = delayed[l].scale();
            let (_, gq) = quantize_tensor(&s, g_scale, pol.overflow_mode)?;
            let (_, dq) = quantize_tensor(&s, d_scale, pol.overflow_mode)?;
            delayed[l].update(max_logit)?;
            if b_max > 0.0 {
                step_max_slack = step_max_slack.max(max_logit / b_max);
            }

            steps.push(StepReport {
                step: t,
                layer: l,
                sigma,
                max_logit,
                max_logit_per_head,
                b_max,
                alpha_geometry: alpha,
                burn_in,
                scale_geometry: g_scale,
                scale_delayed: d_scale,
                max_scaled_geometry: gq.max_abs_scaled,
                max_scaled_delayed: dq.max_abs_scaled,
                overflows_geometry: gq.overflow_count,
                overflows_delayed: dq.overflow_count,
                utilization_geometry: gq.utilization,
                utilization_delayed: dq.utilization,
            });
        }

        if let Some(c) = auto.as_mut() {
            // One observation per step: the largest slack over layers, B_max = 1.
            if c.observe(step_max_slack, 1.0)? {
                alpha = c.alpha();
            }
        }
    }

    let summary = RunSummary::from_steps(&steps, mode_name, alpha);
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        seed,
        config: cfg.clone(),
        steps,
        summary,
    })
}

/// One tail row of [`ProjectionReport`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub gamma: f64,
    /// `γk/d`.
    pub threshold: f64,
    pub empirical: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub d: usize,
    pub k: usize,
    pub trials: usize,
    pub seed: u64,
    pub mean: f64,
    pub std_err: f64,
    /// `k/d`.
    pub expected_mean: f64,
    pub tails: Vec<TailRow>,
    /// Raw `‖Vᵀu‖²` draws, in trial order.
    #[serde(skip)]
    pub samples: Vec<f64>,
}

/// Minimum trial count for the Monte-Carlo validators.
pub const MIN_TRIALS: usize = 1000;

/// Samples `‖Vᵀu‖²` for one random orthonormal `V ∈ ℝ^{d×k}` and `trials` uniform `u`.
pub fn monte_carlo_projection(
    d: usize,
    k: usize,
    gammas: &[f64],
    trials: usize,
    seed: u64,
) -> Result<ProjectionReport> {
    if k == 0 || k > d {
        return Err(invalid(format!("need 0 < k ≤ d, got k = {k}, d = {d}")));
    }
    if trials < MIN_TRIALS {
        return Err(invalid(format!("at least {MIN_TRIALS} trials required, got {trials}")));
    }
    let mut base = Rng::new(seed);
    let v = Matrix::random_orthonormal(d, k, &mut base)?;
    let vt = v.transpose();
    let stream = base.next_u64();
    let samples = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut r = Rng::stream(stream, i as u64);
            let u = sample_sphere(&mut r, d)?;
            Ok((0..k).map(|j| dot(vt.row(j), u.data()).powi(2)).sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;

    let n = trials as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let tails = gammas
        .iter()
        .map(|&g| {
            let threshold = g * k as f64 / d as f64;
            let hits = samples.iter().filter(|&&x| x >= threshold).count();
            TailRow {
                gamma: g,
                threshold,
                empirical: hits as f64 / n,
                bound: beta_tail_bound(k, g),
            }
        })
        .collect();
    Ok(ProjectionReport {
        d,
        k,
        trials,
        seed,
        mean,
        std_err: (var / n).sqrt(),
        expected_mean: k as f64 / d as f64,
        tails,
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverflowCell {
    pub alpha: f64,
    pub exceed_count: usize,
    pub frequency: f64,
    pub t1: f64,
    pub t2: f64,
    /// `T₁ + T₂`.
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverflowMcReport {
    pub d: usize,
    pub d_h: usize,
    pub seq_len: usize,
    pub gamma: f64,
    pub trials: usize,
    pub seed: u64,
    pub cells: Vec<OverflowCell>,
    /// Per-trial `max_ij |u_iᵀ M w_j| / ‖M‖₂`.
    #[serde(skip)]
    pub ratios: Vec<f64>,
}

/// Frequency of `max_ij |u_iᵀ M w_j| ≥ α‖M‖₂` over random rank-`d_h` matrices
/// `M = U C Vᵀ` (`U`, `V` orthonormal `d × d_h`, `C` Gaussian) and `L + L` unit tokens.
pub fn monte_carlo_overflow(
    d: usize,
    d_h: usize,
    seq_len: usize,
    gamma: f64,
    alphas: &[f64],
    trials: usize,
    seed: u64,
) -> Result<OverflowMcReport> {
    let dims = ModelDims::new(d, d_h, 1, 1)?;
    if seq_len == 0 {
        return Err(invalid("seq_len must be at least 1"));
    }
    if !(gamma > 1.0) {
        return Err(invalid(format!("gamma must exceed 1, got {gamma}")));
    }
    if alphas.iter().any(|a| !(*a > 0.0)) {
        return Err(invalid("every alpha must be positive"));
    }
    if trials < MIN_TRIALS {
        return Err(invalid(format!("at least {MIN_TRIALS} trials required, got {trials}")));
    }
    let ratios = (0..trials)
        .into_par_iter()
        .map(|i| overflow_trial(d, d_h, seq_len, &mut Rng::stream(seed, i as u64)))
        .collect::<Result<Vec<f64>>>()?;
    let t1 = tail_t1(&dims, seq_len, gamma);
    let cells = alphas
        .iter()
        .map(|&alpha| {
            let exceed_count = ratios.iter().filter(|&&r| r >= alpha).count();
            let t2 = tail_t2(&dims, seq_len, gamma, alpha);
            OverflowCell {
                alpha,
                exceed_count,
                frequency: exceed_count as f64 / trials as f64,
                t1,
                t2,
                bound: t1 + t2,
            }
        })
        .collect();
    Ok(OverflowMcReport {
        d,
        d_h,
        seq_len,
        gamma,
        trials,
        seed,
        cells,
        ratios,
    })
}

fn overflow_trial(d: usize, d_h: usize, seq_len: usize, rng: &mut Rng) -> Result<f64> {
    let u = Matrix::random_orthonormal(d, d_h, rng)?;
    let v = Matrix::random_orthonormal(d, d_h, rng)?;
    let c = Matrix::gaussian(d_h, d_h, rng);
    let norm = spectral_norm_oracle(&c, ORACLE_TOL)?;
    if norm == 0.0 {
        return Ok(0.0);
    }
    let tokens = |n: usize, basis: &Matrix, rng: &mut Rng| -> Result<Matrix> {
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(sample_sphere(rng, d)?.data());
        }
        Matrix::new(n, d, data)?.matmul(basis)
    };
    // a_i = Uᵀu_i, b_j = Vᵀw_j; u_iᵀ M w_j = a_iᵀ C b_j.
    let a = tokens(seq_len, &u, rng)?;
    let b = tokens(seq_len, &v, rng)?;
    let s = a.matmul(&c)?.matmul_t(&b)?;
    Ok(s.max_abs() / norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSigma {
    pub layer: usize,
    pub sigma: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Per-layer `σ` with the usual summary columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralProfile {
    pub seed: u64,
    pub layers: Vec<LayerSigma>,
    pub mean: f64,
    pub max: f64,
    pub min: f64,
    pub max_layer: usize,
}

/// Converged `σ` of every layer, each from its own random stream.
pub fn spectral_profile(
    layers: &[AttentionWeights],
    seed: u64,
    crit: Convergence,
) -> Result<SpectralProfile> {
    if layers.is_empty() {
        return Err(invalid("spectral profile needs at least one layer"));
    }
    let rows = layers
        .par_iter()
        .enumerate()
        .map(|(l, w)| {
            let r = spectral_norm(w, &Rng::stream(seed, l as u64), crit)?;
            Ok(LayerSigma {
                layer: l,
                sigma: r.sigma,
                iterations: r.iterations,
                converged: r.converged,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r.sigma).sum::<f64>() / n;
    let (mut max, mut min, mut max_layer) = (f64::NEG_INFINITY, f64::INFINITY, 0);
    for r in &rows {
        if r.sigma > max {
            max = r.sigma;
            max_layer = r.layer;
        }
        min = min.min(r.sigma);
    }
    Ok(SpectralProfile {
        seed,
        layers: rows,
        mean,
        max,
        min,
        max_layer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        SimConfig {
            model: ModelConfig {
                d: 64,
                d_h: 16,
                n_q: 4,
                n_kv: 2,
                n_layers: 2,
                seq_len: 16,
                target_sigma: Some(10.0),
            },
            scenario: Scenario {
                steps: 12,
                event_step: 6,
                ..Scenario::default()
            },
            policy: PolicyConfig::default(),
        }
    }

    #[test]
    fn synthetic_weights_hit_target() {
        let mut rng = Rng::new(1);
        let w = synthetic_weights(32, 8, 4, 2, Some(7.5), &mut rng).unwrap();
        let s = spectral_norm_oracle(&crate::spectral::interaction_matrix(&w), ORACLE_TOL).unwrap();
        assert!((s - 7.5).abs() < 1e-9);
        assert!(synthetic_weights(32, 8, 4, 2, Some(0.0), &mut rng).is_err());
    }

    #[test]
    fn weight_spike_scales_geometry_by_factor_squared() {
        let r = run_scenario(&small(), 5).unwrap();
        for l in 0..2 {
            let at = |t: usize| r.steps.iter().find(|s| s.step == t && s.layer == l).unwrap();
            let ratio = at(6).scale_geometry / at(5).scale_geometry;
            assert!((ratio - 16.0).abs() < 16.0 * 1e-9, "ratio {ratio}");
            assert!(at(6).overflows_delayed > 0);
            assert_eq!(at(6).overflows_geometry, 0);
        }
        assert_eq!(r.summary.overflows_geometry, 0);
    }

    #[test]
    fn null_scenario_has_no_overflows() {
        let mut cfg = small();
        cfg.scenario.kind = ScenarioKind::Null;
        let r = run_scenario(&cfg, 9).unwrap();
        assert_eq!(r.summary.overflows_geometry, 0);
        assert_eq!(r.summary.overflows_delayed, 0);
    }

    #[test]
    fn pretrained_load_overflows_delayed_only() {
        let mut cfg = small();
        cfg.scenario.kind = ScenarioKind::PretrainedLoad;
        let r = run_scenario(&cfg, 2).unwrap();
        assert!(r.steps.iter().filter(|s| s.step == 0).all(|s| s.overflows_delayed > 0));
        assert_eq!(r.summary.overflows_geometry, 0);
    }

    #[test]
    fn checkpoint_resume_overflows_delayed_at_resume() {
        let mut cfg = small();
        cfg.scenario.kind = ScenarioKind::CheckpointResume;
        let r = run_scenario(&cfg, 3).unwrap();
        let before: usize = r.steps.iter().filter(|s| s.step < 6).map(|s| s.overflows_delayed).sum();
        assert_eq!(before, 0);
        assert!(r.steps.iter().filter(|s| s.step == 6).all(|s| s.overflows_delayed > 0));
        assert_eq!(r.summary.overflows_geometry, 0);
    }

    #[test]
    fn lr_spike_grows_sigma() {
        let mut cfg = small();
        cfg.scenario.kind = ScenarioKind::LrSpike;
        let r = run_scenario(&cfg, 4).unwrap();
        let sig = |t: usize| r.steps.iter().find(|s| s.step == t && s.layer == 0).unwrap().sigma;
        assert!(sig(8) > 2.0 * sig(5));
        assert!(r.summary.overflows_delayed > 0);
        assert_eq!(r.summary.overflows_geometry, 0);
    }

    #[test]
    fn reports_are_deterministic() {
        let a = run_scenario(&small(), 11).unwrap();
        let b = run_scenario(&small(), 11).unwrap();
        assert_eq!(a, b);
        let c = run_scenario(&small(), 12).unwrap();
        assert_ne!(a.steps, c.steps);
    }

    #[test]
    fn auto_alpha_freezes_after_burn_in() {
        let mut cfg = small();
        cfg.scenario.kind = ScenarioKind::Null;
        cfg.policy.alpha = AlphaMode::Auto(AutoAlphaConfig {
            alpha0: 1.0,
            t_calib: 4,
            q: 0.99,
            kappa: 2.0,
        });
        let r = run_scenario(&cfg, 6).unwrap();
        assert!(r.steps.iter().filter(|s| s.step < 4).all(|s| s.burn_in && s.alpha_geometry == 1.0));
        let frozen: Vec<f64> = r.steps.iter().filter(|s| s.step >= 4).map(|s| s.alpha_geometry).collect();
        assert!(frozen.iter().all(|a| *a == frozen[0] && *a < 1.0));
        assert_eq!(r.summary.alpha_mode, "auto_alpha");
        assert_eq!(r.summary.final_alpha, frozen[0]);
    }

    #[test]
    fn projection_full_rank_is_one() {
        let r = monte_carlo_projection(8, 8, &[1.5], 1000, 1).unwrap();
        assert!(r.samples.iter().all(|x| (x - 1.0).abs() < 1e-12));
        assert!(monte_carlo_projection(8, 9, &[], 1000, 1).is_err());
        assert!(monte_carlo_projection(8, 2, &[], 10, 1).is_err());
    }

    #[test]
    fn overflow_impossible_at_alpha_one() {
        let r = monte_carlo_overflow(32, 4, 8, 2.0, &[1.0], 1000, 3).unwrap();
        assert_eq!(r.cells[0].exceed_count, 0);
        assert!(r.ratios.iter().all(|x| *x <= 1.0 + 1e-12));
    }

    #[test]
    fn profile_columns() {
        let mut rng = Rng::new(2);
        let w = synthetic_weights(16, 4, 4, 2, Some(1.0), &mut rng).unwrap();
        let layers = vec![w.clone(), w.scaled(2f64.sqrt()), w.scaled(2.0)];
        let p = spectral_profile(&layers, 1, SETTLE).unwrap();
        assert!((p.layers[1].sigma / p.layers[0].sigma - 2.0).abs() < 1e-9);
        assert!((p.layers[2].sigma / p.layers[0].sigma - 4.0).abs() < 1e-9);
        assert_eq!(p.max_layer, 2);
        assert!((p.max / p.min - 4.0).abs() < 1e-9);
        assert!(spectral_profile(&[], 1, SETTLE).is_err());
    }
}
