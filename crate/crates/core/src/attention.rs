//! A single attention layer, materialized so the bounds can be checked against it.
//!
//! Tokens are RMS-normalized without gain so every row has norm exactly `√d`. Scores are
//! computed per head (query head `h` against key head `h/g`) or for the whole layer,
//! `S = Q K_expᵀ / √d_h`, which is the bilinear form `x_iᵀ M x_j / √d_h` with the
//! concatenated interaction matrix.

use serde::{Deserialize, Serialize};

use crate::bounds::worst_case_bound;
use crate::error::{invalid, Error, Result};
use crate::fp8::{decode, geometry_scale, quantize_tensor, OverflowMode, QuantReport};
use crate::spectral::{expand_kv, power_step, AttentionWeights, PowerIterState};
use crate::tensor::{dot, norm, sample_sphere, spectral_norm_oracle, Matrix, Rng, ORACLE_TOL};

/// `L × d` tokens, each row of norm `√d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenBatch {
    x: Matrix,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.x
    }

    /// `L` tokens `√d · u_i` with `u_i` uniform on the sphere.
    pub fn spherical(rng: &mut Rng, len: usize, d: usize) -> Result<TokenBatch> {
        let scale = (d as f64).sqrt();
        let mut data = Vec::with_capacity(len * d);
        for _ in 0..len {
            data.extend(sample_sphere(rng, d)?.data().iter().map(|x| x * scale));
        }
        Ok(TokenBatch {
            x: Matrix::new(len, d, data)?,
        })
    }

    /// Every token multiplied by `c`; the result no longer satisfies the norm invariant and
    /// is meant for equivariance checks.
    pub fn scaled_raw(&self, c: f64) -> TokenBatch {
        TokenBatch {
            x: self.x.scaled(c),
        }
    }
}

/// Rescales each row to norm `√d`.
pub fn normalize_tokens(x: &Matrix) -> Result<TokenBatch> {
    let d = x.cols();
    let target = (d as f64).sqrt();
    let mut data = Vec::with_capacity(x.rows() * d);
    for i in 0..x.rows() {
        let row = x.row(i);
        let n = norm(row);
        if n == 0.0 {
            return Err(Error::ZeroRow { row: i });
        }
        data.extend(row.iter().map(|v| v * target / n));
    }
    Ok(TokenBatch {
        x: Matrix::new(x.rows(), d, data)?,
    })
}

fn check_tokens(xq: &TokenBatch, xk: &TokenBatch, w: &AttentionWeights) -> Result<()> {
    for t in [xq, xk] {
        if t.d() != w.d() {
            return Err(Error::DimensionMismatch {
                op: "attention scores",
                expected: w.d(),
                actual: t.d(),
            });
        }
    }
    Ok(())
}

/// `L_q × L_k` scores of one query head.
pub fn attention_scores(
    xq: &TokenBatch,
    xk: &TokenBatch,
    w: &AttentionWeights,
    head: usize,
) -> Result<Matrix> {
    check_tokens(xq, xk, w)?;
    let hw = w.head(head)?;
    let q = xq.x.matmul(hw.wq())?;
    let k = xk.x.matmul(hw.wk())?;
    Ok(q.matmul_t(&k)?.scaled(1.0 / (w.d_h() as f64).sqrt()))
}

/// Whole-layer scores `Q K_expᵀ / √d_h`, summed over all query heads.
pub fn layer_scores(xq: &TokenBatch, xk: &TokenBatch, w: &AttentionWeights) -> Result<Matrix> {
    check_tokens(xq, xk, w)?;
    let q = xq.x.matmul(w.wq())?;
    let k = xk.x.matmul(&expand_kv(w))?;
    Ok(q.matmul_t(&k)?.scaled(1.0 / (w.d_h() as f64).sqrt()))
}

/// Row-wise softmax, max-shifted.
pub fn softmax_rows(s: &Matrix) -> Matrix {
    let mut data = Vec::with_capacity(s.data().len());
    for i in 0..s.rows() {
        data.extend(softmax(s.row(i)));
    }
    Matrix::new(s.rows(), s.cols(), data).expect("softmax of finite input is finite")
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Rotary embedding parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub d_h: usize,
    pub base: f64,
}

impl RopeConfig {
    pub const DEFAULT_BASE: f64 = 10_000.0;

    pub fn new(d_h: usize, base: f64) -> Result<Self> {
        if d_h == 0 || !d_h.is_multiple_of(2) {
            return Err(invalid(format!("RoPE head dimension must be even, got {d_h}")));
        }
        if !(base > 1.0) {
            return Err(invalid(format!("RoPE base must exceed 1, got {base}")));
        }
        Ok(Self { d_h, base })
    }

    /// `ω_i = base^(−2i/d_h)` for `i = 0 … d_h/2 − 1`.
    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.d_h / 2)
            .map(|i| self.base.powf(-2.0 * i as f64 / self.d_h as f64))
            .collect()
    }
}

/// Block-diagonal rotation for position `m`; block `i` rotates coordinates `(2i, 2i+1)`
/// by `m·ω_i`.
pub fn rope_rotation(m: u64, cfg: &RopeConfig) -> Matrix {
    let n = cfg.d_h;
    let mut r = Matrix::zeros(n, n).into_data();
    for (i, w) in cfg.frequencies().into_iter().enumerate() {
        let (s, c) = (m as f64 * w).sin_cos();
        let (a, b) = (2 * i, 2 * i + 1);
        r[a * n + a] = c;
        r[a * n + b] = -s;
        r[b * n + a] = s;
        r[b * n + b] = c;
    }
    Matrix::new(n, n, r).expect("rotation entries are finite")
}

/// Outcome of comparing position-dependent interaction norms to the unrotated one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeNormReport {
    /// `‖W^Q W^{K⊤}‖₂` without rotation.
    pub sigma_qk: f64,
    /// Rigorous fallback `‖W^Q‖₂ ‖W^K_exp‖₂`.
    pub naive_product: f64,
    /// `max ‖W^Q R_mᵀR_n W^{K⊤}‖₂` over the sampled pairs.
    pub max_effective: f64,
    pub max_ratio: f64,
    pub argmax: (u64, u64),
    pub pairs_checked: usize,
    pub tol: f64,
    /// `max_ratio ≤ 1 + tol`.
    pub within_tol: bool,
    /// `max_effective ≤ naive_product` (up to rounding).
    pub fallback_holds: bool,
}

/// `‖W^Q R_mᵀR_n W^{K⊤}_exp‖₂` for one position pair, with the rotation applied per head.
pub fn rope_effective_norm(
    w: &AttentionWeights,
    cfg: &RopeConfig,
    m: u64,
    n: u64,
) -> Result<f64> {
    if cfg.d_h != w.d_h() {
        return Err(Error::DimensionMismatch {
            op: "rope_effective_norm",
            expected: w.d_h(),
            actual: cfg.d_h,
        });
    }
    // M_{m,n} = W^Q D W_expᵀ = W^Q (W_exp Dᵀ)ᵀ with D = blockdiag(R_mᵀ R_n).
    let rel = rope_rotation(m, cfg).transpose().matmul(&rope_rotation(n, cfg))?;
    let rel_t = rel.transpose();
    let wk_exp = expand_kv(w);
    let d_h = w.d_h();
    let mut rotated = Vec::with_capacity(wk_exp.data().len());
    for i in 0..wk_exp.rows() {
        for block in wk_exp.row(i).chunks_exact(d_h) {
            for c in 0..d_h {
                rotated.push((0..d_h).map(|k| block[k] * rel_t.get(k, c)).sum::<f64>());
            }
        }
    }
    let wk_rot = Matrix::new(wk_exp.rows(), wk_exp.cols(), rotated)?;
    spectral_norm_oracle(&w.wq().matmul_t(&wk_rot)?, ORACLE_TOL)
}

/// Checks `‖W^Q R_mᵀR_n W^{K⊤}‖₂ ≤ (1+tol)‖W^Q W^{K⊤}‖₂` over all pairs drawn from
/// `positions`, plus the always-valid submultiplicative fallback.
///
/// Since `R_mᵀR_n` depends only on `n − m`, each distinct offset is evaluated once.
pub fn rope_effective_norm_check(
    w: &AttentionWeights,
    cfg: &RopeConfig,
    positions: &[u64],
    tol: f64,
) -> Result<RopeNormReport> {
    if positions.is_empty() {
        return Err(invalid("at least one position is required"));
    }
    let sigma_qk = rope_effective_norm(w, cfg, 0, 0)?;
    let naive_product = spectral_norm_oracle(w.wq(), ORACLE_TOL)?
        * spectral_norm_oracle(&expand_kv(w), ORACLE_TOL)?;

    let mut cache: std::collections::BTreeMap<i128, f64> = Default::default();
    let mut max_effective: f64 = 0.0;
    let mut argmax = (positions[0], positions[0]);
    let mut pairs = 0;
    for &m in positions {
        for &n in positions {
            pairs += 1;
            let key = n as i128 - m as i128;
            let val = match cache.get(&key) {
                Some(v) => *v,
                None => {
                    let v = rope_effective_norm(w, cfg, m, n)?;
                    cache.insert(key, v);
                    v
                }
            };
            if val > max_effective {
                max_effective = val;
                argmax = (m, n);
            }
        }
    }
    let max_ratio = if sigma_qk > 0.0 {
        max_effective / sigma_qk
    } else if max_effective == 0.0 {
        1.0
    } else {
        f64::INFINITY
    };
    Ok(RopeNormReport {
        sigma_qk,
        naive_product,
        max_effective,
        max_ratio,
        argmax,
        pairs_checked: pairs,
        tol,
        within_tol: max_ratio <= 1.0 + tol,
        fallback_holds: max_effective <= naive_product * (1.0 + 1e-12),
    })
}

/// What one geometry-aware forward pass did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryPassReport {
    pub sigma: f64,
    pub b_max: f64,
    pub b_alpha: f64,
    pub scale: f64,
    /// `max |S_ij|` over the whole-layer scores.
    pub max_logit: f64,
    /// `max_h max |S^{(h)}_ij|` over individual heads.
    pub max_logit_per_head: f64,
    pub quant: QuantReport,
    /// Output rows poisoned by NaN codes.
    pub nan_rows: usize,
}

/// Output of [`forward_geometry`]. Rows hit by an FP8 NaN are zero-filled in `output`
/// and counted in the report.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub output: Matrix,
    pub report: GeometryPassReport,
}

/// Geometry-aware forward pass with identity value and output projections.
///
/// 1. one warm power step gives `σ`;
/// 2. `scale = α·σ·d/√d_h / (η·448)`;
/// 3. `S = Q K_expᵀ/√d_h` is divided by `scale`, FP8-encoded, decoded back to logits and
///    fed through softmax and `V = X`.
pub fn forward_geometry(
    x: &TokenBatch,
    w: &AttentionWeights,
    state: &mut PowerIterState,
    alpha: f64,
    eta_fp8: f64,
    mode: OverflowMode,
) -> Result<ForwardOutput> {
    let sigma = power_step(w, state)?;
    let b_max = worst_case_bound(sigma, w.d(), w.d_h());
    let b_alpha = alpha * b_max;
    let scale = geometry_scale(sigma, alpha, w.d(), w.d_h(), eta_fp8);
    let s = layer_scores(x, x, w)?;
    let max_logit_per_head = (0..w.n_q())
        .map(|h| attention_scores(x, x, w, h).map(|m| m.max_abs()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);

    // A zero σ means zero weights, hence zero scores; any positive scale will do.
    let effective_scale = if scale > 0.0 { scale } else { 1.0 };
    let (codes, quant) = quantize_tensor(&s, effective_scale, mode)?;
    let logits: Vec<f64> = codes.iter().map(|c| decode(*c) * effective_scale).collect();
    let mut nan_rows = 0;
    let mut probs = Vec::with_capacity(logits.len());
    for row in logits.chunks(s.cols()) {
        if row.iter().any(|v| v.is_nan()) {
            nan_rows += 1;
            probs.extend(std::iter::repeat_n(0.0, row.len()));
            continue;
        }
        probs.extend(softmax(row));
    }
    let p = Matrix::new(s.rows(), s.cols(), probs)?;
    let output = p.matmul(x.matrix())?;
    Ok(ForwardOutput {
        output,
        report: GeometryPassReport {
            sigma,
            b_max,
            b_alpha,
            scale,
            max_logit: s.max_abs(),
            max_logit_per_head,
            quant,
            nan_rows,
        },
    })
}

/// `|⟨a, b⟩|`, used by the RoPE inner-product property checks.
pub fn abs_inner(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b).abs()
}
