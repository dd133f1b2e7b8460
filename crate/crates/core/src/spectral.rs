//! Implicit power iteration for `σ_QK = ‖W^Q W^{K⊤}‖₂`.
//!
//! The interaction matrix `M` is never formed. A forward product `M v` is
//! `W^Q · repeat_blocks(W^{K⊤} v)` and a backward product `Mᵀ u` is
//! `W^K · sum_groups(W^{Q⊤} u)`; for standard multi-head attention the group size is one
//! and both helpers are the identity. `u`, `v` persist across calls so that a single step
//! per forward pass tracks slowly drifting weights.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{matvec, matvec_t, sample_sphere, Matrix, Rng, Vector};

/// Iterations used to bring random vectors close to the top singular pair.
pub const COLD_START_ITERS: usize = 5;

/// Per-layer query and key projections.
///
/// `wq` is `d × (n_q·d_h)` and `wk` is `d × (n_kv·d_h)`; query head `h` reads key head
/// `h / g` with `g = n_q / n_kv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    d: usize,
    d_h: usize,
    n_q: usize,
    n_kv: usize,
    wq: Matrix,
    wk: Matrix,
}

impl AttentionWeights {
    pub fn new(d_h: usize, n_q: usize, n_kv: usize, wq: Matrix, wk: Matrix) -> Result<Self> {
        if d_h == 0 || n_q == 0 || n_kv == 0 {
            return Err(invalid("d_h, n_q and n_kv must be positive"));
        }
        if !n_q.is_multiple_of(n_kv) {
            return Err(invalid(format!(
                "n_q = {n_q} is not a multiple of n_kv = {n_kv}"
            )));
        }
        if wq.rows() != wk.rows() {
            return Err(Error::DimensionMismatch {
                op: "AttentionWeights::new (rows)",
                expected: wq.rows(),
                actual: wk.rows(),
            });
        }
        if wq.cols() != n_q * d_h {
            return Err(Error::DimensionMismatch {
                op: "AttentionWeights::new (W^Q cols)",
                expected: n_q * d_h,
                actual: wq.cols(),
            });
        }
        if wk.cols() != n_kv * d_h {
            return Err(Error::DimensionMismatch {
                op: "AttentionWeights::new (W^K cols)",
                expected: n_kv * d_h,
                actual: wk.cols(),
            });
        }
        Ok(Self {
            d: wq.rows(),
            d_h,
            n_q,
            n_kv,
            wq,
            wk,
        })
    }

    /// Single-head (or MHA) weights with `n_q = n_kv = 1`.
    pub fn single_head(wq: Matrix, wk: Matrix) -> Result<Self> {
        let d_h = wq.cols();
        Self::new(d_h, 1, 1, wq, wk)
    }

    /// I.i.d. Gaussian projections.
    pub fn gaussian(d: usize, d_h: usize, n_q: usize, n_kv: usize, rng: &mut Rng) -> Result<Self> {
        let wq = Matrix::gaussian(d, n_q * d_h, rng);
        let wk = Matrix::gaussian(d, n_kv * d_h, rng);
        Self::new(d_h, n_q, n_kv, wq, wk)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn d_h(&self) -> usize {
        self.d_h
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn n_kv(&self) -> usize {
        self.n_kv
    }

    pub fn group_size(&self) -> usize {
        self.n_q / self.n_kv
    }

    pub fn wq(&self) -> &Matrix {
        &self.wq
    }

    pub fn wk(&self) -> &Matrix {
        &self.wk
    }

    /// Key/value head read by query head `head`.
    pub fn kv_head(&self, head: usize) -> usize {
        head / self.group_size()
    }

    /// The `d × d_h` slices for one query head and the key head it reads.
    pub fn head(&self, head: usize) -> Result<AttentionWeights> {
        if head >= self.n_q {
            return Err(invalid(format!(
                "head {head} out of range for {} query heads",
                self.n_q
            )));
        }
        let kv = self.kv_head(head);
        let wq = self.wq.column_block(head * self.d_h, (head + 1) * self.d_h)?;
        let wk = self.wk.column_block(kv * self.d_h, (kv + 1) * self.d_h)?;
        Self::new(self.d_h, 1, 1, wq, wk)
    }

    /// Both projections multiplied by `s`; `σ_QK` scales by `s²`.
    pub fn scaled(&self, s: f64) -> AttentionWeights {
        AttentionWeights {
            wq: self.wq.scaled(s),
            wk: self.wk.scaled(s),
            ..self.clone()
        }
    }

    /// Rebuild with new projections of identical shape.
    pub fn with_matrices(&self, wq: Matrix, wk: Matrix) -> Result<AttentionWeights> {
        Self::new(self.d_h, self.n_q, self.n_kv, wq, wk)
    }
}

/// Replicates each `d_h`-block of `z` `g` times: block `i` lands at output blocks
/// `i·g … i·g+g−1`.
pub fn repeat_blocks(z: &Vector, g: usize, d_h: usize) -> Result<Vector> {
    if d_h == 0 || g == 0 || !z.len().is_multiple_of(d_h) {
        return Err(invalid(format!(
            "length {} is not a multiple of block size {d_h}",
            z.len()
        )));
    }
    if g == 1 {
        return Ok(z.clone());
    }
    let mut out = Vec::with_capacity(z.len() * g);
    for block in z.data().chunks_exact(d_h) {
        for _ in 0..g {
            out.extend_from_slice(block);
        }
    }
    Ok(Vector::from_vec_unchecked(out))
}

/// Adjoint of [`repeat_blocks`]: sums each consecutive group of `g` blocks.
pub fn sum_groups(y: &Vector, g: usize, d_h: usize) -> Result<Vector> {
    if d_h == 0 || g == 0 || !y.len().is_multiple_of(g * d_h) {
        return Err(invalid(format!(
            "length {} is not a multiple of group width {}",
            y.len(),
            g * d_h
        )));
    }
    if g == 1 {
        return Ok(y.clone());
    }
    let mut out = Vec::with_capacity(y.len() / g);
    for group in y.data().chunks_exact(g * d_h) {
        let mut acc = vec![0.0; d_h];
        for block in group.chunks_exact(d_h) {
            acc.iter_mut().zip(block).for_each(|(a, b)| *a += b);
        }
        out.extend_from_slice(&acc);
    }
    Ok(Vector::from_vec_unchecked(out))
}

/// `M v` computed implicitly.
pub fn forward_product(w: &AttentionWeights, v: &Vector) -> Result<Vector> {
    let z = matvec_t(&w.wk, v)?;
    let z = repeat_blocks(&z, w.group_size(), w.d_h)?;
    matvec(&w.wq, &z)
}

/// `Mᵀ u` computed implicitly.
pub fn backward_product(w: &AttentionWeights, u: &Vector) -> Result<Vector> {
    let y = matvec_t(&w.wq, u)?;
    let y = sum_groups(&y, w.group_size(), w.d_h)?;
    matvec(&w.wk, &y)
}

/// `W^K` with each `d_h`-column block replicated `g` times (`d × n_q·d_h`).
///
/// Only used to build reference results; the power iteration never calls it.
pub fn expand_kv(w: &AttentionWeights) -> Matrix {
    let g = w.group_size();
    if g == 1 {
        return w.wk.clone();
    }
    let d_h = w.d_h;
    let cols = w.n_q * d_h;
    let mut data = Vec::with_capacity(w.d * cols);
    for i in 0..w.d {
        let row = w.wk.row(i);
        for block in row.chunks_exact(d_h) {
            for _ in 0..g {
                data.extend_from_slice(block);
            }
        }
    }
    Matrix::new(w.d, cols, data).expect("expanded key matrix has consistent shape")
}

/// The explicit `d × d` interaction matrix `W^Q W^{K⊤}_exp`. Reference use only.
pub fn interaction_matrix(w: &AttentionWeights) -> Matrix {
    w.wq.matmul_t(&expand_kv(w))
        .expect("W^Q and expanded W^K share column count")
}

/// Persistent power iteration vectors and the latest `σ` estimate.
#[derive(Debug, Clone)]
pub struct PowerIterState {
    u: Vector,
    v: Vector,
    sigma: f64,
    initialized: bool,
    steps_run: usize,
    restart_rng: Rng,
}

impl PowerIterState {
    /// Uninitialized state; [`cold_start`] or [`PowerIterState::initialize`] must run first.
    pub fn new(d: usize, rng: Rng) -> Self {
        Self {
            u: Vector::zeros(d),
            v: Vector::zeros(d),
            sigma: 0.0,
            initialized: false,
            steps_run: 0,
            restart_rng: rng,
        }
    }

    /// Draws random unit `u`, `v`.
    pub fn initialize(&mut self) -> Result<()> {
        let d = self.u.len();
        self.u = sample_sphere(&mut self.restart_rng, d)?;
        self.v = sample_sphere(&mut self.restart_rng, d)?;
        self.sigma = 0.0;
        self.initialized = true;
        Ok(())
    }

    pub fn u(&self) -> &Vector {
        &self.u
    }

    pub fn v(&self) -> &Vector {
        &self.v
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn steps_run(&self) -> usize {
        self.steps_run
    }

    /// Drops the vectors, as after loading a checkpoint without optimizer state.
    pub fn reset(&mut self) {
        let d = self.u.len();
        self.u = Vector::zeros(d);
        self.v = Vector::zeros(d);
        self.sigma = 0.0;
        self.initialized = false;
    }
}

/// One forward/backward power iteration; returns the new `σ` estimate `‖M v‖`.
///
/// If `M v` vanishes, `v` is redrawn once; a second zero is accepted as `σ = 0`.
pub fn power_step(w: &AttentionWeights, state: &mut PowerIterState) -> Result<f64> {
    if !state.initialized {
        return Err(invalid("power iteration state is not initialized"));
    }
    if state.v.len() != w.d {
        return Err(Error::DimensionMismatch {
            op: "power_step",
            expected: w.d,
            actual: state.v.len(),
        });
    }

    let mut u_raw = forward_product(w, &state.v)?;
    let mut sigma = u_raw.norm();
    if sigma == 0.0 {
        state.v = sample_sphere(&mut state.restart_rng, w.d)?;
        u_raw = forward_product(w, &state.v)?;
        sigma = u_raw.norm();
        if sigma == 0.0 {
            state.sigma = 0.0;
            state.steps_run += 1;
            return Ok(0.0);
        }
    }
    state.u = u_raw.scaled(1.0 / sigma);
    state.sigma = sigma;

    let v_raw = backward_product(w, &state.u)?;
    let v_norm = v_raw.norm();
    if v_norm > 0.0 {
        state.v = v_raw.scaled(1.0 / v_norm);
    }
    state.steps_run += 1;
    Ok(sigma)
}

/// Random unit vectors refined by `iters` power steps.
pub fn cold_start(w: &AttentionWeights, rng: &Rng, iters: usize) -> Result<PowerIterState> {
    if iters == 0 {
        return Err(invalid("cold start needs at least one iteration"));
    }
    let mut state = PowerIterState::new(w.d, rng.clone());
    state.initialize()?;
    for _ in 0..iters {
        power_step(w, &mut state)?;
    }
    Ok(state)
}

/// Stopping rule for "run to convergence" contexts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    /// Relative change in `σ` between consecutive steps.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for Convergence {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergeReport {
    pub sigma: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Steps an initialized state until the relative change in `σ` drops below `crit.tol`.
pub fn converge(
    w: &AttentionWeights,
    state: &mut PowerIterState,
    crit: Convergence,
) -> Result<ConvergeReport> {
    let mut prev = power_step(w, state)?;
    for i in 1..crit.max_iters {
        let sigma = power_step(w, state)?;
        if (sigma - prev).abs() <= crit.tol * sigma || sigma == 0.0 {
            return Ok(ConvergeReport {
                sigma,
                iterations: i + 1,
                converged: true,
            });
        }
        prev = sigma;
    }
    Ok(ConvergeReport {
        sigma: state.sigma,
        iterations: crit.max_iters,
        converged: false,
    })
}

/// Cold start followed by [`converge`].
pub fn spectral_norm(w: &AttentionWeights, rng: &Rng, crit: Convergence) -> Result<ConvergeReport> {
    let mut state = cold_start(w, rng, COLD_START_ITERS)?;
    let mut report = converge(w, &mut state, crit)?;
    report.iterations += COLD_START_ITERS;
    Ok(report)
}

/// Which interaction matrix a layer's `σ` refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `‖W^Q W^{K⊤}_exp‖₂` over the concatenated heads.
    #[default]
    Concatenated,
    /// `max_h ‖W^Q_h W^{K⊤}_{h/g}‖₂` over individual heads.
    PerHeadMax,
}

/// Converged `σ` of every query head's own `d × d` interaction matrix.
pub fn per_head_sigmas(w: &AttentionWeights, rng: &Rng, crit: Convergence) -> Result<Vec<f64>> {
    (0..w.n_q)
        .map(|h| {
            let head = w.head(h)?;
            let r = Rng::stream(rng.seed(), h as u64);
            spectral_norm(&head, &r, crit).map(|rep| rep.sigma)
        })
        .collect()
}

/// Converged `σ` for the requested mode.
pub fn layer_sigma(
    w: &AttentionWeights,
    mode: SigmaMode,
    rng: &Rng,
    crit: Convergence,
) -> Result<f64> {
    match mode {
        SigmaMode::Concatenated => spectral_norm(w, rng, crit).map(|r| r.sigma),
        SigmaMode::PerHeadMax => {
            Ok(per_head_sigmas(w, rng, crit)?.into_iter().fold(0.0, f64::max))
        }
    }
}
