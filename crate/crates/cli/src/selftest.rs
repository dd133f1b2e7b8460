//! Built-in consistency checks: codec, adjoint identities, implicit/explicit agreement,
//! calibration soundness.

use std::time::Instant;

use geoscale::bounds::{calibrate, overflow_prob_bound, presets, CalibrationTarget};
use geoscale::fp8::{decode, encode, finite_codebook, Fp8Code, OverflowMode, E4M3_MAX};
use geoscale::spectral::{
    backward_product, forward_product, interaction_matrix, spectral_norm, AttentionWeights,
    Convergence,
};
use geoscale::tensor::{sample_sphere, spectral_norm_oracle, Rng, ORACLE_TOL};
use serde::Serialize;

#[derive(Debug, Clone, Copy, Default)]
pub struct SelftestOptions {
    /// Fault injection: perturbs one codebook entry so the codec check must fail.
    pub corrupt_codebook: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub millis: u128,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelftestReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

type Check = fn(&SelftestOptions) -> Result<String, String>;

pub fn run(opts: &SelftestOptions) -> SelftestReport {
    let checks: [(&'static str, Check); 6] = [
        ("codec_round_trip", codec_round_trip),
        ("codec_nearest_value", codec_nearest_value),
        ("codec_overflow_edges", codec_overflow_edges),
        ("adjoint_identity", adjoint_identity),
        ("implicit_explicit_agreement", implicit_explicit_agreement),
        ("calibration_soundness", calibration_soundness),
    ];
    let checks = checks
        .into_iter()
        .map(|(name, f)| {
            let t = Instant::now();
            let r = f(opts);
            CheckResult {
                name,
                passed: r.is_ok(),
                detail: r.unwrap_or_else(|e| e),
                millis: t.elapsed().as_millis(),
            }
        })
        .collect();
    SelftestReport {
        seed: opts.seed,
        checks,
    }
}

fn codebook(opts: &SelftestOptions) -> Vec<(Fp8Code, f64)> {
    let mut book = finite_codebook();
    if opts.corrupt_codebook {
        if let Some(e) = book.iter_mut().find(|(c, _)| c.bits() == 0x38) {
            e.1 = 1.0625;
        }
    }
    book
}

fn codec_round_trip(opts: &SelftestOptions) -> Result<String, String> {
    let book = codebook(opts);
    if book.len() != 254 {
        return Err(format!("expected 254 finite codes, found {}", book.len()));
    }
    for (code, value) in &book {
        let back = encode(*value, OverflowMode::FlagNan).code;
        if back != *code || decode(*code).to_bits() != value.to_bits() {
            return Err(format!(
                "code {:#04x}: table value {value}, decodes to {}, re-encodes to {:#04x}",
                code.bits(),
                decode(*code),
                back.bits()
            ));
        }
    }
    for bits in [0x7Fu8, 0xFF] {
        if !decode(Fp8Code(bits)).is_nan() {
            return Err(format!("{bits:#04x} should decode to NaN"));
        }
    }
    if !encode(f64::NAN, OverflowMode::FlagNan).code.is_nan() {
        return Err("NaN input should encode to a NaN code".into());
    }
    Ok("256 codes".into())
}

fn codec_nearest_value(opts: &SelftestOptions) -> Result<String, String> {
    let book = codebook(opts);
    let mut rng = Rng::new(opts.seed);
    let n = 100_000;
    for _ in 0..n {
        let x = (rng.uniform() * 2.0 - 1.0) * E4M3_MAX;
        let got = decode(encode(x, OverflowMode::FlagNan).code);
        let best = book.iter().map(|(_, v)| (v - x).abs()).fold(f64::INFINITY, f64::min);
        if (got - x).abs() != best {
            return Err(format!("x = {x}: encoded to {got}, nearest distance {best}"));
        }
    }
    Ok(format!("{n} samples"))
}

fn codec_overflow_edges(_: &SelftestOptions) -> Result<String, String> {
    if encode(448.0, OverflowMode::FlagNan).overflowed {
        return Err("448 must not overflow".into());
    }
    if !encode(449.0, OverflowMode::FlagNan).overflowed {
        return Err("449 must overflow".into());
    }
    if decode(encode(449.0, OverflowMode::Saturate).code) != 448.0 {
        return Err("saturating 449 must give 448".into());
    }
    Ok("448 / 449".into())
}

fn random_gqa(rng: &mut Rng) -> AttentionWeights {
    let d_h = 2 + (rng.uniform() * 7.0) as usize;
    let n_kv = 1 + (rng.uniform() * 3.0) as usize;
    let g = [1, 2, 4][(rng.uniform() * 3.0) as usize];
    let d = 4 + (rng.uniform() * 60.0) as usize;
    AttentionWeights::gaussian(d, d_h, n_kv * g, n_kv, rng)
        .expect("shapes are consistent")
        .scaled(1.0 / (d as f64).sqrt())
}

fn adjoint_identity(opts: &SelftestOptions) -> Result<String, String> {
    let mut rng = Rng::new(opts.seed ^ 0xA5);
    let n = 50;
    for i in 0..n {
        let w = random_gqa(&mut rng);
        let u = sample_sphere(&mut rng, w.d()).map_err(|e| e.to_string())?;
        let v = sample_sphere(&mut rng, w.d()).map_err(|e| e.to_string())?;
        let lhs = forward_product(&w, &v).map_err(|e| e.to_string())?.dot(&u);
        let rhs = backward_product(&w, &u).map_err(|e| e.to_string())?.dot(&v);
        if (lhs - rhs).abs() > 1e-12 {
            return Err(format!("config {i}: ⟨Mv,u⟩ = {lhs}, ⟨v,Mᵀu⟩ = {rhs}"));
        }
    }
    Ok(format!("{n} configs"))
}

fn implicit_explicit_agreement(opts: &SelftestOptions) -> Result<String, String> {
    let mut rng = Rng::new(opts.seed ^ 0x5A);
    let crit = Convergence {
        tol: 1e-14,
        max_iters: 200_000,
    };
    let n = 20;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let w = random_gqa(&mut rng);
        let implicit = spectral_norm(&w, &Rng::new(i), crit).map_err(|e| e.to_string())?.sigma;
        let explicit = spectral_norm_oracle(&interaction_matrix(&w), ORACLE_TOL).map_err(|e| e.to_string())?;
        let diff = (implicit - explicit).abs();
        worst = worst.max(diff);
        if diff > 1e-8 {
            return Err(format!("config {i}: implicit {implicit}, explicit {explicit}"));
        }
    }
    Ok(format!("{n} configs, worst |Δσ| = {worst:.3e}"))
}

fn calibration_soundness(_: &SelftestOptions) -> Result<String, String> {
    let target = CalibrationTarget::new(1e-6, 1024).map_err(|e| e.to_string())?;
    for (name, dims) in presets::ALL {
        let r = calibrate(&dims, &target).map_err(|e| format!("{name}: {e}"))?;
        let p = overflow_prob_bound(&dims, &target, r.gamma, r.alpha_min);
        if p > target.delta_star + 1e-9 {
            return Err(format!("{name}: N(T1+T2) = {p} exceeds δ*"));
        }
    }
    Ok(format!("{} presets", presets::ALL.len()))
}
