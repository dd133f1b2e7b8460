//! Command implementations. Each returns the text destined for stdout so tests can call
//! them without spawning a process.

use std::fmt::Write as _;
use std::path::PathBuf;

use geoscale::bounds::{calibrate_split, presets, CalibrationResult, CalibrationTarget, ModelDims};
use geoscale::harness::{
    monte_carlo_overflow, monte_carlo_projection, run_scenario, spectral_profile, RunReport,
    OverflowMcReport, ProjectionReport, SpectralProfile, SCHEMA_VERSION,
};
use geoscale::spectral::{interaction_matrix, AttentionWeights, Convergence};
use geoscale::tensor::{spectral_norm_oracle, ORACLE_TOL};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::tensor_file::read_matrix;

/// Round-trip-safe rendering: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    Geometry,
    Delayed,
    #[default]
    Both,
    AutoAlpha,
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationRow {
    pub schema_version: u32,
    pub model: String,
    pub dims: ModelDims,
    pub delta_star: f64,
    pub seq_len: usize,
    pub split: f64,
    #[serde(flatten)]
    pub result: CalibrationResult,
}

/// What to calibrate: a preset, every preset, or explicit dims.
#[derive(Debug, Clone)]
pub enum CalibrationModels {
    All,
    Preset(String),
    Custom(ModelDims),
}

pub fn calibrate_rows(
    models: &CalibrationModels,
    delta_star: f64,
    seq_len: usize,
    split: f64,
) -> Result<Vec<CalibrationRow>> {
    let target = CalibrationTarget::new(delta_star, seq_len)?;
    let list: Vec<(String, ModelDims)> = match models {
        CalibrationModels::All => presets::ALL.iter().map(|(n, d)| (n.to_string(), *d)).collect(),
        CalibrationModels::Preset(name) => {
            let dims = presets::by_name(name).ok_or_else(|| {
                let known: Vec<&str> = presets::ALL.iter().map(|(n, _)| *n).collect();
                CliError::Config(format!("unknown model {name:?}; known: {}", known.join(", ")))
            })?;
            vec![(name.clone(), dims)]
        }
        CalibrationModels::Custom(dims) => vec![("custom".into(), *dims)],
    };
    list.into_iter()
        .map(|(model, dims)| {
            Ok(CalibrationRow {
                schema_version: SCHEMA_VERSION,
                model,
                dims,
                delta_star,
                seq_len,
                split,
                result: calibrate_split(&dims, &target, split)?,
            })
        })
        .collect()
}

pub fn cmd_calibrate(
    models: &CalibrationModels,
    delta_star: f64,
    seq_len: usize,
    split: f64,
    format: Format,
) -> Result<String> {
    let rows = calibrate_rows(models, delta_star, seq_len, split)?;
    match format {
        Format::Json => {
            let text = if rows.len() == 1 {
                serde_json::to_string_pretty(&rows[0])?
            } else {
                serde_json::to_string_pretty(&rows)?
            };
            Ok(text + "\n")
        }
        Format::Csv => {
            let mut out = String::from(
                "model,d,d_h,n_layers,n_heads,delta_star,seq_len,gamma,alpha_min,t1,t2,improvement,overflow_bound\n",
            );
            for r in rows {
                let c = &r.result;
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    r.model,
                    r.dims.d,
                    r.dims.d_h,
                    r.dims.n_layers,
                    r.dims.n_heads,
                    fmt_f64(r.delta_star),
                    r.seq_len,
                    fmt_f64(c.gamma),
                    fmt_f64(c.alpha_min),
                    fmt_f64(c.t1),
                    fmt_f64(c.t2),
                    fmt_f64(c.improvement),
                    fmt_f64(c.overflow_bound)
                );
            }
            Ok(out)
        }
    }
}

/// One layer's weight files.
#[derive(Debug, Clone)]
pub struct LayerFiles {
    pub wq: PathBuf,
    pub wk: PathBuf,
}

impl std::str::FromStr for LayerFiles {
    type Err = String;

    /// `WQ_PATH,WK_PATH`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (q, k) = s
            .split_once(',')
            .ok_or_else(|| format!("expected WQ_PATH,WK_PATH, got {s:?}"))?;
        Ok(Self {
            wq: q.into(),
            wk: k.into(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct SpectralArgs {
    pub layers: Vec<LayerFiles>,
    pub d_h: usize,
    pub n_q: usize,
    pub n_kv: usize,
    pub check_gqa: bool,
    pub seed: u64,
    pub crit: Convergence,
    pub format: Format,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectralOutput {
    pub schema_version: u32,
    pub seed: u64,
    pub profile: Option<SpectralProfile>,
    /// Explicit-expansion `σ` per layer, when requested.
    pub explicit_sigma: Option<Vec<f64>>,
}

pub fn load_layers(args: &SpectralArgs) -> Result<Vec<AttentionWeights>> {
    args.layers
        .iter()
        .map(|f| {
            let wq = read_matrix(&f.wq)?;
            let wk = read_matrix(&f.wk)?;
            AttentionWeights::new(args.d_h, args.n_q, args.n_kv, wq, wk).map_err(|e| {
                CliError::Config(format!("{} / {}: {e}", f.wq.display(), f.wk.display()))
            })
        })
        .collect()
}

pub fn spectral_output(args: &SpectralArgs) -> Result<SpectralOutput> {
    let layers = load_layers(args)?;
    if layers.is_empty() {
        return Ok(SpectralOutput {
            schema_version: SCHEMA_VERSION,
            seed: args.seed,
            profile: None,
            explicit_sigma: args.check_gqa.then(Vec::new),
        });
    }
    let profile = spectral_profile(&layers, args.seed, args.crit)?;
    let explicit_sigma = if args.check_gqa {
        Some(
            layers
                .iter()
                .map(|w| spectral_norm_oracle(&interaction_matrix(w), ORACLE_TOL))
                .collect::<geoscale::Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(SpectralOutput {
        schema_version: SCHEMA_VERSION,
        seed: args.seed,
        profile: Some(profile),
        explicit_sigma,
    })
}

pub fn cmd_spectral(args: &SpectralArgs) -> Result<String> {
    let out = spectral_output(args)?;
    match args.format {
        Format::Json => Ok(serde_json::to_string_pretty(&out)? + "\n"),
        Format::Csv => {
            let mut s = String::from("layer,sigma,iters,converged");
            if args.check_gqa {
                s.push_str(",explicit_sigma,abs_diff");
            }
            s.push('\n');
            for (i, row) in out.profile.iter().flat_map(|p| p.layers.iter()).enumerate() {
                let _ = write!(s, "{},{},{},{}", row.layer, fmt_f64(row.sigma), row.iterations, row.converged);
                if let Some(ex) = &out.explicit_sigma {
                    let _ = write!(s, ",{},{}", fmt_f64(ex[i]), fmt_f64((row.sigma - ex[i]).abs()));
                }
                s.push('\n');
            }
            Ok(s)
        }
    }
}

/// The step log as CSV; `policy` selects which columns appear.
pub fn steps_csv(report: &RunReport, policy: Policy) -> String {
    let geometry = policy != Policy::Delayed;
    let delayed = policy != Policy::Geometry;
    let mut header = vec!["seed", "step", "layer", "sigma", "max_logit", "max_logit_per_head", "b_max"];
    if geometry {
        header.extend([
            "alpha_geometry",
            "burn_in",
            "scale_geometry",
            "max_scaled_geometry",
            "overflows_geometry",
            "utilization_geometry",
        ]);
    }
    if delayed {
        header.extend([
            "scale_delayed",
            "max_scaled_delayed",
            "overflows_delayed",
            "utilization_delayed",
        ]);
    }
    let mut out = header.join(",");
    out.push('\n');
    for s in &report.steps {
        let mut cols = vec![
            report.seed.to_string(),
            s.step.to_string(),
            s.layer.to_string(),
            fmt_f64(s.sigma),
            fmt_f64(s.max_logit),
            fmt_f64(s.max_logit_per_head),
            fmt_f64(s.b_max),
        ];
        if geometry {
            cols.extend([
                fmt_f64(s.alpha_geometry),
                s.burn_in.to_string(),
                fmt_f64(s.scale_geometry),
                fmt_f64(s.max_scaled_geometry),
                s.overflows_geometry.to_string(),
                fmt_f64(s.utilization_geometry),
            ]);
        }
        if delayed {
            cols.extend([
                fmt_f64(s.scale_delayed),
                fmt_f64(s.max_scaled_delayed),
                s.overflows_delayed.to_string(),
                fmt_f64(s.utilization_delayed),
            ]);
        }
        out.push_str(&cols.join(","));
        out.push('\n');
    }
    out
}

/// Runs the configured scenario; both policies are always simulated.
pub fn simulate(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    Ok(run_scenario(&cfg.sim(), cfg.seed)?)
}

pub fn report_json(report: &RunReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

pub fn cmd_mc_projection(
    d: usize,
    k: usize,
    gammas: &[f64],
    trials: usize,
    seed: u64,
) -> Result<(ProjectionReport, String)> {
    let r = monte_carlo_projection(d, k, gammas, trials, seed)?;
    let text = serde_json::to_string_pretty(&serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "projection": &r,
    }))? + "\n";
    Ok((r, text))
}

#[derive(Debug, Clone)]
pub struct OverflowArgs {
    pub d: usize,
    pub d_h: usize,
    pub seq_len: usize,
    pub delta_star: f64,
    pub gamma: Option<f64>,
    pub alphas: Option<Vec<f64>>,
    pub trials: usize,
    pub seed: u64,
}

/// Defaults γ and α to the single-head calibration and sweeps `α_min·{½, 1, 2}`.
pub fn cmd_mc_overflow(args: &OverflowArgs) -> Result<(OverflowMcReport, String)> {
    let dims = ModelDims::new(args.d, args.d_h, 1, 1)?;
    let target = CalibrationTarget::new(args.delta_star, args.seq_len)?;
    let cal = calibrate_split(&dims, &target, geoscale::bounds::DEFAULT_SPLIT).ok();
    let gamma = match (args.gamma, &cal) {
        (Some(g), _) => g,
        (None, Some(c)) => c.gamma,
        (None, None) => geoscale::bounds::solve_gamma(&dims, &target)?,
    };
    let alphas = match (&args.alphas, &cal) {
        (Some(a), _) => a.clone(),
        (None, Some(c)) => vec![c.alpha_min / 2.0, c.alpha_min, 2.0 * c.alpha_min],
        (None, None) => {
            return Err(CliError::Config(
                "calibration is infeasible for these dims; pass --alphas".into(),
            ))
        }
    };
    let r = monte_carlo_overflow(args.d, args.d_h, args.seq_len, gamma, &alphas, args.trials, args.seed)?;
    let text = serde_json::to_string_pretty(&serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "delta_star": args.delta_star,
        "alpha_min": cal.as_ref().map(|c| c.alpha_min),
        "overflow": &r,
    }))? + "\n";
    Ok((r, text))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_significant_digits_round_trip() {
        for x in [0.1, 1.0 / 3.0, 16.000000000000004, 1e-300, 448.0] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
            let mantissa = s.split('e').next().unwrap().replace(['.', '-'], "");
            assert_eq!(mantissa.len(), 17);
        }
    }

    #[test]
    fn calibrate_preset_and_infeasible() {
        let rows = calibrate_rows(&CalibrationModels::Preset("gpt2-xl".into()), 1e-6, 1024, 0.5).unwrap();
        assert!((rows[0].result.gamma - 2.985).abs() < 1e-3);
        let tiny = ModelDims::new(16, 8, 1, 2).unwrap();
        assert!(calibrate_rows(&CalibrationModels::Custom(tiny), 1e-6, 1024, 0.5).is_err());
        assert!(calibrate_rows(&CalibrationModels::All, 1.0, 1024, 0.5).is_err());
        assert!(calibrate_rows(&CalibrationModels::Preset("gpt-5".into()), 1e-6, 1024, 0.5).is_err());
    }

    #[test]
    fn layer_files_parse() {
        let l: LayerFiles = "a.gawt,b.gawt".parse().unwrap();
        assert_eq!(l.wq, PathBuf::from("a.gawt"));
        assert!("a.gawt".parse::<LayerFiles>().is_err());
    }
}
