use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geoscale::bounds::{ModelDims, DEFAULT_SPLIT};
use geoscale::calibration::AutoAlphaConfig;
use geoscale::harness::{AlphaMode, ScenarioKind};
use geoscale::spectral::Convergence;
use geoscale_cli::commands::{
    cmd_calibrate, cmd_mc_overflow, cmd_mc_projection, cmd_spectral, report_json, simulate,
    steps_csv, CalibrationModels, Format, LayerFiles, OverflowArgs, Policy, SpectralArgs,
};
use geoscale_cli::config::RunConfig;
use geoscale_cli::selftest::{self, SelftestOptions};
use geoscale_cli::{CliError, Result};

/// Geometry-aware FP8 scale calibration tools.
#[derive(Debug, Parser)]
#[command(name = "geoscale", version)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve (γ, α_min) for a model and overflow target.
    Calibrate(CalibrateArgs),
    /// Per-layer spectral norms from GAWT weight files.
    Spectral(SpectralCliArgs),
    /// Run a transient scenario under both scale policies.
    Simulate(SimulateArgs),
    /// Monte-Carlo validation of the concentration bounds.
    #[command(subcommand)]
    Mc(McCommand),
    /// Built-in consistency checks.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Preset name (gpt2-xl, mistral-7b, llama2-13b, llama2-70b).
    #[arg(long, conflicts_with_all = ["all", "d"])]
    model: Option<String>,
    /// Calibrate every preset.
    #[arg(long)]
    all: bool,
    #[arg(long, requires_all = ["d_h", "layers", "heads"])]
    d: Option<usize>,
    #[arg(long)]
    d_h: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long, default_value_t = 1e-6)]
    delta_star: f64,
    #[arg(long, default_value_t = 1024)]
    seq_len: usize,
    /// Share of δ* assigned to the key-typicality term.
    #[arg(long, default_value_t = DEFAULT_SPLIT)]
    split: f64,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Debug, Args)]
struct SpectralCliArgs {
    /// One layer as `WQ_PATH,WK_PATH`; repeat per layer.
    #[arg(long = "layer")]
    layers: Vec<LayerFiles>,
    #[arg(long)]
    d_h: usize,
    #[arg(long, default_value_t = 1)]
    n_q: usize,
    /// Defaults to `n_q` (plain multi-head).
    #[arg(long)]
    n_kv: Option<usize>,
    /// Also compute σ of the explicitly expanded product.
    #[arg(long)]
    check_gqa: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
    #[arg(long, default_value_t = 100_000)]
    max_iters: usize,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<ScenarioKind>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    event_step: Option<usize>,
    #[arg(long)]
    spike_factor: Option<f64>,
    /// Fixed α instead of the calibrated α_min.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    delta_star: Option<f64>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Policy::Both)]
    policy: Policy,
    /// Burn-in length for `--policy auto-alpha`.
    #[arg(long)]
    burn_in: Option<usize>,
    /// Stdout format.
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the CSV step log here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum McCommand {
    /// Distribution of ‖Vᵀu‖² for uniform u.
    Projection {
        #[arg(long, default_value_t = 1600)]
        d: usize,
        #[arg(long, default_value_t = 64)]
        k: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [1.5, 2.0, 3.0])]
        gammas: Vec<f64>,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Empirical overflow frequency against T1 + T2.
    Overflow {
        #[arg(long, default_value_t = 256)]
        d: usize,
        #[arg(long, default_value_t = 8)]
        d_h: usize,
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
        #[arg(long, default_value_t = 1e-6)]
        delta_star: f64,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fault injection for testing the self-test itself.
    #[arg(long, hide = true)]
    corrupt_codebook: bool,
}

fn write_file(path: &PathBuf, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn run_simulate(a: SimulateArgs) -> Result<String> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(k) = a.scenario {
        cfg.scenario.kind = k;
    }
    if let Some(s) = a.steps {
        cfg.scenario.steps = s;
    }
    if let Some(s) = a.event_step {
        cfg.scenario.event_step = s;
    }
    if let Some(f) = a.spike_factor {
        cfg.scenario.spike_factor = f;
    }
    if let Some(d) = a.delta_star {
        cfg.policy.delta_star = d;
    }
    if let Some(l) = a.seq_len {
        cfg.model.seq_len = l;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(alpha) = a.alpha {
        cfg.policy.alpha = AlphaMode::Fixed { alpha };
    }
    if a.policy == Policy::AutoAlpha {
        let mut auto = match cfg.policy.alpha {
            AlphaMode::Auto(c) => c,
            _ => AutoAlphaConfig::default(),
        };
        if let Some(t) = a.burn_in {
            auto.t_calib = t;
        }
        cfg.policy.alpha = AlphaMode::Auto(auto);
    }
    let report = simulate(&cfg)?;
    let json = report_json(&report)?;
    let csv = steps_csv(&report, a.policy);
    if let Some(p) = &a.out {
        write_file(p, &json)?;
    }
    if let Some(p) = &a.csv {
        write_file(p, &csv)?;
    }
    Ok(match a.format {
        Format::Json => json,
        Format::Csv => csv,
    })
}

fn run(cli: Cli) -> Result<(String, bool)> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let out = match cli.command {
        Command::Calibrate(a) => {
            let models = if a.all {
                CalibrationModels::All
            } else if let Some(m) = a.model {
                CalibrationModels::Preset(m)
            } else if let (Some(d), Some(d_h), Some(l), Some(h)) = (a.d, a.d_h, a.layers, a.heads) {
                CalibrationModels::Custom(ModelDims::new(d, d_h, l, h)?)
            } else {
                return Err(CliError::Config(
                    "give --model, --all, or --d/--d-h/--layers/--heads".into(),
                ));
            };
            cmd_calibrate(&models, a.delta_star, a.seq_len, a.split, a.format)?
        }
        Command::Spectral(a) => cmd_spectral(&SpectralArgs {
            layers: a.layers,
            d_h: a.d_h,
            n_q: a.n_q,
            n_kv: a.n_kv.unwrap_or(a.n_q),
            check_gqa: a.check_gqa,
            seed: a.seed,
            crit: Convergence {
                tol: a.tol,
                max_iters: a.max_iters,
            },
            format: a.format,
        })?,
        Command::Simulate(a) => run_simulate(a)?,
        Command::Mc(McCommand::Projection {
            d,
            k,
            gammas,
            trials,
            seed,
        }) => cmd_mc_projection(d, k, &gammas, trials, seed)?.1,
        Command::Mc(McCommand::Overflow {
            d,
            d_h,
            seq_len,
            delta_star,
            gamma,
            alphas,
            trials,
            seed,
        }) => {
            cmd_mc_overflow(&OverflowArgs {
                d,
                d_h,
                seq_len,
                delta_star,
                gamma,
                alphas,
                trials,
                seed,
            })?
            .1
        }
        Command::Selftest(a) => {
            let report = selftest::run(&SelftestOptions {
                corrupt_codebook: a.corrupt_codebook,
                seed: a.seed,
            });
            for c in report.checks.iter().filter(|c| !c.passed) {
                eprintln!("FAIL {}: {}", c.name, c.detail);
            }
            let ok = report.all_passed();
            return Ok((serde_json::to_string_pretty(&report)? + "\n", ok));
        }
    };
    Ok((out, true))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok((out, ok)) => {
            print!("{out}");
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
