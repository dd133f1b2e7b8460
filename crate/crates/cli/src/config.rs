//! JSON run configuration.
//!
//! Every field is optional; omitted ones take the defaults below. Unknown keys are
//! rejected so a typo cannot silently fall back to a default.
//!
//! | key | default |
//! |---|---|
//! | `seed` | 0 |
//! | `model.d`, `d_h`, `n_q`, `n_kv`, `n_layers`, `seq_len` | 256, 32, 8, 8, 2, 64 |
//! | `model.target_sigma` | 20.0 |
//! | `scenario.kind` | `weight_spike` |
//! | `scenario.steps`, `event_step`, `spike_factor` | 20, 10, 4.0 |
//! | `scenario.lr_base`, `lr_spike`, `spike_duration`, `drift_gain` | 1e-5, 1e-3, 3, 1000 |
//! | `scenario.warmup_steps`, `tokens` | 16, `fixed` |
//! | `policy.alpha` | `{"mode": "calibrated"}` |
//! | `policy.delta_star`, `eta_fp8`, `eta_delayed`, `history_len` | 1e-6, 0.8, 0.9, 16 |

use std::path::Path;

use geoscale::harness::{ModelConfig, PolicyConfig, Scenario, SimConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub scenario: Scenario,
    pub policy: PolicyConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scenario.validate()?;
        let p = &self.policy;
        if !(p.delta_star > 0.0 && p.delta_star < 1.0) {
            return Err(CliError::Config(format!("delta_star must lie in (0, 1), got {}", p.delta_star)));
        }
        if !(p.eta_fp8 > 0.0 && p.eta_fp8 <= 1.0) {
            return Err(CliError::Config(format!("eta_fp8 must lie in (0, 1], got {}", p.eta_fp8)));
        }
        if !(p.eta_delayed > 0.0 && p.eta_delayed <= 1.0) {
            return Err(CliError::Config(format!(
                "eta_delayed must lie in (0, 1], got {}",
                p.eta_delayed
            )));
        }
        if p.history_len == 0 {
            return Err(CliError::Config("history_len must be at least 1".into()));
        }
        Ok(())
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig {
            model: self.model.clone(),
            scenario: self.scenario.clone(),
            policy: self.policy.clone(),
        }
    }
}
