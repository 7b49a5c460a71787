//! Experiment configuration: a sectioned TOML file with explicit keys for
//! every hyperparameter. Unknown keys are hard errors; a silent typo in a
//! noise-scale field would invalidate a run.

use crate::dict::DictMode;
use crate::error::{Result, SimError};
use crate::params::{HyperParams, Variant};
use crate::trainer::{BiasRule, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub max_steps: u64,
    pub eta: f64,
    pub bias_rule: BiasRule,
    pub log_every: u64,
    pub loss_floor: f64,
    #[serde(default = "default_diag")]
    pub diag_per_subclass: usize,
}

fn default_diag() -> usize {
    1
}

impl TrainSection {
    pub fn to_train_config(&self, regime: Variant, seed: u64) -> TrainConfig {
        TrainConfig {
            regime,
            max_steps: self.max_steps,
            eta: self.eta,
            bias_rule: self.bias_rule,
            log_every: self.log_every,
            loss_floor: self.loss_floor,
            seed,
            diag_per_subclass: self.diag_per_subclass,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSections {
    pub coarse: TrainSection,
    pub fine: TrainSection,
}

/// Pass/fail thresholds for the summary checks. Every threshold is explicit
/// in the config so a run's verdicts are self-describing.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbesSection {
    /// Checks contribute to the process exit status only when enabled.
    pub checks_enabled: bool,
    pub eps_t11: f64,
    pub n_eval_per_subclass: usize,
    pub normal_acc_min: f64,
    pub coarse_hard_ratio_max: f64,
    pub coarse_hard_acc_max: f64,
    pub fine_normal_acc_min: f64,
    pub fine_hard_acc_min: f64,
    pub fit_r2_min: f64,
    pub fit_c_factor: f64,
    pub singleton_rate_min: f64,
    pub growth_ratio_factor: f64,
    /// Also run the Gaussian-lemma Monte-Carlo probes during the pipeline.
    #[serde(default)]
    pub run_lemmas: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub dict_mode: DictMode,
    pub hyperparams: HyperParams,
    pub train: TrainSections,
    pub probes: ProbesSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            SimError::Parse(msg) => SimError::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Parses and validates. TOML errors keep their line/column diagnostics.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| SimError::Parse(e.to_string()))?;
        cfg.hyperparams.validate()?;
        cfg.train
            .coarse
            .to_train_config(Variant::Coarse, 0)
            .validate(&cfg.hyperparams)?;
        cfg.train
            .fine
            .to_train_config(Variant::Fine, 0)
            .validate(&cfg.hyperparams)?;
        if cfg.probes.eps_t11 <= 0.0 || cfg.probes.eps_t11 >= 1.0 {
            return Err(SimError::config("eps_t11 must lie in (0, 1)"));
        }
        if cfg.probes.n_eval_per_subclass == 0 {
            return Err(SimError::config("n_eval_per_subclass must be positive"));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| SimError::Parse(e.to_string()))
    }

    /// The built-in workstation-scale experiment.
    pub fn desk(master_seed: u64, output_dir: PathBuf) -> ExperimentConfig {
        ExperimentConfig {
            master_seed,
            output_dir,
            dict_mode: DictMode::StandardBasis,
            hyperparams: HyperParams::desk(),
            train: TrainSections {
                coarse: TrainSection {
                    max_steps: 6000,
                    eta: 3e-3,
                    bias_rule: BiasRule::PlainDecay,
                    log_every: 1,
                    loss_floor: 0.05,
                    diag_per_subclass: 1,
                },
                fine: TrainSection {
                    max_steps: 1200,
                    eta: 8e-3,
                    bias_rule: BiasRule::ClippedDecay,
                    log_every: 1,
                    loss_floor: 0.05,
                    diag_per_subclass: 1,
                },
            },
            probes: ProbesSection {
                checks_enabled: true,
                eps_t11: 0.1,
                n_eval_per_subclass: 8,
                normal_acc_min: 0.99,
                coarse_hard_ratio_max: 0.1,
                coarse_hard_acc_max: 0.65,
                fine_normal_acc_min: 0.95,
                fine_hard_acc_min: 0.95,
                fit_r2_min: 0.99,
                fit_c_factor: 2.0,
                singleton_rate_min: 0.99,
                growth_ratio_factor: 3.0,
                run_lemmas: false,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_roundtrips_through_toml() {
        let cfg = ExperimentConfig::desk(1, PathBuf::from("out"));
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(serde_json::to_string(&cfg).unwrap(), serde_json::to_string(&back).unwrap());
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let cfg = ExperimentConfig::desk(1, PathBuf::from("out"));
        let mut text = cfg.to_toml().unwrap();
        text.push_str("\nmystery_knob = 3\n");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert!(matches!(err, SimError::Parse(_)), "{err}");

        // a typo inside a section is also fatal
        let bad = text.replace("sigma_zeta", "sigma_zeta_typo");
        assert!(ExperimentConfig::parse(&bad).is_err());
    }

    #[test]
    fn parse_errors_carry_line_diagnostics() {
        let err = ExperimentConfig::parse("master_seed = \"not a number\"").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1"), "{msg}");
    }
}
