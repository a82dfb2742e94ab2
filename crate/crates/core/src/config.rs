//! Run configuration: TOML file parsing, defaults, validation, and the
//! flag-override layer. Precedence is flags > file > defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DataSpec;
use crate::error::{Error, Result};
use crate::gate::ConvergenceCriteria;
use crate::model::{ModelConfig, ModuleRole, TargetModuleSet};
use crate::optim::AdamConfig;
use crate::planner::{build_ladder, DegenerateRule, RankLadder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig {
                key: "optimizer.learning_rate".into(),
                reason: format!("must be positive and finite, got {}", self.learning_rate),
            });
        }
        for (key, v) in [("optimizer.beta1", self.beta1), ("optimizer.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidConfig {
                    key: key.into(),
                    reason: format!("must lie in [0, 1), got {v}"),
                });
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig {
                key: "optimizer.epsilon".into(),
                reason: "must be positive".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig {
                key: "optimizer.batch_size".into(),
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub k: usize,
    pub m: usize,
    pub tau: f64,
    pub zeta: f64,
    pub roles: Vec<String>,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            k: 3,
            m: 3,
            tau: 0.5,
            zeta: 2.5,
            roles: ModuleRole::ALL.iter().map(|r| r.name().to_string()).collect(),
        }
    }
}

impl GateConfig {
    pub fn criteria(&self) -> Result<ConvergenceCriteria> {
        let roles = self
            .roles
            .iter()
            .map(|s| ModuleRole::parse(s))
            .collect::<Result<Vec<_>>>()?;
        let crit = ConvergenceCriteria {
            k: self.k,
            m: self.m,
            tau: self.tau,
            zeta: self.zeta,
            roles: TargetModuleSet::new(roles)?,
        };
        crit.validate()?;
        Ok(crit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmupSection {
    /// Joint-training epochs between injection and the base freeze.
    /// Zero freezes immediately at injection.
    pub epochs: usize,
}

impl Default for WarmupSection {
    fn default() -> Self {
        WarmupSection { epochs: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RanksConfig {
    pub r_min: usize,
    pub r_max: usize,
    pub scaling: f64,
    pub degenerate_rule: DegenerateRule,
}

impl Default for RanksConfig {
    fn default() -> Self {
        RanksConfig {
            r_min: 8,
            r_max: 64,
            scaling: 1.0,
            degenerate_rule: DegenerateRule::MaxRank,
        }
    }
}

impl RanksConfig {
    pub fn ladder(&self) -> Result<RankLadder> {
        build_ladder(self.r_min, self.r_max)
    }

    fn validate(&self) -> Result<()> {
        self.ladder()?;
        if !(self.scaling > 0.0) || !self.scaling.is_finite() {
            return Err(Error::InvalidConfig {
                key: "ranks.scaling".into(),
                reason: format!("must be positive and finite, got {}", self.scaling),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    /// Full-parameter training throughout; the gate never fires.
    Baseline,
    Prelora,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub total_epochs: usize,
    #[serde(default = "default_run_seed")]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: RunMode,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Write a checkpoint after this epoch completes.
    #[serde(default)]
    pub checkpoint_epoch: Option<usize>,
}

fn default_run_seed() -> u64 {
    1234
}

fn default_mode() -> RunMode {
    RunMode::Prelora
}

/// Everything a run needs, as parsed from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    pub data: DataSpec,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub gate: GateConfig,
    #[serde(default)]
    pub warmup: WarmupSection,
    #[serde(default)]
    pub ranks: RanksConfig,
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::TomlParse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::TomlParse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.gate.criteria()?;
        self.ranks.validate()?;
        if self.run.total_epochs == 0 {
            return Err(Error::InvalidConfig {
                key: "run.total_epochs".into(),
                reason: "must be positive".into(),
            });
        }
        match &self.data {
            DataSpec::Synthetic {
                num_examples,
                input_dim,
                num_classes,
                ..
            } => {
                if *num_examples == 0 || *input_dim == 0 || *num_classes == 0 {
                    return Err(Error::InvalidConfig {
                        key: "data".into(),
                        reason: "synthetic fields must be positive".into(),
                    });
                }
                if *input_dim != self.model.input_dim {
                    return Err(Error::InvalidConfig {
                        key: "model.input_dim".into(),
                        reason: format!(
                            "model expects {}, dataset provides {input_dim}",
                            self.model.input_dim
                        ),
                    });
                }
                if *num_classes != self.model.num_classes {
                    return Err(Error::InvalidConfig {
                        key: "model.num_classes".into(),
                        reason: format!(
                            "model expects {}, dataset provides {num_classes}",
                            self.model.num_classes
                        ),
                    });
                }
            }
            DataSpec::Idx {
                images_path,
                labels_path,
                ..
            } => {
                for (key, path) in [
                    ("data.images_path", images_path),
                    ("data.labels_path", labels_path),
                ] {
                    if !path.exists() {
                        return Err(Error::InvalidConfig {
                            key: key.into(),
                            reason: format!("path does not exist: {}", path.display()),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Parse and validate a config file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidConfig {
        key: "config".into(),
        reason: format!("cannot read {}: {e}", path.display()),
    })?;
    RunConfig::from_toml_str(&text)
}

/// Command-line overrides; any `Some` replaces the file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub total_epochs: Option<usize>,
    pub seed: Option<u64>,
    pub mode: Option<RunMode>,
    pub output_dir: Option<PathBuf>,
    pub checkpoint_epoch: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub warmup_epochs: Option<usize>,
    pub tau: Option<f64>,
    pub zeta: Option<f64>,
    pub k: Option<usize>,
    pub m: Option<usize>,
    pub r_min: Option<usize>,
    pub r_max: Option<usize>,
    pub scaling: Option<f64>,
}

impl Overrides {
    /// Overlay onto `config`, then re-validate.
    pub fn apply(&self, config: &mut RunConfig) -> Result<()> {
        macro_rules! set {
            ($field:expr, $target:expr) => {
                if let Some(v) = $field.clone() {
                    $target = v;
                }
            };
        }
        set!(self.total_epochs, config.run.total_epochs);
        set!(self.seed, config.run.seed);
        set!(self.mode, config.run.mode);
        if let Some(dir) = &self.output_dir {
            config.run.output_dir = Some(dir.clone());
        }
        if let Some(e) = self.checkpoint_epoch {
            config.run.checkpoint_epoch = Some(e);
        }
        set!(self.learning_rate, config.optimizer.learning_rate);
        set!(self.batch_size, config.optimizer.batch_size);
        set!(self.warmup_epochs, config.warmup.epochs);
        set!(self.tau, config.gate.tau);
        set!(self.zeta, config.gate.zeta);
        set!(self.k, config.gate.k);
        set!(self.m, config.gate.m);
        set!(self.r_min, config.ranks.r_min);
        set!(self.r_max, config.ranks.r_max);
        set!(self.scaling, config.ranks.scaling);
        config.validate()
    }
}
