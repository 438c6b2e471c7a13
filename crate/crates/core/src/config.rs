//! Experiment configuration: strict JSON schema (unknown keys are errors),
//! validation, and conversion into the domain types of the other modules.

use crate::channel::ChannelConfig;
use crate::data::{PartitionMode, PartitionSpec};
use crate::error::{Error, Result};
use crate::model::Schedule;
use crate::rng::{stream, subseed};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Gaussian blobs with one mean per class on a radius-3 sphere.
    Synthetic {
        num_classes: usize,
        num_features: usize,
        train_per_class: usize,
        test_per_class: usize,
    },
    /// MNIST-format IDX files.
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// Fashion-MNIST; same IDX container as MNIST.
    Fmnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum PartitionModeConfig {
    ClassesPerUser { k: usize },
    Dirichlet { beta: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub mode: PartitionModeConfig,
    pub num_users: usize,
    pub samples_per_user: usize,
    /// Defaults to a stream derived from the experiment seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_one() -> f64 {
    1.0
}

fn default_one_usize() -> usize {
    1
}

fn default_eval_every() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    /// Local SGD steps per round.
    pub tau: usize,
    /// Initial learning rate.
    pub eta0: f64,
    /// Multiplicative decay applied every `decay_every` rounds (1 = constant).
    #[serde(default = "default_one")]
    pub decay_factor: f64,
    #[serde(default = "default_one_usize")]
    pub decay_every: usize,
    pub batch_size: usize,
    /// L2 penalty; zero disables regularization.
    #[serde(default)]
    pub l2_reg: f64,
}

impl TrainingSection {
    pub fn schedule(&self) -> Schedule {
        if self.decay_factor == 1.0 {
            Schedule::Constant(self.eta0)
        } else {
            Schedule::StepDecay { base: self.eta0, factor: self.decay_factor, every: self.decay_every }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    pub antennas: usize,
    pub sigma_h2: f64,
    pub sigma_z2: f64,
    #[serde(default = "default_one")]
    pub alpha: f64,
    /// Replace fading and noise with the noiseless averaging channel
    /// (a debugging and testing hook).
    #[serde(default)]
    pub degenerate: bool,
}

impl ChannelSection {
    pub fn to_channel_config(&self) -> ChannelConfig {
        ChannelConfig {
            antennas: self.antennas,
            sigma_h2: self.sigma_h2,
            sigma_z2: self.sigma_z2,
            alpha: self.alpha,
        }
    }
}

/// Harvest probability: one value for everyone or one per user.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum HarvestProb {
    Uniform(f64),
    PerUser(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EnergySection {
    pub p_e: HarvestProb,
}

impl EnergySection {
    pub fn probabilities(&self, num_users: usize) -> Vec<f64> {
        match &self.p_e {
            HarvestProb::Uniform(p) => vec![*p; num_users],
            HarvestProb::PerUser(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum PolicyConfig {
    /// Schedule every feasible user.
    None,
    /// Entropy-maximizing subset selection.
    Entropy {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_subset: Option<usize>,
    },
    /// Representation estimation for `estimation_rounds`, then clustered
    /// scheduling.
    Lse {
        estimation_rounds: usize,
        num_clusters: usize,
        /// Ridge level for the representation solve; defaults to
        /// `1e-6 * trace(A^T A) / num_users`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ridge: Option<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub partition: PartitionSection,
    pub training: TrainingSection,
    pub channel: ChannelSection,
    pub energy: EnergySection,
    pub policy: PolicyConfig,
    pub rounds: usize,
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Partition spec with the seed defaulted from the experiment seed.
    pub fn partition_spec(&self) -> PartitionSpec {
        let mode = match self.partition.mode {
            PartitionModeConfig::ClassesPerUser { k } => PartitionMode::ClassesPerUser { k },
            PartitionModeConfig::Dirichlet { beta } => PartitionMode::Dirichlet { beta },
        };
        PartitionSpec {
            mode,
            num_users: self.partition.num_users,
            samples_per_user: self.partition.samples_per_user,
            seed: self.partition.seed.unwrap_or_else(|| subseed(self.seed, &[stream::PARTITION])),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));

        match &self.dataset {
            DatasetConfig::Synthetic { num_classes, num_features, train_per_class, test_per_class } => {
                if *num_classes < 2 {
                    return fail(format!("synthetic num_classes must be at least 2, got {num_classes}"));
                }
                if *num_features == 0 || *train_per_class == 0 || *test_per_class == 0 {
                    return fail("synthetic dimensions and per-class counts must be positive".into());
                }
                if let PartitionModeConfig::ClassesPerUser { k } = self.partition.mode {
                    if k > *num_classes {
                        return fail(format!(
                            "classes per user {k} exceeds synthetic num_classes {num_classes}"
                        ));
                    }
                }
            }
            DatasetConfig::Mnist { .. } | DatasetConfig::Fmnist { .. } => {}
        }

        if self.partition.num_users == 0 {
            return fail("num_users must be at least 1".into());
        }
        if self.partition.samples_per_user == 0 {
            return fail("samples_per_user must be at least 1".into());
        }
        match self.partition.mode {
            PartitionModeConfig::ClassesPerUser { k } if k == 0 => {
                return fail("classes per user must be at least 1".into());
            }
            PartitionModeConfig::Dirichlet { beta } if !(beta > 0.0 && beta.is_finite()) => {
                return fail(format!("dirichlet beta must be positive, got {beta}"));
            }
            _ => {}
        }

        if self.training.tau == 0 {
            return fail("tau must be at least 1".into());
        }
        if !(self.training.eta0 > 0.0 && self.training.eta0 <= 1.0) {
            return fail(format!("eta0 must be in (0, 1], got {}", self.training.eta0));
        }
        if !(self.training.decay_factor > 0.0 && self.training.decay_factor <= 1.0) {
            return fail(format!(
                "decay_factor must be in (0, 1], got {}",
                self.training.decay_factor
            ));
        }
        if self.training.decay_every == 0 {
            return fail("decay_every must be at least 1".into());
        }
        if self.training.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.training.batch_size > self.partition.samples_per_user {
            return fail(format!(
                "batch_size {} exceeds samples_per_user {}",
                self.training.batch_size, self.partition.samples_per_user
            ));
        }
        if !(self.training.l2_reg >= 0.0 && self.training.l2_reg.is_finite()) {
            return fail(format!("l2_reg must be non-negative, got {}", self.training.l2_reg));
        }

        self.channel.to_channel_config().validate()?;

        let probs = self.energy.probabilities(self.partition.num_users);
        if probs.len() != self.partition.num_users {
            return fail(format!(
                "p_e lists {} users but num_users is {}",
                probs.len(),
                self.partition.num_users
            ));
        }
        for (m, p) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(p) || !p.is_finite() {
                return fail(format!("p_e of user {m} must be in [0, 1], got {p}"));
            }
        }

        match self.policy {
            PolicyConfig::Lse { estimation_rounds, num_clusters, ridge } => {
                if estimation_rounds == 0 {
                    return fail("estimation_rounds must be at least 1".into());
                }
                if estimation_rounds >= self.rounds {
                    return fail(format!(
                        "estimation_rounds {} must be smaller than rounds {}",
                        estimation_rounds, self.rounds
                    ));
                }
                if num_clusters == 0 {
                    return fail("num_clusters must be at least 1".into());
                }
                if let Some(r) = ridge {
                    if !(r >= 0.0 && r.is_finite()) {
                        return fail(format!("ridge must be non-negative, got {r}"));
                    }
                }
            }
            PolicyConfig::Entropy { max_subset: Some(0) } => {
                return fail("max_subset must be at least 1 when given".into());
            }
            _ => {}
        }

        if self.eval_every == 0 {
            return fail("eval_every must be at least 1".into());
        }
        Ok(())
    }
}

/// A small, fast synthetic experiment used as a base fixture across tests.
#[cfg(test)]
pub(crate) fn synthetic_config_json() -> String {
    r#"{
        "dataset": {"kind": "synthetic", "num_classes": 3, "num_features": 4,
                    "train_per_class": 60, "test_per_class": 20},
        "partition": {"mode": {"kind": "classes_per_user", "k": 1},
                      "num_users": 6, "samples_per_user": 20},
        "training": {"tau": 2, "eta0": 0.05, "batch_size": 10},
        "channel": {"antennas": 50, "sigma_h2": 1.0, "sigma_z2": 0.1},
        "energy": {"p_e": 0.5},
        "policy": {"kind": "entropy"},
        "rounds": 10,
        "seed": 7,
        "eval_every": 5
    }"#
    .to_string()
}
