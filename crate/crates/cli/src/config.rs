//! Experiment configuration: human-editable TOML with explicit sections.
//! Parsing is strict — any unknown key is an error, so hyperparameter typos
//! cannot pass silently. The parsed config round-trips through
//! serialize/parse, and its canonical serialization is what gets hashed
//! into the experiment manifest.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fatsim_core::aggregation::BandwidthPolicy;
use fatsim_core::attacks::{AdvPerturbation, ByzantineMode, ByzantineSpec};
use fatsim_core::orchestration::{AggregationRule, Phase1Config, Phase2Config};
use fatsim_core::Real;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads for client-parallel sections; 0 uses the default.
    #[serde(default)]
    pub threads: usize,
    pub dataset: DatasetSection,
    pub partition: PartitionSection,
    pub model: ModelSection,
    pub phase1: Phase1Section,
    #[serde(default)]
    pub byzantine: ByzantineSection,
    pub phase2: Phase2Section,
    /// Attack used by `evaluate` and the phase-2 before/after metrics.
    pub attack: AttackSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum DatasetKind {
    Blobs,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    pub num_classes: usize,
    /// Synthetic blobs: samples per class.
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    /// Synthetic blobs: feature dimension.
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Synthetic blobs: per-coordinate noise std.
    #[serde(default = "default_spread")]
    pub spread: f64,
    /// CSV source path (csv kind only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

fn default_per_class() -> usize {
    200
}
fn default_dim() -> usize {
    8
}
fn default_spread() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub num_clients: usize,
    pub alpha: f64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

fn default_train_fraction() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Hidden layer widths; the full stack is `dim -> hidden... -> classes`.
    pub hidden: Vec<usize>,
    pub rank: usize,
    pub pretrain_epochs: usize,
    pub pretrain_learning_rate: f64,
    #[serde(default = "default_batch")]
    pub pretrain_batch_size: usize,
}

fn default_batch() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase1Section {
    pub rounds: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub knn_k: usize,
    pub bandwidth: BandwidthPolicy<f64>,
    pub eta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: f64,
    pub eps_smooth: f64,
    pub tree_depth: usize,
    pub kappa: f64,
    pub trim_fraction: f64,
    #[serde(default = "default_leaf_size")]
    pub leaf_size: usize,
    pub aggregator: AggregationRule,
    #[serde(default)]
    pub share_classifier: bool,
    pub pgd: AttackSection,
}

fn default_leaf_size() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ByzantineSection {
    pub mode: ByzantineMode,
    #[serde(default)]
    pub rho: f64,
    #[serde(default = "default_mpaf_scale")]
    pub mpaf_scale: f64,
    /// Explicit attacker ids; drawn from the seed when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub malicious_ids: Option<Vec<usize>>,
}

fn default_mpaf_scale() -> f64 {
    10.0
}

impl Default for ByzantineSection {
    fn default() -> Self {
        Self {
            mode: ByzantineMode::None,
            rho: 0.0,
            mpaf_scale: default_mpaf_scale(),
            malicious_ids: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase2Section {
    pub outer_iters: usize,
    pub inner_steps: usize,
    pub beta: f64,
    pub lambda3: f64,
    /// Absolute unit budget. Exactly one of `budget`/`budget_percent`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    /// Budget as a percentage of selectable units.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_percent: Option<f64>,
    pub learning_rate: f64,
    pub gate_learning_rate: f64,
    #[serde(default = "default_true")]
    pub include_classifier: bool,
    pub final_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    #[serde(default = "default_true")]
    pub regenerate_pool: bool,
}

fn default_true() -> bool {
    true
}
fn default_holdout() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub random_start: bool,
    pub clamp: (f64, f64),
}

impl AttackSection {
    pub fn to_core(&self) -> AdvPerturbation<Real> {
        AdvPerturbation {
            epsilon: self.epsilon,
            step_size: self.step_size,
            iterations: self.iterations,
            random_start: self.random_start,
            clamp: self.clamp,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.dataset.kind == DatasetKind::Csv && self.dataset.path.is_none() {
            return Err(CliError::Config("csv dataset needs a path".into()));
        }
        if self.model.hidden.is_empty() {
            return Err(CliError::Config("model.hidden must list at least one width".into()));
        }
        match (self.phase2.budget, self.phase2.budget_percent) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config(
                    "set either phase2.budget or phase2.budget_percent, not both".into(),
                ))
            }
            (None, None) => {
                return Err(CliError::Config(
                    "set phase2.budget or phase2.budget_percent".into(),
                ))
            }
            _ => {}
        }
        if let Some(p) = self.phase2.budget_percent {
            if !(0.0..=100.0).contains(&p) {
                return Err(CliError::Config("budget_percent must be in [0, 100]".into()));
            }
        }
        Ok(())
    }

    /// Canonical serialization used for hashing.
    pub fn canonical_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(format!("{e}")))
    }

    /// Backbone widths `[dim, hidden...]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.dataset.dim];
        dims.extend(&self.model.hidden);
        dims
    }

    /// Selectable phase-2 units for this model shape.
    pub fn phase2_units(&self) -> usize {
        self.model.hidden.len() + usize::from(self.phase2.include_classifier)
    }

    /// Resolves the absolute phase-2 budget.
    pub fn phase2_budget(&self) -> usize {
        match (self.phase2.budget, self.phase2.budget_percent) {
            (Some(b), _) => b,
            (None, Some(p)) => {
                ((p / 100.0) * self.phase2_units() as f64).round().max(0.0) as usize
            }
            (None, None) => 0,
        }
    }

    pub fn byzantine_spec(&self) -> Result<ByzantineSpec, CliError> {
        let n = self.partition.num_clients;
        let c = self.dataset.num_classes;
        let mut spec = match self.byzantine.mode {
            ByzantineMode::None => ByzantineSpec::none(),
            mode => ByzantineSpec::sample(mode, self.byzantine.rho, n, c, self.seed)
                .map_err(|e| CliError::Config(format!("{e}")))?,
        };
        spec.mpaf_scale = self.byzantine.mpaf_scale;
        if let Some(ids) = &self.byzantine.malicious_ids {
            spec.malicious_ids = BTreeSet::from_iter(ids.iter().copied());
            spec.validate(n, c).map_err(|e| CliError::Config(format!("{e}")))?;
        }
        Ok(spec)
    }

    pub fn phase1_config(&self) -> Result<Phase1Config<Real>, CliError> {
        let p = &self.phase1;
        Ok(Phase1Config {
            rounds: p.rounds,
            local_epochs: p.local_epochs,
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            knn_k: p.knn_k,
            bandwidth: p.bandwidth,
            eta: p.eta,
            lambda1: p.lambda1,
            lambda2: p.lambda2,
            gamma: p.gamma,
            eps_smooth: p.eps_smooth,
            tree_depth: p.tree_depth,
            kappa: p.kappa,
            trim_fraction: p.trim_fraction,
            leaf_size: p.leaf_size,
            pgd: p.pgd.to_core(),
            byzantine: self.byzantine_spec()?,
            rule: p.aggregator,
            share_classifier: p.share_classifier,
            seed: self.seed,
        })
    }

    pub fn phase2_config(&self) -> Phase2Config<Real> {
        let p = &self.phase2;
        Phase2Config {
            outer_iters: p.outer_iters,
            inner_steps: p.inner_steps,
            beta: p.beta,
            lambda3: p.lambda3,
            budget: self.phase2_budget(),
            learning_rate: p.learning_rate,
            gate_learning_rate: p.gate_learning_rate,
            include_classifier: p.include_classifier,
            final_epochs: p.final_epochs,
            batch_size: p.batch_size,
            holdout_fraction: p.holdout_fraction,
            regenerate_pool: p.regenerate_pool,
            pgd: self.phase1.pgd.to_core(),
            seed: self.seed,
        }
    }
}
