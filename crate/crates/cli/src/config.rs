//! Run configuration, stored as TOML.
//!
//! Every section has defaults, so a file only needs the keys it changes.
//! Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use fedbook_core::federation::{FederationConfig, Scheme};
use fedbook_core::finetune::{FinetuneConfig, Metric, SplitSpec, TaskSpec};
use fedbook_core::graph::{DomainSpec, SynthConfig};
use fedbook_core::model::{ModelDims, OptimizerConfig, OptimizerKind, TrainConfig};
use fedbook_core::LabelLevel;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub run_id: String,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedSection {
    /// Synthetic generation and partitioning.
    pub data: u64,
    /// Model initialization, masking and local training.
    pub federation: u64,
    /// Splits and head initialization.
    pub finetune: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub domains: usize,
    pub feature_dim: usize,
    /// Domain `i` is centred at `center_scale · e_(i mod feature_dim)`.
    pub center_scale: f64,
    pub class_count: usize,
    pub nodes_per_graph: usize,
    pub graphs_per_domain: usize,
    pub intra_edge_prob: f64,
    pub inter_edge_prob: f64,
    pub noise_std: f64,
    pub prototype_scale: f64,
    pub label_level: String,
    pub multi_label: bool,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            domains: 2,
            feature_dim: 16,
            center_scale: 2.0,
            class_count: 2,
            nodes_per_graph: 180,
            graphs_per_domain: 1,
            intra_edge_prob: 0.08,
            inter_edge_prob: 0.01,
            noise_std: 0.5,
            prototype_scale: 1.0,
            label_level: "node".into(),
            multi_label: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// `synth` generates data in memory; `files` reads `dir`.
    pub source: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub clients_per_domain: usize,
    pub synth: SynthSection,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: "synth".into(),
            dir: None,
            clients_per_domain: 3,
            synth: SynthSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dim: usize,
    pub heads: usize,
    pub tokens: usize,
    pub mask_ratio: f64,
    pub gamma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_dim: 16,
            heads: 2,
            tokens: 16,
            mask_ratio: 0.25,
            gamma: 2.0,
            batch_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub rounds_phase1: usize,
    pub rounds_phase2: usize,
    pub local_epochs: usize,
    pub scheme: String,
    pub lambda: f64,
}

impl Default for FederationSection {
    fn default() -> Self {
        Self {
            rounds_phase1: 3,
            rounds_phase2: 3,
            local_epochs: 2,
            scheme: "fedbook".into(),
            lambda: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub kind: String,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            kind: "adam".into(),
            lr: 1e-4,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub level: String,
    pub metric: String,
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Training instances per class; replaces the fractions when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub few_shot: Option<usize>,
    pub epochs: usize,
    /// Candidate learning rates; each client keeps the one with the best
    /// final validation score (earliest on ties).
    pub lr_grid: Vec<f64>,
    pub weight_decay: f64,
    /// Backbone to fine-tune; defaults to `<out_dir>/checkpoint.bin`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            level: "node".into(),
            metric: "accuracy".into(),
            train_fraction: 0.6,
            val_fraction: 0.2,
            few_shot: None,
            epochs: 100,
            lr_grid: vec![1e-2],
            weight_decay: 5e-4,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub seeds: SeedSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub federation: FederationSection,
    pub optimizer: OptimizerSection,
    pub finetune: FinetuneSection,
}

/// Command-line values that replace config entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub scheme: Option<String>,
    pub lambda: Option<f64>,
}

fn parse<T: std::str::FromStr<Err = fedbook_core::Error>>(value: &str) -> Result<T, CliError> {
    value.parse().map_err(CliError::from)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config types always serialize")
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seeds = SeedSection {
                data: seed,
                federation: seed,
                finetune: seed,
            };
        }
        if let Some(out) = &o.out {
            self.run.out_dir = out.clone();
        }
        if let Some(s) = &o.scheme {
            self.federation.scheme = s.clone();
        }
        if let Some(l) = o.lambda {
            self.federation.lambda = l;
        }
    }

    /// Checks every value, including that referenced input paths exist.
    pub fn validate(&self) -> Result<(), CliError> {
        match self.data.source.as_str() {
            "synth" => {
                self.synth_config()?.validate()?;
            }
            "files" => {
                let dir = self
                    .data
                    .dir
                    .as_ref()
                    .ok_or_else(|| CliError::Config("data.source = \"files\" needs data.dir".into()))?;
                if !dir.is_dir() {
                    return Err(CliError::Config(format!("data.dir {} does not exist", dir.display())));
                }
            }
            other => return Err(CliError::Config(format!("data.source must be synth or files, got `{other}`"))),
        }
        if self.data.clients_per_domain == 0 {
            return Err(CliError::Config("data.clients_per_domain must be at least 1".into()));
        }
        let m = &self.model;
        if m.hidden_dim == 0 || m.heads == 0 || m.tokens == 0 {
            return Err(CliError::Config("model.hidden_dim, heads and tokens must be positive".into()));
        }
        self.federation_config()?.validate()?;
        self.task()?.validate()?;
        if self.finetune.epochs == 0 {
            return Err(CliError::Config("finetune.epochs must be positive".into()));
        }
        if self.finetune.lr_grid.is_empty() {
            return Err(CliError::Config("finetune.lr_grid must list at least one learning rate".into()));
        }
        for &lr in &self.finetune.lr_grid {
            OptimizerConfig {
                kind: OptimizerKind::Adam,
                lr,
                weight_decay: self.finetune.weight_decay,
            }
            .validate()?;
        }
        if let Some(c) = &self.finetune.checkpoint {
            if !c.is_file() {
                return Err(CliError::Config(format!("finetune.checkpoint {} does not exist", c.display())));
            }
        }
        Ok(())
    }

    pub fn synth_config(&self) -> Result<SynthConfig, CliError> {
        let s = &self.data.synth;
        if s.domains == 0 || s.feature_dim == 0 {
            return Err(CliError::Config("data.synth.domains and feature_dim must be positive".into()));
        }
        let domains = (0..s.domains)
            .map(|i| {
                let mut center = vec![0.0; s.feature_dim];
                center[i % s.feature_dim] = s.center_scale;
                DomainSpec {
                    name: format!("domain{i}"),
                    feature_center: center,
                    intra_edge_prob: s.intra_edge_prob,
                    inter_edge_prob: s.inter_edge_prob,
                    class_count: s.class_count,
                    nodes_per_graph: s.nodes_per_graph,
                }
            })
            .collect();
        Ok(SynthConfig {
            domains,
            graphs_per_domain: s.graphs_per_domain,
            label_level: parse(&s.label_level)?,
            noise_std: s.noise_std,
            prototype_scale: s.prototype_scale,
            multi_label: s.multi_label,
        })
    }

    pub fn scheme(&self) -> Result<Scheme, CliError> {
        parse(&self.federation.scheme)
    }

    pub fn federation_config(&self) -> Result<FederationConfig, CliError> {
        let kind = match self.optimizer.kind.as_str() {
            "adam" => OptimizerKind::Adam,
            "sgd" => OptimizerKind::Sgd,
            other => return Err(CliError::Config(format!("optimizer.kind must be adam or sgd, got `{other}`"))),
        };
        Ok(FederationConfig {
            rounds_phase1: self.federation.rounds_phase1,
            rounds_phase2: self.federation.rounds_phase2,
            local_epochs: self.federation.local_epochs,
            scheme: self.scheme()?,
            lambda: self.federation.lambda,
            optimizer: OptimizerConfig {
                kind,
                lr: self.optimizer.lr,
                weight_decay: self.optimizer.weight_decay,
            },
            train: TrainConfig {
                mask_ratio: self.model.mask_ratio,
                gamma: self.model.gamma,
                batch_size: self.model.batch_size,
            },
            seed: self.seeds.federation,
        })
    }

    pub fn model_dims(&self, feature_dim: usize, edge_features: bool) -> ModelDims {
        ModelDims {
            feature_dim,
            edge_features,
            hidden_dim: self.model.hidden_dim,
            heads: self.model.heads,
            tokens: self.model.tokens,
        }
    }

    pub fn task(&self) -> Result<TaskSpec, CliError> {
        let f = &self.finetune;
        let level: LabelLevel = parse(&f.level)?;
        let metric: Metric = parse(&f.metric)?;
        let split = match f.few_shot {
            Some(k) => SplitSpec::FewShot { k },
            None => SplitSpec::Fractions {
                train: f.train_fraction,
                val: f.val_fraction,
            },
        };
        Ok(TaskSpec { level, metric, split })
    }

    /// Fine-tuning settings for one client at learning rate `lr`.
    pub fn finetune_config(&self, client_id: usize, lr: f64) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.finetune.epochs,
            lr,
            weight_decay: self.finetune.weight_decay,
            seed: self.seeds.finetune.wrapping_add(client_id as u64),
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.finetune
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.run.out_dir.join(crate::CHECKPOINT_FILE))
    }
}
