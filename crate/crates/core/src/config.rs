//! Experiment configuration files (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, Scheme};
use crate::data::SpiralSpec;
use crate::error::{Error, Result};
use crate::policy::{DepthPolicy, PolicyKind, PolicyName};
use crate::train::{LrSchedule, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds model initialization, shuffling and policy sampling.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub arch: ArchSpec,
    pub train: TrainSection,
    pub policy: PolicySpec,
    pub dataset: DatasetSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// `(epoch, divisor)` pairs.
    pub lr_milestones: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKindSpec {
    Baseline,
    Fixed,
    FullElseUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub scheme: Scheme,
    pub kind: PolicyKindSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_full: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
}

impl PolicySpec {
    pub fn named(name: PolicyName) -> Self {
        match name {
            PolicyName::Baseline => Self {
                scheme: Scheme::CoML,
                kind: PolicyKindSpec::Baseline,
                p_full: None,
                n: None,
            },
            other => Self {
                scheme: other.scheme(),
                kind: PolicyKindSpec::FullElseUniform,
                p_full: Some(other.p_full()),
                n: None,
            },
        }
    }

    pub fn to_policy(&self, spec: &ArchSpec) -> Result<DepthPolicy> {
        let kind = match self.kind {
            PolicyKindSpec::Baseline => return Ok(DepthPolicy::baseline(self.scheme, spec)),
            PolicyKindSpec::Fixed => PolicyKind::Fixed {
                n: self.n.ok_or_else(|| Error::config("fixed policy needs `n`"))?,
            },
            PolicyKindSpec::FullElseUniform => PolicyKind::FullElseUniform {
                p_full: self.p_full.ok_or_else(|| Error::config("full-else-uniform policy needs `p_full`"))?,
            },
        };
        DepthPolicy::new(self.scheme, spec.total_units(), kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub generator: String,
    pub spiral: SpiralSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            generator: "spirals".into(),
            spiral: SpiralSpec::default(),
        }
    }
}

impl ExperimentConfig {
    /// The desk-scale defaults for `policy`.
    pub fn desk(policy: PolicyName, seed: u64) -> Self {
        let arch = ArchSpec::default();
        let t = TrainConfig::desk(policy.policy(&arch), seed);
        Self {
            seed,
            out_dir: PathBuf::from("out"),
            arch,
            train: TrainSection {
                epochs: t.epochs,
                batch_size: t.batch_size,
                lr: t.schedule.initial,
                lr_milestones: t.schedule.milestones,
                momentum: t.momentum,
                weight_decay: t.weight_decay,
            },
            policy: PolicySpec::named(policy),
            dataset: DatasetSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.dataset.generator != "spirals" {
            return Err(Error::config(format!("unknown dataset generator `{}`", self.dataset.generator)));
        }
        self.dataset.spiral.validate()?;
        if self.arch.input_dim != 2 || self.arch.num_classes != self.dataset.spiral.classes {
            return Err(Error::config(format!(
                "spirals give 2-D inputs with {} classes, arch expects {}-D with {}",
                self.dataset.spiral.classes, self.arch.input_dim, self.arch.num_classes
            )));
        }
        self.train_config()?.validate(&self.arch)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            schedule: LrSchedule {
                initial: self.train.lr,
                milestones: self.train.lr_milestones.clone(),
            },
            policy: self.policy.to_policy(&self.arch)?,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            seed: self.seed,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical TOML text; `parse(emit(c)) == c`.
    pub fn emit(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
