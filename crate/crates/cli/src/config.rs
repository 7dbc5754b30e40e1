//! Experiment configuration, read from TOML. Every field has a default, so
//! an empty file is a valid configuration.

use std::path::{Path, PathBuf};

use l2d_core::deferral::default_budgets;
use l2d_core::losses::{AlphaWeight, BinaryLoss};
use l2d_core::simulation::{make_split_expert, ExpertModel, GaussianMixtureSpec};
use l2d_core::training::{Architecture, Objective, TrainConfig};
use l2d_core::estimators::SurrogateKind;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::failure::{Failure, ResultExt};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Dataset CSVs carry one header line.
    pub header: bool,
    /// Output directory; not part of the echoed config or its hash.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub expert: ExpertConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub evaluate: EvaluateConfig,
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Gaussian mixture with a simulated expert.
    #[default]
    Synthetic,
    /// One CSV file, shuffled and split by `fractions`.
    Csv,
    /// Constant feature, uniform labels, always-correct expert.
    WorkedExample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub num_classes: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    /// Circle layout used when `means` is absent.
    pub radius: f64,
    pub sigma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub means: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub priors: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub fractions: [f64; 3],
    /// Side length of the Bayes-oracle grid written by `generate`; 0 skips it.
    pub grid_steps: usize,
    pub grid_lo: f64,
    pub grid_hi: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            num_classes: 3,
            n_train: 5000,
            n_validation: 1000,
            n_test: 2000,
            radius: 2.0,
            sigma: 1.0,
            means: None,
            priors: None,
            path: None,
            fractions: [0.8, 0.1, 0.1],
            grid_steps: 0,
            grid_lo: -4.0,
            grid_hi: 4.0,
        }
    }
}

impl DataConfig {
    pub fn mixture(&self) -> Result<GaussianMixtureSpec, Failure> {
        let k = self.num_classes;
        let spec = match &self.means {
            None => GaussianMixtureSpec::circle(k, self.radius, self.sigma),
            Some(means) => {
                if means.len() != k {
                    return Err(Failure::usage(format!(
                        "data.means has {} rows, num_classes is {k}",
                        means.len()
                    )));
                }
                let priors = self.priors.clone().unwrap_or_else(|| vec![1.0 / k as f64; k]);
                GaussianMixtureSpec::new(means.clone(), self.sigma, priors)
            }
        };
        let mut spec = spec.usage()?;
        if let (None, Some(priors)) = (&self.means, &self.priors) {
            spec.priors = priors.clone();
            spec.validate().usage()?;
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExpertConfig {
    /// `acc_head` on classes below `k`, `acc_tail` on the rest.
    Split { k: usize, acc_head: f64, acc_tail: f64 },
    PerClass { accuracies: Vec<f64> },
    #[default]
    Oracle,
    Uniform,
}

impl ExpertConfig {
    pub fn build(&self, num_classes: usize) -> Result<ExpertModel, Failure> {
        let expert = match self {
            ExpertConfig::Split { k, acc_head, acc_tail } => {
                make_split_expert(num_classes, *k, *acc_head, *acc_tail).usage()?
            }
            ExpertConfig::PerClass { accuracies } => {
                if accuracies.len() != num_classes {
                    return Err(Failure::usage(format!(
                        "expert.accuracies has {} entries, num_classes is {num_classes}",
                        accuracies.len()
                    )));
                }
                ExpertModel::per_class(accuracies.clone()).usage()?
            }
            ExpertConfig::Oracle => ExpertModel::Oracle { num_classes },
            ExpertConfig::Uniform => ExpertModel::UniformRandom { num_classes },
        };
        expert.validate().usage()?;
        Ok(expert)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum MethodKind {
    Softmax,
    #[default]
    Ova,
    ScoreBaseline,
    ConfidenceBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureKind {
    Linear,
    #[default]
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub method: MethodKind,
    pub phi: BinaryLoss,
    pub alpha: f64,
    pub architecture: ArchitectureKind,
    pub hidden: usize,
    /// Budget `b` used while training the confidence baseline.
    pub baseline_budget: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            method: MethodKind::Ova,
            phi: BinaryLoss::Logistic,
            alpha: 1.0,
            architecture: ArchitectureKind::Mlp,
            hidden: 32,
            baseline_budget: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn architecture(&self) -> Result<Architecture, Failure> {
        match self.architecture {
            ArchitectureKind::Linear => Ok(Architecture::Linear),
            ArchitectureKind::Mlp if self.hidden == 0 => {
                Err(Failure::usage("model.hidden must be positive for an mlp"))
            }
            ArchitectureKind::Mlp => Ok(Architecture::Mlp1 { hidden: self.hidden }),
        }
    }

    /// Training objective of the surrogate methods.
    pub fn defer_objective(&self, surrogate: SurrogateKind) -> Result<Objective, Failure> {
        Ok(Objective::Defer {
            surrogate,
            phi: self.phi,
            alpha: AlphaWeight::new(self.alpha).usage()?,
        })
    }
}

/// Training hyperparameters; the seed comes from the top-level `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub cosine_annealing: bool,
    pub warmup_epochs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            learning_rate: 0.05,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            epochs: 100,
            batch_size: d.batch_size,
            patience: d.patience,
            cosine_annealing: d.cosine_annealing,
            warmup_epochs: d.warmup_epochs,
        }
    }
}

impl TrainSection {
    pub fn to_config(&self, seed: u64) -> Result<TrainConfig, Failure> {
        let config = TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            patience: self.patience,
            seed,
            cosine_annealing: self.cosine_annealing,
            warmup_epochs: self.warmup_epochs,
        };
        config.validate().usage()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Deferral budget; absent means the model's own rule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<f64>,
    pub bins: usize,
    /// Bin width of the raw expert-confidence histogram.
    pub histogram_width: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            budget: None,
            bins: l2d_core::calibration::DEFAULT_BINS,
            histogram_width: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SweepKind {
    #[default]
    Budget,
    Expertise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub kind: SweepKind,
    pub budgets: Vec<f64>,
    /// Expert boundaries; absent means `0..=K`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_values: Option<Vec<usize>>,
    pub acc_head: f64,
    pub acc_tail: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            kind: SweepKind::Budget,
            budgets: default_budgets(),
            k_values: None,
            acc_head: 0.95,
            acc_tail: 0.1,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
    }

    /// Cross-field checks that do not need any data.
    pub fn validate(&self) -> Result<(), Failure> {
        if self.data.num_classes < 2 {
            return Err(Failure::usage("data.num_classes must be at least 2"));
        }
        if self.evaluate.bins == 0 {
            return Err(Failure::usage("evaluate.bins must be positive"));
        }
        if !(self.evaluate.histogram_width.is_finite() && self.evaluate.histogram_width > 0.0) {
            return Err(Failure::usage("evaluate.histogram_width must be positive"));
        }
        let in_unit = |b: f64| (0.0..=1.0).contains(&b);
        if let Some(b) = self.evaluate.budget.filter(|b| !in_unit(*b)) {
            return Err(Failure::usage(format!("evaluate.budget {b} outside [0, 1]")));
        }
        if let Some(b) = self.sweep.budgets.iter().find(|b| !in_unit(**b)) {
            return Err(Failure::usage(format!("sweep.budgets entry {b} outside [0, 1]")));
        }
        if !in_unit(self.model.baseline_budget) {
            return Err(Failure::usage("model.baseline_budget outside [0, 1]"));
        }
        self.model.architecture()?;
        self.model.defer_objective(SurrogateKind::Softmax)?;
        self.train.to_config(self.seed)?;
        Ok(())
    }

    /// The effective configuration as TOML, echoed into output directories.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// SHA-256 of the effective configuration text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn k_values(&self) -> Vec<usize> {
        self.sweep
            .k_values
            .clone()
            .unwrap_or_else(|| (0..=self.data.num_classes).collect())
    }
}
