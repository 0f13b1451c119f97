use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::federation::{Aggregator, LocalConfig};
use crate::models::ModelFamily;
use crate::partition::DEFAULT_PARTITION_SEED;
use crate::textdata::{CsvSchema, SyntheticSpec};
use crate::{Error, Result};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "FEDSKEW_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds model initialization, pretraining and every training stream.
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub models: Vec<ModelSpec>,
    pub partition: PartitionSweep,
    pub federation: FederationSweep,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    Csv(CsvSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSpec {
    /// Relative paths are taken from the config file's directory.
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(default)]
    pub schema: CsvSchema,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Label in reports; defaults to the family name.
    #[serde(default)]
    pub name: Option<String>,
    pub model: ModelFamily,
    pub training: LocalConfig,
}

impl ModelSpec {
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.model.name().to_owned())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSweep {
    pub alphas: Vec<f64>,
    #[serde(default = "default_clients")]
    pub num_clients: usize,
    #[serde(default = "default_partition_seed")]
    pub seed: u64,
    #[serde(default = "default_min_samples")]
    pub min_samples_per_client: usize,
    #[serde(default = "default_max_redraws")]
    pub max_redraws: u32,
}

fn default_clients() -> usize {
    10
}
fn default_partition_seed() -> u64 {
    DEFAULT_PARTITION_SEED
}
fn default_min_samples() -> usize {
    1
}
fn default_max_redraws() -> u32 {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSweep {
    pub rounds: usize,
    /// Per-alpha round counts replacing `rounds`.
    #[serde(default)]
    pub round_overrides: Vec<RoundOverride>,
    pub aggregators: Vec<AggregatorSpec>,
    #[serde(default = "default_participation")]
    pub participation: f64,
    /// Save the global model after every round.
    #[serde(default)]
    pub checkpoints: bool,
}

fn default_participation() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundOverride {
    pub alpha: f64,
    pub rounds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AggregatorSpec {
    FedAvg,
    /// One run per beta.
    FedAvgW { betas: Vec<f64> },
}

impl AggregatorSpec {
    pub fn expand(&self) -> Vec<Aggregator> {
        match self {
            AggregatorSpec::FedAvg => vec![Aggregator::FedAvg],
            AggregatorSpec::FedAvgW { betas } => {
                betas.iter().map(|&beta| Aggregator::FedAvgW { beta }).collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    #[serde(default = "default_window")]
    pub convergence_window: usize,
    #[serde(default = "default_tolerance")]
    pub convergence_tolerance: f64,
}

fn default_window() -> usize {
    crate::metrics::CONVERGENCE_WINDOW
}
fn default_tolerance() -> f64 {
    crate::metrics::CONVERGENCE_TOLERANCE
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            convergence_window: default_window(),
            convergence_tolerance: default_tolerance(),
        }
    }
}

impl ExperimentConfig {
    /// Reads, resolves relative paths against the file's directory and
    /// validates. Unknown keys are errors.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses without validating; errors carry the JSON path of the field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DatasetSpec::Csv(c) = &mut self.dataset {
            fix(&mut c.train);
            fix(&mut c.test);
        }
        if let Some(out) = &mut self.output_dir {
            fix(out);
        }
    }

    pub fn num_classes(&self) -> usize {
        match &self.dataset {
            DatasetSpec::Synthetic(s) => s.classes,
            DatasetSpec::Csv(c) => c.schema.num_classes,
        }
    }

    pub fn max_seq_len(&self) -> usize {
        match &self.dataset {
            DatasetSpec::Synthetic(s) => s.max_seq_len,
            DatasetSpec::Csv(c) => c.schema.max_seq_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetSpec::Synthetic(s) => s.validate("dataset")?,
            DatasetSpec::Csv(c) => c.schema.validate("dataset.schema")?,
        }
        if self.models.is_empty() {
            return Err(Error::config("models", "must list at least one model"));
        }
        let classes = self.num_classes();
        for (i, m) in self.models.iter().enumerate() {
            let path = format!("models[{i}]");
            let declared = m.model.num_classes();
            if declared != 0 && declared != classes {
                return Err(Error::config(
                    format!("{path}.model.num_classes"),
                    format!("{declared} classes but the dataset has {classes}"),
                ));
            }
            m.model
                .resolved(classes)
                .validate(&format!("{path}.model"), self.max_seq_len())?;
            m.training.validate(&format!("{path}.training"))?;
        }
        let mut labels: Vec<String> = self.models.iter().map(ModelSpec::label).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("models", "model labels must be unique; set `name`"));
        }

        let p = &self.partition;
        if p.alphas.is_empty() {
            return Err(Error::config("partition.alphas", "must be nonempty"));
        }
        for (i, &a) in p.alphas.iter().enumerate() {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::config(format!("partition.alphas[{i}]"), "must be positive"));
            }
        }
        if p.num_clients == 0 {
            return Err(Error::config("partition.num_clients", "must be >= 1"));
        }
        if p.max_redraws == 0 {
            return Err(Error::config("partition.max_redraws", "must be >= 1"));
        }

        let f = &self.federation;
        if f.rounds == 0 {
            return Err(Error::config("federation.rounds", "must be >= 1"));
        }
        for (i, o) in f.round_overrides.iter().enumerate() {
            if o.rounds == 0 {
                return Err(Error::config(format!("federation.round_overrides[{i}].rounds"), "must be >= 1"));
            }
        }
        if !(f.participation > 0.0 && f.participation <= 1.0) {
            return Err(Error::config("federation.participation", "must lie in (0, 1]"));
        }
        if f.aggregators.is_empty() {
            return Err(Error::config("federation.aggregators", "must be nonempty"));
        }
        for (i, a) in f.aggregators.iter().enumerate() {
            if let AggregatorSpec::FedAvgW { betas } = a {
                if betas.is_empty() {
                    return Err(Error::config(format!("federation.aggregators[{i}].betas"), "must be nonempty"));
                }
                for (j, &b) in betas.iter().enumerate() {
                    if !(b >= 0.0 && b.is_finite()) {
                        return Err(Error::config(
                            format!("federation.aggregators[{i}].betas[{j}]"),
                            "must be a finite number >= 0",
                        ));
                    }
                }
            }
        }
        let m = &self.metrics;
        if m.convergence_window == 0 || !(m.convergence_tolerance >= 0.0) {
            return Err(Error::config("metrics", "window must be >= 1 and tolerance >= 0"));
        }
        Ok(())
    }

    /// Rounds for a given alpha after overrides.
    pub fn rounds_for(&self, alpha: f64) -> usize {
        self.federation
            .round_overrides
            .iter()
            .find(|o| o.alpha == alpha)
            .map_or(self.federation.rounds, |o| o.rounds)
    }

    /// Output root: the config's `output_dir`, else `$FEDSKEW_OUT`, else `out`.
    pub fn default_output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}
