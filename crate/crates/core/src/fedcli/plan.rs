use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{DatasetSpec, ExperimentConfig, MetricsConfig};
use crate::federation::{Aggregator, FedConfig, LocalConfig};
use crate::models::ModelFamily;
use crate::partition::PartitionConfig;
use crate::{Error, Result};

/// One cell of the sweep with every default filled in. Its canonical JSON
/// determines the run id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub model_label: String,
    pub model: ModelFamily,
    pub training: LocalConfig,
    pub partition: PartitionConfig,
    pub rounds: usize,
    pub aggregator: Aggregator,
    pub participation: f64,
    pub checkpoints: bool,
    pub metrics: MetricsConfig,
}

impl RunSpec {
    /// First 16 hex digits of SHA-256 over the key-sorted JSON encoding.
    pub fn run_id(&self) -> Result<String> {
        // serde_json::Value keeps object keys sorted
        let canonical = serde_json::to_value(self)?.to_string();
        let digest = Sha256::digest(canonical.as_bytes());
        Ok(hex::encode(&digest[..8]))
    }

    pub fn fed_config(&self) -> FedConfig {
        FedConfig {
            rounds: self.rounds,
            local: self.training.clone(),
            aggregator: self.aggregator,
            participation: self.participation,
            seed: self.seed,
            checkpoint_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlannedRun {
    /// Position in sweep order: alpha, then model, then aggregator.
    pub index: usize,
    pub run_id: String,
    pub spec: RunSpec,
}

/// The alpha x model x aggregator cross product in config order.
pub fn plan(cfg: &ExperimentConfig) -> Result<Vec<PlannedRun>> {
    let classes = cfg.num_classes();
    let aggregators: Vec<Aggregator> = cfg.federation.aggregators.iter().flat_map(|a| a.expand()).collect();
    let mut runs = Vec::new();
    for &alpha in &cfg.partition.alphas {
        for m in &cfg.models {
            for &aggregator in &aggregators {
                let spec = RunSpec {
                    seed: cfg.seed,
                    dataset: cfg.dataset.clone(),
                    model_label: m.label(),
                    model: m.model.resolved(classes),
                    training: m.training.clone(),
                    partition: partition_config(cfg, alpha),
                    rounds: cfg.rounds_for(alpha),
                    aggregator,
                    participation: cfg.federation.participation,
                    checkpoints: cfg.federation.checkpoints,
                    metrics: cfg.metrics.clone(),
                };
                runs.push(PlannedRun {
                    index: runs.len(),
                    run_id: spec.run_id()?,
                    spec,
                });
            }
        }
    }
    let mut ids: Vec<&str> = runs.iter().map(|r| r.run_id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::config("sweep", "two cells resolve to the same run; remove the duplicate alpha or beta"));
    }
    Ok(runs)
}

pub fn partition_config(cfg: &ExperimentConfig, alpha: f64) -> PartitionConfig {
    let p = &cfg.partition;
    PartitionConfig {
        num_clients: p.num_clients,
        alpha,
        seed: p.seed,
        min_samples_per_client: p.min_samples_per_client,
        max_redraws: p.max_redraws,
    }
}
