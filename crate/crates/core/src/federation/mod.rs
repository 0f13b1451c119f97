//! The round loop: broadcast, local training, aggregation, evaluation.

mod aggregate;

pub use aggregate::{
    aggregate, fedavg_weights, fedavgw_weights, AggregationStrategy, AggregationWeights, Aggregator,
    FROZEN_DRIFT_TOLERANCE,
};

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics::{fairness_summary, score_client, RoundLog};
use crate::models::{save_checkpoint, ModelFamily, ParamSet};
use crate::numkit::{Graph, OptimizerConfig, OptimizerState};
use crate::partition::ClientPartition;
use crate::seed::{self, tag};
use crate::textdata::{make_batches, Dataset, Document};
use crate::{Error, Result};

/// Client-side training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalConfig {
    pub optimizer: OptimizerConfig,
    pub local_epochs: usize,
    pub batch_size: usize,
}

impl LocalConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        self.optimizer.validate(&format!("{path}.optimizer"))?;
        if self.local_epochs == 0 {
            return Err(Error::config(format!("{path}.local_epochs"), "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(format!("{path}.batch_size"), "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    pub rounds: usize,
    pub local: LocalConfig,
    pub aggregator: Aggregator,
    #[serde(default = "default_participation")]
    pub participation: f64,
    /// Root of every training stream (batch order, dropout, sampling).
    pub seed: u64,
    /// When set, the global model is saved under `round-<t>/` after each round.
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

fn default_participation() -> f64 {
    1.0
}

impl FedConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config(format!("{path}.rounds"), "must be >= 1"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config(format!("{path}.participation"), "must lie in (0, 1]"));
        }
        self.local.validate(&format!("{path}.local"))?;
        self.aggregator.validate(&format!("{path}.aggregator"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub n_k: usize,
    pub params: ParamSet,
}

/// Trains a copy of `global` on the client's samples for the configured
/// epochs with a fresh optimizer. An empty client returns `global` as is.
///
/// Batch order comes from `(seed, BATCHES, round, client, epoch)` and
/// dropout from `(seed, DROPOUT, round, client)`.
pub fn local_train(
    global: &ParamSet,
    family: &ModelFamily,
    client: &ClientPartition,
    dataset: &Dataset,
    local: &LocalConfig,
    seed: u64,
    round: usize,
) -> Result<ClientUpdate> {
    let id = client.client_id;
    let mut params = global.clone();
    let docs: Vec<&Document> = client
        .sample_indices
        .iter()
        .map(|&i| {
            dataset
                .train
                .get(i)
                .ok_or_else(|| Error::Data(format!("client {id} holds index {i} outside the training set")))
        })
        .collect::<Result<_>>()?;
    let diverged = |e: Error| match e {
        Error::NonFinite { .. } => Error::Divergence {
            client: id,
            round,
            source: Box::new(e),
        },
        other => other,
    };
    let (r, c) = (round as u64, id as u64);
    let mut opt = OptimizerState::new(local.optimizer.clone());
    let mut dropout = seed::stream(seed, &[tag::DROPOUT, r, c]);
    for epoch in 0..local.local_epochs as u64 {
        let batch_seed = seed::derive(seed, &[tag::BATCHES, r, c, epoch]);
        for batch in make_batches(&docs, local.batch_size, dataset.max_seq_len, batch_seed)? {
            let grads = {
                let mut g = Graph::new();
                let loss = family
                    .loss(&mut g, &params, &batch, Some(&mut dropout))
                    .map_err(diverged)?;
                g.backward(loss).map_err(diverged)?
            };
            opt.step(params.trainable_mut(), &grads).map_err(diverged)?;
        }
    }
    Ok(ClientUpdate {
        client_id: id,
        n_k: docs.len(),
        params,
    })
}

/// Clients taking part in `round` (1-based), ascending. With full
/// participation this is every client.
pub fn participants(num_clients: usize, participation: f64, seed: u64, round: usize) -> Vec<usize> {
    let m = ((participation * num_clients as f64).round() as usize).clamp(1, num_clients);
    if m == num_clients {
        return (0..num_clients).collect();
    }
    let mut rng = seed::stream(seed, &[tag::PARTICIPATION, round as u64]);
    let mut chosen = index::sample(&mut rng, num_clients, m).into_vec();
    chosen.sort_unstable();
    chosen
}

/// Eval-mode scores of `params` for each listed client, from one pass over
/// the test set.
pub fn evaluate_clients(
    params: &ParamSet,
    family: &ModelFamily,
    clients: &[&ClientPartition],
    dataset: &Dataset,
) -> Result<Vec<crate::metrics::ClientEval>> {
    let docs: Vec<&Document> = dataset.test.iter().collect();
    let pred = family.predict(params, &docs, dataset.max_seq_len)?;
    clients
        .iter()
        .map(|c| score_client(c, &dataset.test, &pred))
        .collect()
}

#[derive(Clone, Debug)]
pub struct FederationOutcome {
    pub logs: Vec<RoundLog>,
    pub final_params: ParamSet,
}

/// Runs `cfg.rounds` rounds from `init`. Client training uses the current
/// rayon pool; results are reduced in client-id order, so the outcome does
/// not depend on the number of workers.
pub fn run_federation(
    dataset: &Dataset,
    partitions: &[ClientPartition],
    family: &ModelFamily,
    cfg: &FedConfig,
    init: ParamSet,
) -> Result<FederationOutcome> {
    run_federation_with(dataset, partitions, family, cfg, init, |_| {})
}

/// [`run_federation`] with a callback after each round.
pub fn run_federation_with(
    dataset: &Dataset,
    partitions: &[ClientPartition],
    family: &ModelFamily,
    cfg: &FedConfig,
    init: ParamSet,
    mut on_round: impl FnMut(&RoundLog),
) -> Result<FederationOutcome> {
    cfg.validate("federation")?;
    if partitions.is_empty() {
        return Err(Error::Contract("no clients".into()));
    }
    let mut global = init;
    let mut logs = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let start = Instant::now();
        let ctx = |e: Error| Error::Round {
            round,
            source: Box::new(e),
        };
        let active: Vec<&ClientPartition> = participants(partitions.len(), cfg.participation, cfg.seed, round)
            .into_iter()
            .map(|k| &partitions[k])
            .filter(|c| c.n_k() > 0)
            .collect();
        let updates: Vec<ClientUpdate> = active
            .par_iter()
            .map(|c| local_train(&global, family, c, dataset, &cfg.local, cfg.seed, round))
            .collect::<Result<_>>()
            .map_err(ctx)?;
        if !updates.is_empty() {
            let sizes: Vec<usize> = updates.iter().map(|u| u.n_k).collect();
            let weights = cfg.aggregator.weights(&sizes).map_err(ctx)?;
            let refs: Vec<&ParamSet> = updates.iter().map(|u| &u.params).collect();
            global = aggregate(&refs, &weights).map_err(ctx)?;
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            save_checkpoint(&global, &dir.join(format!("round-{round}"))).map_err(ctx)?;
        }
        let evals = evaluate_clients(&global, family, &active, dataset).map_err(ctx)?;
        let summary = fairness_summary(&evals).map_err(ctx)?;
        let log = RoundLog {
            round,
            evals,
            summary,
            wall_time_secs: start.elapsed().as_secs_f64(),
        };
        on_round(&log);
        logs.push(log);
    }
    Ok(FederationOutcome {
        logs,
        final_params: global,
    })
}
