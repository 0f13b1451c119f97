//! Class-wise Dirichlet label partitioning across clients.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::seed::{self, tag};
use crate::textdata::{sample_dirichlet, Dataset};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub alpha: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_min_samples")]
    pub min_samples_per_client: usize,
    #[serde(default = "default_max_redraws")]
    pub max_redraws: u32,
}

pub const DEFAULT_PARTITION_SEED: u64 = 42;

fn default_seed() -> u64 {
    DEFAULT_PARTITION_SEED
}
fn default_min_samples() -> usize {
    1
}
fn default_max_redraws() -> u32 {
    100
}

impl PartitionConfig {
    pub fn new(num_clients: usize, alpha: f64, seed: u64) -> Self {
        PartitionConfig {
            num_clients,
            alpha,
            seed,
            min_samples_per_client: default_min_samples(),
            max_redraws: default_max_redraws(),
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config(format!("{path}.num_clients"), "must be >= 1"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(
                format!("{path}.alpha"),
                "must be a positive finite number",
            ));
        }
        if self.max_redraws == 0 {
            return Err(Error::config(format!("{path}.max_redraws"), "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub client_id: usize,
    /// Ascending indices into the training split.
    pub sample_indices: Vec<usize>,
    pub label_histogram: Vec<usize>,
    pub present_classes: Vec<usize>,
}

impl ClientPartition {
    fn new(client_id: usize, mut sample_indices: Vec<usize>, labels: &[usize], classes: usize) -> Self {
        sample_indices.sort_unstable();
        let mut label_histogram = vec![0; classes];
        for &i in &sample_indices {
            label_histogram[labels[i]] += 1;
        }
        let present_classes = (0..classes).filter(|&c| label_histogram[c] > 0).collect();
        ClientPartition {
            client_id,
            sample_indices,
            label_histogram,
            present_classes,
        }
    }

    pub fn n_k(&self) -> usize {
        self.sample_indices.len()
    }

    /// Fraction of the client's samples in each class (zeros if empty).
    pub fn class_proportions(&self) -> Vec<f64> {
        let n = self.n_k().max(1) as f64;
        self.label_histogram.iter().map(|&h| h as f64 / n).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkewReport {
    pub sizes: Vec<usize>,
    pub min: usize,
    pub max: usize,
    /// `max / min`; absent when some client is empty.
    pub ratio: Option<f64>,
    /// Label entropy per client, in nats.
    pub entropies: Vec<f64>,
}

pub fn skew_report(partitions: &[ClientPartition]) -> SkewReport {
    let sizes: Vec<usize> = partitions.iter().map(ClientPartition::n_k).collect();
    let min = sizes.iter().copied().min().unwrap_or(0);
    let max = sizes.iter().copied().max().unwrap_or(0);
    let ratio = (min > 0).then(|| max as f64 / min as f64);
    let entropies = partitions
        .iter()
        .map(|p| {
            p.class_proportions()
                .iter()
                .filter(|&&q| q > 0.0)
                .map(|&q| -q * q.ln())
                .sum()
        })
        .collect();
    SkewReport {
        sizes,
        min,
        max,
        ratio,
        entropies,
    }
}

/// Integer counts summing to `total`, proportional to `p`. Remainders go to
/// the largest fractional parts, lower index first on ties.
pub fn largest_remainder(p: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = p.iter().map(|&q| q * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Partitions sample indices `0..labels.len()` by label.
pub fn partition_labels(
    labels: &[usize],
    num_classes: usize,
    cfg: &PartitionConfig,
) -> Result<Vec<ClientPartition>> {
    cfg.validate("partition")?;
    if labels.is_empty() {
        return Err(Error::Data("cannot partition an empty training set".into()));
    }
    if num_classes == 0 {
        return Err(Error::Data("dataset declares no classes".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Data(format!("label {bad} outside {num_classes} classes")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }

    let k = cfg.num_clients;
    let mut last = None;
    for attempt in 0..cfg.max_redraws {
        let mut rng = seed::stream(cfg.seed, &[tag::PARTITION, u64::from(attempt)]);
        let mut owned: Vec<Vec<usize>> = vec![Vec::new(); k];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let p = sample_dirichlet(cfg.alpha, k, &mut rng);
            let mut rest = members.as_slice();
            for (client, n) in largest_remainder(&p, members.len()).into_iter().enumerate() {
                let (head, tail) = rest.split_at(n);
                owned[client].extend_from_slice(head);
                rest = tail;
            }
        }
        let clients: Vec<ClientPartition> = owned
            .into_iter()
            .enumerate()
            .map(|(id, idx)| ClientPartition::new(id, idx, labels, num_classes))
            .collect();
        check_exact(&clients, labels.len())?;
        if clients.iter().all(|c| c.n_k() >= cfg.min_samples_per_client) {
            return Ok(clients);
        }
        last = Some(skew_report(&clients));
    }
    Err(Error::RedrawBudgetExhausted {
        attempts: cfg.max_redraws,
        last: Box::new(last.expect("at least one draw")),
    })
}

pub fn dirichlet_partition(dataset: &Dataset, cfg: &PartitionConfig) -> Result<Vec<ClientPartition>> {
    partition_labels(&dataset.train_labels(), dataset.num_classes, cfg)
}

/// Every index in `0..n` owned by exactly one client.
pub fn check_exact(clients: &[ClientPartition], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for c in clients {
        for &i in &c.sample_indices {
            match seen.get_mut(i) {
                None => return Err(Error::Data(format!("client {} holds index {i} >= {n}", c.client_id))),
                Some(s) if *s => {
                    return Err(Error::Data(format!("index {i} assigned to two clients")))
                }
                Some(s) => *s = true,
            }
        }
    }
    match seen.iter().position(|s| !s) {
        Some(i) => Err(Error::Data(format!("index {i} assigned to no client"))),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionManifest {
    pub config: PartitionConfig,
    pub num_samples: usize,
    pub num_classes: usize,
    pub clients: Vec<ClientPartition>,
    pub report: SkewReport,
}

impl PartitionManifest {
    pub fn new(cfg: &PartitionConfig, num_classes: usize, clients: Vec<ClientPartition>) -> Self {
        PartitionManifest {
            config: cfg.clone(),
            num_samples: clients.iter().map(ClientPartition::n_k).sum(),
            num_classes,
            report: skew_report(&clients),
            clients,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest and rechecks exhaustiveness and the derived fields.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: PartitionManifest = serde_json::from_str(&text)?;
        check_exact(&m.clients, m.num_samples)?;
        for (i, c) in m.clients.iter().enumerate() {
            let present: Vec<usize> = (0..c.label_histogram.len())
                .filter(|&k| c.label_histogram[k] > 0)
                .collect();
            if c.client_id != i
                || c.label_histogram.len() != m.num_classes
                || c.label_histogram.iter().sum::<usize>() != c.n_k()
                || present != c.present_classes
            {
                return Err(Error::Data(format!(
                    "{}: client {i} is inconsistent",
                    path.display()
                )));
            }
        }
        if skew_report(&m.clients) != m.report {
            return Err(Error::Data(format!("{}: stale skew report", path.display())));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_remainder_is_exact() {
        assert_eq!(largest_remainder(&[0.5, 0.5], 3), [2, 1]);
        assert_eq!(largest_remainder(&[0.2, 0.3, 0.5], 10), [2, 3, 5]);
        assert_eq!(largest_remainder(&[1.0], 7), [7]);
        assert_eq!(largest_remainder(&[0.34, 0.33, 0.33], 2).iter().sum::<usize>(), 2);
    }

    #[test]
    fn report_ratio_and_entropy() {
        let labels = [0, 0, 1, 1];
        let a = ClientPartition::new(0, vec![0, 1], &labels, 2);
        let b = ClientPartition::new(1, vec![2, 3], &labels, 2);
        let r = skew_report(&[a, b]);
        assert_eq!(r.ratio, Some(1.0));
        assert_eq!(r.entropies, [0.0, 0.0]);
    }
}
