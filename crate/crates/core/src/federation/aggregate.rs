use serde::{Deserialize, Serialize};

use crate::models::ParamSet;
use crate::numkit::Tensor;
use crate::{Error, Result};

/// Largest tolerated difference between clients' copies of a frozen group.
pub const FROZEN_DRIFT_TOLERANCE: f64 = 1e-12;

/// Per-client weights for non-adapter and adapter groups, in update order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    pub standard: Vec<f64>,
    pub lora: Vec<f64>,
}

impl AggregationWeights {
    /// Nonnegative entries summing to 1 within `1e-12`, equal lengths.
    pub fn validate(&self) -> Result<()> {
        if self.standard.len() != self.lora.len() || self.standard.is_empty() {
            return Err(Error::Contract("weight vectors differ in length or are empty".into()));
        }
        for (label, w) in [("standard", &self.standard), ("lora", &self.lora)] {
            let total: f64 = w.iter().sum();
            if w.iter().any(|&x| !(x >= 0.0)) || (total - 1.0).abs() > 1e-12 {
                return Err(Error::Contract(format!("{label} weights {w:?} are not normalized")));
            }
        }
        Ok(())
    }
}

/// A server-side rule turning client sizes into aggregation weights.
/// New aggregators implement this and reuse [`aggregate`].
pub trait AggregationStrategy: Send + Sync {
    fn name(&self) -> String;
    fn weights(&self, sizes: &[usize]) -> Result<AggregationWeights>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Aggregator {
    FedAvg,
    FedAvgW { beta: f64 },
}

impl Aggregator {
    pub fn validate(&self, path: &str) -> Result<()> {
        match *self {
            Aggregator::FedAvgW { beta } if !(beta >= 0.0 && beta.is_finite()) => Err(Error::config(
                format!("{path}.beta"),
                "must be a finite number >= 0",
            )),
            _ => Ok(()),
        }
    }

    pub fn beta(&self) -> Option<f64> {
        match *self {
            Aggregator::FedAvg => None,
            Aggregator::FedAvgW { beta } => Some(beta),
        }
    }
}

impl AggregationStrategy for Aggregator {
    fn name(&self) -> String {
        match self {
            Aggregator::FedAvg => "fedavg".into(),
            Aggregator::FedAvgW { beta } => format!("fedavgw(beta={beta})"),
        }
    }

    fn weights(&self, sizes: &[usize]) -> Result<AggregationWeights> {
        match *self {
            Aggregator::FedAvg => fedavg_weights(sizes),
            Aggregator::FedAvgW { beta } => fedavgw_weights(sizes, beta),
        }
    }
}

/// `n_k / N` for both vectors.
pub fn fedavg_weights(sizes: &[usize]) -> Result<AggregationWeights> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::Contract("every client is empty".into()));
    }
    let w: Vec<f64> = sizes.iter().map(|&n| n as f64 / total as f64).collect();
    Ok(AggregationWeights {
        standard: w.clone(),
        lora: w,
    })
}

/// Adapter weights `(1/n_k)^beta / sum_j (1/n_j)^beta`; other groups keep
/// `n_k / N`. Evaluated as `(n_min / n_k)^beta`, which is the same ratio and
/// is exactly 1 for equal sizes.
pub fn fedavgw_weights(sizes: &[usize], beta: f64) -> Result<AggregationWeights> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::config("beta", "must be a finite number >= 0"));
    }
    if sizes.contains(&0) {
        return Err(Error::Contract("inverse-size weights need every n_k > 0".into()));
    }
    let standard = fedavg_weights(sizes)?.standard;
    let min = *sizes.iter().min().expect("nonempty after fedavg_weights") as f64;
    let raw: Vec<f64> = sizes.iter().map(|&n| (min / n as f64).powf(beta)).collect();
    let total: f64 = raw.iter().sum();
    Ok(AggregationWeights {
        standard,
        lora: raw.iter().map(|x| x / total).collect(),
    })
}

/// Weighted sum per group in update order: adapter groups use
/// `weights.lora`, the rest `weights.standard`. Frozen groups must agree
/// across updates and are copied from the first.
pub fn aggregate(updates: &[&ParamSet], weights: &AggregationWeights) -> Result<ParamSet> {
    let first = *updates
        .first()
        .ok_or_else(|| Error::Contract("nothing to aggregate".into()))?;
    if weights.standard.len() != updates.len() {
        return Err(Error::Contract(format!(
            "{} weights for {} updates",
            weights.standard.len(),
            updates.len()
        )));
    }
    weights.validate()?;
    for u in &updates[1..] {
        first.check_congruent(u)?;
    }
    let mut tensors = Vec::with_capacity(first.groups().len());
    for (gi, group) in first.groups().iter().enumerate() {
        if !group.trainable {
            for u in &updates[1..] {
                let drift = u.groups()[gi].tensor.max_abs_diff(&group.tensor);
                if drift > FROZEN_DRIFT_TOLERANCE {
                    return Err(Error::Integrity {
                        name: group.name.clone(),
                        drift,
                    });
                }
            }
            tensors.push(group.tensor.clone());
            continue;
        }
        let w = if group.lora { &weights.lora } else { &weights.standard };
        let mut acc = vec![0.0; group.tensor.numel()];
        for (u, &wk) in updates.iter().zip(w) {
            for (a, &x) in acc.iter_mut().zip(u.groups()[gi].tensor.data()) {
                *a += wk * x;
            }
        }
        tensors.push(Tensor::new(group.tensor.shape().to_vec(), acc)?);
    }
    first.with_tensors(tensors)
}
