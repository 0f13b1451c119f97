//! Per-client restricted evaluation and the average / worst / gap summary.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::models::{ModelFamily, ParamSet};
use crate::partition::ClientPartition;
use crate::textdata::Document;
use crate::{Error, Result};

pub const ROUNDS_CSV_HEADER: [&str; 9] = [
    "round",
    "client_id",
    "n_k",
    "eval_size",
    "accuracy",
    "avg_acc",
    "worst_acc",
    "gap",
    "argmin_client",
];

pub const CONVERGENCE_WINDOW: usize = 5;
pub const CONVERGENCE_TOLERANCE: f64 = 0.003;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientEval {
    pub client_id: usize,
    /// Training samples held by the client.
    pub n_k: usize,
    pub eval_size: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessSummary {
    /// Unweighted mean of client accuracies.
    pub avg: f64,
    pub worst: f64,
    pub gap: f64,
    pub argmin_client: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    /// 1-based.
    pub round: usize,
    pub evals: Vec<ClientEval>,
    pub summary: FairnessSummary,
    pub wall_time_secs: f64,
}

/// Indices of the test documents whose label is in `present`, in order.
pub fn restricted_indices(test: &[Document], present: &[usize]) -> Result<Vec<usize>> {
    if present.is_empty() {
        return Err(Error::Contract("client has no classes to evaluate on".into()));
    }
    let idx: Vec<usize> = (0..test.len())
        .filter(|&i| present.contains(&test[i].label))
        .collect();
    if idx.is_empty() {
        return Err(Error::Data(format!(
            "test set has no documents of classes {present:?}"
        )));
    }
    Ok(idx)
}

pub fn restricted_test_set<'a>(test: &'a [Document], present: &[usize]) -> Result<Vec<&'a Document>> {
    Ok(restricted_indices(test, present)?
        .into_iter()
        .map(|i| &test[i])
        .collect())
}

/// Scores a client from predictions over the whole test set.
pub fn score_client(client: &ClientPartition, test: &[Document], predictions: &[usize]) -> Result<ClientEval> {
    if predictions.len() != test.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} test documents",
            predictions.len(),
            test.len()
        )));
    }
    let idx = restricted_indices(test, &client.present_classes)?;
    let correct = idx.iter().filter(|&&i| predictions[i] == test[i].label).count();
    Ok(ClientEval {
        client_id: client.client_id,
        n_k: client.n_k(),
        eval_size: idx.len(),
        correct,
        accuracy: correct as f64 / idx.len() as f64,
    })
}

/// Eval-mode accuracy of `params` on the client's restricted test set.
pub fn evaluate_client(
    params: &ParamSet,
    family: &ModelFamily,
    client: &ClientPartition,
    test: &[Document],
    seq_len: usize,
) -> Result<ClientEval> {
    let docs = restricted_test_set(test, &client.present_classes)?;
    let pred = family.predict(params, &docs, seq_len)?;
    let correct = pred.iter().zip(&docs).filter(|(p, d)| **p == d.label).count();
    Ok(ClientEval {
        client_id: client.client_id,
        n_k: client.n_k(),
        eval_size: docs.len(),
        correct,
        accuracy: correct as f64 / docs.len() as f64,
    })
}

/// Mean, minimum and their difference; ties for the minimum go to the
/// lowest client id.
pub fn fairness_summary(evals: &[ClientEval]) -> Result<FairnessSummary> {
    let first = evals
        .first()
        .ok_or_else(|| Error::Contract("no client evaluations".into()))?;
    let avg = evals.iter().map(|e| e.accuracy).sum::<f64>() / evals.len() as f64;
    let mut worst = first;
    for e in evals {
        if e.accuracy < worst.accuracy || (e.accuracy == worst.accuracy && e.client_id < worst.client_id) {
            worst = e;
        }
    }
    // a mean of n equal values can round one ulp below them
    let gap = (avg - worst.accuracy).max(0.0);
    Ok(FairnessSummary {
        avg,
        worst: worst.accuracy,
        gap,
        argmin_client: worst.client_id,
    })
}

/// True iff the last `window` values span at most `tolerance`.
pub fn converged(series: &[f64], window: usize, tolerance: f64) -> bool {
    if window == 0 || series.len() < window {
        return false;
    }
    let tail = &series[series.len() - window..];
    let hi = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = tail.iter().copied().fold(f64::INFINITY, f64::min);
    hi - lo <= tolerance
}

/// [`converged`] on the per-round average accuracy.
pub fn convergence_check(logs: &[RoundLog], window: usize, tolerance: f64) -> bool {
    let avg: Vec<f64> = logs.iter().map(|l| l.summary.avg).collect();
    converged(&avg, window, tolerance)
}

pub fn write_rounds_csv(path: &Path, logs: &[RoundLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let fail = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(ROUNDS_CSV_HEADER).map_err(fail)?;
    for log in logs {
        let s = &log.summary;
        for e in &log.evals {
            w.write_record([
                log.round.to_string(),
                e.client_id.to_string(),
                e.n_k.to_string(),
                e.eval_size.to_string(),
                e.accuracy.to_string(),
                s.avg.to_string(),
                s.worst.to_string(),
                s.gap.to_string(),
                s.argmin_client.to_string(),
            ])
            .map_err(fail)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row of `rounds.csv`.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct RoundsRow {
    pub round: usize,
    pub client_id: usize,
    pub n_k: usize,
    pub eval_size: usize,
    pub accuracy: f64,
    pub avg_acc: f64,
    pub worst_acc: f64,
    pub gap: f64,
    pub argmin_client: usize,
}

pub fn read_rounds_csv(path: &Path) -> Result<Vec<RoundsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::Data(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header != ROUNDS_CSV_HEADER {
        return Err(Error::Data(format!("{}: unexpected header {header:?}", path.display())));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}
