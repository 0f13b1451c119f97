//! Restricted per-client scoring, the fairness summary and the convergence rule.
//!
//! ```bash
//! cargo run -p fedskew --example fairness_metrics
//! ```

use fedskew::fedcli::{format_ratio, reduction_ratio};
use fedskew::metrics::{converged, fairness_summary, score_client};
use fedskew::partition::ClientPartition;
use fedskew::textdata::Document;

fn client(id: usize, hist: [usize; 3]) -> ClientPartition {
    ClientPartition {
        client_id: id,
        sample_indices: (0..hist.iter().sum()).collect(),
        label_histogram: hist.to_vec(),
        present_classes: (0..3).filter(|&c| hist[c] > 0).collect(),
    }
}

fn main() -> fedskew::Result<()> {
    let labels = [0, 0, 1, 1, 2, 2, 0, 1, 2];
    let preds = [0, 0, 1, 0, 2, 1, 0, 1, 1];
    let test: Vec<Document> = labels
        .iter()
        .map(|&label| Document {
            tokens: vec![2],
            label,
            raw_len: 1,
        })
        .collect();
    // a client is only scored on labels it trained on
    let clients = [client(0, [40, 0, 0]), client(1, [5, 30, 0]), client(2, [0, 2, 50])];
    let evals: Vec<_> = clients
        .iter()
        .map(|c| score_client(c, &test, &preds))
        .collect::<Result<_, _>>()?;
    for e in &evals {
        println!("client {}: {}/{} correct", e.client_id, e.correct, e.eval_size);
    }
    let s = fairness_summary(&evals)?;
    println!("avg {:.3} worst {:.3} gap {:.3} (client {})", s.avg, s.worst, s.gap, s.argmin_client);

    println!("gap 32.2 -> 3.7: reduction {}", format_ratio(reduction_ratio(32.2, 3.7)));
    let settled = [0.62, 0.80, 0.871, 0.872, 0.871, 0.872, 0.871];
    let drifting = [0.62, 0.80, 0.866, 0.872, 0.869, 0.870, 0.866];
    println!("settled converged: {}", converged(&settled, 5, 0.003));
    println!("drifting converged: {}", converged(&drifting, 5, 0.003));
    Ok(())
}
