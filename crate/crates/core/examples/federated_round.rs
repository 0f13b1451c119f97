//! Drives the federation loop directly, without the sweep runner.
//!
//! ```bash
//! cargo run --release -p fedskew --example federated_round
//! ```

use fedskew::federation::{run_federation_with, Aggregator, FedConfig, LocalConfig};
use fedskew::metrics::convergence_check;
use fedskew::models::{ModelFamily, TextCnnConfig};
use fedskew::numkit::OptimizerConfig;
use fedskew::partition::{dirichlet_partition, PartitionConfig};
use fedskew::textdata::{generate_synthetic, SyntheticSpec};

fn main() -> fedskew::Result<()> {
    let ds = generate_synthetic(&SyntheticSpec {
        classes: 4,
        vocab_size: 300,
        train_per_class: 200,
        test_per_class: 100,
        doc_length: 4,
        topic_concentration: 0.05,
        seed: 11,
        max_seq_len: 6,
    })?;
    let clients = dirichlet_partition(&ds, &PartitionConfig::new(6, 0.3, 42))?;
    let family = ModelFamily::TextCnn(TextCnnConfig {
        embed_dim: 16,
        filters_per_width: 16,
        num_classes: ds.num_classes,
        ..TextCnnConfig::default()
    });
    let cfg = FedConfig {
        rounds: 8,
        local: LocalConfig {
            optimizer: OptimizerConfig::sgd(0.05),
            local_epochs: 2,
            batch_size: 32,
        },
        aggregator: Aggregator::FedAvg,
        participation: 1.0,
        seed: 7,
        checkpoint_dir: None,
    };
    let init = family.initialize(&ds, cfg.seed)?;
    let outcome = run_federation_with(&ds, &clients, &family, &cfg, init, |log| {
        let accs: Vec<String> = log.evals.iter().map(|e| format!("{:.2}", e.accuracy)).collect();
        println!(
            "round {:>2}  avg {:.3}  worst {:.3}  gap {:.3}  [{}]",
            log.round,
            log.summary.avg,
            log.summary.worst,
            log.summary.gap,
            accs.join(" ")
        );
    })?;
    println!("converged: {}", convergence_check(&outcome.logs, 5, 0.003));
    Ok(())
}
