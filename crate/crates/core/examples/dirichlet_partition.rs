//! Splits one corpus across ten clients at several concentrations.
//!
//! ```bash
//! cargo run -p fedskew --example dirichlet_partition
//! ```

use fedskew::partition::{dirichlet_partition, skew_report, PartitionConfig};
use fedskew::textdata::{generate_synthetic, SyntheticSpec};

fn main() -> fedskew::Result<()> {
    let ds = generate_synthetic(&SyntheticSpec {
        classes: 4,
        vocab_size: 500,
        train_per_class: 500,
        test_per_class: 200,
        doc_length: 8,
        topic_concentration: 0.05,
        seed: 1,
        max_seq_len: 8,
    })?;
    for alpha in [0.1, 0.5, 1.0, 5.0] {
        let clients = dirichlet_partition(&ds, &PartitionConfig::new(10, alpha, 42))?;
        let report = skew_report(&clients);
        let ratio = report.ratio.map_or("inf".into(), |r| format!("{r:.1}"));
        let mean_entropy = report.entropies.iter().sum::<f64>() / report.entropies.len() as f64;
        println!("alpha {alpha}: sizes {:?}", report.sizes);
        println!("  max/min {ratio}, mean label entropy {mean_entropy:.3} nats");
        for c in clients.iter().take(3) {
            println!("  client {} histogram {:?}", c.client_id, c.label_histogram);
        }
    }
    Ok(())
}
