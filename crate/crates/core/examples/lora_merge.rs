//! LoRA adapters on the query/value projections: parameter budget, the
//! zero-initialized B factor, and folding adapters back into the base weights.
//!
//! ```bash
//! cargo run -p fedskew --example lora_merge
//! ```

use fedskew::models::{BackboneMode, LoraFormerConfig, ModelFamily};
use fedskew::numkit::Tensor;
use fedskew::seed;
use fedskew::textdata::{generate_synthetic, Document, SyntheticSpec};

fn main() -> fedskew::Result<()> {
    let ds = generate_synthetic(&SyntheticSpec {
        classes: 4,
        vocab_size: 300,
        train_per_class: 10,
        test_per_class: 20,
        doc_length: 10,
        topic_concentration: 0.1,
        seed: 3,
        max_seq_len: 10,
    })?;
    let cfg = LoraFormerConfig {
        num_classes: 4,
        backbone: BackboneMode::RandomFrozen,
        ..LoraFormerConfig::default()
    };
    let family = ModelFamily::LoraFormer(cfg.clone());
    let params = cfg.build(ds.vocab_size(), ds.max_seq_len, 7)?;
    println!(
        "parameters {} total, {} trainable ({:.2}%)",
        params.total_params(),
        params.trainable_params(),
        100.0 * params.trainable_params() as f64 / params.total_params() as f64
    );

    let docs: Vec<&Document> = ds.test.iter().collect();
    let fresh = family.eval_logits(&params, &docs, ds.max_seq_len)?;
    let other = family.eval_logits(&cfg.reinit_adapters(&params, 99)?, &docs, ds.max_seq_len)?;
    println!("fresh logits independent of adapter seed: {}", fresh == other);

    let mut tuned = params.clone();
    let mut rng = seed::stream(5, &[]);
    for (name, t) in tuned.trainable_mut() {
        if name.contains("lora") {
            *t = Tensor::randn(t.shape(), 0.2, &mut rng);
        }
    }
    let before = family.eval_logits(&tuned, &docs, ds.max_seq_len)?;
    let merged = cfg.merge_lora(&tuned)?;
    let after = family.eval_logits(&merged, &docs, ds.max_seq_len)?;
    let drift = before
        .iter()
        .flatten()
        .zip(after.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("merged model has adapters: {}; max logit drift {drift:.2e}", merged.has_adapters());
    Ok(())
}
