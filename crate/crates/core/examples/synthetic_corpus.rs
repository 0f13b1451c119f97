//! Generates a topic-model corpus and optionally saves it.
//!
//! ```bash
//! cargo run -p fedskew --example synthetic_corpus
//! cargo run -p fedskew --example synthetic_corpus -- /tmp/corpus
//! ```

use fedskew::textdata::{generate_synthetic, save_dataset, SyntheticSpec};

fn main() -> fedskew::Result<()> {
    let spec = SyntheticSpec {
        classes: 4,
        vocab_size: 500,
        train_per_class: 500,
        test_per_class: 200,
        doc_length: 12,
        topic_concentration: 0.05,
        seed: 1,
        max_seq_len: 16,
    };
    let ds = generate_synthetic(&spec)?;
    println!("{}: {} classes, vocabulary {}", ds.name, ds.num_classes, ds.vocab_size());
    println!("train per class {:?}", ds.class_counts(&ds.train));
    println!("test per class  {:?}", ds.class_counts(&ds.test));
    for doc in ds.train.iter().step_by(spec.train_per_class).take(4) {
        let words: Vec<&str> = doc.tokens.iter().filter_map(|&t| ds.vocab.token(t)).collect();
        println!("label {}: {}", doc.label, words.join(" "));
    }
    if let Some(dir) = std::env::args().nth(1) {
        save_dataset(&ds, dir.as_ref())?;
        println!("saved to {dir}");
    }
    Ok(())
}
