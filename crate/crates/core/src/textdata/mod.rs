//! Corpora: CSV ingestion, vocabulary, synthetic generation, batching and a
//! bit-exact on-disk format.

mod batch;
mod csv_load;
mod store;
mod synthetic;
mod vocab;

pub use batch::{make_batches, sequential_batches, Batch};
pub use csv_load::{load_csv, tokenize, CsvSchema};
pub use store::{load_dataset, save_dataset};
pub use synthetic::{generate_synthetic, sample_dirichlet, SyntheticSpec};
pub use vocab::Vocabulary;

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Default maximum sequence length in tokens.
pub const DEFAULT_MAX_SEQ_LEN: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Document {
    pub label: usize,
    /// Token ids, at most the dataset's maximum sequence length.
    pub tokens: Vec<u32>,
    /// Token count before truncation.
    pub raw_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub max_seq_len: usize,
    pub train: Vec<Document>,
    pub test: Vec<Document>,
    pub vocab: Vocabulary,
}

impl Dataset {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn train_labels(&self) -> Vec<usize> {
        self.train.iter().map(|d| d.label).collect()
    }

    /// Per-class counts of a document list.
    pub fn class_counts(&self, docs: &[Document]) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for d in docs {
            counts[d.label] += 1;
        }
        counts
    }
}
