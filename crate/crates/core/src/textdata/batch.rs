use rand::seq::SliceRandom;

use super::{Document, PAD};
use crate::seed::{self, tag};
use crate::{Error, Result};

/// A padded minibatch: `ids` is row-major `[batch_size, seq_len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl Batch {
    /// Pads (or truncates) every document to exactly `seq_len` tokens.
    pub fn from_docs<'a>(docs: impl IntoIterator<Item = &'a Document>, seq_len: usize) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::Contract("sequence length must be positive".into()));
        }
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        for doc in docs {
            ids.extend(
                doc.tokens
                    .iter()
                    .map(|&t| t as usize)
                    .chain(std::iter::repeat(PAD))
                    .take(seq_len),
            );
            labels.push(doc.label);
        }
        Ok(Batch {
            batch_size: labels.len(),
            ids,
            labels,
            seq_len,
        })
    }

    /// `true` at non-PAD positions.
    pub fn mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&t| t != PAD).collect()
    }

    pub fn positions(&self) -> Vec<usize> {
        (0..self.batch_size).flat_map(|_| 0..self.seq_len).collect()
    }
}

/// Shuffles `docs` with the stream `(seed, BATCHES)` and cuts consecutive
/// batches of `batch_size` (the last may be short). Empty input gives no
/// batches.
pub fn make_batches(docs: &[&Document], batch_size: usize, seq_len: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut seed::stream(seed, &[tag::BATCHES]));
    order
        .chunks(batch_size)
        .map(|chunk| Batch::from_docs(chunk.iter().map(|&i| docs[i]), seq_len))
        .collect()
}

/// Batches in the given order, for evaluation.
pub fn sequential_batches(docs: &[&Document], batch_size: usize, seq_len: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    docs.chunks(batch_size)
        .map(|chunk| Batch::from_docs(chunk.iter().copied(), seq_len))
        .collect()
}
