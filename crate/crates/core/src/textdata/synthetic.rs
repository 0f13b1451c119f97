use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{Dataset, Document, Vocabulary, DEFAULT_MAX_SEQ_LEN};
use crate::seed::{self, tag, Rng};
use crate::{Error, Result};

/// A topic-model corpus: each class has its own unigram distribution drawn
/// from a symmetric Dirichlet; documents are i.i.d. bags from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    /// Real tokens; the vocabulary adds PAD and UNK on top.
    pub vocab_size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub doc_length: usize,
    /// Dirichlet concentration of the class unigram distributions. Small
    /// values give sharp, nearly disjoint class vocabularies.
    pub topic_concentration: f64,
    pub seed: u64,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
}

fn default_max_seq_len() -> usize {
    DEFAULT_MAX_SEQ_LEN
}

impl SyntheticSpec {
    pub fn validate(&self, path: &str) -> Result<()> {
        let counts = [
            ("classes", self.classes),
            ("vocab_size", self.vocab_size),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
            ("doc_length", self.doc_length),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{path}.{name}"), "must be positive"));
            }
        }
        if !(self.topic_concentration > 0.0 && self.topic_concentration.is_finite()) {
            return Err(Error::config(
                format!("{path}.topic_concentration"),
                "must be a positive finite number",
            ));
        }
        Ok(())
    }
}

/// Samples a point of the simplex from `Dir(concentration * 1_n)`.
pub fn sample_dirichlet(concentration: f64, n: usize, rng: &mut Rng) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("concentration checked positive");
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate("synthetic")?;
    let mut rng = seed::stream(spec.seed, &[tag::SYNTHETIC]);
    let topics: Vec<WeightedIndex<f64>> = (0..spec.classes)
        .map(|_| {
            let p = sample_dirichlet(spec.topic_concentration, spec.vocab_size, &mut rng);
            WeightedIndex::new(&p).map_err(|e| Error::Data(format!("topic draw: {e}")))
        })
        .collect::<Result<_>>()?;

    let sample = |per_class: usize, rng: &mut Rng| {
        let mut docs = Vec::with_capacity(per_class * spec.classes);
        for (label, topic) in topics.iter().enumerate() {
            for _ in 0..per_class {
                let tokens = (0..spec.doc_length.min(spec.max_seq_len))
                    .map(|_| (topic.sample(rng) + 2) as u32)
                    .collect();
                // remaining draws keep the stream aligned across max_seq_len choices
                for _ in spec.max_seq_len..spec.doc_length {
                    topic.sample(rng);
                }
                docs.push(Document {
                    label,
                    tokens,
                    raw_len: spec.doc_length,
                });
            }
        }
        docs.shuffle(rng);
        docs
    };
    let train = sample(spec.train_per_class, &mut rng);
    let test = sample(spec.test_per_class, &mut rng);

    Ok(Dataset {
        name: "synthetic".into(),
        num_classes: spec.classes,
        max_seq_len: spec.max_seq_len,
        train,
        test,
        vocab: Vocabulary::from_tokens((0..spec.vocab_size).map(|i| format!("w{i}"))),
    })
}
