//! The two model families and their parameter sets.
//!
//! A model is a config plus a [`ParamSet`]; forward passes are recorded on a
//! fresh [`Graph`] per batch.

mod checkpoint;
mod loraformer;
mod params;
mod textcnn;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use loraformer::{BackboneMode, LoraFormerConfig, PretrainConfig, LAYERNORM_EPS};
pub use params::{ModelKind, ParamGroup, ParamSet, Role};
pub use textcnn::TextCnnConfig;

use serde::{Deserialize, Serialize};

use crate::numkit::{Graph, Var};
use crate::seed::{self, tag, Rng};
use crate::textdata::{generate_synthetic, sequential_batches, Batch, Dataset, Document, SyntheticSpec};
use crate::Result;

/// Batch size used for evaluation forward passes.
pub const EVAL_BATCH: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ModelFamily {
    TextCnn(TextCnnConfig),
    LoraFormer(LoraFormerConfig),
}

impl ModelFamily {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelFamily::TextCnn(_) => ModelKind::TextCnn,
            ModelFamily::LoraFormer(_) => ModelKind::LoraFormer,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelFamily::TextCnn(_) => "textcnn",
            ModelFamily::LoraFormer(_) => "loraformer",
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelFamily::TextCnn(c) => c.num_classes,
            ModelFamily::LoraFormer(c) => c.num_classes,
        }
    }

    /// Fills an unset class count from the dataset.
    pub fn resolved(&self, num_classes: usize) -> ModelFamily {
        let mut out = self.clone();
        match &mut out {
            ModelFamily::TextCnn(c) if c.num_classes == 0 => c.num_classes = num_classes,
            ModelFamily::LoraFormer(c) if c.num_classes == 0 => c.num_classes = num_classes,
            _ => {}
        }
        out
    }

    pub fn validate(&self, path: &str, max_seq_len: usize) -> Result<()> {
        match self {
            ModelFamily::TextCnn(c) => c.validate(path, max_seq_len),
            ModelFamily::LoraFormer(c) => c.validate(path),
        }
    }

    /// Freshly initialized parameters, without pretraining.
    pub fn build(&self, vocab_size: usize, max_seq_len: usize, seed: u64) -> Result<ParamSet> {
        match self {
            ModelFamily::TextCnn(c) => c.build(vocab_size, max_seq_len, seed),
            ModelFamily::LoraFormer(c) => c.build(vocab_size, max_seq_len, seed),
        }
    }

    /// Round-0 parameters for `dataset`: [`build`](Self::build), then backbone
    /// pretraining on a synthetic proxy corpus when configured.
    pub fn initialize(&self, dataset: &Dataset, seed: u64) -> Result<ParamSet> {
        let params = self.build(dataset.vocab_size(), dataset.max_seq_len, seed)?;
        match self {
            ModelFamily::LoraFormer(c)
                if c.backbone == BackboneMode::PretrainedFrozen && c.pretrain.steps > 0 =>
            {
                let proxy = proxy_corpus(c, dataset, seed)?;
                c.pretrain_backbone(&params, &proxy, dataset, seed::derive(seed, &[tag::PRETRAIN]))
            }
            _ => Ok(params),
        }
    }

    pub fn logits<'p>(
        &self,
        g: &mut Graph<'p>,
        params: &'p ParamSet,
        batch: &Batch,
        rng: Option<&mut Rng>,
    ) -> Result<Var> {
        match self {
            ModelFamily::TextCnn(c) => c.logits(g, params, batch, rng),
            ModelFamily::LoraFormer(c) => c.logits(g, params, batch, rng),
        }
    }

    /// Mean cross-entropy of a batch; training mode when `rng` is given.
    pub fn loss<'p>(
        &self,
        g: &mut Graph<'p>,
        params: &'p ParamSet,
        batch: &Batch,
        rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let logits = self.logits(g, params, batch, rng)?;
        g.softmax_cross_entropy(logits, &batch.labels)
    }

    /// Eval-mode logits, one row per document, in order.
    pub fn eval_logits(&self, params: &ParamSet, docs: &[&Document], seq_len: usize) -> Result<Vec<Vec<f64>>> {
        let mut rows = Vec::with_capacity(docs.len());
        for batch in sequential_batches(docs, EVAL_BATCH, seq_len)? {
            let mut g = Graph::new();
            let logits = self.logits(&mut g, params, &batch, None)?;
            let v = g.value(logits);
            rows.extend(v.data().chunks(v.cols()).map(<[f64]>::to_vec));
        }
        Ok(rows)
    }

    /// Eval-mode argmax; ties go to the lowest class index.
    pub fn predict(&self, params: &ParamSet, docs: &[&Document], seq_len: usize) -> Result<Vec<usize>> {
        Ok(self
            .eval_logits(params, docs, seq_len)?
            .iter()
            .map(|row| argmax(row))
            .collect())
    }
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// The synthetic corpus the backbone is pretrained on. It shares the
/// target's token id space but has its own topics and classes.
pub fn proxy_corpus(cfg: &LoraFormerConfig, target: &Dataset, seed: u64) -> Result<Dataset> {
    let p = &cfg.pretrain;
    generate_synthetic(&SyntheticSpec {
        classes: p.proxy_classes,
        vocab_size: target.vocab_size().saturating_sub(2).max(1),
        train_per_class: p.proxy_docs_per_class,
        test_per_class: (p.proxy_docs_per_class / 4).max(1),
        doc_length: target.max_seq_len,
        topic_concentration: p.proxy_topic_concentration,
        seed: seed::derive(seed, &[tag::PRETRAIN, tag::SYNTHETIC]),
        max_seq_len: target.max_seq_len,
    })
}
