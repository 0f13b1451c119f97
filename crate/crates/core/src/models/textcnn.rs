use serde::{Deserialize, Serialize};

use super::{ModelKind, ParamGroup, ParamSet};
use crate::numkit::{Graph, Tensor, Var};
use crate::seed::{self, tag, Rng};
use crate::textdata::{Batch, PAD};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextCnnConfig {
    #[serde(default = "default_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_widths")]
    pub filter_widths: Vec<usize>,
    #[serde(default = "default_dim")]
    pub filters_per_width: usize,
    /// Drop probability before the output layer.
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Zero means "take from the dataset".
    #[serde(default)]
    pub num_classes: usize,
}

fn default_dim() -> usize {
    32
}
fn default_widths() -> Vec<usize> {
    vec![2, 3, 4]
}
fn default_dropout() -> f64 {
    0.5
}

impl Default for TextCnnConfig {
    fn default() -> Self {
        TextCnnConfig {
            embed_dim: default_dim(),
            filter_widths: default_widths(),
            filters_per_width: default_dim(),
            dropout: default_dropout(),
            num_classes: 0,
        }
    }
}

impl TextCnnConfig {
    pub fn validate(&self, path: &str, max_seq_len: usize) -> Result<()> {
        if self.embed_dim == 0 || self.filters_per_width == 0 {
            return Err(Error::config(path, "dimensions must be positive"));
        }
        if self.filter_widths.is_empty() || self.filter_widths.contains(&0) {
            return Err(Error::config(
                format!("{path}.filter_widths"),
                "need at least one positive width",
            ));
        }
        if let Some(&w) = self.filter_widths.iter().find(|&&w| w > max_seq_len) {
            return Err(Error::config(
                format!("{path}.filter_widths"),
                format!("width {w} exceeds the maximum sequence length {max_seq_len}"),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("{path}.dropout"), "must lie in [0, 1)"));
        }
        if self.num_classes == 0 {
            return Err(Error::config(format!("{path}.num_classes"), "must be >= 1"));
        }
        Ok(())
    }

    /// Embedding `N(0, 1)` with a zero PAD row; convolutions and the output
    /// layer `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn build(&self, vocab_size: usize, max_seq_len: usize, seed: u64) -> Result<ParamSet> {
        self.validate("textcnn", max_seq_len)?;
        if vocab_size <= PAD + 1 {
            return Err(Error::config("textcnn", "vocabulary has no real tokens"));
        }
        let mut rng = seed::stream(seed, &[tag::INIT]);
        let mut emb = Tensor::randn(&[vocab_size, self.embed_dim], 1.0, &mut rng);
        emb.data_mut()[PAD * self.embed_dim..(PAD + 1) * self.embed_dim].fill(0.0);
        let mut groups = vec![ParamGroup::new("embedding", emb, true, false)];
        let f = self.filters_per_width;
        for &w in &self.filter_widths {
            let bound = 1.0 / ((w * self.embed_dim) as f64).sqrt();
            groups.push(ParamGroup::new(
                format!("conv{w}.weight"),
                Tensor::uniform(&[w, self.embed_dim, f], bound, &mut rng),
                true,
                false,
            ));
            groups.push(ParamGroup::new(
                format!("conv{w}.bias"),
                Tensor::uniform(&[f], bound, &mut rng),
                true,
                false,
            ));
        }
        let hidden = f * self.filter_widths.len();
        let bound = 1.0 / (hidden as f64).sqrt();
        groups.push(ParamGroup::new(
            "fc.weight",
            Tensor::uniform(&[self.num_classes, hidden], bound, &mut rng),
            true,
            false,
        ));
        groups.push(ParamGroup::new(
            "fc.bias",
            Tensor::uniform(&[self.num_classes], bound, &mut rng),
            true,
            false,
        ));
        ParamSet::new(ModelKind::TextCnn, groups)
    }

    /// Logits `[B, C]`. Dropout is active only when `rng` is given.
    pub fn logits<'p>(
        &self,
        g: &mut Graph<'p>,
        params: &'p ParamSet,
        batch: &Batch,
        mut rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let p = |g: &mut Graph<'p>, name: &str| -> Result<Var> {
            let group = params
                .get(name)
                .ok_or_else(|| Error::Structure(format!("textcnn is missing `{name}`")))?;
            Ok(g.param(name, &group.tensor, group.trainable))
        };
        let table = p(g, "embedding")?;
        let x = g.embedding_lookup(
            table,
            &batch.ids,
            &[batch.batch_size, batch.seq_len, self.embed_dim],
            Some(PAD),
        )?;
        let mut pooled = Vec::with_capacity(self.filter_widths.len());
        for &w in &self.filter_widths {
            let k = p(g, &format!("conv{w}.weight"))?;
            let b = p(g, &format!("conv{w}.bias"))?;
            let c = g.conv1d_valid(x, k)?;
            let c = g.add_bias(c, b)?;
            let c = g.relu(c)?;
            pooled.push(g.max_over_time(c)?);
        }
        let h = g.concat(&pooled)?;
        let h = g.dropout(h, 1.0 - self.dropout, rng.as_deref_mut())?;
        let w = p(g, "fc.weight")?;
        let b = p(g, "fc.bias")?;
        let out = g.matmul_bt(h, w)?;
        g.add_bias(out, b)
    }
}
