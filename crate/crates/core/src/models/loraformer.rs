use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{ModelKind, ParamGroup, ParamSet};
use crate::numkit::{Graph, OptimizerConfig, OptimizerState, Tensor, Var};
use crate::seed::{self, tag, Rng};
use crate::textdata::{make_batches, Batch, Dataset, Document};
use crate::{Error, Result};

pub const LAYERNORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const ADAPTED: [&str; 2] = ["q", "v"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneMode {
    RandomFrozen,
    #[default]
    PretrainedFrozen,
}

/// Central training of the backbone on a synthetic proxy task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_pretrain_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_proxy_classes")]
    pub proxy_classes: usize,
    #[serde(default = "default_proxy_docs")]
    pub proxy_docs_per_class: usize,
    #[serde(default = "default_proxy_concentration")]
    pub proxy_topic_concentration: f64,
}

fn default_steps() -> usize {
    150
}
fn default_pretrain_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    32
}
fn default_proxy_classes() -> usize {
    8
}
fn default_proxy_docs() -> usize {
    150
}
fn default_proxy_concentration() -> f64 {
    0.05
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: default_steps(),
            lr: default_pretrain_lr(),
            batch_size: default_batch(),
            proxy_classes: default_proxy_classes(),
            proxy_docs_per_class: default_proxy_docs(),
            proxy_topic_concentration: default_proxy_concentration(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraFormerConfig {
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_ffn")]
    pub ffn_dim: usize,
    #[serde(default = "default_rank")]
    pub lora_rank: usize,
    #[serde(default = "default_lora_alpha")]
    pub lora_alpha: f64,
    /// Drop probability on the adapter input path.
    #[serde(default = "default_lora_dropout")]
    pub lora_dropout: f64,
    /// Zero means "take from the dataset".
    #[serde(default)]
    pub num_classes: usize,
    #[serde(default)]
    pub backbone: BackboneMode,
    #[serde(default)]
    pub pretrain: PretrainConfig,
}

fn default_layers() -> usize {
    2
}
fn default_d_model() -> usize {
    64
}
fn default_heads() -> usize {
    4
}
fn default_ffn() -> usize {
    128
}
fn default_rank() -> usize {
    8
}
fn default_lora_alpha() -> f64 {
    32.0
}
fn default_lora_dropout() -> f64 {
    0.1
}

impl Default for LoraFormerConfig {
    fn default() -> Self {
        LoraFormerConfig {
            layers: default_layers(),
            d_model: default_d_model(),
            heads: default_heads(),
            ffn_dim: default_ffn(),
            lora_rank: default_rank(),
            lora_alpha: default_lora_alpha(),
            lora_dropout: default_lora_dropout(),
            num_classes: 0,
            backbone: BackboneMode::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

fn linear_names(prefix: &str) -> (String, String) {
    (format!("{prefix}.weight"), format!("{prefix}.bias"))
}

fn adapter_names(layer: usize, proj: &str) -> (String, String) {
    (
        format!("layer{layer}.{proj}.lora_a"),
        format!("layer{layer}.{proj}.lora_b"),
    )
}

impl LoraFormerConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        for (name, v) in [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("lora_rank", self.lora_rank),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{path}.{name}"), "must be >= 1"));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(
                format!("{path}.heads"),
                format!("d_model {} is not divisible by {} heads", self.d_model, self.heads),
            ));
        }
        if !(self.lora_alpha > 0.0 && self.lora_alpha.is_finite()) {
            return Err(Error::config(format!("{path}.lora_alpha"), "must be positive"));
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return Err(Error::config(format!("{path}.lora_dropout"), "must lie in [0, 1)"));
        }
        let p = &self.pretrain;
        if p.batch_size == 0 || p.proxy_classes == 0 || p.proxy_docs_per_class == 0 {
            return Err(Error::config(format!("{path}.pretrain"), "sizes must be positive"));
        }
        if !(p.lr >= 0.0 && p.lr.is_finite()) || !(p.proxy_topic_concentration > 0.0) {
            return Err(Error::config(format!("{path}.pretrain"), "invalid lr or concentration"));
        }
        Ok(())
    }

    /// `alpha / r`.
    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    /// Backbone from `(seed, INIT, 0)`, adapters from `(seed, INIT, 1)`, head
    /// from `(seed, INIT, 2)`. The backbone is `N(0, 0.02)` with unit
    /// layernorm gains; adapters have `A ~ N(0, 0.02)` and `B = 0`.
    pub fn build(&self, vocab_size: usize, max_seq_len: usize, seed: u64) -> Result<ParamSet> {
        self.validate("loraformer")?;
        if vocab_size == 0 || max_seq_len == 0 {
            return Err(Error::config("loraformer", "empty vocabulary or sequence length"));
        }
        let (d, f) = (self.d_model, self.ffn_dim);
        let mut rng = seed::stream(seed, &[tag::INIT, 0]);
        let mut groups = Vec::new();
        let mut frozen = |name: String, t: Tensor| groups.push(ParamGroup::new(name, t, false, false));
        frozen("tok_embedding".into(), Tensor::randn(&[vocab_size, d], INIT_STD, &mut rng));
        frozen("pos_embedding".into(), Tensor::randn(&[max_seq_len, d], INIT_STD, &mut rng));
        frozen("emb_ln.gamma".into(), Tensor::full(&[d], 1.0));
        frozen("emb_ln.beta".into(), Tensor::zeros(&[d]));
        for l in 0..self.layers {
            for proj in ["q", "k", "v", "o"] {
                let (w, b) = linear_names(&format!("layer{l}.{proj}"));
                frozen(w, Tensor::randn(&[d, d], INIT_STD, &mut rng));
                frozen(b, Tensor::zeros(&[d]));
            }
            for (name, out, inp) in [("ffn1", f, d), ("ffn2", d, f)] {
                let (w, b) = linear_names(&format!("layer{l}.{name}"));
                frozen(w, Tensor::randn(&[out, inp], INIT_STD, &mut rng));
                frozen(b, Tensor::zeros(&[out]));
            }
            for ln in ["ln1", "ln2"] {
                frozen(format!("layer{l}.{ln}.gamma"), Tensor::full(&[d], 1.0));
                frozen(format!("layer{l}.{ln}.beta"), Tensor::zeros(&[d]));
            }
        }
        let mut params = ParamSet::new(ModelKind::LoraFormer, groups)?;
        self.add_adapters(&mut params, seed)?;
        let mut rng = seed::stream(seed, &[tag::INIT, 2]);
        let head = params.groups_mut();
        head.push(ParamGroup::new(
            "head.weight",
            Tensor::randn(&[self.num_classes, d], INIT_STD, &mut rng),
            true,
            false,
        ));
        head.push(ParamGroup::new("head.bias", Tensor::zeros(&[self.num_classes]), true, false));
        Ok(params)
    }

    fn add_adapters(&self, params: &mut ParamSet, seed: u64) -> Result<()> {
        let (d, r) = (self.d_model, self.lora_rank);
        let mut rng = seed::stream(seed, &[tag::INIT, 1]);
        for l in 0..self.layers {
            for proj in ADAPTED {
                let (a, b) = adapter_names(l, proj);
                params.groups_mut().push(ParamGroup::new(
                    a,
                    Tensor::randn(&[r, d], INIT_STD, &mut rng),
                    true,
                    true,
                ));
                params
                    .groups_mut()
                    .push(ParamGroup::new(b, Tensor::zeros(&[d, r]), true, true));
            }
        }
        Ok(())
    }

    /// Redraws every adapter from `(seed, INIT, 1)`, leaving other groups alone.
    pub fn reinit_adapters(&self, params: &ParamSet, seed: u64) -> Result<ParamSet> {
        let mut fresh = ParamSet::new(ModelKind::LoraFormer, Vec::new())?;
        self.add_adapters(&mut fresh, seed)?;
        let mut out = params.clone();
        for g in fresh.groups() {
            *out.tensor_mut(&g.name)? = g.tensor.clone();
        }
        Ok(out)
    }

    /// Logits `[B, C]`. Adapter dropout is active only when `rng` is given.
    /// Merged parameter sets (no adapter groups) skip the adapter path.
    pub fn logits<'p>(
        &self,
        g: &mut Graph<'p>,
        params: &'p ParamSet,
        batch: &Batch,
        mut rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let d = self.d_model;
        let p = |g: &mut Graph<'p>, name: &str| -> Result<Var> {
            let group = params
                .get(name)
                .ok_or_else(|| Error::Structure(format!("loraformer is missing `{name}`")))?;
            Ok(g.param(name, &group.tensor, group.trainable))
        };
        let linear = |g: &mut Graph<'p>, x: Var, prefix: &str| -> Result<Var> {
            let (w, b) = linear_names(prefix);
            let (w, b) = (p(g, &w)?, p(g, &b)?);
            let y = g.matmul_bt(x, w)?;
            g.add_bias(y, b)
        };
        let layernorm = |g: &mut Graph<'p>, x: Var, prefix: &str| -> Result<Var> {
            let gamma = p(g, &format!("{prefix}.gamma"))?;
            let beta = p(g, &format!("{prefix}.beta"))?;
            g.layernorm(x, gamma, beta, LAYERNORM_EPS)
        };

        let shape = [batch.batch_size, batch.seq_len, d];
        let tok = p(g, "tok_embedding")?;
        let pos = p(g, "pos_embedding")?;
        let x = g.embedding_lookup(tok, &batch.ids, &shape, None)?;
        let pe = g.embedding_lookup(pos, &batch.positions(), &shape, None)?;
        let x = g.add(x, pe)?;
        let mut x = layernorm(g, x, "emb_ln")?;
        let mask = batch.mask();
        for l in 0..self.layers {
            let mut qkv = Vec::with_capacity(3);
            for proj in ["q", "k", "v"] {
                let mut y = linear(g, x, &format!("layer{l}.{proj}"))?;
                let (a, b) = adapter_names(l, proj);
                if let (Some(ga), Some(gb)) = (params.get(&a), params.get(&b)) {
                    let a = g.param(&a, &ga.tensor, ga.trainable);
                    let b = g.param(&b, &gb.tensor, gb.trainable);
                    let xin = g.dropout(x, 1.0 - self.lora_dropout, rng.as_deref_mut())?;
                    let low = g.matmul_bt(xin, a)?;
                    let delta = g.matmul_bt(low, b)?;
                    let delta = g.scale(delta, self.lora_scale())?;
                    y = g.add(y, delta)?;
                }
                qkv.push(y);
            }
            let att = g.scaled_dot_attention(qkv[0], qkv[1], qkv[2], self.heads, Some(&mask))?;
            let att = linear(g, att, &format!("layer{l}.o"))?;
            let h = g.add(x, att)?;
            let h = layernorm(g, h, &format!("layer{l}.ln1"))?;
            let ff = linear(g, h, &format!("layer{l}.ffn1"))?;
            let ff = g.gelu(ff)?;
            let ff = linear(g, ff, &format!("layer{l}.ffn2"))?;
            let h2 = g.add(h, ff)?;
            x = layernorm(g, h2, &format!("layer{l}.ln2"))?;
        }
        let pooled = g.masked_mean(x, &mask)?;
        linear(g, pooled, "head")
    }

    /// Folds each adapter into its projection, `W' = W + (alpha/r) B A`, and
    /// drops the adapter groups.
    pub fn merge_lora(&self, params: &ParamSet) -> Result<ParamSet> {
        if params.kind() != ModelKind::LoraFormer {
            return Err(Error::Contract("merge_lora needs a loraformer parameter set".into()));
        }
        if !params.has_adapters() {
            return Err(Error::Contract("adapters already merged".into()));
        }
        let (d, r, s) = (self.d_model, self.lora_rank, self.lora_scale());
        let mut out = params.clone();
        for l in 0..self.layers {
            for proj in ADAPTED {
                let (an, bn) = adapter_names(l, proj);
                let a = params.tensor(&an)?.data();
                let b = params.tensor(&bn)?.data();
                let w = out.tensor_mut(&format!("layer{l}.{proj}.weight"))?;
                for i in 0..d {
                    for j in 0..d {
                        let ba: f64 = (0..r).map(|k| b[i * r + k] * a[k * d + j]).sum();
                        w.data_mut()[i * d + j] += s * ba;
                    }
                }
            }
        }
        out.groups_mut().retain(|g| !g.lora);
        Ok(out)
    }

    /// Trains the backbone centrally on `proxy` with a throwaway head and
    /// copies it back into `params`. Flags and all non-backbone groups are
    /// unchanged. Fails if a proxy document also occurs in `target`.
    pub fn pretrain_backbone(
        &self,
        params: &ParamSet,
        proxy: &Dataset,
        target: &Dataset,
        seed: u64,
    ) -> Result<ParamSet> {
        if self.backbone != BackboneMode::PretrainedFrozen {
            return Err(Error::Contract("pretraining needs backbone mode pretrained_frozen".into()));
        }
        if params.kind() != ModelKind::LoraFormer {
            return Err(Error::Contract("pretraining needs a loraformer parameter set".into()));
        }
        let seen: HashSet<&[u32]> = target
            .train
            .iter()
            .chain(&target.test)
            .map(|d| d.tokens.as_slice())
            .collect();
        if let Some(dup) = proxy
            .train
            .iter()
            .chain(&proxy.test)
            .find(|d| seen.contains(d.tokens.as_slice()))
        {
            return Err(Error::Data(format!(
                "proxy corpus shares a document with the target ({} tokens)",
                dup.tokens.len()
            )));
        }
        let steps = self.pretrain.steps;
        if steps == 0 {
            return Ok(params.clone());
        }
        let vocab = params.tensor("tok_embedding")?.shape()[0];
        if proxy.train.iter().flat_map(|d| &d.tokens).any(|&t| t as usize >= vocab) {
            return Err(Error::Data("proxy tokens exceed the model vocabulary".into()));
        }
        let max_len = params.tensor("pos_embedding")?.shape()[0];

        let mut rng = seed::stream(seed, &[tag::PRETRAIN, 0]);
        let d = self.d_model;
        let mut groups: Vec<ParamGroup> = params
            .groups()
            .iter()
            .filter(|g| !g.trainable)
            .map(|g| ParamGroup {
                trainable: true,
                ..g.clone()
            })
            .collect();
        groups.push(ParamGroup::new(
            "head.weight",
            Tensor::randn(&[proxy.num_classes, d], INIT_STD, &mut rng),
            true,
            false,
        ));
        groups.push(ParamGroup::new("head.bias", Tensor::zeros(&[proxy.num_classes]), true, false));
        let mut work = ParamSet::new(ModelKind::LoraFormer, groups)?;

        let docs: Vec<&Document> = proxy.train.iter().collect();
        let mut opt = OptimizerState::new(OptimizerConfig::adamw(self.pretrain.lr, 0.01));
        let mut done = 0;
        for epoch in 0.. {
            let batches = make_batches(
                &docs,
                self.pretrain.batch_size,
                max_len,
                seed::derive(seed, &[tag::PRETRAIN, 1, epoch]),
            )?;
            for batch in &batches {
                let grads = {
                    let mut g = Graph::new();
                    let logits = self.logits(&mut g, &work, batch, None)?;
                    let loss = g.softmax_cross_entropy(logits, &batch.labels)?;
                    g.backward(loss)?
                };
                opt.step(work.trainable_mut(), &grads)?;
                done += 1;
                if done == steps {
                    let mut out = params.clone();
                    for g in params.groups().iter().filter(|g| !g.trainable) {
                        *out.tensor_mut(&g.name)? = work.tensor(&g.name)?.clone();
                    }
                    return Ok(out);
                }
            }
            if batches.is_empty() {
                return Err(Error::Data("empty proxy corpus".into()));
            }
        }
        unreachable!("the epoch loop only exits by returning")
    }
}
