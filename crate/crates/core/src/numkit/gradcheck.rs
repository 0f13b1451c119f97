//! Central finite-difference checks of analytic gradients.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng as _;

use super::{Gradients, Graph, Tensor};
use crate::seed::Rng;
use crate::{Error, Result};

/// Step for central differences at 64-bit precision.
pub const FD_STEP: f64 = 1e-5;

/// Relative-error denominator floor; below it the comparison is absolute.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Anything that exposes named tensors for perturbation.
pub trait ParamStore {
    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor>;
}

impl ParamStore for BTreeMap<String, Tensor> {
    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.get_mut(name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Probe>,
}

impl Report {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

/// Every coordinate of every gradient.
pub fn all_coords(grads: &Gradients) -> Vec<(String, usize)> {
    grads
        .iter()
        .flat_map(|(n, g)| (0..g.numel()).map(move |i| (n.to_owned(), i)))
        .collect()
}

/// Up to `per_param` distinct coordinates from each gradient.
pub fn sample_coords(grads: &Gradients, per_param: usize, rng: &mut Rng) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for (name, g) in grads.iter() {
        let idx: Vec<usize> = (0..g.numel()).collect();
        for &i in idx.choose_multiple(rng, per_param.min(g.numel())) {
            out.push((name.to_owned(), i));
        }
    }
    out
}

/// Compares `analytic` against `(L(p + h) - L(p - h)) / 2h` at each coordinate.
pub fn check<S: ParamStore>(
    store: &mut S,
    analytic: &Gradients,
    coords: &[(String, usize)],
    mut loss: impl FnMut(&S) -> Result<f64>,
) -> Result<Report> {
    let mut report = Report::default();
    for (name, index) in coords {
        let a = analytic
            .get(name)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?
            .data()[*index];
        let original = nudge(store, name, *index, None)?;
        nudge(store, name, *index, Some(original + FD_STEP))?;
        let plus = loss(store)?;
        nudge(store, name, *index, Some(original - FD_STEP))?;
        let minus = loss(store)?;
        nudge(store, name, *index, Some(original))?;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let rel = relative_error(a, numeric);
        report.checked += 1;
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(Probe {
                name: name.clone(),
                index: *index,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(report)
}

fn nudge<S: ParamStore>(store: &mut S, name: &str, index: usize, value: Option<f64>) -> Result<f64> {
    let t = store
        .tensor_mut(name)
        .ok_or_else(|| Error::Contract(format!("no tensor named `{name}`")))?;
    let slot = t
        .data_mut()
        .get_mut(index)
        .ok_or_else(|| Error::Contract(format!("index {index} outside `{name}`")))?;
    let old = *slot;
    if let Some(v) = value {
        *slot = v;
    }
    Ok(old)
}

/// Random input shapes for `op` in the layout of [`super::vectors::evaluate`],
/// every dimension between 1 and 5.
pub fn random_shapes(op: &str, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    let mut d = || rng.random_range(1..=4usize);
    Ok(match op {
        "matmul" => {
            let (m, k, n) = (d(), d(), d());
            vec![vec![2, m, k], vec![k, n]]
        }
        "matmul_bt" => {
            let (m, k, n) = (d(), d(), d());
            vec![vec![m, k], vec![n, k]]
        }
        "add" | "mul" => {
            let s = vec![d(), d()];
            vec![s.clone(), s]
        }
        "add_bias" => {
            let n = d();
            vec![vec![d(), d(), n], vec![n]]
        }
        "scale" | "relu" | "gelu" | "sum" | "softmax_cross_entropy" => vec![vec![d(), d() + 1]],
        "dropout" => vec![vec![d(), d() + 2]],
        "embedding_lookup" => vec![vec![d() + 2, d()], vec![d() + 1]],
        "conv1d_valid" => {
            let (w, dim, f) = (d().min(3), d(), d());
            vec![vec![d(), w + d() - 1, dim], vec![w, dim, f]]
        }
        "max_over_time" | "masked_mean" => vec![vec![d(), d() + 1, d()]],
        "layernorm" => {
            let n = d() + 1;
            vec![vec![d(), n], vec![n], vec![n]]
        }
        "scaled_dot_attention" => {
            let s = vec![d(), d() + 1, 2 * d()];
            vec![s.clone(), s.clone(), s]
        }
        "concat" => {
            let rows = d();
            vec![vec![rows, d()], vec![rows, d()]]
        }
        other => return Err(Error::Contract(format!("unknown op `{other}`"))),
    })
}

/// Checks every input coordinate of `op` on random shapes and inputs from
/// `seed`. The loss is `sum(op(x) * w)` for a fixed random `w`.
pub fn check_op(op: &str, seed: u64) -> Result<Report> {
    let mut rng = crate::seed::stream(seed, &[0x0c]);
    let shapes = random_shapes(op, &mut rng)?;
    let mut store: BTreeMap<String, Tensor> = BTreeMap::new();
    for (i, s) in shapes.iter().enumerate() {
        let mut t = Tensor::uniform(s, 1.0, &mut rng);
        // stay clear of the relu kink
        for v in t.data_mut() {
            if v.abs() < 1e-2 {
                *v += 0.05;
            }
        }
        store.insert(format!("x{i}"), t);
    }
    let w_seed = crate::seed::derive(seed, &[0x0d]);
    let loss = |store: &BTreeMap<String, Tensor>, grads: bool| -> Result<(f64, Option<Gradients>)> {
        let mut g = Graph::new();
        let vars: Vec<_> = store.iter().map(|(n, t)| g.param(n, t, true)).collect();
        let out = super::vectors::apply(&mut g, op, &vars, seed)?;
        let w = Tensor::uniform(g.value(out).shape(), 1.0, &mut crate::seed::stream(w_seed, &[]));
        let w = g.constant(w);
        let prod = g.mul(out, w)?;
        let total = g.sum(prod)?;
        let value = g.value(total).data()[0];
        Ok((value, if grads { Some(g.backward(total)?) } else { None }))
    };
    let grads = loss(&store, true)?.1.expect("requested");
    let coords = all_coords(&grads);
    check(&mut store, &grads, &coords, |s| Ok(loss(s, false)?.0))
}
