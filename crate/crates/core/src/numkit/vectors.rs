//! Plain-text op test vectors.
//!
//! One case per line: `op shapes seed checksum`, where `shapes` is a
//! comma-separated list of `x`-joined dimensions and `checksum` is the sum of
//! the output elements written with 12 significant digits. Lines starting with
//! `#` are comments. Inputs are uniform on `[-1, 1]`, drawn from the seeded
//! stream `(seed, input index)`; op-specific extras are fixed:
//!
//! | op | inputs | extras |
//! |----|--------|--------|
//! | `scale` | `[s]` | factor `0.5` |
//! | `dropout` | `[s]` | keep probability `0.8`, stream `(seed, 99)` |
//! | `embedding_lookup` | `[V,D]`, `[N]` | id `i` is `(7 i + seed) mod V`; PAD id 0 |
//! | `layernorm` | `[..,D]`, `[D]`, `[D]` | eps `1e-5` |
//! | `scaled_dot_attention` | 3 x `[B,T,D]` | 2 heads when `D` is even, else 1 |
//! | `softmax_cross_entropy` | `[B,C]` | label of row `b` is `b mod C` |
//! | `masked_mean` | `[B,T,D]` | position `(b,t)` valid iff `(b + t) mod 3 != 2` |

use std::fmt::Write as _;

use super::{Graph, Tensor, Var};
use crate::seed;
use crate::{Error, Result};

pub const OPS: &[&str] = &[
    "matmul",
    "matmul_bt",
    "add",
    "mul",
    "add_bias",
    "scale",
    "relu",
    "gelu",
    "sum",
    "embedding_lookup",
    "conv1d_valid",
    "max_over_time",
    "layernorm",
    "scaled_dot_attention",
    "dropout",
    "softmax_cross_entropy",
    "masked_mean",
    "concat",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub op: String,
    pub shapes: Vec<Vec<usize>>,
    pub seed: u64,
    pub checksum: f64,
}

/// Runs `op` on seeded inputs and returns the output checksum.
pub fn evaluate(op: &str, shapes: &[Vec<usize>], seed: u64) -> Result<f64> {
    let inputs: Vec<Tensor> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| Tensor::uniform(s, 1.0, &mut seed::stream(seed, &[i as u64])))
        .collect();
    let mut g = Graph::new();
    let vars: Vec<_> = inputs.into_iter().map(|t| g.constant(t)).collect();
    let out = apply(&mut g, op, &vars, seed)?;
    Ok(g.value(out).sum())
}

/// Applies `op` to `vars` with the fixed extras listed in the module docs.
pub(crate) fn apply(g: &mut Graph, op: &str, vars: &[Var], seed: u64) -> Result<Var> {
    let arity = |n: usize| {
        if vars.len() == n {
            Ok(())
        } else {
            Err(Error::Contract(format!("{op} takes {n} inputs, got {}", vars.len())))
        }
    };
    let out = match op {
        "matmul" => {
            arity(2)?;
            g.matmul(vars[0], vars[1])?
        }
        "matmul_bt" => {
            arity(2)?;
            g.matmul_bt(vars[0], vars[1])?
        }
        "add" => {
            arity(2)?;
            g.add(vars[0], vars[1])?
        }
        "mul" => {
            arity(2)?;
            g.mul(vars[0], vars[1])?
        }
        "add_bias" => {
            arity(2)?;
            g.add_bias(vars[0], vars[1])?
        }
        "scale" => {
            arity(1)?;
            g.scale(vars[0], 0.5)?
        }
        "relu" => {
            arity(1)?;
            g.relu(vars[0])?
        }
        "gelu" => {
            arity(1)?;
            g.gelu(vars[0])?
        }
        "sum" => {
            arity(1)?;
            g.sum(vars[0])?
        }
        "embedding_lookup" => {
            arity(2)?;
            let table = g.value(vars[0]);
            let (v, d) = (table.shape()[0], table.cols());
            let n = g.value(vars[1]).numel();
            let ids: Vec<usize> = (0..n).map(|i| (7 * i + seed as usize) % v).collect();
            g.embedding_lookup(vars[0], &ids, &[n, d], Some(0))?
        }
        "conv1d_valid" => {
            arity(2)?;
            g.conv1d_valid(vars[0], vars[1])?
        }
        "max_over_time" => {
            arity(1)?;
            g.max_over_time(vars[0])?
        }
        "layernorm" => {
            arity(3)?;
            g.layernorm(vars[0], vars[1], vars[2], 1e-5)?
        }
        "scaled_dot_attention" => {
            arity(3)?;
            let d = g.value(vars[0]).cols();
            let heads = if d % 2 == 0 { 2 } else { 1 };
            g.scaled_dot_attention(vars[0], vars[1], vars[2], heads, None)?
        }
        "dropout" => {
            arity(1)?;
            let mut rng = seed::stream(seed, &[99]);
            g.dropout(vars[0], 0.8, Some(&mut rng))?
        }
        "softmax_cross_entropy" => {
            arity(1)?;
            let lv = g.value(vars[0]);
            let c = lv.cols();
            let labels: Vec<usize> = (0..lv.rows()).map(|b| b % c).collect();
            g.softmax_cross_entropy(vars[0], &labels)?
        }
        "masked_mean" => {
            arity(1)?;
            let s = g.value(vars[0]).shape().to_vec();
            if s.len() != 3 {
                return Err(Error::shape("masked_mean", "expected [B, T, D]"));
            }
            let mask: Vec<bool> = (0..s[0] * s[1])
                .map(|i| (i / s[1] + i % s[1]) % 3 != 2)
                .collect();
            g.masked_mean(vars[0], &mask)?
        }
        "concat" => g.concat(vars)?,
        other => return Err(Error::Contract(format!("unknown op `{other}`"))),
    };
    Ok(out)
}

pub fn format_checksum(v: f64) -> String {
    format!("{v:.11e}")
}

fn format_shapes(shapes: &[Vec<usize>]) -> String {
    shapes
        .iter()
        .map(|s| s.iter().map(usize::to_string).collect::<Vec<_>>().join("x"))
        .collect::<Vec<_>>()
        .join(",")
}

impl Case {
    pub fn compute(op: &str, shapes: Vec<Vec<usize>>, seed: u64) -> Result<Self> {
        let checksum = evaluate(op, &shapes, seed)?;
        Ok(Case {
            op: op.to_owned(),
            shapes,
            seed,
            checksum,
        })
    }

    pub fn to_line(&self) -> String {
        format!(
            "{} {} {} {}",
            self.op,
            format_shapes(&self.shapes),
            self.seed,
            format_checksum(self.checksum)
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Contract(format!("test vector `{line}`: {msg}"));
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [op, shapes, seed, checksum] = fields[..] else {
            return Err(bad("expected 4 fields"));
        };
        let shapes = shapes
            .split(',')
            .map(|s| {
                s.split('x')
                    .map(|d| d.parse::<usize>().map_err(|_| bad("bad dimension")))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Case {
            op: op.to_owned(),
            shapes,
            seed: seed.parse().map_err(|_| bad("bad seed"))?,
            checksum: checksum.parse().map_err(|_| bad("bad checksum"))?,
        })
    }

    /// Recomputes the case and compares at the file's 12-digit precision.
    pub fn verify(&self) -> Result<bool> {
        let got = evaluate(&self.op, &self.shapes, self.seed)?;
        Ok(format_checksum(got) == format_checksum(self.checksum))
    }
}

pub fn parse_file(text: &str) -> Result<Vec<Case>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(Case::parse)
        .collect()
}

pub fn write_file(cases: &[Case]) -> String {
    let mut out = String::from("# op shapes seed checksum\n");
    for c in cases {
        let _ = writeln!(out, "{}", c.to_line());
    }
    out
}

/// The default suite: one or two cases per op.
pub fn default_suite() -> Result<Vec<Case>> {
    let v = |s: &[&[usize]]| s.iter().map(|d| d.to_vec()).collect::<Vec<_>>();
    let specs: Vec<(&str, Vec<Vec<usize>>)> = vec![
        ("matmul", v(&[&[3, 4], &[4, 5]])),
        ("matmul", v(&[&[2, 3, 4], &[4, 2]])),
        ("matmul_bt", v(&[&[3, 4], &[5, 4]])),
        ("add", v(&[&[2, 3], &[2, 3]])),
        ("mul", v(&[&[4], &[4]])),
        ("add_bias", v(&[&[2, 3, 4], &[4]])),
        ("scale", v(&[&[5]])),
        ("relu", v(&[&[3, 3]])),
        ("gelu", v(&[&[3, 3]])),
        ("sum", v(&[&[2, 5]])),
        ("embedding_lookup", v(&[&[10, 4], &[6]])),
        ("conv1d_valid", v(&[&[2, 6, 3], &[3, 3, 4]])),
        ("max_over_time", v(&[&[2, 5, 3]])),
        ("layernorm", v(&[&[4, 6], &[6], &[6]])),
        ("scaled_dot_attention", v(&[&[2, 3, 4], &[2, 3, 4], &[2, 3, 4]])),
        ("dropout", v(&[&[4, 5]])),
        ("softmax_cross_entropy", v(&[&[4, 3]])),
        ("masked_mean", v(&[&[2, 4, 3]])),
        ("concat", v(&[&[3, 2], &[3, 4]])),
    ];
    specs
        .into_iter()
        .enumerate()
        .map(|(i, (op, shapes))| Case::compute(op, shapes, 1000 + i as u64))
        .collect()
}
