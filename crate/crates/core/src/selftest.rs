//! Built-in invariant checks behind `fedskew selftest`.

use std::time::Instant;

use crate::federation::{aggregate, fedavg_weights, fedavgw_weights, AggregationWeights};
use crate::metrics::{converged, ClientEval, fairness_summary};
use crate::models::{BackboneMode, LoraFormerConfig, ModelFamily, ParamSet, TextCnnConfig};
use crate::numkit::gradcheck::{self, check_op, sample_coords};
use crate::numkit::vectors::OPS;
use crate::numkit::{Graph, Tensor};
use crate::partition::{check_exact, partition_labels, PartitionConfig};
use crate::seed;
use crate::textdata::{generate_synthetic, Batch, Dataset, Document, SyntheticSpec};
use crate::Result;

pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub secs: f64,
}

type Check = fn() -> Result<std::result::Result<String, String>>;

pub const CHECKS: &[(&str, Check)] = &[
    ("op gradients", op_gradients),
    ("model gradients", model_gradients),
    ("aggregation algebra", aggregation_algebra),
    ("partition invariants", partition_invariants),
    ("lora identities", lora_identities),
    ("metric arithmetic", metric_arithmetic),
    ("convergence rule", convergence_rule),
];

/// Runs every check; an `Err` from a check counts as a failure.
pub fn run_all() -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|&(name, f)| {
            let start = Instant::now();
            let (passed, detail) = match f() {
                Ok(Ok(d)) => (true, d),
                Ok(Err(d)) => (false, d),
                Err(e) => (false, format!("error: {e}")),
            };
            CheckOutcome {
                name,
                passed,
                detail,
                secs: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

fn verdict(ok: bool, pass: String, fail: String) -> Result<std::result::Result<String, String>> {
    Ok(if ok { Ok(pass) } else { Err(fail) })
}

fn op_gradients() -> Result<std::result::Result<String, String>> {
    let mut worst = (0.0, "");
    for &op in OPS {
        for s in 0..5 {
            let r = check_op(op, s)?;
            if r.checked == 0 || r.max_rel_error >= GRAD_TOLERANCE {
                return verdict(false, String::new(), format!("{op} seed {s}: {:?}", r.worst));
            }
            if r.max_rel_error > worst.0 {
                worst = (r.max_rel_error, op);
            }
        }
    }
    verdict(
        true,
        format!("{} ops x 5 seeds, max rel error {:.2e} ({})", OPS.len(), worst.0, worst.1),
        String::new(),
    )
}

fn tiny_corpus(seed: u64) -> Result<Dataset> {
    generate_synthetic(&SyntheticSpec {
        classes: 4,
        vocab_size: 40,
        train_per_class: 10,
        test_per_class: 5,
        doc_length: 6,
        topic_concentration: 0.05,
        seed,
        max_seq_len: 6,
    })
}

fn tiny_families() -> [ModelFamily; 2] {
    [
        ModelFamily::TextCnn(TextCnnConfig {
            embed_dim: 5,
            filters_per_width: 4,
            num_classes: 4,
            ..TextCnnConfig::default()
        }),
        ModelFamily::LoraFormer(tiny_lora()),
    ]
}

fn tiny_lora() -> LoraFormerConfig {
    LoraFormerConfig {
        layers: 1,
        d_model: 8,
        heads: 2,
        ffn_dim: 10,
        lora_rank: 2,
        num_classes: 4,
        backbone: BackboneMode::RandomFrozen,
        ..LoraFormerConfig::default()
    }
}

/// Ragged documents so padding is exercised.
fn ragged_batch(ds: &Dataset) -> Result<Batch> {
    let docs: Vec<Document> = ds
        .train
        .iter()
        .take(5)
        .enumerate()
        .map(|(i, d)| Document {
            tokens: d.tokens[..(2 + i).min(d.tokens.len())].to_vec(),
            ..d.clone()
        })
        .collect();
    Batch::from_docs(&docs, ds.max_seq_len)
}

fn randomize_adapters(params: &mut ParamSet, seed_value: u64) -> Result<()> {
    let mut rng = seed::stream(seed_value, &[0x1a]);
    let names: Vec<String> = params
        .groups()
        .iter()
        .filter(|g| g.lora)
        .map(|g| g.name.clone())
        .collect();
    for n in names {
        let t = params.tensor_mut(&n)?;
        *t = Tensor::randn(t.shape(), 0.3, &mut rng);
    }
    Ok(())
}

fn model_gradients() -> Result<std::result::Result<String, String>> {
    let mut max = 0.0f64;
    for family in tiny_families() {
        for s in 0..5u64 {
            let ds = tiny_corpus(s)?;
            let batch = ragged_batch(&ds)?;
            let mut params = family.build(ds.vocab_size(), ds.max_seq_len, s)?;
            randomize_adapters(&mut params, s)?;
            let run = |p: &ParamSet, grads: bool| -> Result<(f64, Option<crate::numkit::Gradients>)> {
                let mut g = Graph::new();
                let mut rng = seed::stream(s, &[0x1b]);
                let loss = family.loss(&mut g, p, &batch, Some(&mut rng))?;
                let v = g.value(loss).data()[0];
                Ok((v, if grads { Some(g.backward(loss)?) } else { None }))
            };
            let grads = run(&params, true)?.1.expect("requested");
            let coords = sample_coords(&grads, 4, &mut seed::stream(s, &[0x1c]));
            let report = gradcheck::check(&mut params, &grads, &coords, |p| Ok(run(p, false)?.0))?;
            if !report.passes(GRAD_TOLERANCE) {
                return verdict(false, String::new(), format!("{} seed {s}: {:?}", family.name(), report.worst));
            }
            max = max.max(report.max_rel_error);
        }
    }
    verdict(true, format!("both families x 5 seeds, max rel error {max:.2e}"), String::new())
}

fn weights_sum_to_one(w: &AggregationWeights) -> bool {
    [&w.standard, &w.lora]
        .iter()
        .all(|v| (v.iter().sum::<f64>() - 1.0).abs() <= 1e-12)
}

fn aggregation_algebra() -> Result<std::result::Result<String, String>> {
    let mut rng = seed::stream(0xa9, &[]);
    use rand::Rng as _;
    for trial in 0..50 {
        let k = rng.random_range(1..=12);
        let sizes: Vec<usize> = (0..k).map(|_| rng.random_range(1..5000)).collect();
        if !weights_sum_to_one(&fedavg_weights(&sizes)?) {
            return verdict(false, String::new(), format!("fedavg sum, trial {trial}"));
        }
        for beta in [0.0, 0.1, 0.5, 1.0] {
            let w = fedavgw_weights(&sizes, beta)?;
            if !weights_sum_to_one(&w) {
                return verdict(false, String::new(), format!("fedavgw({beta}) sum, sizes {sizes:?}"));
            }
            if beta > 0.0 {
                for i in 0..k {
                    for j in 0..k {
                        if sizes[i] < sizes[j] && !(w.lora[i] > w.lora[j]) {
                            return verdict(false, String::new(), format!("monotonicity, sizes {sizes:?}"));
                        }
                    }
                }
            }
        }
        let n = rng.random_range(1..5000);
        let equal = vec![n; k];
        for beta in [0.1, 0.5, 1.0] {
            if fedavgw_weights(&equal, beta)? != fedavg_weights(&equal)? {
                return verdict(false, String::new(), format!("equal sizes {n} x {k}, beta {beta}"));
            }
        }
    }

    let family = ModelFamily::LoraFormer(tiny_lora());
    let base = family.build(20, 6, 1)?;
    let clients: Vec<ParamSet> = (0..3)
        .map(|c| {
            let mut p = base.clone();
            let mut r = seed::stream(0xab, &[c]);
            for (_, t) in p.trainable_mut() {
                *t = Tensor::randn(t.shape(), 1.0, &mut r);
            }
            p
        })
        .collect();
    let refs: Vec<&ParamSet> = clients.iter().collect();
    let sizes = [120, 7, 3000];
    let w = fedavgw_weights(&sizes, 0.5)?;
    let merged = aggregate(&refs, &w)?;
    let plain = aggregate(&refs, &fedavg_weights(&sizes)?)?;
    for (gi, g) in merged.groups().iter().enumerate() {
        let weights = if g.lora { &w.lora } else { &w.standard };
        for (i, &v) in g.tensor.data().iter().enumerate() {
            let expected = if g.trainable {
                let mut acc = 0.0;
                for (c, &wk) in clients.iter().zip(weights) {
                    acc += wk * c.groups()[gi].tensor.data()[i];
                }
                acc
            } else {
                base.groups()[gi].tensor.data()[i]
            };
            if v.to_bits() != expected.to_bits() {
                return verdict(false, String::new(), format!("oracle mismatch in {}", g.name));
            }
        }
        if !g.lora && g.tensor != plain.groups()[gi].tensor {
            return verdict(false, String::new(), format!("{} differs from fedavg", g.name));
        }
    }
    let ratio = {
        let w = fedavg_weights(&[118, 34742])?.standard;
        w[1] / w[0]
    };
    verdict(
        (ratio - 294.4).abs() <= 0.1,
        format!("50 random size vectors, 3-client oracle exact, weight ratio {ratio:.2}"),
        format!("weight ratio {ratio}"),
    )
}

fn partition_invariants() -> Result<std::result::Result<String, String>> {
    let labels: Vec<usize> = (0..4000).map(|i| i % 4).collect();
    let variance = |alpha: f64, s: u64| -> Result<f64> {
        let clients = partition_labels(&labels, 4, &PartitionConfig::new(10, alpha, s))?;
        check_exact(&clients, labels.len())?;
        let mut total = 0.0;
        for c in &clients {
            let p = c.class_proportions();
            let mean = p.iter().sum::<f64>() / p.len() as f64;
            total += p.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / p.len() as f64;
        }
        Ok(total / clients.len() as f64)
    };
    let (mut low, mut high) = (0.0, 0.0);
    for s in 0..40 {
        low += variance(0.1, s)?;
        high += variance(5.0, s)?;
        if partition_labels(&labels, 4, &PartitionConfig::new(10, 0.1, s))?
            != partition_labels(&labels, 4, &PartitionConfig::new(10, 0.1, s))?
        {
            return verdict(false, String::new(), format!("seed {s} not reproducible"));
        }
    }
    verdict(
        low > high,
        format!("40 seeds exact and reproducible, class-proportion variance {:.4} > {:.4}", low / 40.0, high / 40.0),
        format!("variance at alpha 0.1 ({low}) not above alpha 5 ({high})"),
    )
}

fn lora_identities() -> Result<std::result::Result<String, String>> {
    let cfg = tiny_lora();
    let ds = tiny_corpus(3)?;
    let docs: Vec<&Document> = ds.test.iter().collect();
    let family = ModelFamily::LoraFormer(cfg.clone());
    let base = cfg.build(ds.vocab_size(), ds.max_seq_len, 4)?;
    let reference = family.eval_logits(&base, &docs, ds.max_seq_len)?;
    for s in 0..5 {
        let other = cfg.reinit_adapters(&base, 100 + s)?;
        if family.eval_logits(&other, &docs, ds.max_seq_len)? != reference {
            return verdict(false, String::new(), format!("adapter seed {s} changed fresh logits"));
        }
    }
    let mut worst = 0.0f64;
    for s in 0..5 {
        let mut p = base.clone();
        randomize_adapters(&mut p, s)?;
        let before = family.eval_logits(&p, &docs, ds.max_seq_len)?;
        let merged = cfg.merge_lora(&p)?;
        let after = family.eval_logits(&merged, &docs, ds.max_seq_len)?;
        for (a, b) in before.iter().flatten().zip(after.iter().flatten()) {
            worst = worst.max((a - b).abs());
        }
    }
    verdict(
        worst < 1e-5,
        format!("fresh adapters inert, merge drift {worst:.1e}"),
        format!("merge drift {worst:e}"),
    )
}

/// Final-round (avg, worst, reported gap) triples in percent.
pub const REFERENCE_ROWS: [(f64, f64, f64); 11] = [
    (86.6, 54.5, 32.2),
    (80.8, 30.7, 50.1),
    (95.6, 91.9, 3.7),
    (93.6, 92.3, 1.3),
    (94.9, 89.3, 5.6),
    (93.1, 93.1, 0.0),
    (97.8, 94.7, 3.1),
    (91.3, 91.3, 0.0),
    (78.3, 20.5, 57.8),
    (78.1, 19.6, 58.5),
    (77.2, 17.4, 59.8),
];

/// Builds client evaluations with the given accuracies and summarizes them.
fn summarize(accuracies: &[f64]) -> Result<crate::metrics::FairnessSummary> {
    let evals: Vec<ClientEval> = accuracies
        .iter()
        .enumerate()
        .map(|(i, &a)| ClientEval {
            client_id: i,
            n_k: 1,
            eval_size: 1,
            correct: 0,
            accuracy: a,
        })
        .collect();
    fairness_summary(&evals)
}

fn metric_arithmetic() -> Result<std::result::Result<String, String>> {
    for &(avg, worst, gap) in &REFERENCE_ROWS {
        // ten clients whose mean is `avg` and minimum is `worst`
        let mut acc = vec![(10.0 * avg - worst) / 900.0; 10];
        acc[3] = worst / 100.0;
        let s = summarize(&acc)?;
        if (100.0 * s.gap - gap).abs() > 0.1 + 1e-9 {
            return verdict(false, String::new(), format!("row {avg}/{worst}: gap {}", 100.0 * s.gap));
        }
    }
    let ratio = crate::fedcli::reduction_ratio(32.2, 3.7);
    verdict(
        (ratio - 8.7).abs() <= 0.05,
        format!("{} reference rows within 0.1, reduction {}", REFERENCE_ROWS.len(), crate::fedcli::format_ratio(ratio)),
        format!("reduction ratio {ratio}"),
    )
}

fn convergence_rule() -> Result<std::result::Result<String, String>> {
    let series = |spread: f64| -> Vec<f64> {
        let mut v = vec![0.5, 0.7, 0.8];
        v.extend([0.9, 0.9 + spread / 2.0, 0.9 + spread, 0.9 + spread / 4.0, 0.9]);
        v
    };
    let wide = converged(&series(0.006), 5, 0.003);
    let narrow = converged(&series(0.002), 5, 0.003);
    verdict(
        !wide && narrow,
        "spread 0.006 rejected, 0.002 accepted".into(),
        format!("spread 0.006 converged={wide}, spread 0.002 converged={narrow}"),
    )
}
