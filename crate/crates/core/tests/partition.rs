use fedskew::partition::{
    check_exact, dirichlet_partition, partition_labels, skew_report, ClientPartition,
    PartitionConfig, PartitionManifest,
};
use fedskew::textdata::{generate_synthetic, SyntheticSpec};
use fedskew::Error;
use proptest::prelude::*;

/// Balanced 4-class labels, 2500 per class.
fn balanced() -> Vec<usize> {
    (0..10_000).map(|i| i % 4).collect()
}

fn sizes(labels: &[usize], alpha: f64, seed: u64) -> Vec<usize> {
    let cfg = PartitionConfig {
        min_samples_per_client: 0,
        ..PartitionConfig::new(10, alpha, seed)
    };
    partition_labels(labels, 4, &cfg)
        .unwrap()
        .iter()
        .map(ClientPartition::n_k)
        .collect()
}

#[test]
fn single_client_owns_everything() {
    let labels = balanced();
    let p = partition_labels(&labels, 4, &PartitionConfig::new(1, 0.1, 3)).unwrap();
    assert_eq!(p.len(), 1);
    assert_eq!(p[0].sample_indices, (0..10_000).collect::<Vec<_>>());
    assert_eq!(p[0].label_histogram, [2500; 4]);
}

#[test]
fn mild_skew_keeps_sizes_near_even() {
    let labels = balanced();
    let mut within = 0;
    let mut slot_sums = [0usize; 10];
    for seed in 0..100 {
        for (k, n) in sizes(&labels, 5.0, seed).into_iter().enumerate() {
            within += usize::from((700..=1300).contains(&n));
            slot_sums[k] += n;
        }
    }
    // Per client a size is a sum of four Beta(5, 45)-scaled class counts:
    // sd about 210, so roughly 85% of draws fall inside +-30%.
    let frac = within as f64 / 1000.0;
    assert!(frac >= 0.75, "only {frac} of client sizes within 30%");
    for s in slot_sums {
        let mean = s as f64 / 100.0;
        assert!((mean - 1000.0).abs() <= 300.0, "slot mean {mean}");
    }
}

#[test]
fn extreme_skew_gives_large_ratios() {
    let labels = balanced();
    let hits = (0..100)
        .filter(|&seed| {
            let s = sizes(&labels, 0.1, seed);
            let (lo, hi) = (*s.iter().min().unwrap(), *s.iter().max().unwrap());
            lo == 0 || hi as f64 / lo as f64 >= 10.0
        })
        .count();
    assert!(hits >= 90, "ratio >= 10 in only {hits}/100 seeds");
}

fn mean_proportion_variance(labels: &[usize], alpha: f64, seed: u64) -> f64 {
    let cfg = PartitionConfig::new(10, alpha, seed);
    let parts = partition_labels(labels, 4, &cfg).unwrap();
    let vars: Vec<f64> = parts
        .iter()
        .map(|p| {
            let q = p.class_proportions();
            let m = q.iter().sum::<f64>() / q.len() as f64;
            q.iter().map(|x| (x - m).powi(2)).sum::<f64>() / q.len() as f64
        })
        .collect();
    vars.iter().sum::<f64>() / vars.len() as f64
}

#[test]
fn concentration_controls_label_skew() {
    let labels = balanced();
    let at = |alpha| (0..200).map(|s| mean_proportion_variance(&labels, alpha, s)).sum::<f64>() / 200.0;
    let (sharp, flat) = (at(0.1), at(5.0));
    assert!(sharp > flat, "{sharp} <= {flat}");
}

#[test]
fn expected_client_size_is_even() {
    // Pooled over clients the mean is N/K by construction; the meaningful
    // statement is per client slot, averaged over seeds.
    let labels = balanced();
    let seeds = 1000;
    let mut slot_sums = [0usize; 10];
    for seed in 0..seeds {
        for (k, n) in sizes(&labels, 5.0, seed).into_iter().enumerate() {
            slot_sums[k] += n;
        }
    }
    for (k, s) in slot_sums.iter().enumerate() {
        let mean = *s as f64 / seeds as f64;
        assert!((mean / 1000.0 - 1.0).abs() < 0.02, "client {k}: mean size {mean}");
    }
}

#[test]
fn redraw_budget_exhaustion_carries_report() {
    let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
    let cfg = PartitionConfig {
        max_redraws: 5,
        ..PartitionConfig::new(50, 0.1, 1)
    };
    match partition_labels(&labels, 2, &cfg) {
        Err(Error::RedrawBudgetExhausted { attempts, last }) => {
            assert_eq!(attempts, 5);
            assert_eq!(last.sizes.len(), 50);
            assert_eq!(last.min, 0);
            assert_eq!(last.ratio, None);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn min_samples_forces_redraws() {
    let labels = balanced();
    let cfg = PartitionConfig {
        min_samples_per_client: 200,
        max_redraws: 1000,
        ..PartitionConfig::new(10, 0.3, 5)
    };
    let p = partition_labels(&labels, 4, &cfg).unwrap();
    assert!(p.iter().all(|c| c.n_k() >= 200));
}

#[test]
fn invalid_configs_rejected() {
    let labels = balanced();
    assert!(partition_labels(&labels, 4, &PartitionConfig::new(0, 1.0, 1)).is_err());
    assert!(partition_labels(&labels, 4, &PartitionConfig::new(3, 0.0, 1)).is_err());
    assert!(partition_labels(&labels, 4, &PartitionConfig::new(3, f64::NAN, 1)).is_err());
    assert!(partition_labels(&[], 4, &PartitionConfig::new(3, 1.0, 1)).is_err());
}

#[test]
fn skew_report_examples() {
    let fake = |id, n: usize| ClientPartition {
        client_id: id,
        sample_indices: (0..n).collect(),
        label_histogram: vec![n, 0],
        present_classes: vec![0],
    };
    let r = skew_report(&[fake(0, 118), fake(1, 34742)]);
    assert!((r.ratio.unwrap() - 294.42).abs() < 0.01);
    assert_eq!((r.min, r.max), (118, 34742));
    assert_eq!(r.entropies, [0.0, 0.0]);
    let even = skew_report(&[fake(0, 7), fake(1, 7)]);
    assert_eq!(even.ratio, Some(1.0));

    let two = ClientPartition {
        client_id: 0,
        sample_indices: vec![0, 1],
        label_histogram: vec![1, 1],
        present_classes: vec![0, 1],
    };
    assert!((skew_report(&[two]).entropies[0] - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn manifest_round_trip_and_tamper_detection() {
    let ds = generate_synthetic(&SyntheticSpec {
        classes: 3,
        vocab_size: 30,
        train_per_class: 40,
        test_per_class: 5,
        doc_length: 4,
        topic_concentration: 0.1,
        seed: 2,
        max_seq_len: 4,
    })
    .unwrap();
    let cfg = PartitionConfig::new(4, 0.5, 42);
    let parts = dirichlet_partition(&ds, &cfg).unwrap();
    let m = PartitionManifest::new(&cfg, 3, parts);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("partition.json");
    m.save(&path).unwrap();
    assert_eq!(PartitionManifest::load(&path).unwrap(), m);

    let mut bad = m.clone();
    let moved = bad.clients[0].sample_indices.pop().unwrap();
    bad.clients[1].sample_indices.push(moved);
    bad.save(&path).unwrap();
    assert!(PartitionManifest::load(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn partitions_are_exact_and_deterministic(
        labels in prop::collection::vec(0usize..5, 1..400),
        k in 1usize..12,
        alpha in 0.05f64..10.0,
        seed in any::<u64>(),
    ) {
        let cfg = PartitionConfig { min_samples_per_client: 0, ..PartitionConfig::new(k, alpha, seed) };
        let a = partition_labels(&labels, 5, &cfg).unwrap();
        check_exact(&a, labels.len()).unwrap();
        prop_assert_eq!(a.len(), k);
        for (i, c) in a.iter().enumerate() {
            prop_assert_eq!(c.client_id, i);
            prop_assert_eq!(c.label_histogram.iter().sum::<usize>(), c.n_k());
            for &j in &c.sample_indices {
                prop_assert!(c.present_classes.contains(&labels[j]));
            }
            for &p in &c.present_classes {
                prop_assert!(c.label_histogram[p] > 0);
            }
        }
        let b = partition_labels(&labels, 5, &cfg).unwrap();
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}
