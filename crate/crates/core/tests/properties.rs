mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use taskfuse::partition::{assign_subsets, partition, PartitionConfig, PartitionRecord};
use taskfuse::sim::{exact_majority_error, simulate, MagnitudeDist, SimConfig};
use taskfuse::tensor_store::to_bytes;
use taskfuse::{Checkpoint, Dtype, NamedTensor};

#[test]
fn weight_simplex() {
    common::weight_simplex().unwrap();
}

#[test]
fn convex_combination_bound() {
    common::convex_combination_bound().unwrap();
}

#[test]
fn sign_preservation() {
    common::sign_preservation().unwrap();
}

#[test]
fn beta_limits() {
    common::beta_limits().unwrap();
}

#[test]
fn permutation_equivariance() {
    common::permutation_equivariance().unwrap();
}

#[test]
fn single_task_reduction() {
    common::single_task_reduction().unwrap();
}

fn dtype() -> impl Strategy<Value = Dtype> {
    prop_oneof![Just(Dtype::F32), Just(Dtype::F16), Just(Dtype::BF16)]
}

fn representable(dtype: Dtype, v: f32) -> f32 {
    match dtype {
        Dtype::F32 => v,
        Dtype::F16 => half::f16::from_f32(v).to_f32(),
        Dtype::BF16 => half::bf16::from_f32(v).to_f32(),
    }
}

fn tensors() -> impl Strategy<Value = Vec<NamedTensor>> {
    let tensor = (dtype(), prop::collection::vec(1usize..=5, 0..=3)).prop_flat_map(|(dtype, shape)| {
        let n: usize = shape.iter().product();
        prop::collection::vec(-1e4f32..1e4, n).prop_map(move |vals| {
            let data = vals.into_iter().map(|v| representable(dtype, v)).collect();
            (dtype, shape.clone(), data)
        })
    });
    prop::collection::vec(tensor, 1..=6).prop_map(|ts| {
        ts.into_iter()
            .enumerate()
            .map(|(i, (dtype, shape, data))| NamedTensor::new(format!("t{i}"), dtype, shape, data))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn container_round_trip(ts in tensors()) {
        let bytes = to_bytes(&ts).unwrap();
        let ckpt = Checkpoint::from_bytes(bytes.clone()).unwrap();
        prop_assert_eq!(ckpt.len(), ts.len());
        for t in &ts {
            let meta = ckpt.meta(&t.name).unwrap();
            prop_assert_eq!(meta.dtype, t.dtype);
            let (data, shape) = ckpt.read_tensor_f32(&t.name).unwrap();
            prop_assert_eq!(&shape, &t.shape);
            prop_assert!(data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        // rewriting what was read reproduces the file byte for byte
        let reread: Vec<NamedTensor> = ts
            .iter()
            .map(|t| {
                let (data, shape) = ckpt.read_tensor_f32(&t.name).unwrap();
                NamedTensor::new(t.name.clone(), t.dtype, shape, data)
            })
            .collect();
        prop_assert_eq!(to_bytes(&reread).unwrap(), bytes);
    }

    #[test]
    fn truncated_files_are_rejected(ts in tensors(), cut in 1usize..64) {
        let bytes = to_bytes(&ts).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(Checkpoint::from_bytes(bytes[..keep].to_vec()).is_err());
    }

    #[test]
    fn assignment_is_a_partition(
        tool_sets in prop::collection::vec(prop::collection::btree_set(0u8..12, 0..4), 0..40),
        m in 1usize..5,
        seed in any::<u64>(),
    ) {
        let records: Vec<PartitionRecord> = tool_sets
            .iter()
            .enumerate()
            .map(|(i, t)| PartitionRecord::new(format!("r{i}"), t.iter().map(|x| format!("tool{x}"))))
            .collect();
        let cfg = PartitionConfig::new(m, 0.7, seed);
        let subsets = assign_subsets(records.clone(), &cfg).unwrap();
        prop_assert_eq!(subsets.len(), m);
        let mut seen: Vec<String> = subsets.iter().flatten().map(|r| r.id.clone()).collect();
        seen.sort();
        let mut all: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
        all.sort();
        prop_assert_eq!(seen, all);
        prop_assert_eq!(assign_subsets(records, &cfg).unwrap(), subsets);
    }

    #[test]
    fn splits_cover_their_subset(
        tool_sets in prop::collection::vec(prop::collection::btree_set(0u8..12, 0..5), 8..40),
        seed in any::<u64>(),
        ratio in 0.5f64..=1.0,
    ) {
        let records: Vec<PartitionRecord> = tool_sets
            .iter()
            .enumerate()
            .map(|(i, t)| PartitionRecord::new(format!("r{i}"), t.iter().map(|x| format!("tool{x}"))))
            .collect();
        let cfg = PartitionConfig { objective: taskfuse::partition::AssignObjective::Sum, ..PartitionConfig::new(2, ratio, seed) };
        let subsets = assign_subsets(records.clone(), &cfg).unwrap();
        if subsets.iter().any(|s| (ratio * s.len() as f64 + 1e-9).floor() < 1.0) {
            return Ok(());
        }
        let result = partition(records, &cfg).unwrap();
        for (split, subset) in result.splits.iter().zip(&subsets) {
            let train: BTreeSet<&str> = split.train.iter().map(|r| r.id.as_str()).collect();
            let test: BTreeSet<&str> = split.test.iter().map(|r| r.id.as_str()).collect();
            let whole: BTreeSet<&str> = subset.iter().map(|r| r.id.as_str()).collect();
            prop_assert!(train.is_disjoint(&test));
            prop_assert_eq!(train.union(&test).copied().collect::<BTreeSet<_>>(), whole);
            prop_assert!(split.train.windows(2).all(|w| w[0].tools.len() >= w[1].tools.len()));
        }
    }
}

#[test]
fn filtered_error_is_unbiased_across_seeds() {
    // pooled over 40 seeds (8M trials) the estimate must sit within 4 sigma
    let (m, p) = (15, 0.6);
    let exact = exact_majority_error(m as u64, p).unwrap();
    let mut errors = 0.0;
    let mut trials = 0.0;
    for seed in 0..40 {
        let r = simulate(&SimConfig::new(p, m, 200_000, seed)).unwrap();
        errors += r.filtered_error * r.trials as f64;
        trials += r.trials as f64;
    }
    let rate = errors / trials;
    let sigma = (exact * (1.0 - exact) / trials).sqrt();
    assert!((rate - exact).abs() < 4.0 * sigma, "pooled {rate} vs exact {exact} (sigma {sigma})");
}

#[test]
fn filtered_error_decreases_with_k() {
    for p in [0.6, 0.7, 0.9] {
        let mut prev: Option<(f64, f64)> = None;
        for k in [1, 3, 5, 9, 15] {
            let r = simulate(&SimConfig::new(p, k, 100_000, 3)).unwrap();
            if let Some((rate, hw)) = prev {
                assert!(r.filtered_error <= rate + hw + r.filtered_half_width, "p={p} K={k}");
            }
            prev = Some((r.filtered_error, r.filtered_half_width));
        }
    }
}

#[test]
fn unit_magnitudes_make_both_estimators_majority_votes() {
    let cfg = SimConfig {
        magnitudes: MagnitudeDist::Unit,
        ..SimConfig::new(0.7, 5, 50_000, 9)
    };
    let r = simulate(&cfg).unwrap();
    assert_eq!(r.filtered_error, r.averaging_error);
}

#[test]
fn simulation_is_reproducible() {
    let cfg = SimConfig { workers: 3, ..SimConfig::new(0.7, 9, 30_000, 42) };
    assert_eq!(simulate(&cfg).unwrap(), simulate(&cfg).unwrap());
}
