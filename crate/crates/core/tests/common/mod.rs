//! Independent reference implementations and property checks shared by the
//! integration test targets. Nothing here calls into the fusion kernel's
//! helpers; each formula is written out directly from its definition.
#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use taskfuse::{
    consensus_filter, fuse_tensor, importance_weights, Branch, FusionConfig, FusionMode,
    TaskVector,
};

/// Dense evaluation of one fused element, all in f64.
pub fn oracle_element(base: f64, taus: &[f64], mode: FusionMode, delta: f64, beta: f64) -> f64 {
    let k = taus.len();
    let votes = taus.iter().filter(|t| **t >= 0.0).count() as f64;
    let in_set = |t: f64| -> bool {
        if votes > delta {
            t >= 0.0
        } else if votes < k as f64 - delta {
            t < 0.0
        } else {
            true
        }
    };
    let update: f64 = match mode {
        FusionMode::Full => {
            let mut num = 0.0;
            let mut den = 0.0;
            for &t in taus {
                if in_set(t) {
                    let e = (beta * t.abs()).exp();
                    num += e * t;
                    den += e;
                }
            }
            num / den
        }
        FusionMode::NoWeight => taus.iter().filter(|t| in_set(**t)).sum(),
        FusionMode::NoFilter | FusionMode::Average => taus.iter().sum::<f64>() / k as f64,
    };
    base + update
}

/// Oracle over whole tensors; `tasks` are raw task weights, not task vectors.
pub fn oracle_fuse(
    base: &[f32],
    tasks: &[Vec<f32>],
    mode: FusionMode,
    delta: f64,
    beta: f64,
) -> Vec<f64> {
    (0..base.len())
        .map(|i| {
            let taus: Vec<f64> = tasks.iter().map(|t| (t[i] - base[i]) as f64).collect();
            oracle_element(base[i] as f64, &taus, mode, delta, beta)
        })
        .collect()
}

/// `P(X <= floor(m/2))` for `X ~ Binomial(m, p)` by direct summation.
pub fn oracle_majority_error(m: u64, p: f64) -> f64 {
    let mut total = 0.0;
    for j in 0..=m / 2 {
        let mut c = 1.0f64;
        for i in 0..j {
            c = c * (m - i) as f64 / (i + 1) as f64;
        }
        total += c * p.powi(j as i32) * (1.0 - p).powi((m - j) as i32);
    }
    total
}

/// Population mean / std z-scores and row averages, computed naively.
pub fn oracle_zscores(rows: &[(bool, Vec<f64>)]) -> Vec<(Vec<f64>, f64)> {
    let t = rows[0].1.len();
    let base: Vec<&Vec<f64>> = rows.iter().filter(|r| r.0).map(|r| &r.1).collect();
    let n = base.len() as f64;
    let mut mu = vec![0.0; t];
    let mut sd = vec![0.0; t];
    for j in 0..t {
        mu[j] = base.iter().map(|r| r[j]).sum::<f64>() / n;
        sd[j] = (base.iter().map(|r| (r[j] - mu[j]) * (r[j] - mu[j])).sum::<f64>() / n).sqrt();
    }
    rows.iter()
        .map(|(_, s)| {
            let z: Vec<f64> = (0..t).map(|j| (s[j] - mu[j]) / sd[j]).collect();
            let avg = z.iter().sum::<f64>() / t as f64;
            (z, avg)
        })
        .collect()
}

pub const PROPERTY_CASES: u32 = 256;

fn runner() -> TestRunner {
    TestRunner::new(Config {
        cases: PROPERTY_CASES,
        failure_persistence: None,
        ..Config::default()
    })
}

fn value() -> impl Strategy<Value = f32> {
    prop_oneof![
        8 => -1.0f32..=1.0,
        1 => Just(0.0f32),
        1 => Just(-0.0f32),
    ]
}

/// `(base, taus)` with `K` in `1..=max_k` and `d` in `1..=24`.
pub fn instance(max_k: usize) -> impl Strategy<Value = (Vec<f32>, Vec<Vec<f32>>)> {
    (1..=max_k, 1usize..=24).prop_flat_map(|(k, d)| {
        (
            prop::collection::vec(-1.0f32..=1.0, d),
            prop::collection::vec(prop::collection::vec(value(), d), k),
        )
    })
}

fn to_taus(v: &[Vec<f32>]) -> Vec<TaskVector> {
    v.iter().map(|t| TaskVector::from(t.clone())).collect()
}

fn beta() -> impl Strategy<Value = f64> {
    prop_oneof![Just(1.0), 0.05f64..5.0]
}

fn run<S: Strategy>(
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    runner()
        .run(&strategy, test)
        .map_err(|e| e.to_string())
}

/// Weights are non-negative, sum to one and vanish outside the active set.
pub fn weight_simplex() -> Result<(), String> {
    run((instance(8), beta()), |((_, taus), beta)| {
        let taus = to_taus(&taus);
        let cfg = FusionConfig { beta, ..FusionConfig::default() };
        let cons = consensus_filter(&taus, &cfg).unwrap();
        let weights = importance_weights(&taus, &cons, &cfg).unwrap();
        for (c, w) in cons.iter().zip(&weights) {
            let sum: f64 = w.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6, "sum {}", sum);
            for (k, &wk) in w.iter().enumerate() {
                prop_assert!(wk >= 0.0);
                if !c.active_set.contains(k) {
                    prop_assert_eq!(wk, 0.0);
                }
            }
        }
        Ok(())
    })
}

/// The applied update lies between the smallest and largest active task value.
pub fn convex_combination_bound() -> Result<(), String> {
    run((instance(8), beta()), |((_, taus_raw), beta)| {
        let taus = to_taus(&taus_raw);
        let cfg = FusionConfig { beta, ..FusionConfig::default() };
        let cons = consensus_filter(&taus, &cfg).unwrap();
        let weights = importance_weights(&taus, &cons, &cfg).unwrap();
        let d = taus[0].len();
        // zero base: the fused value is the update rounded once to f32
        let fused = fuse_tensor(&vec![0.0; d], &taus, &cfg).unwrap();
        for i in 0..d {
            let active: Vec<f32> = cons[i].active_set.iter().map(|k| taus_raw[k][i]).collect();
            let lo = active.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = active.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let update: f64 = (0..taus.len()).map(|k| weights[i][k] * taus_raw[k][i] as f64).sum();
            let slack = 1e-12;
            prop_assert!(update >= lo as f64 - slack && update <= hi as f64 + slack,
                "update {} outside [{}, {}]", update, lo, hi);
            prop_assert!(fused[i] >= lo && fused[i] <= hi, "fused {} outside [{}, {}]", fused[i], lo, hi);
        }
        Ok(())
    })
}

/// A positive (negative) majority never yields a negative (positive) update.
pub fn sign_preservation() -> Result<(), String> {
    run((instance(8), beta()), |((_, taus), beta)| {
        let taus = to_taus(&taus);
        let cfg = FusionConfig { beta, ..FusionConfig::default() };
        let cons = consensus_filter(&taus, &cfg).unwrap();
        let fused = fuse_tensor(&vec![0.0; taus[0].len()], &taus, &cfg).unwrap();
        for (c, &f) in cons.iter().zip(&fused) {
            match c.branch {
                Branch::PositiveMajority => prop_assert!(f >= 0.0, "{}", f),
                Branch::NegativeMajority => prop_assert!(f <= 0.0, "{}", f),
                Branch::NoConsensus => {}
            }
        }
        Ok(())
    })
}

/// beta -> 0 gives uniform weights over the active set, beta = 1 orders
/// weights by magnitude, large beta concentrates on the largest magnitude.
pub fn beta_limits() -> Result<(), String> {
    fixed_beta_limits()?;
    run(instance(8), |(_, taus_raw)| {
        let taus = to_taus(&taus_raw);
        let weights_at = |beta: f64| {
            let cfg = FusionConfig { beta, ..FusionConfig::default() };
            let cons = consensus_filter(&taus, &cfg).unwrap();
            (importance_weights(&taus, &cons, &cfg).unwrap(), cons)
        };
        let (small, cons) = weights_at(1e-6);
        let (unit, _) = weights_at(1.0);
        let (large, _) = weights_at(1e3);
        for (i, c) in cons.iter().enumerate() {
            let active: Vec<usize> = c.active_set.iter().collect();
            let n = active.len() as f64;
            for &k in &active {
                prop_assert!((small[i][k] - 1.0 / n).abs() <= 1e-5);
            }
            for &a in &active {
                for &b in &active {
                    if taus_raw[a][i].abs() > taus_raw[b][i].abs() {
                        prop_assert!(unit[i][a] > unit[i][b]);
                    }
                }
            }
            let mut mags: Vec<(f32, usize)> = active.iter().map(|&k| (taus_raw[k][i].abs(), k)).collect();
            mags.sort_by(|x, y| y.0.total_cmp(&x.0));
            let clear_winner = mags.len() == 1 || mags[0].0 - mags[1].0 >= 0.02;
            if clear_winner {
                prop_assert!(large[i][mags[0].1] >= 1.0 - 1e-6, "{:?}", large[i]);
            }
        }
        Ok(())
    })
}

fn fixed_beta_limits() -> Result<(), String> {
    let taus = to_taus(&[vec![0.1], vec![0.5], vec![0.3]]);
    let weights = |beta: f64| {
        let cfg = FusionConfig { beta, ..FusionConfig::default() };
        let cons = consensus_filter(&taus, &cfg).unwrap();
        importance_weights(&taus, &cons, &cfg).unwrap()[0].clone()
    };
    let small = weights(1e-6);
    let unit = weights(1.0);
    let large = weights(1e3);
    let uniform = small.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-6);
    let ordered = unit[1] > unit[2] && unit[2] > unit[0];
    let peaked = large[1] > 1.0 - 1e-12;
    if uniform && ordered && peaked {
        Ok(())
    } else {
        Err(format!("fixed input weights: {small:?} / {unit:?} / {large:?}"))
    }
}

/// Reordering task checkpoints leaves every output bit unchanged, in every mode.
pub fn permutation_equivariance() -> Result<(), String> {
    let strategy = (instance(8), beta()).prop_flat_map(|((base, taus), beta)| {
        let idx: Vec<usize> = (0..taus.len()).collect();
        (Just(base), Just(taus), Just(beta), Just(idx).prop_shuffle())
    });
    run(strategy, |(base, taus, beta, perm)| {
        let permuted: Vec<Vec<f32>> = perm.iter().map(|&k| taus[k].clone()).collect();
        for mode in FusionMode::ALL {
            let cfg = FusionConfig { beta, ..FusionConfig::with_mode(mode) };
            let a = fuse_tensor(&base, &to_taus(&taus), &cfg).unwrap();
            let b = fuse_tensor(&base, &to_taus(&permuted), &cfg).unwrap();
            let same = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
            prop_assert!(same, "mode {}: {:?} vs {:?}", mode, a, b);
        }
        Ok(())
    })
}

/// With one task every mode returns `base + tau`.
pub fn single_task_reduction() -> Result<(), String> {
    let strategy = (1usize..=32).prop_flat_map(|d| {
        (
            prop::collection::vec(-1.0f32..=1.0, d),
            prop::collection::vec(value(), d),
            beta(),
        )
    });
    run(strategy, |(base, tau, beta)| {
        let expected: Vec<f32> = base
            .iter()
            .zip(&tau)
            .map(|(&b, &t)| (b as f64 + t as f64) as f32)
            .collect();
        for mode in FusionMode::ALL {
            let cfg = FusionConfig { beta, ..FusionConfig::with_mode(mode) };
            let got = fuse_tensor(&base, &[TaskVector::from(tau.clone())], &cfg).unwrap();
            let same = got.iter().zip(&expected).all(|(x, y)| x.to_bits() == y.to_bits());
            prop_assert!(same, "mode {}: {:?} vs {:?}", mode, got, expected);
        }
        Ok(())
    })
}

pub fn invariant_suite() -> Vec<(&'static str, Result<(), String>)> {
    vec![
        ("weight_simplex", weight_simplex()),
        ("convex_combination_bound", convex_combination_bound()),
        ("sign_preservation", sign_preservation()),
        ("beta_limits", beta_limits()),
        ("permutation_equivariance", permutation_equivariance()),
        ("single_task_reduction", single_task_reduction()),
    ]
}
