//! Self-check battery run by `taskfuse validate`.
//!
//! The checks compare the streaming fusion path against a direct dense
//! evaluation of the fusion rule, confirm the exact majority error never
//! exceeds the Hoeffding bound, round-trip the container format and
//! reproduce the bundled worked example.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::fixtures;
use crate::fusion::{merge_with_kernel, FusionConfig, FusionMode};
use crate::sim::{exact_majority_error, hoeffding_bound};
use crate::tensor_store::{open_checkpoint, to_bytes, write_checkpoint, Checkpoint, Dtype, NamedTensor};

/// Faults that can be injected to prove the battery detects them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Weight the complement of the consensus set instead of the set itself.
    FlipMask,
}

#[derive(Debug, Clone)]
pub struct ValidateOptions {
    pub seed: u64,
    pub instances: usize,
    pub fault: Option<Fault>,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        ValidateOptions {
            seed: 0,
            instances: 1000,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn run(opts: &ValidateOptions) -> Vec<CheckResult> {
    vec![
        oracle_equivalence(opts),
        worked_example(opts),
        hoeffding_conformance(),
        round_trip(opts.seed),
    ]
}

/// Dense reference: signs, vote, active set and softmax written out directly.
fn reference_element(base: f32, taus: &[f64], mode: FusionMode, delta: f64, beta: f64) -> f64 {
    let k = taus.len();
    let positive: Vec<usize> = (0..k).filter(|&j| taus[j] >= 0.0).collect();
    let negative: Vec<usize> = (0..k).filter(|&j| taus[j] < 0.0).collect();
    let votes = positive.len() as f64;
    let active: Vec<usize> = if votes > delta {
        positive
    } else if votes < k as f64 - delta {
        negative
    } else {
        (0..k).collect()
    };
    let update = match mode {
        FusionMode::Full => {
            let denom: f64 = active.iter().map(|&j| (beta * taus[j].abs()).exp()).sum();
            active
                .iter()
                .map(|&j| (beta * taus[j].abs()).exp() / denom * taus[j])
                .sum()
        }
        FusionMode::NoWeight => active.iter().map(|&j| taus[j]).sum(),
        FusionMode::NoFilter | FusionMode::Average => taus.iter().sum::<f64>() / k as f64,
    };
    base as f64 + update
}

fn check(name: &'static str, failure: Option<String>, ok: String) -> CheckResult {
    match failure {
        None => CheckResult {
            name,
            passed: true,
            detail: ok,
        },
        Some(detail) => CheckResult {
            name,
            passed: false,
            detail,
        },
    }
}

fn oracle_equivalence(opts: &ValidateOptions) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    let mut failure = None;
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return check("oracle_equivalence", Some(e.to_string()), String::new()),
    };
    let out = dir.path().join("fused.safetensors");
    'outer: for inst in 0..opts.instances {
        let k = rng.random_range(2..=5usize);
        let d = rng.random_range(1..=64usize);
        let beta = [1.0, 0.5, 2.0][inst % 3];
        let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.random_range(-1.0f32..=1.0)).collect() };
        let base_vals = draw(d);
        let task_vals: Vec<Vec<f32>> = (0..k).map(|_| draw(d)).collect();

        let base = Checkpoint::from_bytes(
            to_bytes(&[NamedTensor::f32("w", vec![d], base_vals.clone())]).unwrap(),
        )
        .unwrap();
        let tasks: Vec<Checkpoint> = task_vals
            .iter()
            .map(|v| {
                Checkpoint::from_bytes(to_bytes(&[NamedTensor::f32("w", vec![d], v.clone())]).unwrap())
                    .unwrap()
            })
            .collect();

        for mode in FusionMode::ALL {
            let cfg = FusionConfig {
                beta,
                ..FusionConfig::with_mode(mode)
            };
            let mut kernel = match cfg.kernel(k) {
                Ok(kn) => kn,
                Err(e) => {
                    failure = Some(e.to_string());
                    break 'outer;
                }
            };
            kernel.invert_mask = opts.fault == Some(Fault::FlipMask);
            if let Err(e) = merge_with_kernel(&base, &tasks, &cfg, &out, kernel) {
                failure = Some(e.to_string());
                break 'outer;
            }
            let fused = match open_checkpoint(&out).and_then(|c| c.read_tensor_f32("w")) {
                Ok((v, _)) => v,
                Err(e) => {
                    failure = Some(e.to_string());
                    break 'outer;
                }
            };
            for i in 0..d {
                let taus: Vec<f64> = task_vals
                    .iter()
                    .map(|t| t[i] as f64 - base_vals[i] as f64)
                    .collect();
                let want = reference_element(base_vals[i], &taus, mode, k as f64 / 2.0, beta);
                let err = (fused[i] as f64 - want).abs() / want.abs().max(1.0);
                worst = worst.max(err);
                if err > 1e-6 {
                    failure = Some(format!(
                        "instance {inst} mode {mode} element {i}: got {} want {want} (rel err {err:.3e})",
                        fused[i]
                    ));
                    break 'outer;
                }
            }
        }
    }
    check(
        "oracle_equivalence",
        failure,
        format!(
            "{} instances x 4 modes, max rel err {worst:.3e}",
            opts.instances
        ),
    )
}

fn worked_example(opts: &ValidateOptions) -> CheckResult {
    let run = || -> crate::Result<Vec<f32>> {
        let base = Checkpoint::from_bytes(fixtures::BASE_BYTES.to_vec())?;
        let tasks = fixtures::TASK_BYTES
            .iter()
            .map(|b| Checkpoint::from_bytes(b.to_vec()))
            .collect::<crate::Result<Vec<_>>>()?;
        let dir = tempfile::tempdir().map_err(|e| crate::Error::io("<tempdir>", e))?;
        let out = dir.path().join("fused.safetensors");
        let cfg = FusionConfig {
            delta: Some(1.5),
            ..FusionConfig::default()
        };
        let mut kernel = cfg.kernel(tasks.len())?;
        kernel.invert_mask = opts.fault == Some(Fault::FlipMask);
        merge_with_kernel(&base, &tasks, &cfg, &out, kernel)?;
        Ok(open_checkpoint(&out)?.read_tensor_f32("proj.weight")?.0)
    };
    match run() {
        Ok(v) => {
            let bad = v
                .iter()
                .zip(fixtures::WORKED_FUSED)
                .any(|(got, want)| (got - want).abs() > 1e-4);
            check(
                "worked_example",
                bad.then(|| format!("got {v:?}, want {:?}", fixtures::WORKED_FUSED)),
                format!("{v:?}"),
            )
        }
        Err(e) => check("worked_example", Some(e.to_string()), String::new()),
    }
}

fn hoeffding_conformance() -> CheckResult {
    let mut failure = None;
    let mut cases = 0;
    for m in 1..=41u64 {
        for step in 1..=50 {
            let p = 0.5 + step as f64 / 100.0;
            cases += 1;
            let (exact, bound) = (exact_majority_error(m, p), hoeffding_bound(m, p));
            match (exact, bound) {
                (Ok(e), Ok(b)) if e <= b => {}
                (Ok(e), Ok(b)) => {
                    failure = Some(format!("m={m} p={p}: exact {e} > bound {b}"));
                }
                (Err(e), _) | (_, Err(e)) => failure = Some(e.to_string()),
            }
        }
    }
    check(
        "hoeffding_conformance",
        failure,
        format!("{cases} (m, p) pairs"),
    )
}

fn round_trip(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut tensors = Vec::new();
    for (i, dtype) in [Dtype::F32, Dtype::F16, Dtype::BF16].into_iter().enumerate() {
        let n = rng.random_range(1..=64usize);
        let data: Vec<f32> = (0..n)
            .map(|_| {
                let v = rng.random_range(-4.0f32..4.0);
                // keep only values the storage dtype represents exactly
                match dtype {
                    Dtype::F32 => v,
                    Dtype::F16 => half::f16::from_f32(v).to_f32(),
                    Dtype::BF16 => half::bf16::from_f32(v).to_f32(),
                }
            })
            .collect();
        tensors.push(NamedTensor::new(format!("t{i}"), dtype, vec![n], data));
    }
    let result = (|| -> crate::Result<Option<String>> {
        let dir = tempfile::tempdir().map_err(|e| crate::Error::io("<tempdir>", e))?;
        let path = dir.path().join("rt.safetensors");
        write_checkpoint(&path, &tensors)?;
        let ckpt = open_checkpoint(&path)?;
        for t in &tensors {
            let meta = ckpt.meta(&t.name).cloned();
            let (v, shape) = ckpt.read_tensor_f32(&t.name)?;
            let same_bits = v.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits());
            if shape != t.shape || !same_bits || meta.map(|m| m.dtype) != Some(t.dtype) {
                return Ok(Some(format!("tensor {} did not round-trip", t.name)));
            }
        }
        Ok(None)
    })();
    match result {
        Ok(failure) => check("round_trip", failure, "F32/F16/BF16 bit-identical".into()),
        Err(e) => check("round_trip", Some(e.to_string()), String::new()),
    }
}
