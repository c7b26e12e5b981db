//! Consensus-filtered, magnitude-weighted fusion of task vectors.
//!
//! For every parameter `i` and task vectors `tau_1..tau_K`:
//!
//! 1. Each task votes with the sign of `tau_{k,i}` (zero counts as positive).
//!    With `V_i` positive votes and threshold `delta`, the active set is the
//!    positive voters if `V_i > delta`, the negative voters if
//!    `V_i < K - delta`, and every task otherwise.
//! 2. Active tasks are weighted by a softmax over `beta * |tau_{k,i}|`;
//!    inactive tasks get weight zero.
//! 3. `fused_i = base_i + sum_k w_{k,i} * tau_{k,i}`.
//!
//! All arithmetic is done in `f32` for task vectors and `f64` for weights
//! and accumulation, whatever the storage dtype. Within an element the
//! contributions are accumulated in ascending order of `tau` value, so the
//! result is bit-identical under any permutation of the task list and any
//! worker count.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Deref;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_store::{check_compatibility, Checkpoint, CheckpointWriter};

/// Largest supported number of task checkpoints.
pub const MAX_TASKS: usize = 64;

/// Elements per parallel work unit. Fixed so that reductions happen in the
/// same order regardless of the thread count.
const CHUNK_ELEMS: usize = 1 << 15;

/// Element-wise difference `task - base` for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector(Vec<f32>);

impl TaskVector {
    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}

impl From<Vec<f32>> for TaskVector {
    fn from(v: Vec<f32>) -> Self {
        TaskVector(v)
    }
}

impl Deref for TaskVector {
    type Target = [f32];

    fn deref(&self) -> &[f32] {
        &self.0
    }
}

pub fn task_vector(base: &[f32], task: &[f32]) -> Result<TaskVector> {
    if base.len() != task.len() {
        return Err(Error::Misaligned(format!(
            "base has {} elements, task has {}",
            base.len(),
            task.len()
        )));
    }
    Ok(TaskVector(
        task.iter().zip(base).map(|(t, b)| t - b).collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Consensus filtering followed by softmax weighting.
    #[default]
    Full,
    /// Uniform `1/K` weights over all tasks.
    NoFilter,
    /// Unweighted sum over the active set.
    NoWeight,
    /// Plain task-vector averaging. Same arithmetic as `NoFilter`.
    Average,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Full => "full",
            FusionMode::NoFilter => "no_filter",
            FusionMode::NoWeight => "no_weight",
            FusionMode::Average => "average",
        }
    }

    pub const ALL: [FusionMode; 4] = [
        FusionMode::Full,
        FusionMode::NoFilter,
        FusionMode::NoWeight,
        FusionMode::Average,
    ];
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "full" => Ok(FusionMode::Full),
            "no_filter" => Ok(FusionMode::NoFilter),
            "no_weight" => Ok(FusionMode::NoWeight),
            "average" => Ok(FusionMode::Average),
            _ => Err(Error::InvalidConfig(format!("invalid mode {s:?}"))),
        }
    }
}

/// How exact zeros (or near-zeros) vote.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroSignPolicy {
    /// `tau >= 0` votes positive.
    #[default]
    Positive,
    /// `|tau| < eps` abstains and is left out of the active set, unless
    /// every task abstains, in which case all tasks are active.
    EpsilonAbstain(f32),
}

/// What to do with a base tensor that some task checkpoint lacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingTensorPolicy {
    /// Copy the base tensor unchanged.
    #[default]
    Passthrough,
    Error,
}

/// Glob-style include/exclude rules on tensor names.
#[derive(Debug, Clone, Default)]
pub struct TensorFilter {
    include: Vec<glob::Pattern>,
    exclude: Vec<glob::Pattern>,
}

impl TensorFilter {
    pub fn new<S: AsRef<str>>(include: &[S], exclude: &[S]) -> Result<Self> {
        let compile = |pats: &[S]| {
            pats.iter()
                .map(|p| {
                    glob::Pattern::new(p.as_ref()).map_err(|e| {
                        Error::InvalidConfig(format!("bad pattern {:?}: {e}", p.as_ref()))
                    })
                })
                .collect::<Result<Vec<_>>>()
        };
        Ok(TensorFilter {
            include: compile(include)?,
            exclude: compile(exclude)?,
        })
    }

    /// True when `name` should be fused rather than copied from the base.
    pub fn accepts(&self, name: &str) -> bool {
        (self.include.is_empty() || self.include.iter().any(|p| p.matches(name)))
            && !self.exclude.iter().any(|p| p.matches(name))
    }
}

#[derive(Debug, Clone)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// Majority threshold; `None` means `K / 2`.
    pub delta: Option<f64>,
    /// Inverse temperature of the magnitude softmax.
    pub beta: f64,
    pub zero_sign_policy: ZeroSignPolicy,
    pub tensor_filter: TensorFilter,
    pub missing_tensor_policy: MissingTensorPolicy,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            mode: FusionMode::Full,
            delta: None,
            beta: 1.0,
            zero_sign_policy: ZeroSignPolicy::Positive,
            tensor_filter: TensorFilter::default(),
            missing_tensor_policy: MissingTensorPolicy::Passthrough,
        }
    }
}

impl FusionConfig {
    pub fn with_mode(mode: FusionMode) -> Self {
        FusionConfig {
            mode,
            ..Default::default()
        }
    }

    /// Threshold actually used for `k` tasks.
    pub fn delta_for(&self, k: usize) -> f64 {
        self.delta.unwrap_or(k as f64 / 2.0)
    }

    pub(crate) fn kernel(&self, k: usize) -> Result<Kernel> {
        if k == 0 {
            return Err(Error::InvalidConfig("at least one task is required".into()));
        }
        if k > MAX_TASKS {
            return Err(Error::InvalidConfig(format!(
                "{k} tasks exceeds the supported maximum of {MAX_TASKS}"
            )));
        }
        let delta = self.delta_for(k);
        if !(0.0..=k as f64).contains(&delta) {
            return Err(Error::InvalidConfig(format!(
                "delta must lie in [0, {k}], got {delta}"
            )));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "beta must be positive and finite, got {}",
                self.beta
            )));
        }
        let abstain_below = match self.zero_sign_policy {
            ZeroSignPolicy::Positive => None,
            ZeroSignPolicy::EpsilonAbstain(eps) if eps >= 0.0 => Some(eps),
            ZeroSignPolicy::EpsilonAbstain(eps) => {
                return Err(Error::InvalidConfig(format!(
                    "epsilon must be non-negative, got {eps}"
                )))
            }
        };
        Ok(Kernel {
            mode: self.mode,
            k,
            delta,
            beta: self.beta,
            abstain_below,
            invert_mask: false,
        })
    }
}

/// A set of task indices (`0..K`, `K <= 64`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TaskSet(u64);

impl TaskSet {
    pub fn all(k: usize) -> Self {
        if k >= 64 {
            TaskSet(u64::MAX)
        } else {
            TaskSet((1u64 << k) - 1)
        }
    }

    pub fn from_bits(bits: u64) -> Self {
        TaskSet(bits)
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn contains(self, k: usize) -> bool {
        k < 64 && self.0 & (1 << k) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Members in ascending order.
    pub fn iter(self) -> impl Iterator<Item = usize> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                return None;
            }
            let k = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            Some(k)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    PositiveMajority,
    NegativeMajority,
    NoConsensus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ElementConsensus {
    /// Number of positive votes.
    pub vote_count: u32,
    pub active_set: TaskSet,
    pub branch: Branch,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Kernel {
    mode: FusionMode,
    k: usize,
    delta: f64,
    beta: f64,
    abstain_below: Option<f32>,
    /// Test hook for the self-check battery: selects the complement of the
    /// active set before weighting.
    pub(crate) invert_mask: bool,
}

/// Branch selection. `negative` counts negative voters; without abstentions
/// `negative > delta` is the same test as `positive < K - delta`.
pub(crate) fn classify(positive: u32, negative: u32, delta: f64) -> Branch {
    if positive as f64 > delta {
        Branch::PositiveMajority
    } else if negative as f64 > delta {
        Branch::NegativeMajority
    } else {
        Branch::NoConsensus
    }
}

/// Per-element result of the fused update.
struct ElementOut {
    update: f64,
    branch: Branch,
    active_len: usize,
    entropy: f64,
}

impl Kernel {
    fn consensus(&self, taus: &[f32]) -> ElementConsensus {
        let mut pos = 0u64;
        let mut neg = 0u64;
        for (k, &t) in taus.iter().enumerate() {
            if self.abstain_below.is_some_and(|eps| t.abs() < eps) {
                continue;
            }
            if t >= 0.0 {
                pos |= 1 << k;
            } else {
                neg |= 1 << k;
            }
        }
        let branch = classify(pos.count_ones(), neg.count_ones(), self.delta);
        let active = match branch {
            Branch::PositiveMajority => pos,
            Branch::NegativeMajority => neg,
            Branch::NoConsensus if pos | neg != 0 => pos | neg,
            Branch::NoConsensus => TaskSet::all(self.k).0,
        };
        ElementConsensus {
            vote_count: pos.count_ones(),
            active_set: TaskSet(active),
            branch,
        }
    }

    fn element(&self, taus: &[f32], buf: &mut [f32; MAX_TASKS]) -> ElementOut {
        let consensus = self.consensus(taus);
        let mut active = consensus.active_set;
        if self.invert_mask {
            let flipped = TaskSet(!active.0 & TaskSet::all(self.k).0);
            if !flipped.is_empty() {
                active = flipped;
            }
        }
        let selected = match self.mode {
            FusionMode::Full | FusionMode::NoWeight => active,
            FusionMode::NoFilter | FusionMode::Average => TaskSet::all(self.k),
        };
        let n = gather_sorted(taus, selected, buf);
        let vals = &buf[..n];

        let (update, entropy) = match self.mode {
            FusionMode::Full => softmax_update(vals, self.beta),
            FusionMode::NoWeight => (vals.iter().map(|&t| t as f64).sum(), (n as f64).ln()),
            FusionMode::NoFilter | FusionMode::Average => {
                let sum: f64 = vals.iter().map(|&t| t as f64).sum();
                (sum / self.k as f64, (self.k as f64).ln())
            }
        };
        ElementOut {
            update,
            branch: consensus.branch,
            active_len: n,
            entropy,
        }
    }
}

/// Copies the selected task values into `buf` sorted by total order.
fn gather_sorted(taus: &[f32], set: TaskSet, buf: &mut [f32; MAX_TASKS]) -> usize {
    let mut n = 0;
    for k in set.iter() {
        let v = taus[k];
        // insertion sort; K is small
        let mut j = n;
        while j > 0 && buf[j - 1].total_cmp(&v).is_gt() {
            buf[j] = buf[j - 1];
            j -= 1;
        }
        buf[j] = v;
        n += 1;
    }
    n
}

/// Returns `(sum_k w_k * tau_k, entropy of w)` with
/// `w_k = exp(beta |tau_k|) / sum_j exp(beta |tau_j|)`, max-shifted.
fn softmax_update(vals: &[f32], beta: f64) -> (f64, f64) {
    let max = vals
        .iter()
        .map(|&t| beta * (t as f64).abs())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut weighted = 0.0;
    let mut shifted_dot = 0.0;
    for &t in vals {
        let s = beta * (t as f64).abs() - max;
        let e = s.exp();
        z += e;
        weighted += e * t as f64;
        shifted_dot += e * s;
    }
    // H = -sum w ln w = ln z - sum w s
    let entropy = (z.ln() - shifted_dot / z).max(0.0);
    (weighted / z, entropy)
}

fn check_aligned<T: Deref<Target = [f32]>>(taus: &[T], len: Option<usize>) -> Result<usize> {
    let first = taus
        .first()
        .ok_or_else(|| Error::InvalidConfig("at least one task vector is required".into()))?;
    let len = len.unwrap_or(first.len());
    for (k, t) in taus.iter().enumerate() {
        if t.len() != len {
            return Err(Error::Misaligned(format!(
                "task vector {k} has {} elements, expected {len}",
                t.len()
            )));
        }
    }
    Ok(len)
}

/// Stage 1: per-element vote count, branch and active set.
pub fn consensus_filter(taus: &[TaskVector], cfg: &FusionConfig) -> Result<Vec<ElementConsensus>> {
    let d = check_aligned(taus, None)?;
    let kernel = cfg.kernel(taus.len())?;
    let mut column = vec![0.0f32; taus.len()];
    Ok((0..d)
        .map(|i| {
            for (c, t) in column.iter_mut().zip(taus) {
                *c = t[i];
            }
            kernel.consensus(&column)
        })
        .collect())
}

/// Stage 2: masked softmax weights, one `K`-vector per element. Weights of
/// tasks outside the active set are exactly zero.
pub fn importance_weights(
    taus: &[TaskVector],
    consensus: &[ElementConsensus],
    cfg: &FusionConfig,
) -> Result<Vec<Vec<f64>>> {
    let d = check_aligned(taus, None)?;
    let kernel = cfg.kernel(taus.len())?;
    if consensus.len() != d {
        return Err(Error::Misaligned(format!(
            "{} consensus entries for {d} elements",
            consensus.len()
        )));
    }
    Ok(consensus
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut w = vec![0.0; taus.len()];
            let mut max = f64::NEG_INFINITY;
            for k in c.active_set.iter() {
                max = max.max(kernel.beta * (taus[k][i] as f64).abs());
            }
            let mut order: Vec<usize> = c.active_set.iter().collect();
            order.sort_by(|&a, &b| taus[a][i].total_cmp(&taus[b][i]));
            let mut z = 0.0;
            for &k in &order {
                let e = (kernel.beta * (taus[k][i] as f64).abs() - max).exp();
                w[k] = e;
                z += e;
            }
            for &k in &order {
                w[k] /= z;
            }
            w
        })
        .collect())
}

/// Fuses one tensor: `base + sum_k W_k ⊙ tau_k` under `cfg.mode`.
pub fn fuse_tensor(base: &[f32], taus: &[TaskVector], cfg: &FusionConfig) -> Result<Vec<f32>> {
    let kernel = cfg.kernel(taus.len())?;
    let slices: Vec<&[f32]> = taus.iter().map(|t| &t[..]).collect();
    Ok(fuse_slices(base, &slices, &kernel)?.0)
}

/// Like [`fuse_tensor`] but also returns consensus statistics.
pub fn fuse_tensor_with_stats(
    base: &[f32],
    taus: &[TaskVector],
    cfg: &FusionConfig,
) -> Result<(Vec<f32>, TensorStats)> {
    let kernel = cfg.kernel(taus.len())?;
    let slices: Vec<&[f32]> = taus.iter().map(|t| &t[..]).collect();
    fuse_slices(base, &slices, &kernel)
}

pub(crate) fn fuse_slices(
    base: &[f32],
    taus: &[&[f32]],
    kernel: &Kernel,
) -> Result<(Vec<f32>, TensorStats)> {
    check_aligned(taus, Some(base.len()))?;
    let k = taus.len();
    let mut out = vec![0.0f32; base.len()];
    let partials: Vec<TensorStats> = out
        .par_chunks_mut(CHUNK_ELEMS)
        .enumerate()
        .map(|(c, out_chunk)| {
            let offset = c * CHUNK_ELEMS;
            let mut stats = TensorStats::new(k);
            let mut column = [0.0f32; MAX_TASKS];
            let mut buf = [0.0f32; MAX_TASKS];
            for (j, o) in out_chunk.iter_mut().enumerate() {
                let i = offset + j;
                for (slot, t) in column.iter_mut().zip(taus) {
                    *slot = t[i];
                }
                let e = kernel.element(&column[..k], &mut buf);
                *o = (base[i] as f64 + e.update) as f32;
                stats.record(e.branch, e.active_len, e.entropy);
            }
            stats
        })
        .collect();
    let mut stats = TensorStats::new(k);
    for p in &partials {
        stats.absorb(p);
    }
    Ok((out, stats))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchCounts {
    pub positive_majority: u64,
    pub negative_majority: u64,
    pub no_consensus: u64,
}

impl BranchCounts {
    pub fn total(&self) -> u64 {
        self.positive_majority + self.negative_majority + self.no_consensus
    }

    fn add(&mut self, other: &BranchCounts) {
        self.positive_majority += other.positive_majority;
        self.negative_majority += other.negative_majority;
        self.no_consensus += other.no_consensus;
    }
}

/// Accumulated statistics for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorStats {
    pub d: u64,
    pub branches: BranchCounts,
    /// `active_hist[n]` = number of elements whose weights span `n` tasks.
    pub active_hist: Vec<u64>,
    pub entropy_sum: f64,
}

impl TensorStats {
    fn new(k: usize) -> Self {
        TensorStats {
            d: 0,
            branches: BranchCounts::default(),
            active_hist: vec![0; k + 1],
            entropy_sum: 0.0,
        }
    }

    fn record(&mut self, branch: Branch, active_len: usize, entropy: f64) {
        self.d += 1;
        match branch {
            Branch::PositiveMajority => self.branches.positive_majority += 1,
            Branch::NegativeMajority => self.branches.negative_majority += 1,
            Branch::NoConsensus => self.branches.no_consensus += 1,
        }
        self.active_hist[active_len] += 1;
        self.entropy_sum += entropy;
    }

    fn absorb(&mut self, other: &TensorStats) {
        self.d += other.d;
        self.branches.add(&other.branches);
        for (a, b) in self.active_hist.iter_mut().zip(&other.active_hist) {
            *a += b;
        }
        self.entropy_sum += other.entropy_sum;
    }

    pub fn mean_entropy(&self) -> f64 {
        if self.d == 0 {
            0.0
        } else {
            self.entropy_sum / self.d as f64
        }
    }

    fn histogram(&self) -> BTreeMap<usize, u64> {
        self.active_hist
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(n, &c)| (n, c))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorReport {
    pub name: String,
    pub d: u64,
    pub branch_counts: BranchCounts,
    /// Active-set size to element count.
    pub active_set_histogram: BTreeMap<usize, u64>,
    pub mean_weight_entropy: f64,
}

/// Merge-wide consensus statistics, serialised as the merge report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusReport {
    pub k: usize,
    pub mode: FusionMode,
    pub delta: f64,
    pub beta: f64,
    /// Number of fused elements.
    pub d: u64,
    pub branch_counts: BranchCounts,
    pub active_set_histogram: BTreeMap<usize, u64>,
    pub mean_weight_entropy: f64,
    pub tensors: Vec<TensorReport>,
    /// Base tensors copied without fusion.
    pub passthrough: Vec<String>,
    /// Task-only tensors with no base counterpart; not written.
    pub ignored: Vec<String>,
}

impl ConsensusReport {
    fn new(k: usize, cfg: &FusionConfig) -> Self {
        ConsensusReport {
            k,
            mode: cfg.mode,
            delta: cfg.delta_for(k),
            beta: cfg.beta,
            d: 0,
            branch_counts: BranchCounts::default(),
            active_set_histogram: BTreeMap::new(),
            mean_weight_entropy: 0.0,
            tensors: Vec::new(),
            passthrough: Vec::new(),
            ignored: Vec::new(),
        }
    }

    /// Folds per-tensor statistics in tensor order.
    fn push_tensor(&mut self, name: &str, stats: &TensorStats, total: &mut TensorStats) {
        total.absorb(stats);
        self.tensors.push(TensorReport {
            name: name.to_string(),
            d: stats.d,
            branch_counts: stats.branches,
            active_set_histogram: stats.histogram(),
            mean_weight_entropy: stats.mean_entropy(),
        });
    }

    fn finalize(&mut self, total: &TensorStats) {
        self.d = total.d;
        self.branch_counts = total.branches;
        self.active_set_histogram = total.histogram();
        self.mean_weight_entropy = total.mean_entropy();
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MergeTimings {
    pub compute: Duration,
    pub write: Duration,
}

#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub report: ConsensusReport,
    pub timings: MergeTimings,
    pub tensors_fused: usize,
    pub tensors_written: usize,
    /// Payload bytes read across base and task checkpoints.
    pub bytes_read: u64,
    pub bytes_written: u64,
}

enum Action {
    Fuse,
    Copy,
}

/// Fuses `tasks` onto `base` tensor by tensor and writes the result to `out`.
///
/// Output tensors keep the base checkpoint's order, dtype and shape. Work
/// runs on the ambient rayon pool; output bytes do not depend on its size.
pub fn merge_checkpoints(
    base: &Checkpoint,
    tasks: &[Checkpoint],
    cfg: &FusionConfig,
    out: impl AsRef<Path>,
) -> Result<MergeOutcome> {
    merge_with_kernel(base, tasks, cfg, out.as_ref(), cfg.kernel(tasks.len())?)
}

pub(crate) fn merge_with_kernel(
    base: &Checkpoint,
    tasks: &[Checkpoint],
    cfg: &FusionConfig,
    out: &Path,
    kernel: Kernel,
) -> Result<MergeOutcome> {
    let k = tasks.len();
    let profile = check_compatibility(base, tasks);
    if profile.common.is_empty() {
        return Err(Error::NoCommonTensors);
    }

    let mut report = ConsensusReport::new(k, cfg);
    let mut plan = Vec::with_capacity(base.len());
    for meta in base.tensors() {
        let name = meta.name.as_str();
        let action = if !cfg.tensor_filter.accepts(name) {
            Action::Copy
        } else if profile.shape_conflicts.iter().any(|n| n == name) {
            return Err(Error::ShapeConflict(name.to_string()));
        } else if profile.dtype_conflicts.iter().any(|n| n == name) {
            return Err(Error::DtypeConflict(name.to_string()));
        } else if profile.partial.iter().any(|n| n == name) {
            match cfg.missing_tensor_policy {
                MissingTensorPolicy::Passthrough => Action::Copy,
                MissingTensorPolicy::Error => return Err(Error::MissingTensor(name.to_string())),
            }
        } else {
            Action::Fuse
        };
        if matches!(action, Action::Copy) {
            report.passthrough.push(name.to_string());
        }
        plan.push((meta, action));
    }
    report.ignored = profile
        .partial
        .iter()
        .filter(|n| !base.contains(n))
        .cloned()
        .collect();

    let layout = base
        .tensors()
        .iter()
        .map(|m| (m.name.clone(), m.dtype, m.shape.clone()))
        .collect();
    let mut writer = CheckpointWriter::create(out, layout)?;
    let mut timings = MergeTimings::default();
    let mut total = TensorStats::new(k);
    let mut bytes_read = 0u64;
    let mut fused = 0usize;

    let mut base_buf = Vec::new();
    let mut task_bufs: Vec<Vec<f32>> = vec![Vec::new(); k];
    for (meta, action) in plan {
        match action {
            Action::Copy => {
                let t = Instant::now();
                let bytes = base.raw_bytes(&meta.name)?;
                bytes_read += bytes.len() as u64;
                writer.write_raw(&meta.name, bytes)?;
                timings.write += t.elapsed();
            }
            Action::Fuse => {
                let t = Instant::now();
                base.read_f32_into(&meta.name, &mut base_buf)?;
                bytes_read += meta.byte_len() as u64 * (k as u64 + 1);
                for (task, buf) in tasks.iter().zip(task_bufs.iter_mut()) {
                    task.read_f32_into(&meta.name, buf)?;
                    buf.par_iter_mut()
                        .zip(base_buf.par_iter())
                        .for_each(|(t, b)| *t -= b);
                }
                let taus: Vec<&[f32]> = task_bufs.iter().map(|b| &b[..]).collect();
                let (fused_vals, stats) = fuse_slices(&base_buf, &taus, &kernel)?;
                report.push_tensor(&meta.name, &stats, &mut total);
                timings.compute += t.elapsed();

                let t = Instant::now();
                writer.write_tensor(&meta.name, &fused_vals)?;
                timings.write += t.elapsed();
                fused += 1;
            }
        }
    }
    let tensors_written = base.len();
    let bytes_written = writer.bytes_written();
    let t = Instant::now();
    writer.finish()?;
    timings.write += t.elapsed();
    report.finalize(&total);

    Ok(MergeOutcome {
        report,
        timings,
        tensors_fused: fused,
        tensors_written,
        bytes_read,
        bytes_written,
    })
}
