//! Post-merge analysis: parameter-space similarity between checkpoints and
//! Z-score summaries of benchmark tables.
//!
//! The histogram KL here is computed over the empirical distribution of
//! parameter values (shared-support histograms), not over model outputs; it is
//! reported as `param_hist_kl` to keep the distinction visible.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ConsensusReport;
use crate::partition::OverlapMatrix;
use crate::sim::{self, SimResult};
use crate::tensor_store::Checkpoint;

pub const HIST_BINS: usize = 256;
pub const HIST_SMOOTHING: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistogramSpec {
    pub bins: usize,
    /// Additive smoothing per bin.
    pub smoothing: f64,
    pub range: &'static str,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        HistogramSpec {
            bins: HIST_BINS,
            smoothing: HIST_SMOOTHING,
            range: "joint min/max of both inputs",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Similarity {
    pub elements: u64,
    pub l2: f64,
    pub cosine: f64,
    pub sign_agreement: f64,
    /// KL(hist(a) || hist(b)).
    pub param_hist_kl_ab: f64,
    /// KL(hist(b) || hist(a)).
    pub param_hist_kl_ba: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorSimilarity {
    pub name: String,
    #[serde(flatten)]
    pub metrics: Similarity,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityResult {
    pub histogram: HistogramSpec,
    pub global: Similarity,
    pub tensors: Vec<TensorSimilarity>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: u64,
    dot: f64,
    norm_a: f64,
    norm_b: f64,
    sq_diff: f64,
    sign_same: u64,
    min: f64,
    max: f64,
}

impl Moments {
    fn new() -> Self {
        Moments {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            ..Default::default()
        }
    }

    fn update(&mut self, a: &[f32], b: &[f32]) {
        for (&x, &y) in a.iter().zip(b) {
            let (x64, y64) = (x as f64, y as f64);
            self.dot += x64 * y64;
            self.norm_a += x64 * x64;
            self.norm_b += y64 * y64;
            self.sq_diff += (x64 - y64).powi(2);
            self.sign_same += u64::from((x >= 0.0) == (y >= 0.0));
            self.min = self.min.min(x64).min(y64);
            self.max = self.max.max(x64).max(y64);
        }
        self.n += a.len() as u64;
    }

    fn merge(&mut self, o: &Moments) {
        self.n += o.n;
        self.dot += o.dot;
        self.norm_a += o.norm_a;
        self.norm_b += o.norm_b;
        self.sq_diff += o.sq_diff;
        self.sign_same += o.sign_same;
        self.min = self.min.min(o.min);
        self.max = self.max.max(o.max);
    }

    fn cosine(&self) -> f64 {
        match (self.norm_a == 0.0, self.norm_b == 0.0) {
            (true, true) => 1.0,
            (true, false) | (false, true) => 0.0,
            _ => (self.dot / (self.norm_a.sqrt() * self.norm_b.sqrt())).clamp(-1.0, 1.0),
        }
    }

    fn finish(&self, kl_ab: f64, kl_ba: f64) -> Similarity {
        Similarity {
            elements: self.n,
            l2: self.sq_diff.sqrt(),
            cosine: self.cosine(),
            sign_agreement: if self.n == 0 {
                1.0
            } else {
                self.sign_same as f64 / self.n as f64
            },
            param_hist_kl_ab: kl_ab,
            param_hist_kl_ba: kl_ba,
        }
    }
}

struct Histogram {
    lo: f64,
    width: f64,
    counts: Vec<u64>,
}

impl Histogram {
    fn new(lo: f64, hi: f64, bins: usize) -> Self {
        let span = hi - lo;
        Histogram {
            lo,
            width: if span > 0.0 { span / bins as f64 } else { 0.0 },
            counts: vec![0; bins],
        }
    }

    fn add(&mut self, values: &[f32]) {
        let last = self.counts.len() - 1;
        for &v in values {
            let bin = if self.width > 0.0 {
                (((v as f64 - self.lo) / self.width) as usize).min(last)
            } else {
                0
            };
            self.counts[bin] += 1;
        }
    }

    fn probabilities(&self, smoothing: f64) -> Vec<f64> {
        let total: u64 = self.counts.iter().sum();
        let denom = total as f64 + smoothing * self.counts.len() as f64;
        self.counts
            .iter()
            .map(|&c| (c as f64 + smoothing) / denom)
            .collect()
    }
}

/// `sum_j p_j ln(p_j / q_j)`, clamped at zero against rounding.
fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pj, _)| pj > 0.0)
        .map(|(&pj, &qj)| pj * (pj / qj).ln())
        .sum::<f64>()
        .max(0.0)
}

fn hist_kl(pairs: &[(&[f32], &[f32])], lo: f64, hi: f64, spec: &HistogramSpec) -> (f64, f64) {
    let mut ha = Histogram::new(lo, hi, spec.bins);
    let mut hb = Histogram::new(lo, hi, spec.bins);
    for (a, b) in pairs {
        ha.add(a);
        hb.add(b);
    }
    let pa = ha.probabilities(spec.smoothing);
    let pb = hb.probabilities(spec.smoothing);
    (kl(&pa, &pb), kl(&pb, &pa))
}

/// Similarity of two equally-shaped value arrays.
pub fn compare_values(a: &[f32], b: &[f32]) -> Result<Similarity> {
    if a.len() != b.len() {
        return Err(Error::Misaligned(format!(
            "{} vs {} elements",
            a.len(),
            b.len()
        )));
    }
    let mut m = Moments::new();
    m.update(a, b);
    let (ab, ba) = hist_kl(&[(a, b)], m.min, m.max, &HistogramSpec::default());
    Ok(m.finish(ab, ba))
}

/// Compares every tensor that both checkpoints hold with the same shape.
/// Global metrics treat those tensors as one concatenated vector.
pub fn compare_checkpoints(a: &Checkpoint, b: &Checkpoint) -> Result<SimilarityResult> {
    let spec = HistogramSpec::default();
    let names: Vec<&str> = a
        .tensors()
        .iter()
        .filter(|m| b.meta(&m.name).is_some_and(|o| o.shape == m.shape))
        .map(|m| m.name.as_str())
        .collect();
    if names.is_empty() {
        return Err(Error::NoCommonTensors);
    }

    let mut global = Moments::new();
    let mut tensors = Vec::with_capacity(names.len());
    let (mut va, mut vb) = (Vec::new(), Vec::new());
    for name in &names {
        a.read_f32_into(name, &mut va)?;
        b.read_f32_into(name, &mut vb)?;
        let mut m = Moments::new();
        m.update(&va, &vb);
        let (ab, ba) = hist_kl(&[(&va, &vb)], m.min, m.max, &spec);
        global.merge(&m);
        tensors.push(TensorSimilarity {
            name: name.to_string(),
            metrics: m.finish(ab, ba),
        });
    }

    // second pass: global histogram over the global range
    let mut ha = Histogram::new(global.min, global.max, spec.bins);
    let mut hb = Histogram::new(global.min, global.max, spec.bins);
    for name in &names {
        a.read_f32_into(name, &mut va)?;
        b.read_f32_into(name, &mut vb)?;
        ha.add(&va);
        hb.add(&vb);
    }
    let (pa, pb) = (ha.probabilities(spec.smoothing), hb.probabilities(spec.smoothing));

    Ok(SimilarityResult {
        histogram: spec,
        global: global.finish(kl(&pa, &pb), kl(&pb, &pa)),
        tensors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    L2,
    Cosine,
    SignAgreement,
    ParamHistKl,
}

impl SimilarityMetric {
    fn pick(self, s: &Similarity) -> f64 {
        match self {
            SimilarityMetric::L2 => s.l2,
            SimilarityMetric::Cosine => s.cosine,
            SimilarityMetric::SignAgreement => s.sign_agreement,
            SimilarityMetric::ParamHistKl => s.param_hist_kl_ab,
        }
    }
}

impl std::str::FromStr for SimilarityMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "l2" => Ok(SimilarityMetric::L2),
            "cosine" => Ok(SimilarityMetric::Cosine),
            "sign_agreement" => Ok(SimilarityMetric::SignAgreement),
            "param_hist_kl" | "kl" => Ok(SimilarityMetric::ParamHistKl),
            _ => Err(Error::InvalidConfig(format!("unknown metric {s:?}"))),
        }
    }
}

/// Pairwise matrix of one global metric; entry `(r, c)` compares `r` to `c`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityMatrix {
    pub metric: SimilarityMetric,
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

pub fn similarity_matrix(
    checkpoints: &[(String, &Checkpoint)],
    metric: SimilarityMetric,
) -> Result<SimilarityMatrix> {
    let n = checkpoints.len();
    let mut values = vec![vec![0.0; n]; n];
    for r in 0..n {
        for c in 0..n {
            let s = compare_checkpoints(checkpoints[r].1, checkpoints[c].1)?;
            values[r][c] = metric.pick(&s.global);
        }
    }
    Ok(SimilarityMatrix {
        metric,
        labels: checkpoints.iter().map(|(l, _)| l.clone()).collect(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub method: String,
    /// Baseline rows define each task's mean and standard deviation.
    pub baseline: bool,
    pub scores: Vec<f64>,
}

/// Tasks × methods score table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub tasks: Vec<String>,
    pub rows: Vec<MethodScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZRow {
    pub method: String,
    pub baseline: bool,
    pub z: Vec<f64>,
    pub avg_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZScoreTable {
    pub tasks: Vec<String>,
    pub baseline_mean: Vec<f64>,
    /// Population standard deviation (divisor N).
    pub baseline_std: Vec<f64>,
    pub rows: Vec<ZRow>,
}

impl MetricTable {
    /// Reads `method,baseline,<task>...` CSV; `baseline` accepts
    /// true/false/1/0/yes/no.
    pub fn from_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let csv_err = |e: csv::Error| Error::DimensionMismatch(format!("CSV: {e}"));
        let headers = rdr.headers().map_err(csv_err)?.clone();
        if headers.len() < 3 || &headers[0] != "method" || &headers[1] != "baseline" {
            return Err(Error::DimensionMismatch(
                "expected header `method,baseline,<task>...`".into(),
            ));
        }
        let tasks: Vec<String> = headers.iter().skip(2).map(String::from).collect();
        let mut rows = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(csv_err)?;
            let method = record[0].to_string();
            let baseline = match record[1].to_ascii_lowercase().as_str() {
                "true" | "1" | "yes" => true,
                "false" | "0" | "no" | "" => false,
                other => {
                    return Err(Error::BadRecord {
                        id: method,
                        reason: format!("baseline flag {other:?} is not a boolean"),
                    })
                }
            };
            let scores = record
                .iter()
                .skip(2)
                .map(|s| {
                    s.parse::<f64>().map_err(|_| Error::BadRecord {
                        id: method.clone(),
                        reason: format!("score {s:?} is not a number"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(MethodScores {
                method,
                baseline,
                scores,
            });
        }
        Ok(MetricTable { tasks, rows })
    }
}

/// Z-score of every cell against the baseline rows, plus each method's AvgZ.
pub fn zscores(table: &MetricTable) -> Result<ZScoreTable> {
    let t = table.tasks.len();
    if t == 0 {
        return Err(Error::DimensionMismatch("table has no tasks".into()));
    }
    for row in &table.rows {
        if row.scores.len() != t {
            return Err(Error::DimensionMismatch(format!(
                "method {:?} has {} scores for {t} tasks",
                row.method,
                row.scores.len()
            )));
        }
    }
    let baselines: Vec<&MethodScores> = table.rows.iter().filter(|r| r.baseline).collect();
    if baselines.len() < 2 {
        return Err(Error::DimensionMismatch(format!(
            "need at least 2 baseline rows, found {}",
            baselines.len()
        )));
    }
    let n = baselines.len() as f64;
    let mut mean = Vec::with_capacity(t);
    let mut std = Vec::with_capacity(t);
    for (j, task) in table.tasks.iter().enumerate() {
        let mu = baselines.iter().map(|r| r.scores[j]).sum::<f64>() / n;
        let var = baselines
            .iter()
            .map(|r| (r.scores[j] - mu).powi(2))
            .sum::<f64>()
            / n;
        let sigma = var.sqrt();
        // relative guard: scores that differ only by rounding noise count as constant
        let scale = baselines
            .iter()
            .map(|r| r.scores[j].abs())
            .fold(0.0f64, f64::max);
        if sigma.is_nan() || sigma <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::ZeroVariance(task.clone()));
        }
        mean.push(mu);
        std.push(sigma);
    }
    let rows = table
        .rows
        .iter()
        .map(|r| {
            let z: Vec<f64> = r
                .scores
                .iter()
                .zip(mean.iter().zip(&std))
                .map(|(&m, (&mu, &sigma))| (m - mu) / sigma)
                .collect();
            let avg_z = z.iter().sum::<f64>() / t as f64;
            ZRow {
                method: r.method.clone(),
                baseline: r.baseline,
                z,
                avg_z,
            }
        })
        .collect();
    Ok(ZScoreTable {
        tasks: table.tasks.clone(),
        baseline_mean: mean,
        baseline_std: std,
        rows,
    })
}

/// Anything that can be written as a JSON document plus a CSV table.
pub trait Report: Serialize {
    fn to_csv(&self) -> Result<String>;

    fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::io("<csv buffer>", std::io::Error::other(e));
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(&row).map_err(io)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io("<csv buffer>", std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn similarity_row(name: &str, s: &Similarity) -> Vec<String> {
    vec![
        name.to_string(),
        s.elements.to_string(),
        s.l2.to_string(),
        s.cosine.to_string(),
        s.sign_agreement.to_string(),
        s.param_hist_kl_ab.to_string(),
        s.param_hist_kl_ba.to_string(),
    ]
}

impl Report for SimilarityResult {
    /// One row per tensor, then a `__global__` row.
    fn to_csv(&self) -> Result<String> {
        let header = [
            "tensor",
            "elements",
            "l2",
            "cosine",
            "sign_agreement",
            "param_hist_kl_ab",
            "param_hist_kl_ba",
        ];
        let rows = self
            .tensors
            .iter()
            .map(|t| similarity_row(&t.name, &t.metrics))
            .chain(std::iter::once(similarity_row("__global__", &self.global)));
        csv_string(&header, rows)
    }
}

impl Report for SimilarityMatrix {
    /// Long format, one `(row, col, value)` per cell.
    fn to_csv(&self) -> Result<String> {
        let rows = self.values.iter().enumerate().flat_map(|(r, row)| {
            row.iter().enumerate().map(move |(c, v)| {
                vec![
                    self.labels[r].clone(),
                    self.labels[c].clone(),
                    v.to_string(),
                ]
            })
        });
        csv_string(&["row", "col", "value"], rows)
    }
}

impl Report for ZScoreTable {
    fn to_csv(&self) -> Result<String> {
        let mut header = vec!["method".to_string()];
        header.extend(self.tasks.iter().map(|t| format!("Z_{t}")));
        header.push("AvgZ".to_string());
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows = self.rows.iter().map(|r| {
            let mut row = vec![r.method.clone()];
            row.extend(r.z.iter().map(f64::to_string));
            row.push(r.avg_z.to_string());
            row
        });
        csv_string(&header_refs, rows)
    }
}

impl Report for ConsensusReport {
    /// One row per fused tensor, then a `__total__` row.
    fn to_csv(&self) -> Result<String> {
        let header = [
            "tensor",
            "d",
            "positive_majority",
            "negative_majority",
            "no_consensus",
            "mean_weight_entropy",
        ];
        let row = |name: &str, d: u64, b: &crate::fusion::BranchCounts, h: f64| {
            vec![
                name.to_string(),
                d.to_string(),
                b.positive_majority.to_string(),
                b.negative_majority.to_string(),
                b.no_consensus.to_string(),
                h.to_string(),
            ]
        };
        let rows = self
            .tensors
            .iter()
            .map(|t| row(&t.name, t.d, &t.branch_counts, t.mean_weight_entropy))
            .chain(std::iter::once(row(
                "__total__",
                self.d,
                &self.branch_counts,
                self.mean_weight_entropy,
            )));
        csv_string(&header, rows)
    }
}

impl Report for OverlapMatrix {
    fn to_csv(&self) -> Result<String> {
        Ok(OverlapMatrix::to_csv(self))
    }
}

impl Report for Vec<SimResult> {
    fn to_csv(&self) -> Result<String> {
        Ok(sim::to_csv(self))
    }
}

/// Writes `<out>.json` and `<out>.csv` (replacing any extension on `out`).
pub fn write_report<R: Report + ?Sized>(report: &R, out: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let out = out.as_ref();
    let json_path = out.with_extension("json");
    let csv_path = out.with_extension("csv");
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&json_path, report.to_json()?).map_err(|e| Error::io(&json_path, e))?;
    fs::write(&csv_path, report.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
    Ok((json_path, csv_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::{to_bytes, NamedTensor};

    fn ckpt(tensors: &[(&str, Vec<f32>)]) -> Checkpoint {
        let named: Vec<_> = tensors
            .iter()
            .map(|(n, v)| NamedTensor::f32(*n, vec![v.len()], v.clone()))
            .collect();
        Checkpoint::from_bytes(to_bytes(&named).unwrap()).unwrap()
    }

    #[test]
    fn identical_checkpoints() {
        let a = ckpt(&[("w", vec![0.5, -1.0, 2.0]), ("b", vec![0.0, 3.0])]);
        let b = ckpt(&[("w", vec![0.5, -1.0, 2.0]), ("b", vec![0.0, 3.0])]);
        let s = compare_checkpoints(&a, &b).unwrap();
        assert_eq!(s.global.l2, 0.0);
        assert!((s.global.cosine - 1.0).abs() < 1e-15);
        assert_eq!(s.global.sign_agreement, 1.0);
        assert_eq!(s.global.param_hist_kl_ab, 0.0);
        assert_eq!(s.global.param_hist_kl_ba, 0.0);
        assert_eq!(s.tensors.len(), 2);
        assert_eq!(s.histogram.bins, 256);
    }

    #[test]
    fn negated_checkpoint_has_cosine_minus_one() {
        let a = ckpt(&[("w", vec![0.5, -1.0, 2.0])]);
        let b = ckpt(&[("w", vec![-0.5, 1.0, -2.0])]);
        let s = compare_checkpoints(&a, &b).unwrap();
        assert!((s.global.cosine + 1.0).abs() < 1e-15);
        assert_eq!(s.global.sign_agreement, 0.0);
    }

    #[test]
    fn orthogonal_unit_vectors() {
        let s = compare_values(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((s.l2 - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.cosine, 0.0);
    }

    #[test]
    fn kl_is_nonnegative_and_asymmetric() {
        let a: Vec<f32> = (0..1000).map(|i| (i as f32 / 1000.0).powi(2)).collect();
        let b: Vec<f32> = (0..1000).map(|i| i as f32 / 1000.0).collect();
        let s = compare_values(&a, &b).unwrap();
        assert!(s.param_hist_kl_ab > 0.0 && s.param_hist_kl_ba > 0.0);
        assert!((s.param_hist_kl_ab - s.param_hist_kl_ba).abs() > 1e-6);
    }

    #[test]
    fn no_common_tensors() {
        let a = ckpt(&[("w", vec![1.0])]);
        let b = ckpt(&[("v", vec![1.0])]);
        assert!(matches!(
            compare_checkpoints(&a, &b),
            Err(Error::NoCommonTensors)
        ));
    }

    fn table(rows: &[(&str, bool, &[f64])]) -> MetricTable {
        MetricTable {
            tasks: (0..rows[0].2.len()).map(|i| format!("t{i}")).collect(),
            rows: rows
                .iter()
                .map(|(m, b, s)| MethodScores {
                    method: m.to_string(),
                    baseline: *b,
                    scores: s.to_vec(),
                })
                .collect(),
        }
    }

    #[test]
    fn zscore_example() {
        let t = table(&[
            ("b1", true, &[1.0]),
            ("b2", true, &[2.0]),
            ("b3", true, &[3.0]),
            ("ours", false, &[3.0]),
        ]);
        let z = zscores(&t).unwrap();
        // population sigma = sqrt(2/3)
        assert!((z.baseline_std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((z.rows[3].z[0] - 1.224_744_871_391_589).abs() < 1e-12);
    }

    #[test]
    fn mean_score_gives_zero_avgz() {
        let t = table(&[
            ("b1", true, &[1.0, 10.0]),
            ("b2", true, &[3.0, 20.0]),
            ("ours", false, &[2.0, 15.0]),
        ]);
        assert_eq!(zscores(&t).unwrap().rows[2].avg_z, 0.0);
    }

    #[test]
    fn constant_baselines_rejected() {
        let t = table(&[("b1", true, &[2.0]), ("b2", true, &[2.0]), ("x", false, &[1.0])]);
        let err = zscores(&t).unwrap_err();
        assert!(err.to_string().contains("zero variance"));
        assert!(err.to_string().contains("t0"));
        let t = table(&[("b1", true, &[2.0]), ("x", false, &[1.0])]);
        assert!(zscores(&t).is_err());
    }

    #[test]
    fn metric_table_csv() {
        let input = "method,baseline,aitz,odyssey\nzero-shot,true,1,2\nseq,yes,3,5\nours,false,4,6\n";
        let t = MetricTable::from_csv(input.as_bytes()).unwrap();
        assert_eq!(t.tasks, vec!["aitz", "odyssey"]);
        assert_eq!(t.rows.iter().filter(|r| r.baseline).count(), 2);
        let bad = "method,baseline,a\nx,maybe,1\n";
        assert!(MetricTable::from_csv(bad.as_bytes()).is_err());
    }

    #[test]
    fn report_formats() {
        let a = ckpt(&[("w", vec![1.0, 0.0])]);
        let b = ckpt(&[("w", vec![0.0, 1.0])]);
        let s = compare_checkpoints(&a, &b).unwrap();
        let json: serde_json::Value = serde_json::from_str(&s.to_json().unwrap()).unwrap();
        for key in ["l2", "cosine", "sign_agreement", "param_hist_kl_ab", "param_hist_kl_ba"] {
            assert!(json["global"].get(key).is_some(), "{key}");
        }

        let m = similarity_matrix(&[("a".into(), &a), ("b".into(), &b)], SimilarityMetric::Cosine)
            .unwrap();
        assert_eq!(m.to_csv().unwrap().lines().count(), 1 + 4);

        let t = table(&[
            ("b1", true, &[1.0, 2.0, 3.0]),
            ("b2", true, &[2.0, 3.0, 5.0]),
        ]);
        let z = zscores(&t).unwrap();
        let csv = z.to_csv().unwrap();
        let header = csv.lines().next().unwrap();
        assert_eq!(header, "method,Z_t0,Z_t1,Z_t2,AvgZ");
    }

    #[test]
    fn write_report_creates_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = ckpt(&[("w", vec![1.0, 0.0])]);
        let s = compare_checkpoints(&a, &a).unwrap();
        let (j, c) = write_report(&s, dir.path().join("sub/sim.json")).unwrap();
        assert!(j.exists() && c.exists());
    }
}
