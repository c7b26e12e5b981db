//! Tool-aware dataset partitioning.
//!
//! Phase 1 shuffles the records and greedily assigns each one to the subset
//! minimising `(number of its tools the subset has not seen, subset size)`
//! compared lexicographically, lowest subset index on ties. A summed cost is
//! available through [`AssignObjective::Sum`]. Phase 2 sorts each subset by
//! tool count (descending, stable), takes the first `floor(r * N)` records as
//! training data and orders the remainder by how many tools are new relative
//! to the training tool union (ascending, stable).

use std::collections::{BTreeSet, HashSet};
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionRecord {
    pub id: String,
    pub tools: BTreeSet<String>,
    /// Original input line, written back unchanged.
    pub payload: String,
}

impl PartitionRecord {
    pub fn new<I, S>(id: impl Into<String>, tools: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let id = id.into();
        PartitionRecord {
            payload: serde_json::json!({ "id": id }).to_string(),
            id,
            tools: tools.into_iter().map(Into::into).collect(),
        }
    }
}

/// How the (unseen tools, subset size) pair is minimised during assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignObjective {
    /// `unseen` first, `size` to break ties.
    #[default]
    Lexicographic,
    /// `unseen + size`.
    Sum,
}

impl std::str::FromStr for AssignObjective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(AssignObjective::Sum),
            "lexicographic" | "lex" => Ok(AssignObjective::Lexicographic),
            _ => Err(Error::InvalidConfig(format!("unknown objective {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub subsets: usize,
    pub ratio: f64,
    pub seed: u64,
    /// Skip the shuffle and assign in input order.
    pub deterministic_order: bool,
    pub objective: AssignObjective,
}

impl PartitionConfig {
    pub fn new(subsets: usize, ratio: f64, seed: u64) -> Self {
        PartitionConfig {
            subsets,
            ratio,
            seed,
            deterministic_order: false,
            objective: AssignObjective::Lexicographic,
        }
    }
}

impl PartitionConfig {
    fn validate(&self) -> Result<()> {
        if self.subsets == 0 {
            return Err(Error::InvalidConfig("subsets must be at least 1".into()));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "ratio must lie in (0, 1], got {}",
                self.ratio
            )));
        }
        Ok(())
    }
}

/// Phase 1. Returns `subsets` lists; records keep their assignment order.
pub fn assign_subsets(
    mut records: Vec<PartitionRecord>,
    cfg: &PartitionConfig,
) -> Result<Vec<Vec<PartitionRecord>>> {
    cfg.validate()?;
    let mut seen = HashSet::with_capacity(records.len());
    for r in &records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::BadRecord {
                id: r.id.clone(),
                reason: "duplicate record id".into(),
            });
        }
    }
    if !cfg.deterministic_order {
        records.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    }

    let mut subsets: Vec<Vec<PartitionRecord>> = vec![Vec::new(); cfg.subsets];
    let mut tool_sets: Vec<HashSet<String>> = vec![HashSet::new(); cfg.subsets];
    for record in records {
        let best = (0..cfg.subsets)
            .min_by_key(|&m| {
                let unseen = record
                    .tools
                    .iter()
                    .filter(|t| !tool_sets[m].contains(*t))
                    .count();
                let size = subsets[m].len();
                match cfg.objective {
                    AssignObjective::Sum => (unseen + size, 0, m),
                    AssignObjective::Lexicographic => (unseen, size, m),
                }
            })
            .expect("at least one subset");
        tool_sets[best].extend(record.tools.iter().cloned());
        subsets[best].push(record);
    }
    Ok(subsets)
}

/// Phase 2 for one subset. `index` only labels errors.
pub fn split_train_test(
    mut subset: Vec<PartitionRecord>,
    cfg: &PartitionConfig,
    index: usize,
) -> Result<(Vec<PartitionRecord>, Vec<PartitionRecord>)> {
    cfg.validate()?;
    let n = subset.len();
    // tolerance guards products like 0.7 * 10 landing just under an integer
    let n_train = (cfg.ratio * n as f64 + 1e-9).floor() as usize;
    if n_train == 0 {
        return Err(Error::EmptyTrainingSplit {
            subset: index,
            len: n,
            ratio: cfg.ratio,
        });
    }
    // stable: equal tool counts keep their original order
    subset.sort_by_key(|r| std::cmp::Reverse(r.tools.len()));
    let mut test = subset.split_off(n_train.min(n));
    let train = subset;
    let train_tools: HashSet<&str> = train
        .iter()
        .flat_map(|r| r.tools.iter().map(String::as_str))
        .collect();
    test.sort_by_cached_key(|r| {
        r.tools
            .iter()
            .filter(|t| !train_tools.contains(t.as_str()))
            .count()
    });
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapCell {
    pub count: usize,
    /// `100 * count / |train tools ∪ test tools|`; 0 when both are empty.
    pub percentage: f64,
}

/// Shared-tool counts between each train subset (row) and test subset (column).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapMatrix {
    pub basis: String,
    pub cells: Vec<Vec<OverlapCell>>,
}

pub const OVERLAP_BASIS: &str = "union: percentage = 100 * |train_m ∩ test_n| / |train_m ∪ test_n|";

impl OverlapMatrix {
    pub fn size(&self) -> usize {
        self.cells.len()
    }

    pub fn get(&self, row: usize, col: usize) -> &OverlapCell {
        &self.cells[row][col]
    }

    /// Whether every diagonal percentage strictly exceeds the off-diagonal
    /// entries of its row.
    pub fn diagonally_dominant(&self) -> bool {
        (0..self.size()).all(|m| {
            let diag = self.cells[m][m].percentage;
            (0..self.size()).all(|n| n == m || self.cells[m][n].percentage < diag)
        })
    }

    /// Long-format CSV: `train_subset,test_subset,count,percentage`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("train_subset,test_subset,count,percentage\n");
        for (m, row) in self.cells.iter().enumerate() {
            for (n, cell) in row.iter().enumerate() {
                out.push_str(&format!("{m},{n},{},{}\n", cell.count, cell.percentage));
            }
        }
        out
    }
}

fn tool_union(records: &[PartitionRecord]) -> BTreeSet<&str> {
    records
        .iter()
        .flat_map(|r| r.tools.iter().map(String::as_str))
        .collect()
}

pub fn overlap_matrix(
    trains: &[Vec<PartitionRecord>],
    tests: &[Vec<PartitionRecord>],
) -> Result<OverlapMatrix> {
    if trains.len() != tests.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} train subsets but {} test subsets",
            trains.len(),
            tests.len()
        )));
    }
    let train_tools: Vec<_> = trains.iter().map(|r| tool_union(r)).collect();
    let test_tools: Vec<_> = tests.iter().map(|r| tool_union(r)).collect();
    let cells = train_tools
        .iter()
        .map(|a| {
            test_tools
                .iter()
                .map(|b| {
                    let count = a.intersection(b).count();
                    let union = a.union(b).count();
                    let percentage = if union == 0 {
                        0.0
                    } else {
                        100.0 * count as f64 / union as f64
                    };
                    OverlapCell { count, percentage }
                })
                .collect()
        })
        .collect();
    Ok(OverlapMatrix {
        basis: OVERLAP_BASIS.to_string(),
        cells,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<PartitionRecord>,
    pub test: Vec<PartitionRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub splits: Vec<Split>,
    pub overlap: OverlapMatrix,
}

/// Both phases plus the overlap matrix.
pub fn partition(records: Vec<PartitionRecord>, cfg: &PartitionConfig) -> Result<Partition> {
    let subsets = assign_subsets(records, cfg)?;
    let splits = subsets
        .into_iter()
        .enumerate()
        .map(|(m, subset)| split_train_test(subset, cfg, m).map(|(train, test)| Split { train, test }))
        .collect::<Result<Vec<_>>>()?;
    let trains: Vec<_> = splits.iter().map(|s| s.train.clone()).collect();
    let tests: Vec<_> = splits.iter().map(|s| s.test.clone()).collect();
    let overlap = overlap_matrix(&trains, &tests)?;
    Ok(Partition { splits, overlap })
}

fn lookup<'a>(value: &'a Value, path: &str) -> Option<&'a Value> {
    if path.starts_with('/') {
        return value.pointer(path);
    }
    let path = path.strip_prefix("$.").unwrap_or(path);
    path.split('.')
        .filter(|s| !s.is_empty())
        .try_fold(value, |v, key| match v {
            Value::Object(map) => map.get(key),
            Value::Array(items) => key.parse::<usize>().ok().and_then(|i| items.get(i)),
            _ => None,
        })
}

/// Reads JSON-lines records. `tools_field` is a dotted path (`meta.tools`,
/// optionally `$.`-prefixed) or a JSON pointer (`/meta/tools`) to a list of
/// tool names; list entries may be strings or objects with a `"name"` string.
/// Records without an `id_field` are labelled `line:<n>` (1-based).
pub fn read_jsonl<R: BufRead>(
    reader: R,
    tools_field: &str,
    id_field: &str,
) -> Result<Vec<PartitionRecord>> {
    let mut records = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("<input line {}>", n + 1), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fallback_id = format!("line:{}", n + 1);
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::BadRecord {
            id: fallback_id.clone(),
            reason: format!("invalid JSON: {e}"),
        })?;
        let id = match lookup(&value, id_field) {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(num)) => num.to_string(),
            _ => fallback_id,
        };
        let tools = match lookup(&value, tools_field) {
            Some(Value::Array(items)) => items
                .iter()
                .map(|item| match item {
                    Value::String(s) => Ok(s.clone()),
                    Value::Object(obj) => match obj.get("name") {
                        Some(Value::String(s)) => Ok(s.clone()),
                        _ => Err(()),
                    },
                    _ => Err(()),
                })
                .collect::<std::result::Result<BTreeSet<_>, ()>>()
                .map_err(|_| Error::BadRecord {
                    id: id.clone(),
                    reason: format!("tools field {tools_field:?} contains a non-name entry"),
                })?,
            Some(_) => {
                return Err(Error::BadRecord {
                    id,
                    reason: format!("tools field {tools_field:?} is not a list"),
                })
            }
            None => {
                return Err(Error::BadRecord {
                    id,
                    reason: format!("missing tools field {tools_field:?}"),
                })
            }
        };
        records.push(PartitionRecord {
            id,
            tools,
            payload: line,
        });
    }
    Ok(records)
}

/// Serialises records back to JSON lines using their original payloads.
pub fn to_jsonl(records: &[PartitionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.payload);
        out.push('\n');
    }
    out
}
