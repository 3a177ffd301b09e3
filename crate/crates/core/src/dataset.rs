//! Tabular data: CSV ingestion, kind inference, splitting and standardization.
//!
//! A [`TabularDataset`] keeps, next to the numeric columns, the [`ColumnEncoding`]
//! that produced them from the raw file. The encoding travels with saved
//! programs so new files can be encoded exactly the way the training file was.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_ROWS: usize = 20;
pub const DEFAULT_FRACTIONS: (f64, f64, f64) = (0.6, 0.2, 0.2);

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("target not found: column {0:?} is not in the header")]
    TargetNotFound(String),
    #[error("target column {0:?} is constant")]
    ConstantTarget(String),
    #[error("missing target value at data row {0}")]
    MissingTarget(usize),
    #[error("non-numeric cell {value:?} in continuous column {column:?} at data row {row}")]
    NonNumeric {
        column: String,
        row: usize,
        value: String,
    },
    #[error("need at least {MIN_ROWS} rows, found {0}")]
    TooFewRows(usize),
    #[error("row {row} has {found} cells, header has {expected}")]
    Ragged {
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("invalid split fractions {0:?}: must be positive and sum to 1")]
    BadFractions((f64, f64, f64)),
    #[error("class {class} has {count} rows, fewer than the 3 splits")]
    ClassTooSmall { class: usize, count: usize },
    #[error("train split is empty")]
    EmptyTrain,
    #[error("schema mismatch: {0}")]
    Schema(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureKind {
    Continuous,
    Discrete,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Continuous => "continuous",
            FeatureKind::Discrete => "discrete",
        }
    }
}

impl FromStr for FeatureKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "continuous" | "c" => Ok(FeatureKind::Continuous),
            "discrete" | "d" => Ok(FeatureKind::Discrete),
            other => Err(format!("unknown feature kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    Classification,
    Regression,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Regression => "regression",
        }
    }
}

impl FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "classification" | "c" => Ok(TaskKind::Classification),
            "regression" | "r" => Ok(TaskKind::Regression),
            other => Err(format!("unknown task kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Column summary fed to the policy encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub distinct_count: usize,
    pub fraction_missing: f64,
}

impl FeatureStats {
    /// Population statistics over the finite entries of `values`; NaN marks a
    /// missing cell. `fraction_missing` is passed through when the column has
    /// already been imputed.
    pub fn compute(values: &[f64], fraction_missing: Option<f64>) -> Self {
        let present: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        let missing = fraction_missing.unwrap_or_else(|| {
            if values.is_empty() {
                0.0
            } else {
                (values.len() - present.len()) as f64 / values.len() as f64
            }
        });
        if present.is_empty() {
            return FeatureStats {
                mean: 0.0,
                std: 0.0,
                min: 0.0,
                max: 0.0,
                distinct_count: 1,
                fraction_missing: missing,
            };
        }
        let n = present.len() as f64;
        let min = present.iter().copied().fold(f64::INFINITY, f64::min);
        let max = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = (present.iter().sum::<f64>() / n).clamp(min, max);
        let var = present.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let distinct: BTreeSet<u64> = present.iter().map(|v| canonical_bits(*v)).collect();
        FeatureStats {
            mean,
            std: var.sqrt(),
            min,
            max,
            distinct_count: distinct.len().max(1),
            fraction_missing: missing,
        }
    }
}

fn canonical_bits(v: f64) -> u64 {
    if v == 0.0 {
        0
    } else {
        v.to_bits()
    }
}

/// How raw CSV cells of one column map to numeric values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnEncoding {
    pub name: String,
    pub kind: FeatureKind,
    /// Sorted raw category labels; code `i` is `categories[i]`, and code
    /// `categories.len()` is reserved for missing cells.
    pub categories: Vec<String>,
    /// Train-split mean/std applied by [`standardize`]; `None` before.
    pub standardization: Option<(f64, f64)>,
}

impl ColumnEncoding {
    /// Encodes one raw cell. Continuous missing cells become NaN until
    /// standardization imputes them.
    pub fn encode_cell(&self, cell: &str, row: usize) -> Result<f64> {
        let cell = cell.trim();
        match self.kind {
            FeatureKind::Continuous => {
                let raw = if cell.is_empty() {
                    f64::NAN
                } else {
                    parse_number(cell).ok_or_else(|| DatasetError::NonNumeric {
                        column: self.name.clone(),
                        row,
                        value: cell.to_string(),
                    })?
                };
                Ok(match self.standardization {
                    Some((mean, std)) => standardize_value(if raw.is_nan() { mean } else { raw }, mean, std),
                    None => raw,
                })
            }
            FeatureKind::Discrete => {
                if cell.is_empty() {
                    return Ok(self.categories.len() as f64);
                }
                let code = match self.categories.binary_search_by(|c| compare_labels(c, cell)) {
                    Ok(i) => i,
                    // unseen labels share the missing bucket
                    Err(_) => self.categories.len(),
                };
                Ok(code as f64)
            }
        }
    }
}

fn standardize_value(v: f64, mean: f64, std: f64) -> f64 {
    if std > 0.0 {
        (v - mean) / std
    } else {
        0.0
    }
}

fn parse_number(cell: &str) -> Option<f64> {
    cell.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Orders labels numerically when both parse, lexicographically otherwise.
fn compare_labels(a: &str, b: &str) -> std::cmp::Ordering {
    match (parse_number(a), parse_number(b)) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.cmp(b),
    }
}

/// Distinct non-empty labels in code order.
pub fn sorted_labels<'a>(cells: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut labels: Vec<String> = cells
        .map(str::trim)
        .filter(|c| !c.is_empty())
        .map(str::to_string)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    labels.sort_by(|a, b| compare_labels(a, b));
    labels.dedup_by(|a, b| compare_labels(a, b).is_eq());
    labels
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureColumn {
    pub name: String,
    pub kind: FeatureKind,
    pub values: Vec<f64>,
    pub stats: FeatureStats,
}

impl FeatureColumn {
    pub fn new(name: impl Into<String>, kind: FeatureKind, values: Vec<f64>) -> Self {
        let stats = FeatureStats::compute(&values, None);
        FeatureColumn {
            name: name.into(),
            kind,
            values,
            stats,
        }
    }

    /// Number of categories of a discrete column (max code + 1).
    pub fn cardinality(&self) -> usize {
        self.values.iter().fold(0.0f64, |m, v| m.max(*v)) as usize + 1
    }
}

/// Target encoding: class labels for classification, identity for regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetEncoding {
    pub name: String,
    pub task: TaskKind,
    pub classes: Vec<String>,
}

impl TargetEncoding {
    pub fn encode_cell(&self, cell: &str, row: usize) -> Result<f64> {
        let cell = cell.trim();
        if cell.is_empty() {
            return Err(DatasetError::MissingTarget(row));
        }
        match self.task {
            TaskKind::Regression => parse_number(cell).ok_or_else(|| DatasetError::NonNumeric {
                column: self.name.clone(),
                row,
                value: cell.to_string(),
            }),
            TaskKind::Classification => self
                .classes
                .binary_search_by(|c| compare_labels(c, cell))
                .map(|i| i as f64)
                .map_err(|_| DatasetError::Schema(format!("unknown class label {cell:?} at row {row}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub columns: Vec<FeatureColumn>,
    pub labels: Vec<f64>,
    pub task: TaskKind,
    pub split: Vec<Split>,
    pub encodings: Vec<ColumnEncoding>,
    pub target: TargetEncoding,
}

impl TabularDataset {
    /// Builds a dataset from already-numeric columns (all rows in train).
    /// Discrete columns must hold contiguous codes.
    pub fn from_columns(columns: Vec<FeatureColumn>, labels: Vec<f64>, task: TaskKind) -> Self {
        let encodings = columns
            .iter()
            .map(|c| ColumnEncoding {
                name: c.name.clone(),
                kind: c.kind,
                categories: match c.kind {
                    FeatureKind::Discrete => (0..c.cardinality()).map(|i| i.to_string()).collect(),
                    FeatureKind::Continuous => Vec::new(),
                },
                standardization: None,
            })
            .collect();
        let classes = match task {
            TaskKind::Classification => {
                let k = labels.iter().fold(0.0f64, |m, v| m.max(*v)) as usize + 1;
                (0..k).map(|i| i.to_string()).collect()
            }
            TaskKind::Regression => Vec::new(),
        };
        let rows = labels.len();
        TabularDataset {
            columns,
            labels,
            task,
            split: vec![Split::Train; rows],
            encodings,
            target: TargetEncoding {
                name: "y".into(),
                task,
                classes,
            },
        }
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn kinds(&self) -> Vec<FeatureKind> {
        self.columns.iter().map(|c| c.kind).collect()
    }

    pub fn num_classes(&self) -> usize {
        match self.task {
            TaskKind::Classification => self.target.classes.len().max(
                self.labels.iter().fold(0.0f64, |m, v| m.max(*v)) as usize + 1,
            ),
            TaskKind::Regression => 1,
        }
    }

    pub fn rows_in(&self, split: Split) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let count = |s| self.split.iter().filter(|x| **x == s).count();
        (count(Split::Train), count(Split::Val), count(Split::Test))
    }

    /// Row-major feature matrix restricted to `rows`.
    pub fn matrix(&self, rows: &[usize]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|&r| self.columns.iter().map(|c| c.values[r]).collect())
            .collect()
    }

    pub fn labels_of(&self, rows: &[usize]) -> Vec<f64> {
        rows.iter().map(|&r| self.labels[r]).collect()
    }

    /// Keeps only the given rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> TabularDataset {
        let columns = self
            .columns
            .iter()
            .map(|c| {
                let values: Vec<f64> = rows.iter().map(|&r| c.values[r]).collect();
                let stats = FeatureStats::compute(&values, Some(c.stats.fraction_missing));
                FeatureColumn {
                    name: c.name.clone(),
                    kind: c.kind,
                    values,
                    stats,
                }
            })
            .collect();
        TabularDataset {
            columns,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            task: self.task,
            split: rows.iter().map(|&r| self.split[r]).collect(),
            encodings: self.encodings.clone(),
            target: self.target.clone(),
        }
    }

    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let n = self.labels.len();
        if self.split.len() != n {
            return Err(format!("split has {} entries for {n} rows", self.split.len()));
        }
        for c in &self.columns {
            if c.values.len() != n {
                return Err(format!("column {} has {} rows, labels {n}", c.name, c.values.len()));
            }
        }
        if self.task == TaskKind::Classification {
            let k = self.num_classes();
            if k < 2 {
                return Err("classification needs at least two classes".into());
            }
            if self.labels.iter().any(|y| y.fract() != 0.0 || *y < 0.0 || *y as usize >= k) {
                return Err("labels must be codes 0..K-1".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub kind_overrides: HashMap<String, FeatureKind>,
}

/// Discrete iff integer-valued with at most max(20, 5% of rows) distinct values.
pub fn infer_kind(cells: &[&str]) -> FeatureKind {
    let present: Vec<&str> = cells.iter().map(|c| c.trim()).filter(|c| !c.is_empty()).collect();
    let mut numbers = Vec::with_capacity(present.len());
    for c in &present {
        match parse_number(c) {
            Some(v) => numbers.push(v),
            None => return FeatureKind::Discrete,
        }
    }
    if numbers.iter().any(|v| v.fract() != 0.0) {
        return FeatureKind::Continuous;
    }
    let distinct: BTreeSet<u64> = numbers.iter().map(|v| canonical_bits(*v)).collect();
    let limit = (0.05 * cells.len() as f64).max(20.0);
    if distinct.len() as f64 <= limit {
        FeatureKind::Discrete
    } else {
        FeatureKind::Continuous
    }
}

pub struct RawTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    pub fn read(path: &Path) -> Result<RawTable> {
        let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);
        let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            if rec.len() != headers.len() {
                return Err(DatasetError::Ragged {
                    row: i + 1,
                    found: rec.len(),
                    expected: headers.len(),
                });
            }
            rows.push(rec.iter().map(str::to_string).collect());
        }
        Ok(RawTable { headers, rows })
    }

    pub fn column(&self, idx: usize) -> Vec<&str> {
        self.rows.iter().map(|r| r[idx].as_str()).collect()
    }
}

/// Reads a CSV, infers column kinds and encodes labels. Continuous missing
/// cells stay NaN until [`standardize`] imputes them with the train mean.
pub fn load_csv(path: &Path, target: &str, task: TaskKind, opts: &LoadOptions) -> Result<TabularDataset> {
    let table = RawTable::read(path)?;
    from_raw(&table, target, task, opts)
}

pub fn from_raw(table: &RawTable, target: &str, task: TaskKind, opts: &LoadOptions) -> Result<TabularDataset> {
    let target_idx = table
        .headers
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| DatasetError::TargetNotFound(target.to_string()))?;
    if table.rows.len() < MIN_ROWS {
        return Err(DatasetError::TooFewRows(table.rows.len()));
    }

    let target_cells = table.column(target_idx);
    let target_enc = TargetEncoding {
        name: target.to_string(),
        task,
        classes: match task {
            TaskKind::Classification => sorted_labels(target_cells.iter().copied()),
            TaskKind::Regression => Vec::new(),
        },
    };
    let labels = target_cells
        .iter()
        .enumerate()
        .map(|(r, c)| target_enc.encode_cell(c, r + 1))
        .collect::<Result<Vec<f64>>>()?;
    let constant = match task {
        TaskKind::Classification => target_enc.classes.len() < 2,
        TaskKind::Regression => labels.iter().all(|y| *y == labels[0]),
    };
    if constant {
        return Err(DatasetError::ConstantTarget(target.to_string()));
    }

    let mut columns = Vec::new();
    let mut encodings = Vec::new();
    for (idx, name) in table.headers.iter().enumerate() {
        if idx == target_idx {
            continue;
        }
        let cells = table.column(idx);
        let kind = opts.kind_overrides.get(name).copied().unwrap_or_else(|| infer_kind(&cells));
        let encoding = ColumnEncoding {
            name: name.clone(),
            kind,
            categories: match kind {
                FeatureKind::Discrete => sorted_labels(cells.iter().copied()),
                FeatureKind::Continuous => Vec::new(),
            },
            standardization: None,
        };
        let values = cells
            .iter()
            .enumerate()
            .map(|(r, c)| encoding.encode_cell(c, r + 1))
            .collect::<Result<Vec<f64>>>()?;
        let missing = cells.iter().filter(|c| c.trim().is_empty()).count() as f64 / cells.len() as f64;
        columns.push(FeatureColumn {
            name: name.clone(),
            kind,
            stats: FeatureStats::compute(&values, Some(missing)),
            values,
        });
        encodings.push(encoding);
    }

    let n = labels.len();
    Ok(TabularDataset {
        columns,
        labels,
        task,
        split: vec![Split::Train; n],
        encodings,
        target: target_enc,
    })
}

/// Encodes a raw table with fixed encodings (from a training run).
pub fn encode_with(
    table: &RawTable,
    encodings: &[ColumnEncoding],
    target: &TargetEncoding,
) -> Result<(Vec<FeatureColumn>, Option<Vec<f64>>)> {
    let mut columns = Vec::with_capacity(encodings.len());
    for enc in encodings {
        let idx = table
            .headers
            .iter()
            .position(|h| *h == enc.name)
            .ok_or_else(|| DatasetError::Schema(format!("column {:?} missing from input", enc.name)))?;
        let values = table
            .column(idx)
            .iter()
            .enumerate()
            .map(|(r, c)| enc.encode_cell(c, r + 1))
            .collect::<Result<Vec<f64>>>()?;
        columns.push(FeatureColumn::new(enc.name.clone(), enc.kind, values));
    }
    let feature_count = table.headers.iter().filter(|h| **h != target.name).count();
    if feature_count != encodings.len() {
        return Err(DatasetError::Schema(format!(
            "input has {feature_count} feature columns, expected {}",
            encodings.len()
        )));
    }
    let labels = match table.headers.iter().position(|h| *h == target.name) {
        Some(idx) => Some(
            table
                .column(idx)
                .iter()
                .enumerate()
                .map(|(r, c)| target.encode_cell(c, r + 1))
                .collect::<Result<Vec<f64>>>()?,
        ),
        None => None,
    };
    Ok((columns, labels))
}

/// Deterministic train/val/test assignment. Classification rows are
/// interleaved by within-class rank so each split is close to stratified
/// while the global split sizes stay exact.
pub fn split(dataset: &TabularDataset, fractions: (f64, f64, f64), seed: u64) -> Result<TabularDataset> {
    let (a, b, c) = fractions;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadFractions(fractions));
    }
    let n = dataset.n_rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let order: Vec<usize> = match dataset.task {
        TaskKind::Classification => {
            let k = dataset.num_classes();
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
            for (r, y) in dataset.labels.iter().enumerate() {
                by_class[*y as usize].push(r);
            }
            for (class, rows) in by_class.iter().enumerate() {
                if !rows.is_empty() && rows.len() < 3 {
                    return Err(DatasetError::ClassTooSmall {
                        class,
                        count: rows.len(),
                    });
                }
            }
            let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(n);
            for (class, rows) in by_class.iter_mut().enumerate() {
                rows.shuffle(&mut rng);
                let m = rows.len() as f64;
                for (j, &r) in rows.iter().enumerate() {
                    keyed.push(((j as f64 + 0.5) / m, class, r));
                }
            }
            keyed.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            keyed.into_iter().map(|(_, _, r)| r).collect()
        }
        TaskKind::Regression => {
            let mut rows: Vec<usize> = (0..n).collect();
            rows.shuffle(&mut rng);
            rows
        }
    };

    let n_train = (a * n as f64).round() as usize;
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let mut assignment = vec![Split::Test; n];
    for (pos, &r) in order.iter().enumerate() {
        assignment[r] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let mut out = dataset.clone();
    out.split = assignment;
    Ok(out)
}

/// Imputes and z-scores continuous columns with train-split statistics
/// (population std; constant columns become zeros). Discrete columns are
/// left as codes.
pub fn standardize(dataset: &TabularDataset) -> Result<TabularDataset> {
    let train = dataset.rows_in(Split::Train);
    if train.is_empty() {
        return Err(DatasetError::EmptyTrain);
    }
    let mut out = dataset.clone();
    for (col, enc) in out.columns.iter_mut().zip(out.encodings.iter_mut()) {
        if col.kind != FeatureKind::Continuous {
            continue;
        }
        let (mean, std) = train_moments(&col.values, &train);
        col.values = col
            .values
            .iter()
            .map(|v| standardize_value(if v.is_nan() { mean } else { *v }, mean, std))
            .collect();
        col.stats = FeatureStats::compute(&col.values, Some(col.stats.fraction_missing));
        enc.standardization = Some((mean, std));
    }
    Ok(out)
}

/// Population mean/std of the finite train entries.
pub fn train_moments(values: &[f64], train: &[usize]) -> (f64, f64) {
    let present: Vec<f64> = train.iter().map(|&r| values[r]).filter(|v| v.is_finite()).collect();
    if present.is_empty() {
        return (0.0, 0.0);
    }
    let n = present.len() as f64;
    let mean = present.iter().sum::<f64>() / n;
    let var = present.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Writes the numeric view of `rows` (feature columns then target).
pub fn write_csv(dataset: &TabularDataset, rows: &[usize], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = dataset.columns.iter().map(|c| c.name.as_str()).collect();
    header.push(&dataset.target.name);
    writer.write_record(&header)?;
    for &r in rows {
        let mut record: Vec<String> = dataset.columns.iter().map(|c| format_value(c.values[r])).collect();
        record.push(format_value(dataset.labels[r]));
        writer.write_record(&record)?;
    }
    writer.flush().map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

/// Shortest representation that parses back to the same bits.
pub fn format_value(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}
