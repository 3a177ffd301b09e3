//! Downstream models, the pretraining surrogate, and metric reports.

pub mod forest;
pub mod metrics;
pub mod mlp;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Split, TabularDataset, TaskKind};
use crate::nn::{NnError, Tensor};
use crate::seed;
use forest::{ForestConfig, RandomForest, Target};
use mlp::{Labels, Mlp, TrainConfig};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("train split contains a single class")]
    SingleClass,
    #[error("{0} split is empty")]
    EmptySplit(Split),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("{columns} columns exceed the surrogate input width {width}")]
    WidthOverflow { columns: usize, width: usize },
    #[error("unknown {what} '{value}'")]
    Unknown { what: &'static str, value: String },
    #[error("malformed report line {line}: {text}")]
    Report { line: usize, text: String },
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    RandomForest,
    Mlp,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::RandomForest => "random_forest",
            ModelKind::Mlp => "mlp",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_forest" | "rf" => Ok(ModelKind::RandomForest),
            "mlp" => Ok(ModelKind::Mlp),
            _ => Err(EvalError::Unknown {
                what: "model kind",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    Accuracy,
    MacroF1,
    MacroPrecision,
    OneMinusRae,
    R2,
}

impl Metric {
    pub fn key(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::MacroF1 => "macro_f1",
            Metric::MacroPrecision => "macro_precision",
            Metric::OneMinusRae => "one_minus_rae",
            Metric::R2 => "r2",
        }
    }

    /// Reward metric used when none is configured.
    pub fn default_for(task: TaskKind) -> Metric {
        match task {
            TaskKind::Classification => Metric::MacroF1,
            TaskKind::Regression => Metric::OneMinusRae,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Metric {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        [
            Metric::Accuracy,
            Metric::MacroF1,
            Metric::MacroPrecision,
            Metric::OneMinusRae,
            Metric::R2,
        ]
        .into_iter()
        .find(|m| m.key() == s)
        .ok_or_else(|| EvalError::Unknown {
            what: "metric",
            value: s.to_string(),
        })
    }
}

/// Task metrics on one split, plus random-forest importances when available.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub task: TaskKind,
    pub model: ModelKind,
    pub split: Split,
    pub rows: usize,
    pub metrics: BTreeMap<String, f64>,
    /// `(column name, importance)` in column order.
    pub importances: Vec<(String, f64)>,
}

impl MetricReport {
    pub fn get(&self, metric: Metric) -> Option<f64> {
        self.metrics.get(metric.key()).copied()
    }

    /// `key=value` lines; importances as `importance.<column>=<value>`.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "task={}\nmodel={}\nsplit={}\nrows={}\n",
            self.task.as_str(),
            self.model,
            self.split.as_str(),
            self.rows
        );
        for (k, v) in &self.metrics {
            out.push_str(&format!("{k}={v}\n"));
        }
        for (name, v) in &self.importances {
            out.push_str(&format!("importance.{name}={v}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<MetricReport> {
        let mut fields = BTreeMap::new();
        let mut metrics = BTreeMap::new();
        let mut importances = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || EvalError::Report {
                line: i + 1,
                text: line.to_string(),
            };
            let (k, v) = line.split_once('=').ok_or_else(bad)?;
            match k {
                "task" | "model" | "split" | "rows" => {
                    fields.insert(k.to_string(), v.to_string());
                }
                _ => {
                    let value: f64 = v.parse().map_err(|_| bad())?;
                    match k.strip_prefix("importance.") {
                        Some(name) => importances.push((name.to_string(), value)),
                        None => {
                            metrics.insert(k.to_string(), value);
                        }
                    }
                }
            }
        }
        let field = |k: &str| {
            fields.get(k).cloned().ok_or_else(|| EvalError::Report {
                line: 0,
                text: format!("missing {k}"),
            })
        };
        let unknown = |what: &'static str, value: String| EvalError::Unknown { what, value };
        let task = field("task")?;
        let split = field("split")?;
        let rows = field("rows")?;
        Ok(MetricReport {
            task: task.parse().map_err(|_| unknown("task", task.clone()))?,
            model: field("model")?.parse()?,
            split: split.parse().map_err(|_| unknown("split", split.clone()))?,
            rows: rows.parse().map_err(|_| unknown("row count", rows.clone()))?,
            metrics,
            importances,
        })
    }
}

/// Signed improvement `new - base` in `metric`; 0 when either lacks it.
pub fn metric_delta(new: &MetricReport, base: &MetricReport, metric: Metric) -> f64 {
    match (new.get(metric), base.get(metric)) {
        (Some(a), Some(b)) => a - b,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamConfig {
    pub forest: ForestConfig,
    pub mlp_hidden: usize,
    pub mlp_train: TrainConfig,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            forest: ForestConfig::default(),
            mlp_hidden: 64,
            mlp_train: TrainConfig {
                epochs: 100,
                batch_size: 32,
                lr: 1e-3,
                patience: None,
            },
        }
    }
}

fn class_labels(dataset: &TabularDataset) -> Vec<usize> {
    dataset.labels.iter().map(|&v| v as usize).collect()
}

fn row_matrix(dataset: &TabularDataset, rows: &[usize], width: usize) -> Tensor {
    let mut data = vec![0.0; rows.len() * width];
    for (i, &r) in rows.iter().enumerate() {
        for (j, c) in dataset.columns.iter().enumerate().take(width) {
            data[i * width + j] = c.values[r];
        }
    }
    Tensor::matrix(rows.len(), width, data)
}

fn classification_metrics(pred: &[usize], actual: &[usize]) -> BTreeMap<String, f64> {
    BTreeMap::from([
        (Metric::Accuracy.key().to_string(), metrics::accuracy(pred, actual)),
        (Metric::MacroF1.key().to_string(), metrics::macro_f1(pred, actual)),
        (Metric::MacroPrecision.key().to_string(), metrics::macro_precision(pred, actual)),
    ])
}

fn regression_metrics(pred: &[f64], actual: &[f64]) -> BTreeMap<String, f64> {
    BTreeMap::from([
        (Metric::OneMinusRae.key().to_string(), metrics::one_minus_rae(pred, actual)),
        (Metric::R2.key().to_string(), metrics::r2(pred, actual)),
    ])
}

/// Trains a fresh model on the train split and scores it on `eval_split`.
pub fn evaluate_downstream(
    kind: ModelKind,
    dataset: &TabularDataset,
    eval_split: Split,
    config: &DownstreamConfig,
    seed: u64,
) -> Result<MetricReport> {
    let train = dataset.rows_in(Split::Train);
    let eval = dataset.rows_in(eval_split);
    if train.is_empty() {
        return Err(EvalError::EmptySplit(Split::Train));
    }
    if eval.is_empty() {
        return Err(EvalError::EmptySplit(eval_split));
    }
    let task = dataset.task;
    let k = dataset.num_classes();
    if task == TaskKind::Classification {
        let first = dataset.labels[train[0]];
        if train.iter().all(|&r| dataset.labels[r] == first) {
            return Err(EvalError::SingleClass);
        }
    }
    let (metrics, importances) = match kind {
        ModelKind::RandomForest => {
            let columns: Vec<Vec<f64>> = dataset.columns.iter().map(|c| c.values.clone()).collect();
            let seed = seed::derive(seed, "random_forest");
            let (metrics, rf) = match task {
                TaskKind::Classification => {
                    let y = class_labels(dataset);
                    let rf = RandomForest::fit(&columns, Target::Classes(&y, k), &train, &config.forest, seed);
                    let pred = rf.predict_class(&columns, &eval);
                    let actual: Vec<usize> = eval.iter().map(|&r| y[r]).collect();
                    (classification_metrics(&pred, &actual), rf)
                }
                TaskKind::Regression => {
                    let rf = RandomForest::fit(&columns, Target::Values(&dataset.labels), &train, &config.forest, seed);
                    let pred = rf.predict_value(&columns, &eval);
                    (regression_metrics(&pred, &dataset.labels_of(&eval)), rf)
                }
            };
            let names = dataset.columns.iter().map(|c| c.name.clone());
            (metrics, names.zip(rf.importances().iter().copied()).collect())
        }
        ModelKind::Mlp => {
            let d = dataset.n_features();
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "downstream_mlp"));
            let x = row_matrix(dataset, &train, d);
            let xe = row_matrix(dataset, &eval, d);
            let metrics = match task {
                TaskKind::Classification => {
                    let y = class_labels(dataset);
                    let labels = Labels::Classes(train.iter().map(|&r| y[r]).collect(), k);
                    let mut net = Mlp::new(d, &[config.mlp_hidden], k, &mut rng);
                    net.train(&x, &labels, None, &config.mlp_train, &mut rng)?;
                    let out = net.forward(&xe)?;
                    let pred: Vec<usize> = (0..out.rows()).map(|r| argmax(out.row(r))).collect();
                    let actual: Vec<usize> = eval.iter().map(|&r| y[r]).collect();
                    classification_metrics(&pred, &actual)
                }
                TaskKind::Regression => {
                    let ytr = dataset.labels_of(&train);
                    let (mean, std) = moments(&ytr);
                    let labels = Labels::Values(ytr.iter().map(|v| (v - mean) / std).collect());
                    let mut net = Mlp::new(d, &[config.mlp_hidden], 1, &mut rng);
                    net.train(&x, &labels, None, &config.mlp_train, &mut rng)?;
                    let out = net.forward(&xe)?;
                    let pred: Vec<f64> = out.data().iter().map(|v| v * std + mean).collect();
                    regression_metrics(&pred, &dataset.labels_of(&eval))
                }
            };
            (metrics, Vec::new())
        }
    };
    Ok(MetricReport {
        task,
        model: kind,
        split: eval_split,
        rows: eval.len(),
        metrics,
        importances,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean and population std, with std floored at 1 for constant input.
fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 0.0 { std } else { 1.0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateConfig {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    /// Extra copies of the data augmented with random programs, so the
    /// padded input slots carry meaning. 0 trains on the original columns only.
    pub random_views: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            hidden: vec![64, 64],
            train: TrainConfig {
                epochs: 200,
                batch_size: 64,
                lr: 1e-3,
                patience: Some(20),
            },
            random_views: 8,
        }
    }
}

/// Frozen MLP scoring augmented datasets during pretraining. Inputs are the
/// dataset's columns in order, zero-padded to a fixed width. Regression
/// targets are scaled by train-split moments before the squared error.
#[derive(Debug, Clone)]
pub struct Surrogate {
    mlp: Mlp,
    width: usize,
    task: TaskKind,
    classes: usize,
    target_moments: (f64, f64),
}

impl Surrogate {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn params(&self) -> &crate::nn::ParamStore {
        &self.mlp.store
    }

    fn labels(&self, dataset: &TabularDataset, rows: &[usize]) -> Labels {
        match self.task {
            TaskKind::Classification => {
                Labels::Classes(rows.iter().map(|&r| dataset.labels[r] as usize).collect(), self.classes)
            }
            TaskKind::Regression => {
                let (m, s) = self.target_moments;
                Labels::Values(rows.iter().map(|&r| (dataset.labels[r] - m) / s).collect())
            }
        }
    }

    /// Predicted class indices, or regression values on the original target
    /// scale, for the rows of `split`.
    pub fn predict(&self, dataset: &TabularDataset, split: Split) -> Result<Vec<f64>> {
        let rows = dataset.rows_in(split);
        if rows.is_empty() {
            return Err(EvalError::EmptySplit(split));
        }
        if dataset.n_features() > self.width {
            return Err(EvalError::WidthOverflow {
                columns: dataset.n_features(),
                width: self.width,
            });
        }
        let out = self.mlp.forward(&row_matrix(dataset, &rows, self.width))?;
        let cols = out.cols();
        Ok((0..rows.len())
            .map(|i| {
                let row = &out.data()[i * cols..(i + 1) * cols];
                match self.task {
                    TaskKind::Classification => row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1))
                        .map(|(k, _)| k as f64)
                        .unwrap_or(0.0),
                    TaskKind::Regression => row[0] * self.target_moments.1 + self.target_moments.0,
                }
            })
            .collect())
    }

    /// Cross-entropy or squared error of the surrogate on `split` of a
    /// (possibly augmented) dataset.
    pub fn loss(&self, dataset: &TabularDataset, split: Split) -> Result<f64> {
        if dataset.n_features() > self.width {
            return Err(EvalError::WidthOverflow {
                columns: dataset.n_features(),
                width: self.width,
            });
        }
        let rows = dataset.rows_in(split);
        if rows.is_empty() {
            return Err(EvalError::EmptySplit(split));
        }
        let x = row_matrix(dataset, &rows, self.width);
        Ok(self.mlp.loss(&x, &self.labels(dataset, &rows))?)
    }
}

/// Trains the surrogate on the original columns of `dataset`, zero-padded
/// to `width`, with early stopping on validation loss.
pub fn train_surrogate(dataset: &TabularDataset, width: usize, config: &SurrogateConfig, seed: u64) -> Result<Surrogate> {
    if dataset.n_features() > width {
        return Err(EvalError::WidthOverflow {
            columns: dataset.n_features(),
            width,
        });
    }
    let train = dataset.rows_in(Split::Train);
    if train.is_empty() {
        return Err(EvalError::EmptySplit(Split::Train));
    }
    let mut val = dataset.rows_in(Split::Val);
    if val.is_empty() {
        val = train.clone();
    }
    let classes = dataset.num_classes();
    let out_dim = match dataset.task {
        TaskKind::Classification => classes,
        TaskKind::Regression => 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "surrogate"));
    let mut surrogate = Surrogate {
        mlp: Mlp::new(width, &config.hidden, out_dim, &mut rng),
        width,
        task: dataset.task,
        classes,
        target_moments: moments(&dataset.labels_of(&train)),
    };
    let extra = width - dataset.n_features();
    let mut views = vec![dataset.clone()];
    if extra > 0 {
        let grammar = crate::transform::Grammar::new(dataset.kinds());
        let mut view_rng = seed::rng(seed, "surrogate.views");
        for _ in 0..config.random_views {
            let seq = crate::transform::random_sequence(&grammar, &mut view_rng, extra, 3);
            let program = crate::transform::FeatureProgram::from_sequence(&seq);
            views.push(crate::transform::apply_program(&program, dataset, extra).dataset);
        }
    }
    let stack = |rows: &[usize]| {
        let parts: Vec<Tensor> = views.iter().map(|v| row_matrix(v, rows, width)).collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        let labels: Vec<Labels> = views.iter().map(|v| surrogate.labels(v, rows)).collect();
        (Tensor::concat_rows(&refs), Labels::concat(labels))
    };
    let (x, y) = stack(&train);
    let (xv, yv) = stack(&val);
    surrogate.mlp.train(&x, &y, Some((&xv, &yv)), &config.train, &mut rng)?;
    Ok(surrogate)
}
