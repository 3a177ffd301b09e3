//! End-to-end runs, saved-program application and standalone evaluation.
//!
//! A run directory holds everything needed to audit or reuse a run:
//!
//! ```text
//! run_config.resolved   every effective setting, one `key = value` per line
//! seed                  the master seed
//! split_assignment.csv  row -> train/val/test
//! pretrain.log          one line per pretraining epoch
//! ppo.log               one line per PPO iteration
//! checkpoints/          policy checkpoints
//! best_program.txt      the selected program
//! best_program.json     encodings and statistics needed to re-apply it
//! base_report.txt       test metrics without generated features
//! augmented_report.txt  test metrics with the selected program
//! run_report.txt        summary: label, reward trace, timings, importances
//! augmented_{train,val,test}.csv
//! ```

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    self, format_value, ColumnEncoding, DatasetError, FeatureColumn, FeatureKind, LoadOptions, RawTable, Split,
    TabularDataset, TargetEncoding, TaskKind,
};
use crate::evaluators::{
    evaluate_downstream, train_surrogate, DownstreamConfig, Metric, MetricReport, ModelKind, SurrogateConfig,
};
use crate::policy::{PolicyConfig, PolicyModel};
use crate::ppo::{fine_tune, BestArtifact, PpoConfig, RewardContext};
use crate::pretrain::{pretrain, PretrainConfig};
use crate::seed;
use crate::transform::{
    apply_program, apply_spec, parse_program, schema_fingerprint, segment_text, split_segments,
    FeatureProgram, GeneratedSpec, Grammar, ParseError, ValidationError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("program parse error: {0}")]
    Parse(#[from] ParseError),
    #[error("schema mismatch: {0}")]
    Schema(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: std::error::Error + Send + Sync + 'static> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| PipelineError::Stage {
            stage,
            source: Box::new(e),
        })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Full,
    NoPretrain,
    NoPpo,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoPretrain => "no-pretrain",
            Ablation::NoPpo => "no-ppo",
        }
    }

    /// Report label of the variant.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "TSFG",
            Ablation::NoPretrain => "TSFG+",
            Ablation::NoPpo => "TSFG#",
        }
    }
}

impl FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" | "none" => Ok(Ablation::Full),
            "no-pretrain" => Ok(Ablation::NoPretrain),
            "no-ppo" => Ok(Ablation::NoPpo),
            other => Err(format!("unknown ablation {other:?} (full, no-pretrain, no-ppo)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: PathBuf,
    pub target: String,
    pub task: TaskKind,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub model: ModelKind,
    /// Reward and headline metric; defaults by task.
    pub metric: Option<Metric>,
    pub ablation: Ablation,
    pub split: (f64, f64, f64),
    /// Generated-column cap; defaults to twice the feature count.
    pub cap: Option<usize>,
    pub policy: PolicyConfig,
    pub surrogate: SurrogateConfig,
    pub downstream: DownstreamConfig,
    pub pretrain: PretrainConfig,
    pub ppo: PpoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: PathBuf::new(),
            target: String::new(),
            task: TaskKind::Classification,
            seed: None,
            out_dir: None,
            model: ModelKind::RandomForest,
            metric: None,
            ablation: Ablation::Full,
            split: dataset::DEFAULT_FRACTIONS,
            cap: None,
            policy: PolicyConfig::default(),
            surrogate: SurrogateConfig::default(),
            downstream: DownstreamConfig::default(),
            pretrain: PretrainConfig::with_cap(0),
            ppo: PpoConfig::with_cap(0),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| PipelineError::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(PipelineError::Config(format!("{key} = {value:?}: expected true or false"))),
    }
}

impl RunConfig {
    /// Parses `key = value` lines (`#` comments allowed) over the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        config.apply_text(text)?;
        Ok(config)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Sets one field by its config-file key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data" => self.data = PathBuf::from(value),
            "target" => self.target = value.to_string(),
            "task" => self.task = parse(key, value)?,
            "seed" => self.seed = Some(parse(key, value)?),
            "out" => self.out_dir = Some(PathBuf::from(value)),
            "model" => self.model = parse(key, value)?,
            "metric" => self.metric = if value == "auto" { None } else { Some(parse(key, value)?) },
            "ablate" => self.ablation = parse(key, value)?,
            "split" => {
                let parts: Vec<f64> = value.split(',').map(|p| parse(key, p.trim())).collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(PipelineError::Config(format!("split = {value:?}: expected three fractions")));
                }
                self.split = (parts[0], parts[1], parts[2]);
            }
            "cap" => self.cap = if value == "auto" { None } else { Some(parse(key, value)?) },
            "policy.d_model" => self.policy.d_model = parse(key, value)?,
            "policy.heads" => self.policy.heads = parse(key, value)?,
            "policy.d_ff" => self.policy.d_ff = parse(key, value)?,
            "policy.encoder_layers" => self.policy.encoder_layers = parse(key, value)?,
            "policy.decoder_layers" => self.policy.decoder_layers = parse(key, value)?,
            "policy.max_len" => self.policy.max_len = parse(key, value)?,
            "policy.dropout" => self.policy.dropout = parse(key, value)?,
            "policy.discrete_arithmetic" => self.policy.discrete_arithmetic = parse_bool(key, value)?,
            "policy.eos_prior" => self.policy.eos_prior = parse(key, value)?,
            "policy.stop_prior" => self.policy.stop_prior = parse(key, value)?,
            "surrogate.epochs" => self.surrogate.train.epochs = parse(key, value)?,
            "surrogate.lr" => self.surrogate.train.lr = parse(key, value)?,
            "surrogate.hidden" => {
                self.surrogate.hidden = value
                    .split(',')
                    .map(|v| parse(key, v.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "surrogate.random_views" => self.surrogate.random_views = parse(key, value)?,
            "downstream.trees" => self.downstream.forest.n_trees = parse(key, value)?,
            "downstream.max_depth" => self.downstream.forest.max_depth = parse(key, value)?,
            "downstream.mlp_epochs" => self.downstream.mlp_train.epochs = parse(key, value)?,
            "pretrain.epochs" => self.pretrain.epochs = parse(key, value)?,
            "pretrain.sequences" => self.pretrain.sequences_per_epoch = parse(key, value)?,
            "pretrain.t_start" => self.pretrain.temperature_start = parse(key, value)?,
            "pretrain.t_end" => self.pretrain.temperature_end = parse(key, value)?,
            "pretrain.baseline_decay" => self.pretrain.baseline_decay = parse(key, value)?,
            "pretrain.patience" => self.pretrain.patience = parse(key, value)?,
            "pretrain.lr" => self.pretrain.lr = parse(key, value)?,
            "pretrain.val_sequences" => self.pretrain.val_sequences = parse(key, value)?,
            "ppo.iterations" => self.ppo.iterations = parse(key, value)?,
            "ppo.trajectories" => self.ppo.trajectories = parse(key, value)?,
            "ppo.epochs" => self.ppo.epochs = parse(key, value)?,
            "ppo.clip" => self.ppo.clip = parse(key, value)?,
            "ppo.entropy_coef" => self.ppo.entropy_coef = parse(key, value)?,
            "ppo.lr" => self.ppo.lr = parse(key, value)?,
            "ppo.normalize_advantages" => self.ppo.normalize_advantages = parse_bool(key, value)?,
            _ => return Err(PipelineError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.data.as_os_str().is_empty() {
            return bad("data path is required");
        }
        if self.target.is_empty() {
            return bad("target column is required");
        }
        if self.seed.is_none() {
            return bad("seed is required");
        }
        if self.pretrain.epochs == 0 {
            return bad("pretrain.epochs must be at least 1");
        }
        let t_ok = |t: f64| t > 0.0 && t <= 1.0;
        if !t_ok(self.pretrain.temperature_start) || !t_ok(self.pretrain.temperature_end) {
            return bad("pretrain temperatures must lie in (0, 1]");
        }
        if !(self.ppo.clip > 0.0 && self.ppo.clip < 1.0) {
            return bad("ppo.clip must lie in (0, 1)");
        }
        if self.ppo.entropy_coef < 0.0 || self.ppo.lr <= 0.0 || self.pretrain.lr <= 0.0 {
            return bad("learning rates must be positive and the entropy coefficient non-negative");
        }
        if let Some(m) = self.metric {
            if !metric_fits(m, self.task) {
                return bad(&format!("metric {} does not apply to {} tasks", m.key(), self.task.as_str()));
            }
        }
        Ok(())
    }

    /// Output directory, defaulting to `runs/<data stem>-<seed>`.
    pub fn resolved_out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| {
            let stem = self.data.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
            PathBuf::from("runs").join(format!("{stem}-{}", self.seed.unwrap_or(0)))
        })
    }

    /// Every effective setting as `key = value` lines; `cap` and `metric`
    /// are shown resolved.
    pub fn resolved_text(&self, cap: usize, metric: Metric) -> String {
        let p = &self.policy;
        let entries: Vec<(&str, String)> = vec![
            ("data", self.data.display().to_string()),
            ("target", self.target.clone()),
            ("task", self.task.as_str().to_string()),
            ("seed", self.seed.unwrap_or(0).to_string()),
            ("out", self.resolved_out_dir().display().to_string()),
            ("model", self.model.as_str().to_string()),
            ("metric", metric.key().to_string()),
            ("ablate", self.ablation.as_str().to_string()),
            ("split", format!("{},{},{}", self.split.0, self.split.1, self.split.2)),
            ("cap", cap.to_string()),
            ("policy.d_model", p.d_model.to_string()),
            ("policy.heads", p.heads.to_string()),
            ("policy.d_ff", p.d_ff.to_string()),
            ("policy.encoder_layers", p.encoder_layers.to_string()),
            ("policy.decoder_layers", p.decoder_layers.to_string()),
            ("policy.max_len", p.max_len.to_string()),
            ("policy.dropout", p.dropout.to_string()),
            ("policy.discrete_arithmetic", p.discrete_arithmetic.to_string()),
            ("policy.eos_prior", p.eos_prior.to_string()),
            ("policy.stop_prior", p.stop_prior.to_string()),
            ("surrogate.epochs", self.surrogate.train.epochs.to_string()),
            ("surrogate.lr", self.surrogate.train.lr.to_string()),
            (
                "surrogate.hidden",
                self.surrogate.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("surrogate.random_views", self.surrogate.random_views.to_string()),
            ("downstream.trees", self.downstream.forest.n_trees.to_string()),
            ("downstream.max_depth", self.downstream.forest.max_depth.to_string()),
            ("downstream.mlp_epochs", self.downstream.mlp_train.epochs.to_string()),
            ("pretrain.epochs", self.pretrain.epochs.to_string()),
            ("pretrain.sequences", self.pretrain.sequences_per_epoch.to_string()),
            ("pretrain.t_start", self.pretrain.temperature_start.to_string()),
            ("pretrain.t_end", self.pretrain.temperature_end.to_string()),
            ("pretrain.baseline_decay", self.pretrain.baseline_decay.to_string()),
            ("pretrain.patience", self.pretrain.patience.to_string()),
            ("pretrain.lr", self.pretrain.lr.to_string()),
            ("pretrain.val_sequences", self.pretrain.val_sequences.to_string()),
            ("ppo.iterations", self.ppo.iterations.to_string()),
            ("ppo.trajectories", self.ppo.trajectories.to_string()),
            ("ppo.epochs", self.ppo.epochs.to_string()),
            ("ppo.clip", self.ppo.clip.to_string()),
            ("ppo.entropy_coef", self.ppo.entropy_coef.to_string()),
            ("ppo.lr", self.ppo.lr.to_string()),
            ("ppo.normalize_advantages", self.ppo.normalize_advantages.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

fn metric_fits(metric: Metric, task: TaskKind) -> bool {
    match task {
        TaskKind::Classification => matches!(metric, Metric::Accuracy | Metric::MacroF1 | Metric::MacroPrecision),
        TaskKind::Regression => matches!(metric, Metric::OneMinusRae | Metric::R2),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Importance {
    pub name: String,
    pub value: f64,
    pub generated: bool,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub ablation: Ablation,
    pub metric: Metric,
    /// Test split, original columns.
    pub base: MetricReport,
    /// Test split, original plus the selected program's columns.
    pub augmented: MetricReport,
    pub base_val: MetricReport,
    /// Validation metric delta of the selected program.
    pub best_val_reward: f64,
    /// Incumbent val reward after each PPO iteration.
    pub reward_trace: Vec<f64>,
    pub best_program: String,
    pub generated_columns: Vec<String>,
    pub stage_seconds: Vec<(String, f64)>,
    /// Sorted by decreasing importance; empty for models without them.
    pub importances: Vec<Importance>,
    pub out_dir: PathBuf,
}

impl RunReport {
    pub fn label(&self) -> &'static str {
        self.ablation.label()
    }

    pub fn test_delta(&self) -> f64 {
        crate::evaluators::metric_delta(&self.augmented, &self.base, self.metric)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let key = self.metric.key();
        let _ = writeln!(s, "label={}", self.label());
        let _ = writeln!(s, "ablation={}", self.ablation.as_str());
        let _ = writeln!(s, "metric={key}");
        let _ = writeln!(s, "base.val.{key}={}", self.base_val.get(self.metric).unwrap_or(f64::NAN));
        let _ = writeln!(s, "base.test.{key}={}", self.base.get(self.metric).unwrap_or(f64::NAN));
        let _ = writeln!(s, "augmented.test.{key}={}", self.augmented.get(self.metric).unwrap_or(f64::NAN));
        let _ = writeln!(s, "best_val_reward={}", self.best_val_reward);
        let trace: Vec<String> = self.reward_trace.iter().map(|r| r.to_string()).collect();
        let _ = writeln!(s, "reward_trace={}", trace.join(","));
        let _ = writeln!(s, "generated_columns={}", self.generated_columns.len());
        for (stage, secs) in &self.stage_seconds {
            let _ = writeln!(s, "seconds.{stage}={secs:.3}");
        }
        for (rank, imp) in self.importances.iter().enumerate() {
            let origin = if imp.generated { "generated" } else { "original" };
            let _ = writeln!(s, "importance.{}={} {} {}", rank + 1, imp.value, origin, imp.name);
        }
        let _ = writeln!(s, "program:");
        s.push_str(&self.best_program);
        s
    }
}

/// Sidecar of a saved program: what is needed to encode new raw files the
/// way the training file was encoded and to re-standardize each feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramBundle {
    pub fingerprint: u64,
    pub encodings: Vec<ColumnEncoding>,
    pub target: TargetEncoding,
    /// One entry per program segment; `None` where training rejected it.
    pub features: Vec<Option<GeneratedSpec>>,
}

/// `best_program.txt` -> `best_program.json`.
pub fn bundle_path(program_path: &Path) -> PathBuf {
    program_path.with_extension("json")
}

struct StageClock {
    seconds: Vec<(String, f64)>,
    started: Instant,
}

impl StageClock {
    fn new() -> Self {
        StageClock {
            seconds: Vec::new(),
            started: Instant::now(),
        }
    }

    fn lap(&mut self, stage: &str) {
        self.seconds.push((stage.to_string(), self.started.elapsed().as_secs_f64()));
        self.started = Instant::now();
    }
}

fn line_log(path: &Path) -> Result<File> {
    File::create(path).map_err(io_err(path))
}

/// Loads, splits and standardizes a CSV.
pub fn prepare(
    table: &RawTable,
    target: &str,
    task: TaskKind,
    fractions: (f64, f64, f64),
    master_seed: u64,
) -> std::result::Result<TabularDataset, DatasetError> {
    let ds = dataset::from_raw(table, target, task, &LoadOptions::default())?;
    let ds = dataset::split(&ds, fractions, seed::derive(master_seed, "split"))?;
    dataset::standardize(&ds)
}

/// Writes raw input cells of `rows` with generated columns appended.
fn write_augmented_csv(
    table: &RawTable,
    rows: &[usize],
    generated: &[(String, Vec<f64>)],
    path: &Path,
) -> std::result::Result<(), DatasetError> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = table.headers.clone();
    header.extend(generated.iter().map(|(n, _)| n.clone()));
    writer.write_record(&header)?;
    for &r in rows {
        let mut record = table.rows[r].clone();
        record.extend(generated.iter().map(|(_, v)| format_value(v[r])));
        writer.write_record(&record)?;
    }
    writer.flush().map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Runs the configured pipeline and writes the run directory.
pub fn run(config: &RunConfig) -> Result<RunReport> {
    config.check()?;
    let master = config.seed.expect("checked");
    let out = config.resolved_out_dir();
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    write_file(&out.join("seed"), format!("{master}\n"))?;
    let mut clock = StageClock::new();

    let table = RawTable::read(&config.data).stage("load")?;
    let ds = prepare(&table, &config.target, config.task, config.split, master).stage("load")?;
    let n = ds.n_features();
    let cap = config.cap.unwrap_or(2 * n).max(1);
    let metric = config.metric.unwrap_or(Metric::default_for(config.task));
    if !metric_fits(metric, config.task) {
        return Err(PipelineError::Config(format!(
            "metric {} does not apply to {} tasks",
            metric.key(),
            config.task.as_str()
        )));
    }
    write_file(&out.join("run_config.resolved"), config.resolved_text(cap, metric))?;
    let mut assignment = String::from("row,split\n");
    for (r, s) in ds.split.iter().enumerate() {
        let _ = writeln!(assignment, "{r},{}", s.as_str());
    }
    write_file(&out.join("split_assignment.csv"), assignment)?;
    clock.lap("load");

    let downstream_seed = seed::derive(master, "downstream");
    let ctx = RewardContext::new(&ds, config.model, metric, config.downstream.clone(), downstream_seed, cap)
        .stage("baseline")?;
    let kinds = ds.kinds();
    let mut init_rng = seed::rng(master, "policy.init");
    let mut policy = PolicyModel::new(&kinds, config.policy.clone(), &mut init_rng).stage("policy")?;
    clock.lap("baseline");

    if config.ablation != Ablation::NoPretrain {
        let surrogate = train_surrogate(&ds, n + cap, &config.surrogate, seed::derive(master, "surrogate"))
            .stage("surrogate")?;
        clock.lap("surrogate");
        let log_path = out.join("pretrain.log");
        let mut log_file = line_log(&log_path)?;
        let mut pre = config.pretrain.clone();
        pre.cap = cap;
        let mut write_err = None;
        pretrain(&mut policy, &surrogate, &ds, &pre, master, Some(&ckpt_dir), &mut |rec| {
            log::info!("{}", rec.log_line());
            if let Err(e) = writeln!(log_file, "{}", rec.log_line()) {
                write_err.get_or_insert(e);
            }
        })
        .stage("pretrain")?;
        if let Some(e) = write_err {
            return Err(io_err(&log_path)(e));
        }
        clock.lap("pretrain");
    }

    let (best, trace) = if config.ablation != Ablation::NoPpo {
        let log_path = out.join("ppo.log");
        let mut log_file = line_log(&log_path)?;
        let mut ppo = config.ppo.clone();
        ppo.cap = cap;
        let mut write_err = None;
        let outcome = fine_tune(&mut policy, &ctx, &ppo, master, &mut |rec| {
            log::info!("{}", rec.log_line());
            if let Err(e) = writeln!(log_file, "{}", rec.log_line()) {
                write_err.get_or_insert(e);
            }
        })
        .stage("ppo")?;
        if let Some(e) = write_err {
            return Err(io_err(&log_path)(e));
        }
        policy.save(&ckpt_dir.join("policy_final.ckpt"), Some(&outcome.adam)).stage("ppo")?;
        let trace = outcome.records.iter().map(|r| r.best_reward).collect();
        clock.lap("ppo");
        (outcome.best, trace)
    } else {
        let input = policy.encoder_input(&ds).stage("greedy")?;
        let decoded = policy.greedy(&input).stage("greedy")?;
        let program = FeatureProgram::from_sequence(&decoded.sequence);
        let (reward, _) = ctx.reward(&program).stage("greedy")?;
        let best = BestArtifact {
            program,
            val_reward: reward,
            iteration: 0,
            test_report: None,
        };
        clock.lap("greedy");
        (best, Vec::new())
    };

    let base = evaluate_downstream(config.model, &ds, Split::Test, &config.downstream, downstream_seed).stage("report")?;
    let augmented = match &best.test_report {
        Some(r) => r.clone(),
        None => ctx.report(&best.program, Split::Test).stage("report")?,
    };
    let aug = apply_program(&best.program, &ds, cap);
    let program_text = best.program.to_text();
    write_file(&out.join("best_program.txt"), &program_text)?;
    let features = best
        .program
        .segments
        .iter()
        .map(|seg| {
            let name = segment_text(seg);
            aug.generated.iter().find(|g| g.spec.segment == name).map(|g| g.spec.clone())
        })
        .collect();
    let bundle = ProgramBundle {
        fingerprint: schema_fingerprint(&kinds),
        encodings: ds.encodings.clone(),
        target: ds.target.clone(),
        features,
    };
    let json = serde_json::to_string_pretty(&bundle).map_err(|e| PipelineError::Stage {
        stage: "report",
        source: Box::new(e),
    })?;
    write_file(&out.join("best_program.json"), json)?;
    let generated: Vec<(String, Vec<f64>)> =
        aug.generated.iter().map(|g| (g.column.name.clone(), g.column.values.clone())).collect();
    for split in [Split::Train, Split::Val, Split::Test] {
        let path = out.join(format!("augmented_{}.csv", split.as_str()));
        write_augmented_csv(&table, &ds.rows_in(split), &generated, &path).stage("report")?;
    }
    write_file(&out.join("base_report.txt"), base.to_text())?;
    write_file(&out.join("augmented_report.txt"), augmented.to_text())?;

    let generated_names: Vec<String> = generated.iter().map(|(n, _)| n.clone()).collect();
    let mut importances: Vec<Importance> = augmented
        .importances
        .iter()
        .map(|(name, value)| Importance {
            name: name.clone(),
            value: *value,
            generated: generated_names.contains(name),
        })
        .collect();
    importances.sort_by(|a, b| b.value.total_cmp(&a.value));
    clock.lap("report");

    let report = RunReport {
        ablation: config.ablation,
        metric,
        base,
        augmented,
        base_val: ctx.base.clone(),
        best_val_reward: best.val_reward,
        reward_trace: trace,
        best_program: program_text,
        generated_columns: generated_names,
        stage_seconds: clock.seconds,
        importances,
        out_dir: out.clone(),
    };
    write_file(&out.join("run_report.txt"), report.to_text())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformSummary {
    pub rows: usize,
    pub generated: Vec<String>,
    pub skipped: usize,
}

fn schema_error(e: ValidationError) -> PipelineError {
    PipelineError::Schema(e.to_string())
}

/// Applies a saved program to a raw CSV and writes the input cells with
/// the generated columns appended. Statistics come from the program's
/// sidecar when present; otherwise they are computed from `data` itself
/// with every column except `target` treated as a feature. An empty
/// program copies the input unchanged.
pub fn transform_file(program_path: &Path, data_path: &Path, out_path: &Path, target: Option<&str>) -> Result<TransformSummary> {
    let text = fs::read_to_string(program_path).map_err(io_err(program_path))?;
    let tokens = parse_program(&text)?;
    let table = RawTable::read(data_path).stage("load")?;
    let segments: Vec<Vec<_>> = split_segments(&tokens).into_iter().map(<[_]>::to_vec).collect();
    if segments.is_empty() {
        fs::copy(data_path, out_path).map_err(io_err(out_path))?;
        return Ok(TransformSummary {
            rows: table.rows.len(),
            generated: Vec::new(),
            skipped: 0,
        });
    }

    let bundle_file = bundle_path(program_path);
    let mut generated = Vec::new();
    let mut skipped = 0;
    if bundle_file.exists() {
        let json = fs::read_to_string(&bundle_file).map_err(io_err(&bundle_file))?;
        let bundle: ProgramBundle = serde_json::from_str(&json).map_err(|e| PipelineError::Stage {
            stage: "load",
            source: Box::new(e),
        })?;
        let kinds: Vec<FeatureKind> = bundle.encodings.iter().map(|e| e.kind).collect();
        if schema_fingerprint(&kinds) != bundle.fingerprint {
            return Err(PipelineError::Schema("sidecar fingerprint does not match its encodings".into()));
        }
        Grammar::new(kinds).validate(&tokens).map_err(schema_error)?;
        if bundle.features.len() != segments.len() {
            return Err(PipelineError::Schema(format!(
                "program has {} features, sidecar describes {}",
                segments.len(),
                bundle.features.len()
            )));
        }
        let (columns, _) = dataset::encode_with(&table, &bundle.encodings, &bundle.target)
            .map_err(|e| PipelineError::Schema(e.to_string()))?;
        for (seg, spec) in segments.iter().zip(&bundle.features) {
            let Some(spec) = spec else {
                skipped += 1;
                continue;
            };
            if spec.segment != segment_text(seg) {
                return Err(PipelineError::Schema(format!(
                    "sidecar entry {:?} does not match program line {:?}",
                    spec.segment,
                    segment_text(seg)
                )));
            }
            let col = apply_spec(spec, &columns).stage("transform")?;
            generated.push((col.name, col.values));
        }
    } else {
        let feature_idx: Vec<usize> = (0..table.headers.len())
            .filter(|&i| Some(table.headers[i].as_str()) != target)
            .collect();
        let kinds: Vec<FeatureKind> = feature_idx
            .iter()
            .map(|&i| dataset::infer_kind(&table.column(i)))
            .collect();
        Grammar::new(kinds.clone()).validate(&tokens).map_err(schema_error)?;
        let columns = standalone_columns(&table, &feature_idx, &kinds)?;
        let n = table.rows.len();
        let ds = TabularDataset::from_columns(columns, vec![0.0; n], TaskKind::Regression);
        let program = FeatureProgram::from_segments(segments);
        let aug = apply_program(&program, &ds, usize::MAX);
        skipped = aug.rejected.len();
        generated = aug.generated.into_iter().map(|g| (g.column.name, g.column.values)).collect();
    }
    let rows: Vec<usize> = (0..table.rows.len()).collect();
    write_augmented_csv(&table, &rows, &generated, out_path).stage("transform")?;
    Ok(TransformSummary {
        rows: table.rows.len(),
        generated: generated.into_iter().map(|(n, _)| n).collect(),
        skipped,
    })
}

/// Encodes and standardizes feature columns of a file on its own rows.
fn standalone_columns(table: &RawTable, idx: &[usize], kinds: &[FeatureKind]) -> Result<Vec<FeatureColumn>> {
    let all: Vec<usize> = (0..table.rows.len()).collect();
    let mut columns = Vec::with_capacity(idx.len());
    for (&i, &kind) in idx.iter().zip(kinds) {
        let cells = table.column(i);
        let mut enc = ColumnEncoding {
            name: table.headers[i].clone(),
            kind,
            categories: Vec::new(),
            standardization: None,
        };
        if kind == FeatureKind::Discrete {
            enc.categories = dataset::sorted_labels(cells.iter().copied());
        }
        let raw: Vec<f64> = cells
            .iter()
            .enumerate()
            .map(|(r, c)| enc.encode_cell(c, r + 1))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| PipelineError::Schema(e.to_string()))?;
        if kind == FeatureKind::Continuous {
            enc.standardization = Some(dataset::train_moments(&raw, &all));
        }
        let values = cells
            .iter()
            .enumerate()
            .map(|(r, c)| enc.encode_cell(c, r + 1))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| PipelineError::Schema(e.to_string()))?;
        columns.push(FeatureColumn::new(enc.name.clone(), kind, values));
    }
    Ok(columns)
}

/// Splits and standardizes a CSV, trains `model` on the train split and
/// reports it on `split`.
pub fn evaluate_csv(
    data: &Path,
    target: &str,
    task: TaskKind,
    model: ModelKind,
    split: Split,
    fractions: (f64, f64, f64),
    master_seed: u64,
) -> Result<MetricReport> {
    let table = RawTable::read(data).stage("load")?;
    let ds = prepare(&table, target, task, fractions, master_seed).stage("load")?;
    evaluate_downstream(model, &ds, split, &DownstreamConfig::default(), seed::derive(master_seed, "downstream"))
        .stage("evaluate")
}
