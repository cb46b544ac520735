//! Config-driven runs, run comparison and the annotation-fraction sweep.
//!
//! A run directory holds `config.json`, `metrics.json`, `train_log.csv`,
//! `model.ckpt`, `selection.jsonl` and `scores_test.csv`. Student runs add
//! `pl_cache.json`, and a nested `teacher/` run when no teacher was supplied.
//! Runs are staged in a hidden sibling directory holding an `INCOMPLETE`
//! sentinel and renamed into place once every file is written.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::{load_dataset, pretty_json, reveal_weak_labels, subsample_annotations, AnnotationLevel, Dataset, Split, Subgroup};
use crate::error::{Error, IoContext, JsonContext, Result};
use crate::eval::{self, delong_paired_test, metrics_from_scores, read_scores_csv, write_scores_csv, EvalResult, ScoredStack, ALL_DOMAINS};
use crate::losses::LossConfig;
use crate::model::OptimizerConfig;
use crate::sampling::{write_manifest, PseudoLabelCache, Setting};
use crate::synthgen::{self, SynthConfig};
use crate::train::{self, write_train_log, LogRow, NoObserver, TrainOptions};
use crate::Model;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const INCOMPLETE_SENTINEL: &str = "INCOMPLETE";
/// `1` forces ordered gradient reduction, `0` allows the parallel one.
pub const DETERMINISTIC_ENV: &str = "SKD_DETERMINISTIC";

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const MANIFEST_FILE: &str = "selection.jsonl";
pub const SCORES_FILE: &str = "scores_test.csv";
pub const CACHE_FILE: &str = "pl_cache.json";
pub const TEACHER_DIR: &str = "teacher";

/// One experiment: a setting, a seed and everything needed to train it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub setting: Setting,
    pub seed: u64,
    /// Generator settings, used when `data` is unset.
    pub synth: SynthConfig,
    /// Saved dataset directory.
    pub data: Option<PathBuf>,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub train: TrainOptions,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            setting: Setting::Baseline,
            seed: 0,
            synth: SynthConfig::default(),
            data: None,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            train: TrainOptions::default(),
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).json_ctx("experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let cfg: Self = serde_json::from_str(&text).json_ctx(path.display().to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, pretty_json(self, "experiment config")?).at(path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.data.is_none() {
            self.synth.validate()?;
        }
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.train.arch.validate()
    }

    /// Applies `key=value` overrides addressed by dotted paths such as
    /// `optimizer.total_iterations`. Values are parsed as JSON, falling back
    /// to a plain string.
    pub fn with_overrides<K: AsRef<str>, V: AsRef<str>>(&self, overrides: &[(K, V)]) -> Result<Self> {
        let mut tree = serde_json::to_value(self).json_ctx("experiment config")?;
        for (key, raw) in overrides {
            let key = key.as_ref();
            let raw = raw.as_ref();
            let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let mut node = &mut tree;
            for part in key.split('.') {
                node = node
                    .as_object_mut()
                    .and_then(|o| o.get_mut(part))
                    .ok_or_else(|| Error::Config(format!("unknown config key {key}")))?;
            }
            *node = value;
        }
        let cfg: Self = serde_json::from_value(tree).json_ctx("config overrides")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Training options after applying [`DETERMINISTIC_ENV`].
    pub fn effective_train_options(&self) -> Result<TrainOptions> {
        let mut options = self.train.clone();
        if let Some(d) = deterministic_from_env()? {
            options.deterministic = d;
        }
        Ok(options)
    }
}

pub fn deterministic_from_env() -> Result<Option<bool>> {
    match std::env::var(DETERMINISTIC_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim() {
            "1" | "true" => Ok(Some(true)),
            "0" | "false" | "" => Ok(Some(false)),
            other => Err(Error::Config(format!("{DETERMINISTIC_ENV} must be 0 or 1, got {other:?}"))),
        },
    }
}

/// Loads `cfg.data`, or generates the synthetic dataset for `cfg.seed`.
pub fn resolve_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data {
        Some(dir) => load_dataset(dir),
        None => synthgen::generate_dataset(&cfg.synth, cfg.seed),
    }
}

/// Checks that `dataset` can support `setting`.
pub fn check_setting_data(setting: Setting, dataset: &Dataset) -> Result<()> {
    let train: Vec<_> = dataset.stacks_in(Split::Train).collect();
    if !train.iter().any(|s| s.annotation_level == AnnotationLevel::Full) {
        return Err(Error::EmptySelection);
    }
    if setting.uses_weak_labels() && !train.iter().any(|s| s.annotation_level == AnnotationLevel::Weak) {
        return Err(Error::Config(format!("setting {} needs weakly labelled train stacks", setting.cli_name())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub schema_version: u32,
    pub setting: Setting,
    pub seed: u64,
    pub dataset_hash: String,
    pub model_sha256: String,
    pub teacher_sha256: Option<String>,
    /// Selected slice counts by active loss group.
    pub selection: BTreeMap<String, usize>,
    pub final_loss: Option<LogRow>,
    pub test: EvalResult,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub metrics: RunMetrics,
}

/// A frozen teacher together with its pseudo-label scores on one dataset.
#[derive(Debug, Clone)]
pub struct PreparedTeacher {
    pub model: Model,
    pub cache: PseudoLabelCache,
    pub dataset_hash: String,
}

impl PreparedTeacher {
    pub fn new(model: Model, dataset: &Dataset, loss: &LossConfig) -> Result<Self> {
        let cache = train::compute_pseudo_labels(&model, dataset, loss.strict_eq1_gating)?;
        Ok(Self { model, cache, dataset_hash: dataset.content_hash()? })
    }

    /// Loads the teacher of a completed baseline run trained on `dataset`.
    pub fn from_run(dir: &Path, dataset: &Dataset, loss: &LossConfig) -> Result<Self> {
        let metrics = load_metrics(dir)?;
        if metrics.setting != Setting::Baseline {
            return Err(Error::InvalidArgument(format!(
                "teacher run {} is a {} run, not a baseline run",
                dir.display(),
                metrics.setting.cli_name()
            )));
        }
        let hash = dataset.content_hash()?;
        if metrics.dataset_hash != hash {
            return Err(Error::Incomparable(format!("teacher run {} was trained on a different dataset", dir.display())));
        }
        Self::new(load_run_model(dir)?, dataset, loss)
    }
}

fn staging_dir(out: &Path) -> Result<PathBuf> {
    let name = out
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("run directory {} has no final component", out.display())))?;
    Ok(out.with_file_name(format!(".{}.partial", name.to_string_lossy())))
}

/// Runs `body` inside a staging directory and renames it to `out` on success.
/// On failure the staging directory is left behind with its sentinel.
fn staged<R>(out: &Path, body: impl FnOnce(&Path) -> Result<R>) -> Result<R> {
    if out.exists() {
        return Err(Error::InvalidArgument(format!("{} already exists", out.display())));
    }
    let tmp = staging_dir(out)?;
    if tmp.exists() {
        fs::remove_dir_all(&tmp).at(&tmp)?;
    }
    fs::create_dir_all(&tmp).at(&tmp)?;
    let sentinel = tmp.join(INCOMPLETE_SENTINEL);
    fs::write(&sentinel, b"run did not finish\n").at(&sentinel)?;
    let value = body(&tmp)?;
    fs::remove_file(&sentinel).at(&sentinel)?;
    fs::rename(&tmp, out).at(out)?;
    Ok(value)
}

fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    fs::write(path, pretty_json(value, &path.display().to_string())?).at(path)
}

fn string_keys(summary: BTreeMap<&'static str, usize>) -> BTreeMap<String, usize> {
    summary.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn execute(cfg: &ExperimentConfig, dataset: &Dataset, teacher: Option<&PreparedTeacher>, dir: &Path) -> Result<(RunMetrics, Model)> {
    cfg.save(&dir.join(CONFIG_FILE))?;
    let options = cfg.effective_train_options()?;
    let hash = dataset.content_hash()?;
    let (outcome, teacher_sha) = if cfg.setting == Setting::Baseline {
        (train::train_teacher(dataset, &cfg.optimizer, &cfg.loss, &options, cfg.seed, &mut NoObserver)?, None)
    } else {
        let owned;
        let t = match teacher {
            Some(t) => {
                if t.dataset_hash != hash {
                    return Err(Error::Incomparable("teacher pseudo-labels were computed on a different dataset".into()));
                }
                t
            }
            None => {
                let base = ExperimentConfig { setting: Setting::Baseline, ..cfg.clone() };
                let (_, model) = staged(&dir.join(TEACHER_DIR), |d| execute(&base, dataset, None, d))?;
                owned = PreparedTeacher::new(model, dataset, &cfg.loss)?;
                &owned
            }
        };
        let before = t.model.param_hash();
        let outcome = train::train_student(&t.model, dataset, cfg.setting, &t.cache, &cfg.optimizer, &cfg.loss, &options, cfg.seed, &mut NoObserver)?;
        if t.model.param_hash() != before {
            return Err(Error::InvalidArgument("teacher parameters changed during student training".into()));
        }
        t.cache.save(&dir.join(CACHE_FILE))?;
        (outcome, Some(before))
    };
    outcome.model.save_checkpoint(&dir.join(CHECKPOINT_FILE))?;
    write_train_log(&outcome.log, &dir.join(TRAIN_LOG_FILE))?;
    write_manifest(&outcome.selections, &dir.join(MANIFEST_FILE))?;
    let (test, scores) = eval::evaluate(&outcome.model, dataset, Split::Test)?;
    write_scores_csv(&scores, &dir.join(SCORES_FILE))?;
    let metrics = RunMetrics {
        schema_version: CONFIG_SCHEMA_VERSION,
        setting: cfg.setting,
        seed: cfg.seed,
        dataset_hash: hash,
        model_sha256: outcome.model.param_hash(),
        teacher_sha256: teacher_sha,
        selection: string_keys(train::selection_summary(&outcome.selections)),
        final_loss: outcome.log.last().copied(),
        test,
    };
    write_json(&metrics, &dir.join(METRICS_FILE))?;
    Ok((metrics, outcome.model))
}

/// Trains and evaluates `cfg.setting` into the run directory `out`.
///
/// Non-baseline settings use `teacher` when given, and otherwise train a
/// baseline teacher first into `out/teacher`.
pub fn run_setting(cfg: &ExperimentConfig, dataset: &Dataset, teacher: Option<&PreparedTeacher>, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    check_setting_data(cfg.setting, dataset)?;
    let (metrics, _) = staged(out, |dir| execute(cfg, dataset, teacher, dir))?;
    Ok(RunSummary { dir: out.to_path_buf(), metrics })
}

/// Runs the baseline once into `out/baseline` and every other requested
/// setting into `out/<setting>` against that shared teacher.
pub fn run_settings(cfg: &ExperimentConfig, dataset: &Dataset, settings: &[Setting], out: &Path) -> Result<Vec<RunSummary>> {
    fs::create_dir_all(out).at(out)?;
    let base_cfg = ExperimentConfig { setting: Setting::Baseline, ..cfg.clone() };
    base_cfg.validate()?;
    check_setting_data(Setting::Baseline, dataset)?;
    let base_dir = out.join(Setting::Baseline.cli_name());
    let (metrics, model) = staged(&base_dir, |dir| execute(&base_cfg, dataset, None, dir))?;
    let teacher = PreparedTeacher::new(model, dataset, &cfg.loss)?;
    let mut runs = Vec::with_capacity(settings.len());
    if settings.contains(&Setting::Baseline) {
        runs.push(RunSummary { dir: base_dir, metrics });
    }
    for &setting in settings.iter().filter(|&&s| s != Setting::Baseline) {
        let run_cfg = ExperimentConfig { setting, ..cfg.clone() };
        runs.push(run_setting(&run_cfg, dataset, Some(&teacher), &out.join(setting.cli_name()))?);
    }
    Ok(runs)
}

fn ensure_complete(dir: &Path) -> Result<()> {
    if dir.join(INCOMPLETE_SENTINEL).exists() {
        return Err(Error::InvalidArgument(format!("run {} is incomplete", dir.display())));
    }
    if !dir.join(METRICS_FILE).is_file() {
        return Err(Error::MissingFile(dir.join(METRICS_FILE)));
    }
    Ok(())
}

pub fn load_metrics(dir: &Path) -> Result<RunMetrics> {
    ensure_complete(dir)?;
    let path = dir.join(METRICS_FILE);
    serde_json::from_slice(&fs::read(&path).at(&path)?).json_ctx(path.display().to_string())
}

pub fn load_run_config(dir: &Path) -> Result<ExperimentConfig> {
    ensure_complete(dir)?;
    ExperimentConfig::load(&dir.join(CONFIG_FILE))
}

pub fn load_run_model(dir: &Path) -> Result<Model> {
    ensure_complete(dir)?;
    Model::load_checkpoint(&dir.join(CHECKPOINT_FILE))
}

pub fn load_run_scores(dir: &Path) -> Result<Vec<ScoredStack>> {
    ensure_complete(dir)?;
    read_scores_csv(&dir.join(SCORES_FILE))
}

/// Test metrics recomputed from the persisted stack scores alone.
pub fn metrics_from_run_scores(dir: &Path) -> Result<EvalResult> {
    metrics_from_scores(&load_run_scores(dir)?, Some(Split::Test))
}

#[derive(Debug, Clone)]
pub struct Reevaluation {
    pub stored: RunMetrics,
    pub fresh: EvalResult,
    pub scores: Vec<ScoredStack>,
    /// Largest absolute AUC or CI difference against the stored metrics.
    pub max_abs_diff: f64,
}

/// Re-scores a run's checkpoint on `dataset`, which must be the dataset the
/// run was trained on.
pub fn reevaluate_run(dir: &Path, dataset: &Dataset) -> Result<Reevaluation> {
    let stored = load_metrics(dir)?;
    if dataset.content_hash()? != stored.dataset_hash {
        return Err(Error::Incomparable(format!("{} was evaluated on a different dataset", dir.display())));
    }
    let model = load_run_model(dir)?;
    let (fresh, scores) = eval::evaluate(&model, dataset, Split::Test)?;
    let mut max_abs_diff: f64 = 0.0;
    for (key, m) in &fresh.domains {
        let old = stored.test.domains.get(key).ok_or_else(|| Error::Incomparable(format!("stored metrics lack {key}")))?;
        for (a, b) in [(m.auc, old.auc), (m.ci_low, old.ci_low), (m.ci_high, old.ci_high)] {
            match (a, b) {
                (Some(a), Some(b)) => max_abs_diff = max_abs_diff.max((a - b).abs()),
                (None, None) => {}
                _ => max_abs_diff = f64::INFINITY,
            }
        }
    }
    Ok(Reevaluation { stored, fresh, scores, max_abs_diff })
}

/// One (run, domain) cell of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub run: String,
    pub setting: Setting,
    pub seed: u64,
    pub domain: String,
    pub auc: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
    /// Paired DeLong p-value against the first run on the same domain.
    pub p_vs_first: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Comparison {
    pub records: Vec<ComparisonRecord>,
}

impl Comparison {
    pub fn runs(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.run.as_str()) {
                out.push(&r.run);
            }
        }
        out
    }

    pub fn domains(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.domain.as_str()) {
                out.push(&r.domain);
            }
        }
        out
    }

    pub fn get(&self, run: &str, domain: &str) -> Option<&ComparisonRecord> {
        self.records.iter().find(|r| r.run == run && r.domain == domain)
    }

    /// Fixed-width table with one row per run and `AUC [CI] (p)` cells.
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
        let runs = self.runs();
        let domains = self.domains();
        let name_w = runs.iter().map(|r| r.len()).max().unwrap_or(3).max(3);
        let mut out = format!("{:name_w$}  {:13}", "run", "setting");
        for d in &domains {
            let _ = write!(out, "  {d:31}");
        }
        out.push('\n');
        for run in runs {
            let first = self.records.iter().find(|r| r.run == run).expect("run has records");
            let _ = write!(out, "{run:name_w$}  {:13}", first.setting.display_name());
            for d in &domains {
                let cell = match self.get(run, d) {
                    Some(r) => {
                        let mut c = format!("{} [{}, {}]", fmt(r.auc), fmt(r.ci_low), fmt(r.ci_high));
                        if let Some(p) = r.p_vs_first {
                            let _ = write!(c, " p={p:.3}");
                        }
                        c
                    }
                    None => "-".to_string(),
                };
                let _ = write!(out, "  {cell:31}");
            }
            out.truncate(out.trim_end().len());
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv_rows(&self.records, path)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Ok(Self { records: read_csv_rows(path)? })
    }
}

fn write_csv_rows<S: Serialize>(rows: &[S], path: &Path) -> Result<()> {
    let err = |e: String| Error::Csv { context: path.display().to_string(), message: e };
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| err(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| err(e.to_string()))?;
    fs::write(path, bytes).at(path)
}

fn read_csv_rows<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<S>> {
    let err = |e: csv::Error| Error::Csv { context: path.display().to_string(), message: e.to_string() };
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    r.deserialize().collect::<std::result::Result<Vec<S>, _>>().map_err(err)
}

fn run_label(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Builds the per-domain comparison of completed runs. All runs must share
/// the dataset hash; p-values pair each run's test scores with the first's.
pub fn compare_runs(dirs: &[PathBuf]) -> Result<Comparison> {
    let first_dir = dirs.first().ok_or_else(|| Error::InvalidArgument("no runs to compare".into()))?;
    let loaded: Vec<(RunMetrics, Vec<ScoredStack>)> =
        dirs.iter().map(|d| Ok((load_metrics(d)?, load_run_scores(d)?))).collect::<Result<_>>()?;
    let reference_hash = &loaded[0].0.dataset_hash;
    for (dir, (m, _)) in dirs.iter().zip(&loaded) {
        if &m.dataset_hash != reference_hash {
            return Err(Error::Incomparable(format!(
                "{} and {} were evaluated on different datasets",
                first_dir.display(),
                dir.display()
            )));
        }
    }
    let mut labels: Vec<String> = dirs.iter().map(|d| run_label(d)).collect();
    // disambiguate runs whose directories share a final component
    for i in 0..labels.len() {
        if labels.iter().filter(|l| **l == labels[i]).count() > 1 {
            labels[i] = dirs[i].display().to_string();
        }
    }

    let first_scores = &loaded[0].1;
    let mut records = Vec::new();
    for (i, (metrics, scores)) in loaded.iter().enumerate() {
        let by_id: BTreeMap<&str, f64> = scores.iter().map(|s| (s.stack_id.as_str(), s.score)).collect();
        for (domain, m) in &metrics.test.domains {
            let p_vs_first = if i == 0 {
                None
            } else {
                let reference: Vec<&ScoredStack> =
                    first_scores.iter().filter(|s| domain == ALL_DOMAINS || s.domain.as_str() == domain).collect();
                let paired: Option<Vec<f64>> = reference.iter().map(|s| by_id.get(s.stack_id.as_str()).copied()).collect();
                let paired = paired.ok_or_else(|| Error::Incomparable(format!("{} scored a different set of stacks", dirs[i].display())))?;
                let a: Vec<f64> = reference.iter().map(|s| s.score).collect();
                let y: Vec<u8> = reference.iter().map(|s| s.label).collect();
                match delong_paired_test(&a, &paired, &y) {
                    Ok(t) => Some(t.p_value),
                    Err(Error::Statistics(_)) => None,
                    Err(e) => return Err(e),
                }
            };
            records.push(ComparisonRecord {
                run: labels[i].clone(),
                setting: metrics.setting,
                seed: metrics.seed,
                domain: domain.clone(),
                auc: m.auc,
                ci_low: m.ci_low,
                ci_high: m.ci_high,
                n_pos: m.n_pos,
                n_neg: m.n_neg,
                p_vs_first,
            });
        }
    }
    Ok(Comparison { records })
}

/// Settings evaluated at every sweep point, in order. The baseline doubles as
/// the teacher of the other two.
pub const SWEEP_SETTINGS: [Setting; 3] = [Setting::Baseline, Setting::Selective, Setting::SelectiveWeak];

/// Parses `a..b` (inclusive, step 0.1) or a comma-separated list. Fractions
/// must be strictly increasing multiples of 0.1 in `[0.1, 1.0]`.
pub fn parse_fractions(spec: &str) -> Result<Vec<f64>> {
    let bad = |why: &str| Error::InvalidArgument(format!("fractions {spec:?}: {why}"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(&format!("{:?} is not a number", s.trim())));
    let tenths = |x: f64| -> Result<u32> {
        let t = (x * 10.0).round();
        if (x * 10.0 - t).abs() > 1e-6 || !(1.0..=10.0).contains(&t) {
            return Err(bad(&format!("{x} is not one of 0.1, 0.2, ..., 1.0")));
        }
        Ok(t as u32)
    };
    let steps: Vec<u32> = match spec.split_once("..") {
        Some((a, b)) => (tenths(num(a)?)?..=tenths(num(b)?)?).collect(),
        None => spec.split(',').map(|s| num(s).and_then(tenths)).collect::<Result<_>>()?,
    };
    if steps.is_empty() {
        return Err(bad("empty range"));
    }
    if steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(bad("not strictly increasing"));
    }
    Ok(steps.into_iter().map(|t| f64::from(t) / 10.0).collect())
}

/// One cell of the sweep: a (seed, fraction, setting) training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub fraction: f64,
    pub setting: Setting,
    /// Train stacks that kept their full annotation.
    pub n_annotated: usize,
    /// Pooled test AUC.
    pub auc: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub error: Option<String>,
}

/// Seed aggregate of one (fraction, setting) point; the interval is
/// `mean ± 1.96 · sd / sqrt(n)` over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub setting: Setting,
    pub n_seeds: usize,
    pub mean_auc: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn from_rows(rows: Vec<SweepRow>) -> Self {
        let mut keys: Vec<(f64, Setting)> = Vec::new();
        for r in &rows {
            if !keys.iter().any(|&(f, s)| f == r.fraction && s == r.setting) {
                keys.push((r.fraction, r.setting));
            }
        }
        keys.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1 as u8).cmp(&(b.1 as u8))));
        let summary = keys
            .into_iter()
            .map(|(fraction, setting)| {
                let v: Vec<f64> = rows.iter().filter(|r| r.fraction == fraction && r.setting == setting).filter_map(|r| r.auc).collect();
                let n = v.len();
                let mean = (n > 0).then(|| v.iter().sum::<f64>() / n as f64);
                let half = mean.filter(|_| n > 1).map(|m| {
                    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
                    1.96 * (var / n as f64).sqrt()
                });
                SweepPoint {
                    fraction,
                    setting,
                    n_seeds: n,
                    mean_auc: mean,
                    ci_low: mean.zip(half).map(|(m, h)| m - h),
                    ci_high: mean.zip(half).map(|(m, h)| m + h),
                }
            })
            .collect();
        Self { rows, summary }
    }

    pub fn mean_auc(&self, setting: Setting, fraction: f64) -> Option<f64> {
        self.summary.iter().find(|p| p.setting == setting && (p.fraction - fraction).abs() < 1e-9).and_then(|p| p.mean_auc)
    }

    pub fn failures(&self) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(|r| r.error.is_some())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv_rows(&self.rows, path)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Ok(Self::from_rows(read_csv_rows(path)?))
    }

    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        write_csv_rows(&self.summary, path)
    }
}

fn count_full_train(dataset: &Dataset) -> usize {
    dataset.stacks_in(Split::Train).filter(|s| s.annotation_level == AnnotationLevel::Full).count()
}

/// Requires at least ten fully annotated train stacks in every subgroup.
fn check_sweep_source(dataset: &Dataset) -> Result<()> {
    for g in Subgroup::ALL {
        let n = dataset
            .stacks_in(Split::Train)
            .filter(|s| s.annotation_level == AnnotationLevel::Full && dataset.subgroup_of(&s.id) == Some(g))
            .count();
        if n < 10 {
            return Err(Error::Config(format!("sweep needs >= 10 annotated {} train stacks, found {n}", g.as_str())));
        }
    }
    Ok(())
}

fn eval_row(seed: u64, fraction: f64, setting: Setting, n_annotated: usize, result: Result<EvalResult>) -> SweepRow {
    match result {
        Ok(r) => {
            let m = r.domains.get(ALL_DOMAINS);
            SweepRow {
                seed,
                fraction,
                setting,
                n_annotated,
                auc: m.and_then(|m| m.auc),
                ci_low: m.and_then(|m| m.ci_low),
                ci_high: m.and_then(|m| m.ci_high),
                error: None,
            }
        }
        Err(e) => SweepRow { seed, fraction, setting, n_annotated, auc: None, ci_low: None, ci_high: None, error: Some(e.to_string()) },
    }
}

/// Sweep cells of one seed and fraction; a failed teacher fails its students.
fn sweep_cell(base: &ExperimentConfig, dataset: &Dataset, fraction: f64, seed: u64, settings: &[Setting]) -> Vec<SweepRow> {
    let ds = match subsample_annotations(dataset, fraction, seed) {
        Ok(ds) => ds,
        Err(e) => {
            return settings.iter().map(|&s| eval_row(seed, fraction, s, 0, Err(Error::InvalidArgument(e.to_string())))).collect();
        }
    };
    let n_annotated = count_full_train(&ds);
    let options = match base.effective_train_options() {
        Ok(o) => o,
        Err(e) => return settings.iter().map(|&s| eval_row(seed, fraction, s, n_annotated, Err(Error::Config(e.to_string())))).collect(),
    };
    let teacher = train::train_teacher::<crate::Real>(&ds, &base.optimizer, &base.loss, &options, seed, &mut NoObserver);
    let mut rows = Vec::new();
    let teacher = match teacher {
        Ok(t) => t.model,
        Err(e) => {
            let msg = e.to_string();
            return settings
                .iter()
                .map(|&s| eval_row(seed, fraction, s, n_annotated, Err(Error::InvalidArgument(format!("teacher failed: {msg}")))))
                .collect();
        }
    };
    for &setting in settings {
        let result = (|| -> Result<EvalResult> {
            if setting == Setting::Baseline {
                return Ok(eval::evaluate(&teacher, &ds, Split::Test)?.0);
            }
            let student_ds = if setting.uses_weak_labels() { reveal_weak_labels(&ds) } else { ds.clone() };
            let cache = train::compute_pseudo_labels(&teacher, &student_ds, base.loss.strict_eq1_gating)?;
            let outcome =
                train::train_student(&teacher, &student_ds, setting, &cache, &base.optimizer, &base.loss, &options, seed, &mut NoObserver)?;
            Ok(eval::evaluate(&outcome.model, &student_ds, Split::Test)?.0)
        })();
        rows.push(eval_row(seed, fraction, setting, n_annotated, result));
    }
    rows
}

/// Annotation-fraction sweep over the given settings (the baseline is always
/// trained, as teacher). Subsampling is nested across fractions per seed.
/// Failed cells are recorded with their error and skipped. When `out` is set,
/// writes `config.json`, `sweep.csv`, `sweep_summary.csv` and `sweep.svg`.
pub fn run_sweep_settings(
    base: &ExperimentConfig,
    fractions: &[f64],
    seeds: &[u64],
    settings: &[Setting],
    out: Option<&Path>,
    mut progress: impl FnMut(&SweepRow),
) -> Result<SweepResult> {
    base.validate()?;
    if fractions.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one fraction and one seed".into()));
    }
    if fractions.windows(2).any(|w| w[0] >= w[1]) || fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(Error::InvalidArgument("sweep fractions must be strictly increasing within (0, 1]".into()));
    }
    let mut settings: Vec<Setting> = settings.to_vec();
    if !settings.contains(&Setting::Baseline) {
        settings.insert(0, Setting::Baseline);
    }
    let shared = match &base.data {
        Some(dir) => Some(load_dataset(dir)?),
        None => None,
    };
    let mut rows = Vec::new();
    for &seed in seeds {
        let generated;
        let dataset = match &shared {
            Some(ds) => ds,
            None => {
                generated = synthgen::generate_dataset(&base.synth, seed)?;
                &generated
            }
        };
        check_sweep_source(dataset)?;
        for &fraction in fractions {
            for row in sweep_cell(base, dataset, fraction, seed, &settings) {
                progress(&row);
                rows.push(row);
            }
        }
    }
    let result = SweepResult::from_rows(rows);
    if let Some(dir) = out {
        fs::create_dir_all(dir).at(dir)?;
        base.save(&dir.join(CONFIG_FILE))?;
        result.write_csv(&dir.join("sweep.csv"))?;
        result.write_summary_csv(&dir.join("sweep_summary.csv"))?;
        fs::write(dir.join("sweep.svg"), render_sweep_svg(&result)).at(dir.join("sweep.svg"))?;
    }
    Ok(result)
}

/// [`run_sweep_settings`] over [`SWEEP_SETTINGS`].
pub fn run_sweep(base: &ExperimentConfig, fractions: &[f64], seeds: &[u64], out: Option<&Path>) -> Result<SweepResult> {
    run_sweep_settings(base, fractions, seeds, &SWEEP_SETTINGS, out, |_| {})
}

fn series_color(setting: Setting) -> &'static str {
    match setting {
        Setting::Baseline => "#444444",
        Setting::Kd => "#8c564b",
        Setting::KdWeak => "#9467bd",
        Setting::Selective => "#1f77b4",
        Setting::SelectiveWeak => "#d62728",
    }
}

/// Line plot of seed-mean AUC against annotated fraction, one line per
/// setting, with the plotted numbers embedded as CSV in a comment.
pub fn render_sweep_svg(result: &SweepResult) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const L: f64 = 70.0;
    const R: f64 = 170.0;
    const T: f64 = 30.0;
    const B: f64 = 60.0;
    let points: Vec<&SweepPoint> = result.summary.iter().filter(|p| p.mean_auc.is_some()).collect();
    let (mut lo, mut hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let m = p.mean_auc.expect("filtered");
        (lo.min(p.ci_low.unwrap_or(m)), hi.max(p.ci_high.unwrap_or(m)))
    });
    if !lo.is_finite() {
        (lo, hi) = (0.5, 1.0);
    }
    lo = ((lo - 0.01) * 20.0).floor() / 20.0;
    hi = ((hi + 0.01) * 20.0).ceil() / 20.0;
    (lo, hi) = (lo.max(0.0), hi.min(1.0));
    if hi - lo < 0.05 {
        hi = (lo + 0.05).min(1.0);
        lo = hi - 0.05;
    }
    let x = |f: f64| L + f * (W - L - R);
    let y = |a: f64| H - B - (a - lo) / (hi - lo) * (H - T - B);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    s.push_str("<!-- data\nfraction,setting,n_seeds,mean_auc,ci_low,ci_high\n");
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
    for p in &result.summary {
        let _ = writeln!(s, "{},{},{},{},{},{}", p.fraction, p.setting.cli_name(), p.n_seeds, opt(p.mean_auc), opt(p.ci_low), opt(p.ci_high));
    }
    s.push_str("-->\n");
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<line x1="{L}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - B, W - R, H - B);
    let _ = writeln!(s, r#"<line x1="{L}" y1="{T}" x2="{L}" y2="{}" stroke="black"/>"#, H - B);
    for i in 0..=10 {
        let f = f64::from(i) / 10.0;
        let _ = writeln!(s, r#"<line x1="{0:.1}" y1="{1}" x2="{0:.1}" y2="{2}" stroke="black"/>"#, x(f), H - B, H - B + 5.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}%</text>"#, x(f), H - B + 20.0, i * 10);
    }
    let n_ticks = ((hi - lo) / 0.05).round() as usize;
    for i in 0..=n_ticks {
        let a = lo + 0.05 * i as f64;
        let _ = writeln!(s, r##"<line x1="{}" y1="{1:.1}" x2="{2}" y2="{1:.1}" stroke="#dddddd"/>"##, L, y(a), W - R);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{a:.2}</text>"#, L - 8.0, y(a) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">annotated exams in training</text>"#, (L + W - R) / 2.0, H - 15.0);
    let _ = writeln!(s, r#"<text x="18" y="{0:.1}" text-anchor="middle" transform="rotate(-90 18 {0:.1})">test AUC</text>"#, (T + H - B) / 2.0);

    let mut settings: Vec<Setting> = Vec::new();
    for p in &points {
        if !settings.contains(&p.setting) {
            settings.push(p.setting);
        }
    }
    for (k, setting) in settings.iter().enumerate() {
        let color = series_color(*setting);
        let series: Vec<&&SweepPoint> = points.iter().filter(|p| p.setting == *setting).collect();
        let path: Vec<String> = series.iter().map(|p| format!("{:.1},{:.1}", x(p.fraction), y(p.mean_auc.expect("filtered")))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for p in series {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, x(p.fraction), y(p.mean_auc.expect("filtered")));
        }
        let ly = T + 20.0 * k as f64 + 10.0;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, W - R + 15.0, W - R + 40.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, W - R + 45.0, ly + 4.0, setting.display_name());
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fraction_ranges() {
        assert_eq!(parse_fractions("0.1..0.4").unwrap(), vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(parse_fractions("0.1..1.0").unwrap().len(), 10);
        assert_eq!(parse_fractions("0.2, 0.5,1").unwrap(), vec![0.2, 0.5, 1.0]);
        assert!(parse_fractions("0.5..0.2").is_err());
        assert!(parse_fractions("0.3,0.2").is_err());
        assert!(parse_fractions("0.25").is_err());
        assert!(parse_fractions("0").is_err());
        assert!(parse_fractions("x").is_err());
    }

    #[test]
    fn overrides_follow_dotted_paths() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&[("optimizer.total_iterations", "7"), ("setting", "selective_weak"), ("loss.t_weak", "0.25")])
            .unwrap();
        assert_eq!(cfg.optimizer.total_iterations, 7);
        assert_eq!(cfg.setting, Setting::SelectiveWeak);
        assert_eq!(cfg.loss.t_weak, 0.25);
        assert!(ExperimentConfig::default().with_overrides(&[("optimizer.nope", "1")]).is_err());
        assert!(ExperimentConfig::default().with_overrides(&[("loss.t_weak", "2.0")]).is_err());
    }

    #[test]
    fn config_json_round_trip_and_schema_check() {
        let cfg = ExperimentConfig { seed: 9, setting: Setting::Kd, ..Default::default() };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 99}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
        // missing keys take their defaults
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn sweep_summary_statistics() {
        let row = |seed, fraction, auc: Option<f64>| SweepRow {
            seed,
            fraction,
            setting: Setting::Baseline,
            n_annotated: 0,
            auc,
            ci_low: None,
            ci_high: None,
            error: auc.is_none().then(|| "failed".to_string()),
        };
        let r = SweepResult::from_rows(vec![row(0, 0.5, Some(0.8)), row(1, 0.5, Some(0.9)), row(2, 0.5, None), row(0, 0.1, Some(0.6))]);
        assert_eq!(r.summary.len(), 2);
        assert_eq!(r.summary[0].fraction, 0.1);
        assert_eq!(r.summary[0].ci_low, None);
        let p = &r.summary[1];
        assert_eq!(p.n_seeds, 2);
        assert!((p.mean_auc.unwrap() - 0.85).abs() < 1e-12);
        let half = 1.96 * (0.005f64 / 2.0).sqrt();
        assert!((p.ci_high.unwrap() - (0.85 + half)).abs() < 1e-12);
        assert_eq!(r.failures().count(), 1);
        let svg = render_sweep_svg(&r);
        assert!(svg.starts_with("<svg") && svg.contains("0.5,baseline,2,0.850000"));
        assert!(!svg.contains("--\n0"));
    }
}
