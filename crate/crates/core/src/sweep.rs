//! Random search over zero-shot configurations with per-trial bookkeeping.
//!
//! Draws come from SHA-256 of (seed, trial index, dimension name), so any
//! trial can be regenerated alone and categorical choices involve no
//! floating point.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::Dataset;
use crate::evaluation::{self, EvalError};
use crate::fsutil::{to_json_bytes, write_atomic};
use crate::gateway::{sha256, Gateway};
use crate::stats::{summarise_defined, QuartileSummary};
use crate::taxonomy::CleanLabelSet;
use crate::zeroshot::{self, batch_items, Engine, MappingApproach, Pipeline, PromptSpec, RunContext, ZeroShotError};

pub const DEFAULT_TRIALS: usize = 30;

#[derive(Debug, thiserror::Error)]
pub enum SweepError {
    #[error("search space has no dimensions")]
    EmptySpace,
    #[error("dimension {0:?} has no values")]
    EmptyDimension(String),
    #[error("dimension {0:?} is declared twice")]
    DuplicateDimension(String),
    #[error("log-uniform dimension {name:?} needs 0 < min <= max, got [{min}, {max}]")]
    BadRange { name: String, min: f64, max: f64 },
    #[error("at least one trial is required")]
    NoTrials,
    #[error("no trial completed with a score")]
    NoCompletedTrials,
    #[error("trial {trial_id}: {message}")]
    Trial { trial_id: String, message: String },
    #[error("trial {0} exists with a different configuration")]
    ConfigChanged(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("external results: {0}")]
    External(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SweepError + '_ {
    move |source| SweepError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogUniform {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SearchSpace {
    #[serde(default)]
    pub categorical: BTreeMap<String, Vec<Value>>,
    #[serde(default)]
    pub log_uniform: BTreeMap<String, LogUniform>,
}

impl SearchSpace {
    pub fn validate(&self) -> Result<(), SweepError> {
        if self.categorical.is_empty() && self.log_uniform.is_empty() {
            return Err(SweepError::EmptySpace);
        }
        for (name, values) in &self.categorical {
            if values.is_empty() {
                return Err(SweepError::EmptyDimension(name.clone()));
            }
            if self.log_uniform.contains_key(name) {
                return Err(SweepError::DuplicateDimension(name.clone()));
            }
        }
        for (name, r) in &self.log_uniform {
            if !(r.min > 0.0 && r.min <= r.max && r.max.is_finite()) {
                return Err(SweepError::BadRange { name: name.clone(), min: r.min, max: r.max });
            }
        }
        Ok(())
    }

    /// Zero-shot space over the given prompt ids: mapping approach, token
    /// budget, prompt and rewording.
    pub fn zero_shot(pipeline: Pipeline, prompt_ids: &[String]) -> Self {
        let mut categorical = BTreeMap::new();
        categorical.insert("mapping_approach".into(), vec![Value::from("direct"), Value::from("via_clean")]);
        categorical.insert("reword".into(), vec![Value::from(true), Value::from(false)]);
        if pipeline == Pipeline::Generative {
            categorical.insert("max_new_tokens".into(), [5, 10, 20, 40].map(Value::from).to_vec());
            categorical.insert("prompt_id".into(), prompt_ids.iter().map(|p| Value::from(p.as_str())).collect());
        }
        SearchSpace { categorical, log_uniform: BTreeMap::new() }
    }
}

/// 64 uniform bits for (seed, trial, dimension).
pub fn draw_u64(seed: u64, trial: u32, dimension: &str) -> u64 {
    let digest = sha256(&[&seed.to_le_bytes(), &trial.to_le_bytes(), dimension.as_bytes()]);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Uniform in [0, 1) from the top 53 bits of a draw.
pub fn draw_unit(seed: u64, trial: u32, dimension: &str) -> f64 {
    (draw_u64(seed, trial, dimension) >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub trial_id: String,
    pub index: u32,
    pub seed: u64,
    pub values: BTreeMap<String, Value>,
}

pub fn trial_id(index: u32) -> String {
    format!("trial-{index:03}")
}

pub fn sample_trial(space: &SearchSpace, seed: u64, index: u32) -> TrialConfig {
    let mut values = BTreeMap::new();
    for (name, options) in &space.categorical {
        let k = (draw_u64(seed, index, name) % options.len() as u64) as usize;
        values.insert(name.clone(), options[k].clone());
    }
    for (name, r) in &space.log_uniform {
        let (lo, hi) = (r.min.log10(), r.max.log10());
        let v = 10f64.powf(lo + (hi - lo) * draw_unit(seed, index, name)).clamp(r.min, r.max);
        values.insert(name.clone(), Value::from(v));
    }
    TrialConfig { trial_id: trial_id(index), index, seed, values }
}

pub fn sample_trials(space: &SearchSpace, n: usize, seed: u64) -> Result<Vec<TrialConfig>, SweepError> {
    space.validate()?;
    if n == 0 {
        return Err(SweepError::NoTrials);
    }
    Ok((0..n as u32).map(|i| sample_trial(space, seed, i)).collect())
}

fn default_trials() -> usize {
    DEFAULT_TRIALS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub pipeline: Pipeline,
    #[serde(default = "default_trials")]
    pub n_trials: usize,
    pub seed: u64,
    /// Defaults to [`SearchSpace::zero_shot`] over every loaded prompt.
    #[serde(default)]
    pub space: Option<SearchSpace>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial_id: String,
    pub index: u32,
    pub status: TrialStatus,
    /// Median per-participant κ on the validation participants.
    pub median_val_kappa: Option<f64>,
    /// Relative to the sweep directory.
    pub report_path: Option<String>,
    pub cause: Option<String>,
    pub config: TrialConfig,
    /// True when an earlier run already completed this trial.
    #[serde(skip)]
    pub resumed: bool,
}

/// Everything a trial needs besides its configuration.
pub struct TrialEnv<'a> {
    pub dataset: &'a Dataset,
    pub participants: &'a BTreeSet<String>,
    pub image_root: &'a Path,
    pub engine: Engine<'a>,
    pub clean: Option<&'a CleanLabelSet>,
    pub prompts: &'a [PromptSpec],
    pub concurrency: usize,
}

impl TrialEnv<'_> {
    fn target_gateway(&self) -> &Gateway {
        match self.engine {
            Engine::DualEncoder { encoder } => encoder,
            Engine::Generative { text_encoder, .. } => text_encoder,
        }
    }

    fn pipeline(&self) -> Pipeline {
        match self.engine {
            Engine::DualEncoder { .. } => Pipeline::DualEncoder,
            Engine::Generative { .. } => Pipeline::Generative,
        }
    }
}

fn value_str<'v>(values: &'v BTreeMap<String, Value>, key: &str) -> Option<&'v str> {
    values.get(key).and_then(Value::as_str)
}

/// Runs the trial's batch and evaluation; `Err` carries the failure cause.
fn execute(config: &TrialConfig, env: &TrialEnv<'_>, dir: &Path) -> Result<evaluation::EvalReport, String> {
    let v = &config.values;
    let approach: MappingApproach = value_str(v, "mapping_approach").unwrap_or("direct").parse()?;
    let reworded = v.get("reword").and_then(Value::as_bool).unwrap_or(true);
    let ctx = match env.pipeline() {
        Pipeline::DualEncoder => RunContext::dual_encoder(&config.trial_id),
        Pipeline::Generative => {
            let prompt_id = value_str(v, "prompt_id").ok_or("generative trial without prompt_id")?;
            let prompt = env
                .prompts
                .iter()
                .find(|p| p.id == prompt_id)
                .ok_or_else(|| format!("unknown prompt id {prompt_id:?}"))?;
            let tokens = v
                .get("max_new_tokens")
                .and_then(Value::as_u64)
                .ok_or("generative trial without max_new_tokens")?;
            RunContext::generative(&config.trial_id, prompt.clone(), tokens as u32)
        }
    };
    let targets = zeroshot::build_targets(approach, reworded, env.clean, env.target_gateway())
        .map_err(|e: ZeroShotError| e.to_string())?;
    let items = batch_items(env.dataset, Some(env.participants), env.image_root);
    let out = dir.join("predictions.jsonl");
    let outcome = zeroshot::run_batch(&items, &targets, &env.engine, &ctx, &out, env.concurrency)
        .map_err(|e| e.to_string())?;
    if outcome.failing {
        return Err(format!("{} of {} items failed", outcome.n_failed, outcome.n_items));
    }
    let preds = zeroshot::read_predictions(&out).map_err(|e| e.to_string())?;
    let report = evaluation::report(env.dataset, &preds, &BTreeMap::new());
    evaluation::write_report(&report, dir).map_err(|e: EvalError| e.to_string())?;
    Ok(report)
}

pub fn trial_dir(sweep_dir: &Path, trial_id: &str) -> PathBuf {
    sweep_dir.join("trials").join(trial_id)
}

/// Runs one trial under `sweep_dir/trials/<id>/`, or reloads it if a
/// `DONE` marker shows an identical configuration already completed.
pub fn run_trial(config: &TrialConfig, env: &TrialEnv<'_>, sweep_dir: &Path) -> Result<TrialResult, SweepError> {
    let dir = trial_dir(sweep_dir, &config.trial_id);
    let config_path = dir.join("config.json");
    let report_rel = format!("trials/{}/report.json", config.trial_id);
    if dir.join("DONE").exists() {
        let stored: TrialConfig = serde_json::from_slice(&fs::read(&config_path).map_err(io_err(&config_path))?)?;
        if &stored != config {
            return Err(SweepError::ConfigChanged(config.trial_id.clone()));
        }
        let report = evaluation::read_report(&dir.join("report.json")).map_err(|e| SweepError::Trial {
            trial_id: config.trial_id.clone(),
            message: e.to_string(),
        })?;
        return Ok(TrialResult {
            trial_id: config.trial_id.clone(),
            index: config.index,
            status: TrialStatus::Done,
            median_val_kappa: report.median_kappa(),
            report_path: Some(report_rel),
            cause: None,
            config: config.clone(),
            resumed: true,
        });
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let failed = dir.join("FAILED");
    if failed.exists() {
        fs::remove_file(&failed).map_err(io_err(&failed))?;
    }
    write_atomic(&config_path, &to_json_bytes(config)?).map_err(io_err(&config_path))?;
    let result = match execute(config, env, &dir) {
        Ok(report) => {
            let done = dir.join("DONE");
            write_atomic(&done, b"").map_err(io_err(&done))?;
            TrialResult {
                trial_id: config.trial_id.clone(),
                index: config.index,
                status: TrialStatus::Done,
                median_val_kappa: report.median_kappa(),
                report_path: Some(report_rel),
                cause: None,
                config: config.clone(),
                resumed: false,
            }
        }
        Err(cause) => {
            log::warn!("{} failed: {cause}", config.trial_id);
            write_atomic(&failed, format!("{cause}\n").as_bytes()).map_err(io_err(&failed))?;
            TrialResult {
                trial_id: config.trial_id.clone(),
                index: config.index,
                status: TrialStatus::Failed,
                median_val_kappa: None,
                report_path: None,
                cause: Some(cause),
                config: config.clone(),
                resumed: false,
            }
        }
    };
    Ok(result)
}

/// Highest median κ among completed trials; ties go to the earliest trial.
pub fn select_best(results: &[TrialResult]) -> Result<&TrialResult, SweepError> {
    let mut best: Option<&TrialResult> = None;
    for r in results {
        let Some(score) = r.median_val_kappa.filter(|_| r.status == TrialStatus::Done) else { continue };
        let better = match best {
            None => true,
            Some(b) => {
                let bs = b.median_val_kappa.expect("scored");
                score > bs || (score == bs && r.index < b.index)
            }
        };
        if better {
            best = Some(r);
        }
    }
    best.ok_or(SweepError::NoCompletedTrials)
}

/// A row of externally produced results, kept verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalRow {
    pub fields: BTreeMap<String, String>,
}

/// Reads a results CSV with at least `trial_id` and `median_kappa` columns.
pub fn read_external_results(path: &Path) -> Result<Vec<ExternalRow>, SweepError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    for required in ["trial_id", "median_kappa"] {
        if !headers.iter().any(|h| h == required) {
            return Err(SweepError::External(format!("{} lacks a {required} column", path.display())));
        }
    }
    let mut rows = Vec::new();
    for row in rdr.records() {
        let row = row?;
        rows.push(ExternalRow {
            fields: headers.iter().zip(row.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect(),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub n_trials: usize,
    pub n_done: usize,
    pub n_failed: usize,
    pub best_trial: Option<String>,
    pub best_median_kappa: Option<f64>,
    pub median_kappa: Option<QuartileSummary>,
    pub by_mapping_approach: BTreeMap<String, Option<QuartileSummary>>,
}

pub fn sweep_summary(results: &[TrialResult]) -> SweepSummary {
    let done: Vec<&TrialResult> = results.iter().filter(|r| r.status == TrialStatus::Done).collect();
    let best = select_best(results).ok();
    let mut groups: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
    for r in &done {
        if let Some(a) = value_str(&r.config.values, "mapping_approach") {
            groups.entry(a.to_string()).or_default().push(r.median_val_kappa);
        }
    }
    SweepSummary {
        n_trials: results.len(),
        n_done: done.len(),
        n_failed: results.len() - done.len(),
        best_trial: best.map(|b| b.trial_id.clone()),
        best_median_kappa: best.and_then(|b| b.median_val_kappa),
        median_kappa: summarise_defined(done.iter().map(|r| r.median_val_kappa)),
        by_mapping_approach: groups.into_iter().map(|(k, v)| (k, summarise_defined(v))).collect(),
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Listing of (trial, status, score, hyperparameters); external rows are
/// appended with their cells unchanged and `source = external`.
pub fn listing_csv(results: &[TrialResult], external: &[ExternalRow]) -> Result<Vec<u8>, SweepError> {
    let mut dims: BTreeSet<String> = results.iter().flat_map(|r| r.config.values.keys().cloned()).collect();
    for row in external {
        dims.extend(row.fields.keys().filter(|k| !matches!(k.as_str(), "trial_id" | "median_kappa")).cloned());
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let mut header = vec!["trial_id".to_string(), "source".into(), "status".into(), "median_kappa".into()];
    header.extend(dims.iter().cloned());
    w.write_record(&header)?;
    for r in results {
        let mut row = vec![
            r.trial_id.clone(),
            "sweep".into(),
            match r.status {
                TrialStatus::Done => "done".into(),
                TrialStatus::Failed => "failed".into(),
            },
            r.median_val_kappa.map(|k| k.to_string()).unwrap_or_default(),
        ];
        row.extend(dims.iter().map(|d| r.config.values.get(d).map(cell).unwrap_or_default()));
        w.write_record(&row)?;
    }
    for e in external {
        let get = |k: &str| e.fields.get(k).cloned().unwrap_or_default();
        let mut row = vec![get("trial_id"), "external".into(), get("status"), get("median_kappa")];
        row.extend(dims.iter().map(|d| get(d)));
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| SweepError::Io { path: "summary.csv".into(), source: e.into_error() })
}

/// Samples and runs every trial serially, then writes `results.json`,
/// `summary.json` and `summary.csv` into `sweep_dir`.
pub fn run_sweep(
    cfg: &SweepConfig,
    env: &TrialEnv<'_>,
    sweep_dir: &Path,
    external: &[ExternalRow],
) -> Result<(Vec<TrialResult>, SweepSummary), SweepError> {
    let prompt_ids: Vec<String> = env.prompts.iter().map(|p| p.id.clone()).collect();
    let space = cfg.space.clone().unwrap_or_else(|| SearchSpace::zero_shot(cfg.pipeline, &prompt_ids));
    let trials = sample_trials(&space, cfg.n_trials, cfg.seed)?;
    let mut results = Vec::with_capacity(trials.len());
    for t in &trials {
        let r = run_trial(t, env, sweep_dir)?;
        log::info!(
            "{} {:?} median kappa {:?}{}",
            r.trial_id,
            r.status,
            r.median_val_kappa,
            if r.resumed { " (resumed)" } else { "" }
        );
        results.push(r);
    }
    let summary = sweep_summary(&results);
    let files: [(&str, Vec<u8>); 3] = [
        ("results.json", to_json_bytes(&results)?),
        ("summary.json", to_json_bytes(&summary)?),
        ("summary.csv", listing_csv(&results, external)?),
    ];
    for (name, bytes) in files {
        let path = sweep_dir.join(name);
        write_atomic(&path, &bytes).map_err(io_err(&path))?;
    }
    Ok((results, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(index: u32, kappa: Option<f64>, status: TrialStatus, approach: &str) -> TrialResult {
        TrialResult {
            trial_id: trial_id(index),
            index,
            status,
            median_val_kappa: kappa,
            report_path: None,
            cause: None,
            config: TrialConfig {
                trial_id: trial_id(index),
                index,
                seed: 0,
                values: BTreeMap::from([("mapping_approach".to_string(), Value::from(approach))]),
            },
            resumed: false,
        }
    }

    #[test]
    fn sampling_is_deterministic_and_in_range() {
        let space = SearchSpace::zero_shot(Pipeline::Generative, &["a".into(), "b".into(), "c".into()]);
        let t1 = sample_trials(&space, 30, 9).unwrap();
        let t2 = sample_trials(&space, 30, 9).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(t1.len(), 30);
        for t in &t1 {
            let a = t.values["mapping_approach"].as_str().unwrap();
            assert!(a == "direct" || a == "via_clean");
            assert!([5, 10, 20, 40].contains(&t.values["max_new_tokens"].as_u64().unwrap()));
        }
        assert_eq!(sample_trial(&space, 9, 17), t1[17]);
        assert_ne!(sample_trials(&space, 30, 10).unwrap(), t1);
    }

    #[test]
    fn single_valued_space_gives_identical_trials() {
        let space = SearchSpace {
            categorical: BTreeMap::from([("reword".to_string(), vec![Value::from(true)])]),
            log_uniform: BTreeMap::new(),
        };
        let t = sample_trials(&space, 5, 1).unwrap();
        assert!(t.windows(2).all(|w| w[0].values == w[1].values));
    }

    #[test]
    fn invalid_spaces() {
        assert!(matches!(sample_trials(&SearchSpace::default(), 3, 0), Err(SweepError::EmptySpace)));
        let empty_dim = SearchSpace {
            categorical: BTreeMap::from([("x".to_string(), vec![])]),
            log_uniform: BTreeMap::new(),
        };
        assert!(matches!(sample_trials(&empty_dim, 3, 0), Err(SweepError::EmptyDimension(_))));
        let space = SearchSpace::zero_shot(Pipeline::DualEncoder, &[]);
        assert!(matches!(sample_trials(&space, 0, 0), Err(SweepError::NoTrials)));
    }

    #[test]
    fn learning_rate_is_log_uniform() {
        let space = SearchSpace {
            categorical: BTreeMap::new(),
            log_uniform: BTreeMap::from([("learning_rate".to_string(), LogUniform { min: 1e-5, max: 1e-1 })]),
        };
        let mut exps: Vec<f64> = sample_trials(&space, 1000, 3)
            .unwrap()
            .iter()
            .map(|t| t.values["learning_rate"].as_f64().unwrap())
            .inspect(|v| assert!((1e-5..=1e-1).contains(v)))
            .map(f64::log10)
            .collect();
        exps.sort_by(f64::total_cmp);
        // Kolmogorov-Smirnov against U(-5, -1); critical value 1.628/sqrt(n) at alpha 0.01
        let n = exps.len() as f64;
        let d = exps
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let cdf = (x + 5.0) / 4.0;
                (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 1.628 / n.sqrt(), "D = {d}");
    }

    #[test]
    fn best_selection_rules() {
        let r = vec![
            result(0, Some(0.2), TrialStatus::Done, "direct"),
            result(1, Some(0.5), TrialStatus::Done, "via_clean"),
            result(2, Some(0.35), TrialStatus::Done, "direct"),
        ];
        assert_eq!(select_best(&r).unwrap().index, 1);
        let tied = vec![result(3, Some(0.4), TrialStatus::Done, "direct"), result(1, Some(0.4), TrialStatus::Done, "direct")];
        assert_eq!(select_best(&tied).unwrap().index, 1);
        let mut with_failed = r.clone();
        with_failed.push(result(3, None, TrialStatus::Failed, "direct"));
        assert_eq!(select_best(&with_failed).unwrap().index, 1);
        assert!(matches!(select_best(&[result(0, None, TrialStatus::Failed, "x")]), Err(SweepError::NoCompletedTrials)));
    }

    #[test]
    fn summary_groups_and_listing() {
        let r = vec![
            result(0, Some(0.2), TrialStatus::Done, "direct"),
            result(1, Some(0.5), TrialStatus::Done, "via_clean"),
            result(2, Some(0.35), TrialStatus::Done, "direct"),
            result(3, None, TrialStatus::Failed, "direct"),
        ];
        let s = sweep_summary(&r);
        let all = s.median_kappa.unwrap();
        assert_eq!((all.min, all.median, all.max, all.n), (0.2, 0.35, 0.5, 3));
        assert_eq!(s.by_mapping_approach.len(), 2);
        assert_eq!(s.by_mapping_approach["direct"].unwrap().n, 2);
        assert_eq!(s.n_failed, 1);

        let ext = vec![ExternalRow {
            fields: BTreeMap::from([
                ("trial_id".to_string(), "vit-7".to_string()),
                ("median_kappa".to_string(), "0.41".to_string()),
                ("learning_rate".to_string(), "3.2e-4".to_string()),
            ]),
        }];
        let csv = String::from_utf8(listing_csv(&r[..1], &ext).unwrap()).unwrap();
        assert_eq!(
            csv,
            "trial_id,source,status,median_kappa,learning_rate,mapping_approach\n\
             trial-000,sweep,done,0.2,,direct\n\
             vit-7,external,,0.41,3.2e-4,\n"
        );
    }
}
