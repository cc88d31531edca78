use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use camannot::audit;
use camannot::dataset::{self, Split, SplitFile};
use camannot::evaluation::{self, EvalReport};
use camannot::gateway::{BackendConfig, BackendKind, Gateway};
use camannot::review::{self, CorrectionLog, ReviewService};
use camannot::sweep::{self, SweepConfig, TrialEnv, TrialResult};
use camannot::taxonomy::{self, CleanLabelSet, LabelDictionary};
use camannot::zeroshot::{self, Engine, MappingApproach, Pipeline, RunContext, TargetSet};

#[derive(Parser, Debug)]
#[command(name = "camannot", version, about = "Wearable-camera activity annotation pipeline")]
#[command(args_override_self = true)]
struct Cli {
    /// TOML file with one table per subcommand; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse annotations into a dataset directory.
    Ingest(IngestArgs),
    /// Dataset summary, uncodeable tally and image statistics.
    Audit(AuditArgs),
    /// Cluster raw labels and write a merge review file.
    DedupLabels(DedupArgs),
    /// Turn an edited review file into a clean label set.
    ApplyMerges(ApplyArgs),
    /// Predict intensity classes for a dataset split.
    ZeroShot(ZeroShotArgs),
    /// Score predictions against the dataset labels.
    Evaluate(EvaluateArgs),
    /// Random search over zero-shot configurations.
    Sweep(SweepArgs),
    /// HTTP API for reviewing predictions.
    Serve(ServeArgs),
    /// Plot-ready CSVs from evaluation reports and sweeps.
    ExportPlots(ExportArgs),
}

#[derive(clap::Args, Debug)]
struct IngestArgs {
    #[arg(long, value_name = "CSV")]
    annotations: PathBuf,
    #[arg(long, value_name = "CSV")]
    participants: Option<PathBuf>,
    #[arg(long, value_name = "CSV")]
    dict: PathBuf,
    #[arg(long, default_value = "study")]
    study_id: String,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Also write splits.json with this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Drop malformed rows instead of failing.
    #[arg(long)]
    skip_bad_rows: bool,
}

#[derive(clap::Args, Debug)]
struct AuditArgs {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// CSV listing every captured frame (participant_id,timestamp[,image_ref]).
    #[arg(long, value_name = "CSV")]
    manifest: Option<PathBuf>,
    /// Compute per-image statistics from files under this directory.
    #[arg(long, value_name = "DIR")]
    image_root: Option<PathBuf>,
}

#[derive(clap::Args, Debug, Clone)]
struct BackendArgs {
    #[arg(long, value_enum, default_value = "stub")]
    backend: BackendChoice,
    /// Inference service base URL for the remote backend.
    #[arg(long)]
    endpoint: Option<String>,
    /// Image-text encoder for the dual-encoder pipeline.
    #[arg(long, default_value = "stub-clip")]
    image_model: String,
    /// Captioning model for the generative pipeline.
    #[arg(long, default_value = "stub-captioner")]
    caption_model: String,
    /// Sentence encoder for labels and captions.
    #[arg(long, default_value = "stub-sentence")]
    text_model: String,
    #[arg(long, value_name = "DIR")]
    cache_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 60.0)]
    timeout: f64,
    #[arg(long, default_value_t = 256)]
    stub_dim: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum BackendChoice {
    Stub,
    Remote,
}

impl BackendArgs {
    fn gateway(&self, model: &str) -> Result<Gateway> {
        let cfg = BackendConfig {
            kind: match self.backend {
                BackendChoice::Stub => BackendKind::Stub,
                BackendChoice::Remote => BackendKind::Remote,
            },
            endpoint: self.endpoint.clone(),
            model_id: model.to_string(),
            timeout_s: self.timeout,
            batch_size: self.batch_size,
            stub_dim: self.stub_dim,
        };
        Ok(Gateway::from_config(&cfg, self.cache_dir.as_deref())?)
    }
}

#[derive(clap::Args, Debug)]
struct DedupArgs {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Annotates each label with its dictionary intensity.
    #[arg(long, value_name = "CSV")]
    dict: Option<PathBuf>,
    /// Cosine-distance cut height.
    #[arg(long)]
    threshold: f64,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Also write the full dendrogram as JSON.
    #[arg(long, value_name = "FILE")]
    dendrogram: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(clap::Args, Debug)]
struct ApplyArgs {
    #[arg(long, value_name = "FILE")]
    review: PathBuf,
    #[arg(long, value_name = "CSV")]
    dict: PathBuf,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum SplitChoice {
    All,
    Train,
    Val,
    Test,
}

impl SplitChoice {
    fn members(self, data: &Path) -> Result<Option<BTreeSet<String>>> {
        let split = match self {
            SplitChoice::All => return Ok(None),
            SplitChoice::Train => Split::Train,
            SplitChoice::Val => Split::Val,
            SplitChoice::Test => Split::Test,
        };
        let file = SplitFile::read(data).context("reading splits (run ingest with --seed)")?;
        Ok(Some(file.members(split)))
    }
}

#[derive(clap::Args, Debug)]
struct ZeroShotArgs {
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    split: SplitChoice,
    #[arg(long, value_parser = parse_pipeline)]
    pipeline: Pipeline,
    #[arg(long, value_parser = parse_approach, default_value = "direct")]
    approach: MappingApproach,
    /// Use the reworded class phrases.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    reword: bool,
    /// Clean label set from apply-merges; needed for --approach via_clean.
    #[arg(long, value_name = "FILE")]
    clean: Option<PathBuf>,
    /// Prompt library (JSON).
    #[arg(long, value_name = "FILE")]
    prompts: Option<PathBuf>,
    /// Prompt id within --prompts.
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long, default_value_t = 20)]
    max_new_tokens: u32,
    /// Predict Unknown when the best similarity falls below this.
    #[arg(long)]
    abstain_below: Option<f64>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "DIR", default_value = ".")]
    image_root: PathBuf,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(clap::Args, Debug)]
struct EvaluateArgs {
    #[arg(long, value_name = "DIR")]
    truth: PathBuf,
    #[arg(long, value_name = "FILE")]
    pred: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Correction log whose latest verdicts replace the dataset labels.
    #[arg(long, value_name = "FILE")]
    corrections: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct SweepArgs {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Sweep configuration (JSON).
    #[arg(long, value_name = "FILE")]
    sweep: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitChoice,
    #[arg(long, value_name = "FILE")]
    clean: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    prompts: Option<PathBuf>,
    /// CSV of trials run elsewhere, merged into summary.csv.
    #[arg(long, value_name = "CSV")]
    external: Option<PathBuf>,
    #[arg(long, value_name = "DIR", default_value = ".")]
    image_root: PathBuf,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(clap::Args, Debug)]
struct ServeArgs {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_name = "FILE")]
    pred: PathBuf,
    #[arg(long, value_name = "FILE")]
    corrections: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: String,
    #[arg(long, value_name = "DIR", default_value = ".")]
    image_root: PathBuf,
}

#[derive(clap::Args, Debug)]
struct ExportArgs {
    /// Evaluation report.json files; the parent directory name labels each run.
    #[arg(long, value_name = "FILE")]
    report: Vec<PathBuf>,
    /// Sweep directory holding results.json.
    #[arg(long, value_name = "DIR")]
    sweep: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

fn parse_pipeline(s: &str) -> Result<Pipeline, String> {
    s.parse().map_err(|e: String| e)
}

fn parse_approach(s: &str) -> Result<MappingApproach, String> {
    s.parse().map_err(|e: String| e)
}

fn toml_to_args(table: &toml::Table, section: &str) -> Result<Vec<OsString>> {
    let mut out = Vec::new();
    for (key, value) in table {
        let flag = format!("--{key}");
        let scalar = |v: &toml::Value| -> Result<String> {
            Ok(match v {
                toml::Value::String(s) => s.clone(),
                toml::Value::Integer(i) => i.to_string(),
                toml::Value::Float(f) => f.to_string(),
                toml::Value::Boolean(b) => b.to_string(),
                other => bail!("[{section}] {key}: unsupported value {other}"),
            })
        };
        match value {
            toml::Value::Boolean(true) if is_switch(key) => out.push(flag.into()),
            toml::Value::Boolean(false) if is_switch(key) => {}
            toml::Value::Array(items) => {
                for item in items {
                    out.push(format!("{flag}={}", scalar(item)?).into());
                }
            }
            v => out.push(format!("{flag}={}", scalar(v)?).into()),
        }
    }
    Ok(out)
}

/// Flags that take no value.
fn is_switch(key: &str) -> bool {
    matches!(key, "skip-bad-rows")
}

/// Splices the `[subcommand]` table of a `--config` file in front of the
/// explicit arguments, so later (explicit) occurrences override it.
fn merge_config(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let mut config = None;
    let mut sub_pos = None;
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if a == "--config" {
            config = args.get(i + 1).map(PathBuf::from);
            i += 2;
            continue;
        }
        if let Some(v) = a.strip_prefix("--config=") {
            config = Some(PathBuf::from(v));
        } else if sub_pos.is_none() && !a.starts_with('-') {
            sub_pos = Some(i);
        }
        i += 1;
    }
    let (Some(path), Some(pos)) = (config, sub_pos) else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("reading config {}: {e}", path.display()))?;
    let doc: toml::Table = text.parse().map_err(|e| format!("config {}: {e}", path.display()))?;
    let sub = args[pos].to_string_lossy().into_owned();
    for (key, value) in &doc {
        if !value.is_table() {
            return Err(format!("config {}: top-level key {key:?} must be a [subcommand] table", path.display()));
        }
    }
    let Some(toml::Value::Table(table)) = doc.get(&sub) else {
        return Ok(args);
    };
    let extra = toml_to_args(table, &sub).map_err(|e| format!("config {}: {e}", path.display()))?;
    let mut merged = args[..=pos].to_vec();
    merged.extend(extra);
    merged.extend_from_slice(&args[pos + 1..]);
    Ok(merged)
}

fn main() -> ExitCode {
    let args = match merge_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(msg) => Cli::command().error(clap::error::ErrorKind::InvalidValue, msg).exit(),
    };
    let cli = Cli::parse_from(args);
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn usage_error(msg: &str) -> ! {
    Cli::command().error(clap::error::ErrorKind::MissingRequiredArgument, msg).exit()
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Audit(a) => audit_cmd(a),
        Command::DedupLabels(a) => dedup(a),
        Command::ApplyMerges(a) => apply(a),
        Command::ZeroShot(a) => zero_shot(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Serve(a) => serve(a),
        Command::ExportPlots(a) => export_plots(a),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn json_bytes<T: serde::Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn csv_bytes<T: serde::Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))
}

fn load_dict(path: &Path) -> Result<LabelDictionary> {
    LabelDictionary::from_csv_path(path).with_context(|| format!("loading dictionary {}", path.display()))
}

fn load_dataset(dir: &Path) -> Result<dataset::Dataset> {
    dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn load_clean(path: Option<&Path>) -> Result<Option<CleanLabelSet>> {
    path.map(|p| -> Result<CleanLabelSet> {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing clean label set {}", p.display()))
    })
    .transpose()
}

fn ingest(a: IngestArgs) -> Result<ExitCode> {
    let dict = load_dict(&a.dict)?;
    let ingested = dataset::ingest_paths(&a.annotations, a.participants.as_deref(), &a.study_id, &dict)?;
    for w in &ingested.warnings {
        log::warn!("{w}");
    }
    for e in &ingested.row_errors {
        eprintln!("line {}: {}", e.line, e.message);
    }
    if !ingested.row_errors.is_empty() && !a.skip_bad_rows {
        bail!("{} malformed rows (pass --skip-bad-rows to drop them)", ingested.row_errors.len());
    }
    dataset::persist(&ingested.dataset, &a.out)?;
    let gaps: Vec<&String> = ingested.gaps.iter().collect();
    write(
        &a.out.join("ingest_report.json"),
        json_bytes(&serde_json::json!({
            "n_records": ingested.dataset.n_records(),
            "n_participants": ingested.dataset.records.len(),
            "row_errors": ingested.row_errors,
            "warnings": ingested.warnings,
            "dictionary_gaps": gaps,
        }))?,
    )?;
    if let Some(seed) = a.seed {
        let assignments = dataset::split_participants(&ingested.dataset, seed, dataset::DEFAULT_FRACTIONS)?;
        SplitFile::new(seed, dataset::DEFAULT_FRACTIONS, &assignments).write(&a.out)?;
    }
    if !ingested.gaps.is_empty() {
        eprintln!("{} labels have no dictionary entry; see ingest_report.json", ingested.gaps.len());
    }
    Ok(ExitCode::SUCCESS)
}

fn audit_cmd(a: AuditArgs) -> Result<ExitCode> {
    let data = load_dataset(&a.data)?;
    let manifest = a
        .manifest
        .as_ref()
        .map(|p| -> Result<_> {
            let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
            Ok(dataset::read_image_manifest(f)?)
        })
        .transpose()?;
    let summary = audit::study_summary(&data, manifest.as_deref());
    write(&a.out.join("summary.json"), json_bytes(&summary)?)?;
    write(&a.out.join("summary.md"), audit::summary_markdown(&summary))?;
    write(&a.out.join("timelines.csv"), csv_bytes(&audit::participant_timelines(&data))?)?;

    let mut tally = String::from("reason,count,percent\n");
    for (reason, count) in &summary.uncodeable.counts {
        let pct = summary.uncodeable.percent.get(reason).copied().unwrap_or(0.0);
        writeln!(tally, "{},{count},{pct}", csv_field(reason))?;
    }
    write(&a.out.join("uncodeable.csv"), tally)?;

    if let Some(root) = &a.image_root {
        let (points, failures) = audit::scatter_points(&data, manifest.as_deref(), root);
        write(&a.out.join("scatter.csv"), csv_bytes(&points)?)?;
        if !failures.is_empty() {
            let mut text = String::from("image_ref,error\n");
            for (r, e) in &failures {
                writeln!(text, "{},{}", csv_field(r), csv_field(e))?;
            }
            write(&a.out.join("scatter_failures.csv"), text)?;
            eprintln!("{} images could not be read; see scatter_failures.csv", failures.len());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn dedup(a: DedupArgs) -> Result<ExitCode> {
    let data = load_dataset(&a.data)?;
    let dict = a.dict.as_deref().map(load_dict).transpose()?;
    let labels: BTreeSet<String> = data
        .iter_records()
        .filter(|r| !taxonomy::is_trivial(&r.raw_label))
        .map(|r| taxonomy::normalize_label(&r.raw_label))
        .collect();
    let labels: Vec<String> = labels.into_iter().collect();
    let gateway = a.backend.gateway(&a.backend.text_model)?;
    let dendrogram = taxonomy::build_dendrogram(&labels, &gateway)?;
    if let Some(path) = &a.dendrogram {
        write(path, json_bytes(&dendrogram)?)?;
    }
    let proposal = taxonomy::propose_merges(dendrogram, a.threshold);
    write(&a.out, taxonomy::render_review(&proposal, dict.as_ref()))?;
    eprintln!("{} labels in {} proposed clusters", labels.len(), proposal.proposed_clusters.len());
    Ok(ExitCode::SUCCESS)
}

fn apply(a: ApplyArgs) -> Result<ExitCode> {
    let dict = load_dict(&a.dict)?;
    let text = fs::read_to_string(&a.review).with_context(|| format!("reading {}", a.review.display()))?;
    let clean = taxonomy::apply_merges(&text, &dict)?;
    write(&a.out, json_bytes(&clean)?)?;
    Ok(ExitCode::SUCCESS)
}

fn default_run_id(a: &ZeroShotArgs) -> String {
    let mut id = format!(
        "{}-{}-{}",
        a.pipeline.as_str(),
        a.approach.as_str(),
        if a.reword { "reworded" } else { "plain" }
    );
    if a.pipeline == Pipeline::Generative {
        if let Some(p) = &a.prompt {
            id.push_str(&format!("-{p}-{}", a.max_new_tokens));
        }
    }
    id
}

fn zero_shot(a: ZeroShotArgs) -> Result<ExitCode> {
    let prompt = match (a.pipeline, &a.prompt, &a.prompts) {
        (Pipeline::Generative, None, _) => usage_error("the generative pipeline requires --prompt"),
        (Pipeline::Generative, Some(_), None) => usage_error("--prompt requires --prompts"),
        (Pipeline::Generative, Some(id), Some(path)) => {
            let prompts = zeroshot::load_prompts(path)?;
            let Some(p) = prompts.into_iter().find(|p| &p.id == id) else {
                bail!("prompt {id:?} not found in {}", path.display());
            };
            Some(p)
        }
        (Pipeline::DualEncoder, ..) => None,
    };
    let (Some(data_dir), Some(out)) = (&a.data, &a.out) else {
        usage_error("zero-shot requires --data and --out");
    };
    if a.approach == MappingApproach::ViaClean && a.clean.is_none() {
        usage_error("--approach via_clean requires --clean");
    }
    let data = load_dataset(data_dir)?;
    let members = a.split.members(data_dir)?;
    let clean = load_clean(a.clean.as_deref())?;
    let run_id = a.run_id.clone().unwrap_or_else(|| default_run_id(&a));
    let mut ctx = match prompt {
        Some(p) => RunContext::generative(&run_id, p, a.max_new_tokens),
        None => RunContext::dual_encoder(&run_id),
    };
    ctx.abstain_below = a.abstain_below;

    let encoder;
    let captioner;
    let text_encoder;
    let (engine, targets): (Engine<'_>, TargetSet) = match a.pipeline {
        Pipeline::DualEncoder => {
            encoder = a.backend.gateway(&a.backend.image_model)?;
            let t = zeroshot::build_targets(a.approach, a.reword, clean.as_ref(), &encoder)?;
            (Engine::DualEncoder { encoder: &encoder }, t)
        }
        Pipeline::Generative => {
            captioner = a.backend.gateway(&a.backend.caption_model)?;
            text_encoder = a.backend.gateway(&a.backend.text_model)?;
            let t = zeroshot::build_targets(a.approach, a.reword, clean.as_ref(), &text_encoder)?;
            (Engine::Generative { captioner: &captioner, text_encoder: &text_encoder }, t)
        }
    };
    let items = zeroshot::batch_items(&data, members.as_ref(), &a.image_root);
    let outcome = zeroshot::run_batch(&items, &targets, &engine, &ctx, out, a.concurrency)?;
    eprintln!(
        "{}: {} items, {} ok, {} failed, {} resumed",
        run_id, outcome.n_items, outcome.n_ok, outcome.n_failed, outcome.n_resumed
    );
    if outcome.failing {
        eprintln!(
            "error: failure rate {:.3} exceeds {}",
            outcome.failure_rate,
            zeroshot::MAX_FAILURE_RATE
        );
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn evaluate(a: EvaluateArgs) -> Result<ExitCode> {
    let data = load_dataset(&a.truth)?;
    let preds = zeroshot::read_predictions(&a.pred)?;
    let overrides = match &a.corrections {
        Some(p) => review::truth_overrides(&review::read_log(p)?),
        None => BTreeMap::new(),
    };
    let report = evaluation::report(&data, &preds, &overrides);
    evaluation::write_report(&report, &a.out)?;
    print_report(&report);
    if report.too_many_unmatched() {
        eprintln!(
            "error: {:.1}% of predictions match no dataset image",
            100.0 * report.unmatched_fraction
        );
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "undefined".into())
}

fn print_report(r: &EvalReport) {
    println!("evaluated {} of {} predictions", r.n_evaluated, r.n_predictions);
    println!("accuracy {}", fmt_opt(r.pooled.accuracy));
    println!("pooled kappa {}", fmt_opt(r.pooled.kappa));
    println!("median participant kappa {}", fmt_opt(r.median_kappa()));
}

fn sweep_cmd(a: SweepArgs) -> Result<ExitCode> {
    let text = fs::read_to_string(&a.sweep).with_context(|| format!("reading {}", a.sweep.display()))?;
    let cfg: SweepConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.sweep.display()))?;
    let data = load_dataset(&a.data)?;
    let participants = match a.split.members(&a.data)? {
        Some(m) => m,
        None => data.participant_ids().into_iter().collect(),
    };
    let clean = load_clean(a.clean.as_deref())?;
    let prompts = match &a.prompts {
        Some(p) => zeroshot::load_prompts(p)?,
        None if cfg.pipeline == Pipeline::Generative => usage_error("a generative sweep requires --prompts"),
        None => Vec::new(),
    };
    let external = a.external.as_deref().map(sweep::read_external_results).transpose()?.unwrap_or_default();

    let encoder;
    let captioner;
    let text_encoder;
    let engine = match cfg.pipeline {
        Pipeline::DualEncoder => {
            encoder = a.backend.gateway(&a.backend.image_model)?;
            Engine::DualEncoder { encoder: &encoder }
        }
        Pipeline::Generative => {
            captioner = a.backend.gateway(&a.backend.caption_model)?;
            text_encoder = a.backend.gateway(&a.backend.text_model)?;
            Engine::Generative { captioner: &captioner, text_encoder: &text_encoder }
        }
    };
    let env = TrialEnv {
        dataset: &data,
        participants: &participants,
        image_root: &a.image_root,
        engine,
        clean: clean.as_ref(),
        prompts: &prompts,
        concurrency: a.concurrency,
    };
    let (results, summary) = sweep::run_sweep(&cfg, &env, &a.out, &external)?;
    eprintln!("{} trials, {} done, {} failed", summary.n_trials, summary.n_done, summary.n_failed);
    match &summary.best_trial {
        Some(best) => println!("best {best} median kappa {}", fmt_opt(summary.best_median_kappa)),
        None if summary.n_done > 0 => eprintln!("warning: no trial has a defined median kappa"),
        None => {
            let cause = results.iter().find_map(|r: &TrialResult| r.cause.as_deref());
            bail!("no trial completed: {}", cause.unwrap_or("unknown cause"));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn serve(a: ServeArgs) -> Result<ExitCode> {
    let data = load_dataset(&a.data)?;
    let preds = zeroshot::read_predictions(&a.pred)?;
    let log = CorrectionLog::open(&a.corrections)?;
    let service = Arc::new(ReviewService::new(data, preds, a.image_root.clone(), log));
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(review::serve(service, &a.bind)).with_context(|| format!("serving on {}", a.bind))?;
    Ok(ExitCode::SUCCESS)
}

#[derive(serde::Serialize)]
struct QuartileRow<'a> {
    run: &'a str,
    metric: &'a str,
    n: Option<usize>,
    min: Option<f64>,
    q1: Option<f64>,
    median: Option<f64>,
    q3: Option<f64>,
    max: Option<f64>,
}

fn export_plots(a: ExportArgs) -> Result<ExitCode> {
    if a.report.is_empty() && a.sweep.is_none() {
        usage_error("export-plots needs --report or --sweep");
    }
    let mut quartiles = Vec::new();
    let mut confusion = String::from("run,truth,predicted,count\n");
    let mut f1 = String::from("run,participant_id,class,f1\n");
    let mut labels = Vec::new();
    for path in &a.report {
        let report = evaluation::read_report(path)?;
        let run = path
            .parent()
            .and_then(Path::file_name)
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "report".into());
        labels.push((run, report));
    }
    for (run, report) in &labels {
        for (metric, q) in &report.summaries {
            quartiles.push(QuartileRow {
                run,
                metric,
                n: q.as_ref().map(|q| q.n),
                min: q.as_ref().map(|q| q.min),
                q1: q.as_ref().map(|q| q.q1),
                median: q.as_ref().map(|q| q.median),
                q3: q.as_ref().map(|q| q.q3),
                max: q.as_ref().map(|q| q.max),
            });
        }
        for (i, t) in camannot::IntensityClass::EVALUATED.iter().enumerate() {
            for (j, p) in camannot::IntensityClass::EVALUATED.iter().enumerate() {
                writeln!(confusion, "{},{t},{p},{}", csv_field(run), report.pooled.confusion.counts[i][j])?;
            }
        }
        for pm in &report.per_participant {
            for (i, c) in camannot::IntensityClass::EVALUATED.iter().enumerate() {
                let v = pm.metrics.per_class.by_index(i).f1.map(|x| x.to_string()).unwrap_or_default();
                writeln!(f1, "{},{},{c},{v}", csv_field(run), csv_field(&pm.participant_id))?;
            }
        }
    }
    if !labels.is_empty() {
        write(&a.out.join("quartiles.csv"), csv_bytes(&quartiles)?)?;
        write(&a.out.join("confusion.csv"), confusion)?;
        write(&a.out.join("participant_f1.csv"), f1)?;
    }
    if let Some(dir) = &a.sweep {
        let path = dir.join("results.json");
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let results: Vec<TrialResult> = serde_json::from_str(&text)?;
        let mut rows = String::from("trial_id,mapping_approach,status,median_kappa\n");
        for r in &results {
            let approach = r.config.values.get("mapping_approach").and_then(|v| v.as_str()).unwrap_or("");
            let status = match r.status {
                sweep::TrialStatus::Done => "done",
                sweep::TrialStatus::Failed => "failed",
            };
            let k = r.median_val_kappa.map(|x| x.to_string()).unwrap_or_default();
            writeln!(rows, "{},{approach},{status},{k}", r.trial_id)?;
        }
        write(&a.out.join("sweep_kappa.csv"), rows)?;
    }
    Ok(ExitCode::SUCCESS)
}
