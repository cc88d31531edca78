//! Nearest-label retrieval from image or caption embeddings to intensity
//! classes, either directly against class phrases or through clean labels.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::fsutil::write_atomic;
use crate::gateway::{cosine, DimensionMismatch, EmbeddingVector, Gateway, GatewayError};
use crate::taxonomy::CleanLabelSet;
use crate::IntensityClass;

/// A run is reported as failing when more than this share of items error.
pub const MAX_FAILURE_RATE: f64 = 0.10;

pub const DIRECT_PHRASES: [(&str, IntensityClass); 3] = [
    ("sedentary", IntensityClass::Sedentary),
    ("light", IntensityClass::Light),
    ("MVPA", IntensityClass::ModerateVigorous),
];

pub const REWORDED_PHRASES: [(&str, IntensityClass); 3] = [
    ("sedentary behavior", IntensityClass::Sedentary),
    ("light physical activity", IntensityClass::Light),
    ("moderate-to-vigorous physical activity", IntensityClass::ModerateVigorous),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingApproach {
    Direct,
    ViaClean,
}

impl MappingApproach {
    pub fn as_str(self) -> &'static str {
        match self {
            MappingApproach::Direct => "direct",
            MappingApproach::ViaClean => "via_clean",
        }
    }
}

impl std::str::FromStr for MappingApproach {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace(['-', ' '], "_").as_str() {
            "direct" => Ok(MappingApproach::Direct),
            "via_clean" => Ok(MappingApproach::ViaClean),
            _ => Err(format!("unknown mapping approach {s:?} (expected direct, via_clean)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    DualEncoder,
    Generative,
}

impl Pipeline {
    pub fn as_str(self) -> &'static str {
        match self {
            Pipeline::DualEncoder => "dual_encoder",
            Pipeline::Generative => "generative",
        }
    }
}

impl std::str::FromStr for Pipeline {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "dual_encoder" => Ok(Pipeline::DualEncoder),
            "generative" => Ok(Pipeline::Generative),
            _ => Err(format!("unknown pipeline {s:?} (expected dual_encoder, generative)")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ZeroShotError {
    #[error("via-clean targets need a clean label set")]
    MissingCleanSet,
    #[error("no target phrases")]
    EmptyTargets,
    #[error("duplicate target phrase {0:?}")]
    DuplicatePhrase(String),
    #[error("target set is misaligned: {0}")]
    Misaligned(String),
    #[error(transparent)]
    Dimension(#[from] DimensionMismatch),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("duplicate prompt id {0:?}")]
    DuplicatePrompt(String),
    #[error("predictions file {path} holds records of run {found:?}, not {expected:?}")]
    RunIdConflict { path: PathBuf, expected: String, found: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ZeroShotError + '_ {
    move |source| ZeroShotError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSet {
    pub phrases: Vec<String>,
    pub intensities: Vec<IntensityClass>,
    pub embeddings: Vec<EmbeddingVector>,
    pub approach: MappingApproach,
    pub reworded: bool,
}

impl TargetSet {
    pub fn from_parts(
        phrases: Vec<String>,
        intensities: Vec<IntensityClass>,
        embeddings: Vec<EmbeddingVector>,
        approach: MappingApproach,
        reworded: bool,
    ) -> Result<Self, ZeroShotError> {
        if phrases.is_empty() {
            return Err(ZeroShotError::EmptyTargets);
        }
        if phrases.len() != intensities.len() || phrases.len() != embeddings.len() {
            return Err(ZeroShotError::Misaligned(format!(
                "{} phrases, {} intensities, {} embeddings",
                phrases.len(),
                intensities.len(),
                embeddings.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for p in &phrases {
            if !seen.insert(p.as_str()) {
                return Err(ZeroShotError::DuplicatePhrase(p.clone()));
            }
        }
        let dim = embeddings[0].dim();
        if let Some(bad) = embeddings.iter().find(|e| e.dim() != dim) {
            return Err(DimensionMismatch(dim, bad.dim()).into());
        }
        Ok(TargetSet { phrases, intensities, embeddings, approach, reworded })
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn intensity_of(&self, phrase: &str) -> Option<IntensityClass> {
        self.phrases.iter().position(|p| p == phrase).map(|i| self.intensities[i])
    }
}

/// Target phrases and their classes. Clean labels outside SB/LIPA/MVPA
/// are left out: nothing downstream can score a sleep prediction.
pub fn target_phrases(
    approach: MappingApproach,
    reworded: bool,
    clean: Option<&CleanLabelSet>,
) -> Result<Vec<(String, IntensityClass)>, ZeroShotError> {
    match approach {
        MappingApproach::Direct => {
            let table = if reworded { REWORDED_PHRASES } else { DIRECT_PHRASES };
            Ok(table.iter().map(|(p, c)| (p.to_string(), *c)).collect())
        }
        MappingApproach::ViaClean => {
            let clean = clean.ok_or(ZeroShotError::MissingCleanSet)?;
            let out: Vec<_> = clean
                .clean_labels
                .iter()
                .filter(|l| l.intensity.eval_index().is_some())
                .map(|l| (l.name.clone(), l.intensity))
                .collect();
            if out.is_empty() {
                return Err(ZeroShotError::EmptyTargets);
            }
            Ok(out)
        }
    }
}

pub fn build_targets(
    approach: MappingApproach,
    reworded: bool,
    clean: Option<&CleanLabelSet>,
    gateway: &Gateway,
) -> Result<TargetSet, ZeroShotError> {
    let pairs = target_phrases(approach, reworded, clean)?;
    let (phrases, intensities): (Vec<String>, Vec<IntensityClass>) = pairs.into_iter().unzip();
    let embeddings = gateway.embed_texts(&phrases)?;
    TargetSet::from_parts(phrases, intensities, embeddings, approach, reworded)
}

/// Index and cosine of the most similar target; the lowest index wins ties.
pub fn nearest(query: &[f64], targets: &[Vec<f64>]) -> Result<Option<(usize, f64)>, DimensionMismatch> {
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in targets.iter().enumerate() {
        let s = cosine(query, t)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub index: usize,
    pub phrase: String,
    pub intensity: IntensityClass,
    pub similarity: f64,
}

pub fn classify_by_retrieval(query: &EmbeddingVector, targets: &TargetSet) -> Result<Retrieval, ZeroShotError> {
    let vectors: Vec<Vec<f64>> = targets.embeddings.iter().map(|e| e.values.clone()).collect();
    let (index, similarity) = nearest(&query.values, &vectors)?.ok_or(ZeroShotError::EmptyTargets)?;
    Ok(Retrieval {
        index,
        phrase: targets.phrases[index].clone(),
        intensity: targets.intensities[index],
        similarity,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptSource {
    Curated,
    LlmSuggested,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub id: String,
    pub text: String,
    pub source: PromptSource,
}

pub fn parse_prompts(json: &str) -> Result<Vec<PromptSpec>, serde_json::Error> {
    serde_json::from_str(json)
}

pub fn load_prompts(path: &Path) -> Result<Vec<PromptSpec>, ZeroShotError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let prompts = parse_prompts(&text).map_err(|source| ZeroShotError::Json { path: path.to_path_buf(), source })?;
    let mut seen = BTreeSet::new();
    for p in &prompts {
        if !seen.insert(p.id.clone()) {
            return Err(ZeroShotError::DuplicatePrompt(p.id.clone()));
        }
    }
    Ok(prompts)
}

/// One line of a predictions file. Failed items carry `error` and no
/// prediction; `mapped_via` is present exactly when retrieval ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub run_id: String,
    pub predicted: Option<IntensityClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mapped_via: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_new_tokens: Option<u32>,
    pub pipeline: Pipeline,
    pub approach: MappingApproach,
    pub reworded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PredictionRecord {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Run-wide settings stamped onto every record.
#[derive(Debug, Clone, PartialEq)]
pub struct RunContext {
    pub run_id: String,
    pub pipeline: Pipeline,
    pub prompt: Option<PromptSpec>,
    pub max_new_tokens: Option<u32>,
    /// Predict Unknown when the best similarity is below this. Off by default.
    pub abstain_below: Option<f64>,
}

impl RunContext {
    pub fn dual_encoder(run_id: &str) -> Self {
        RunContext {
            run_id: run_id.to_string(),
            pipeline: Pipeline::DualEncoder,
            prompt: None,
            max_new_tokens: None,
            abstain_below: None,
        }
    }

    pub fn generative(run_id: &str, prompt: PromptSpec, max_new_tokens: u32) -> Self {
        RunContext {
            run_id: run_id.to_string(),
            pipeline: Pipeline::Generative,
            prompt: Some(prompt),
            max_new_tokens: Some(max_new_tokens),
            abstain_below: None,
        }
    }

    fn record(&self, image_id: &str, targets: &TargetSet) -> PredictionRecord {
        PredictionRecord {
            image_id: image_id.to_string(),
            run_id: self.run_id.clone(),
            predicted: None,
            caption: None,
            mapped_via: None,
            similarity: None,
            prompt_id: self.prompt.as_ref().map(|p| p.id.clone()),
            max_new_tokens: self.max_new_tokens,
            pipeline: self.pipeline,
            approach: targets.approach,
            reworded: targets.reworded,
            error: None,
        }
    }

    fn resolve(&self, mut rec: PredictionRecord, query: &EmbeddingVector, targets: &TargetSet) -> PredictionRecord {
        match classify_by_retrieval(query, targets) {
            Ok(r) => {
                let abstain = self.abstain_below.is_some_and(|t| r.similarity < t);
                rec.predicted = Some(if abstain { IntensityClass::Unknown } else { r.intensity });
                rec.mapped_via = Some(r.phrase);
                rec.similarity = Some(r.similarity);
            }
            Err(e) => rec.error = Some(e.to_string()),
        }
        rec
    }
}

/// Trim, collapse whitespace, and drop trailing punctuation.
pub fn normalize_caption(caption: &str) -> String {
    let collapsed = caption.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed.trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace()).to_string()
}

fn describe_gateway_error(e: &GatewayError, image_ref: &str) -> String {
    match e {
        GatewayError::ImageRead { source, .. } => format!("reading image {image_ref}: {}", source.kind()),
        other => other.to_string(),
    }
}

pub fn classify_dual_encoder(
    image_path: &Path,
    image_id: &str,
    targets: &TargetSet,
    encoder: &Gateway,
    ctx: &RunContext,
) -> PredictionRecord {
    let rec = ctx.record(image_id, targets);
    match encoder.embed_image(image_path) {
        Ok(v) => ctx.resolve(rec, &v, targets),
        Err(e) => PredictionRecord { error: Some(describe_gateway_error(&e, image_id)), ..rec },
    }
}

/// Embeds the normalized caption and retrieves; the record keeps the raw caption.
pub fn map_caption(
    caption: &str,
    image_id: &str,
    targets: &TargetSet,
    text_encoder: &Gateway,
    ctx: &RunContext,
) -> PredictionRecord {
    let mut rec = ctx.record(image_id, targets);
    rec.caption = Some(caption.to_string());
    let normalized = normalize_caption(caption);
    if normalized.is_empty() {
        rec.error = Some("empty caption".into());
        return rec;
    }
    match text_encoder.embed_text(&normalized) {
        Ok(v) => ctx.resolve(rec, &v, targets),
        Err(e) => PredictionRecord { error: Some(e.to_string()), ..rec },
    }
}

/// The models behind one run. Targets must be embedded by `encoder`
/// (dual encoder) or `text_encoder` (generative).
pub enum Engine<'a> {
    DualEncoder { encoder: &'a Gateway },
    Generative { captioner: &'a Gateway, text_encoder: &'a Gateway },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchItem {
    pub image_id: String,
    /// As recorded in the dataset, relative to the image root.
    pub image_ref: Option<String>,
    pub path: Option<PathBuf>,
}

/// Items for every record with a known intensity, in (participant, timestamp) order.
pub fn batch_items(dataset: &Dataset, participants: Option<&BTreeSet<String>>, image_root: &Path) -> Vec<BatchItem> {
    dataset
        .iter_records()
        .filter(|r| participants.is_none_or(|ps| ps.contains(&r.participant_id)))
        .filter(|r| r.intensity != IntensityClass::Unknown)
        .map(|r| BatchItem {
            image_id: r.image_id(),
            image_ref: r.image_ref.clone(),
            path: r.image_ref.as_ref().map(|p| image_root.join(p)),
        })
        .collect()
}

pub fn predict_item(item: &BatchItem, targets: &TargetSet, engine: &Engine<'_>, ctx: &RunContext) -> PredictionRecord {
    let Some(path) = &item.path else {
        let mut rec = ctx.record(&item.image_id, targets);
        rec.error = Some("record has no image reference".into());
        return rec;
    };
    let shown = item.image_ref.as_deref().unwrap_or(&item.image_id);
    match engine {
        Engine::DualEncoder { encoder } => {
            let mut rec = classify_dual_encoder(path, &item.image_id, targets, encoder, ctx);
            if let Some(err) = rec.error.as_mut() {
                *err = err.replace(&item.image_id, shown);
            }
            rec
        }
        Engine::Generative { captioner, text_encoder } => {
            let (prompt, tokens) = match (&ctx.prompt, ctx.max_new_tokens) {
                (Some(p), Some(t)) => (p, t),
                _ => {
                    let mut rec = ctx.record(&item.image_id, targets);
                    rec.error = Some("generative run without prompt and token budget".into());
                    return rec;
                }
            };
            match captioner.caption_image(path, &prompt.text, tokens) {
                Ok(caption) => map_caption(&caption, &item.image_id, targets, text_encoder, ctx),
                Err(e) => {
                    let mut rec = ctx.record(&item.image_id, targets);
                    rec.error = Some(describe_gateway_error(&e, shown));
                    rec
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchOutcome {
    pub n_items: usize,
    pub n_ok: usize,
    pub n_failed: usize,
    /// Items carried over from an earlier partial run.
    pub n_resumed: usize,
    pub failure_rate: f64,
    pub failing: bool,
}

/// Successful records of `run_id` already in `path`. A torn final line
/// from an interrupted append is ignored.
fn completed_records(path: &Path, run_id: &str) -> Result<HashMap<String, PredictionRecord>, ZeroShotError> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(HashMap::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut done = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("{}: skipping unreadable line {}: {e}", path.display(), i + 1);
                continue;
            }
        };
        if rec.run_id != run_id {
            return Err(ZeroShotError::RunIdConflict {
                path: path.to_path_buf(),
                expected: run_id.to_string(),
                found: rec.run_id,
            });
        }
        if rec.is_ok() {
            done.insert(rec.image_id.clone(), rec);
        }
    }
    Ok(done)
}

fn jsonl(records: &[&PredictionRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    out
}

const CHUNK: usize = 64;

/// Predicts every item into `out` (JSONL). Resumable: successful records
/// for the same `run_id` are kept, failed ones retried. Records are
/// appended per chunk while running, and the file is finally rewritten in
/// item order, so the result does not depend on completion order.
pub fn run_batch(
    items: &[BatchItem],
    targets: &TargetSet,
    engine: &Engine<'_>,
    ctx: &RunContext,
    out: &Path,
    concurrency: usize,
) -> Result<BatchOutcome, ZeroShotError> {
    let mut done = completed_records(out, &ctx.run_id)?;
    let wanted: BTreeSet<&str> = items.iter().map(|i| i.image_id.as_str()).collect();
    done.retain(|id, _| wanted.contains(id.as_str()));
    let n_resumed = done.len();
    let todo: Vec<&BatchItem> = items.iter().filter(|i| !done.contains_key(&i.image_id)).collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency.max(1))
        .build()
        .map_err(|e| io_err(out)(io::Error::other(e.to_string())))?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut fresh: HashMap<String, PredictionRecord> = HashMap::new();
    for chunk in todo.chunks(CHUNK) {
        let records: Vec<PredictionRecord> =
            pool.install(|| chunk.par_iter().map(|item| predict_item(item, targets, engine, ctx)).collect());
        let mut file = fs::OpenOptions::new().create(true).append(true).open(out).map_err(io_err(out))?;
        file.write_all(&jsonl(&records.iter().collect::<Vec<_>>())).map_err(io_err(out))?;
        for r in records {
            fresh.insert(r.image_id.clone(), r);
        }
    }

    let ordered: Vec<&PredictionRecord> = items
        .iter()
        .filter_map(|i| done.get(&i.image_id).or_else(|| fresh.get(&i.image_id)))
        .collect();
    write_atomic(out, &jsonl(&ordered)).map_err(io_err(out))?;

    let n_failed = ordered.iter().filter(|r| !r.is_ok()).count();
    let n_items = items.len();
    let failure_rate = if n_items == 0 { 0.0 } else { n_failed as f64 / n_items as f64 };
    Ok(BatchOutcome {
        n_items,
        n_ok: n_items - n_failed,
        n_failed,
        n_resumed,
        failure_rate,
        failing: failure_rate > MAX_FAILURE_RATE,
    })
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, ZeroShotError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|source| ZeroShotError::Json { path: path.to_path_buf(), source }))
        .collect()
}

/// Successful predictions keyed by image id.
pub fn prediction_map(records: &[PredictionRecord]) -> BTreeMap<String, IntensityClass> {
    records.iter().filter_map(|r| r.predicted.map(|p| (r.image_id.clone(), p))).collect()
}
