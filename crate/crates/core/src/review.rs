//! Human review of predictions: an append-only correction log, correction
//! burden metrics, and the HTTP API used by the review client.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::Dataset;
use crate::evaluation;
use crate::zeroshot::PredictionRecord;
use crate::IntensityClass;

pub const CONFIRM_HOTKEY: char = 'c';
pub const DEFAULT_PAGE: usize = 50;
pub const MAX_PAGE: usize = 500;

/// A reviewer's decision on one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Verdict {
    Class(IntensityClass),
    Confirm,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Class(c) => c.fmt(f),
            Verdict::Confirm => f.write_str("confirm"),
        }
    }
}

impl FromStr for Verdict {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("confirm") {
            return Ok(Verdict::Confirm);
        }
        match s.parse::<IntensityClass>() {
            Ok(c) if c.eval_index().is_some() => Ok(Verdict::Class(c)),
            _ => Err(format!("corrected must be SB, LIPA, MVPA or confirm, got {s:?}")),
        }
    }
}

impl Serialize for Verdict {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Verdict {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

mod rfc3339 {
    use super::*;

    pub fn serialize<S: Serializer>(t: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(&t.to_rfc3339_opts(SecondsFormat::Millis, true))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let s = String::deserialize(d)?;
        DateTime::parse_from_rfc3339(&s).map(|t| t.with_timezone(&Utc)).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correction {
    pub image_id: String,
    pub reviewer_id: String,
    pub corrected: Verdict,
    #[serde(with = "rfc3339")]
    pub at: DateTime<Utc>,
    pub prior_prediction: IntensityClass,
}

impl Correction {
    /// The label the reviewer settled on.
    pub fn final_label(&self) -> IntensityClass {
        match self.corrected {
            Verdict::Class(c) => c,
            Verdict::Confirm => self.prior_prediction,
        }
    }

    pub fn changed_prediction(&self) -> bool {
        self.final_label() != self.prior_prediction
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path} line {line}: {message}")]
    Log { path: PathBuf, line: usize, message: String },
}

/// Current state: the latest correction per (image, reviewer), in log order.
pub fn replay(log: &[Correction]) -> BTreeMap<(String, String), Correction> {
    let mut state = BTreeMap::new();
    for c in log {
        state.insert((c.image_id.clone(), c.reviewer_id.clone()), c.clone());
    }
    state
}

/// Per image, the label from the most recent correction by any reviewer.
pub fn truth_overrides(log: &[Correction]) -> BTreeMap<String, IntensityClass> {
    log.iter().map(|c| (c.image_id.clone(), c.final_label())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassProgress {
    pub n_reviewed: u64,
    pub n_corrected: u64,
    pub fraction_corrected: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReviewProgress {
    pub n_reviewed: u64,
    pub n_corrected: u64,
    /// `None` until something has been reviewed.
    pub fraction_corrected: Option<f64>,
    /// Keyed by prior prediction.
    pub per_class: BTreeMap<IntensityClass, ClassProgress>,
    /// Prior prediction → final label → count.
    pub matrix: BTreeMap<IntensityClass, BTreeMap<IntensityClass, u64>>,
}

fn fraction(n: u64, d: u64) -> Option<f64> {
    (d > 0).then(|| n as f64 / d as f64)
}

/// Correction burden over the replayed log; a confirmation, or a
/// correction to the predicted class, counts as reviewed but not corrected.
pub fn correction_metrics(log: &[Correction]) -> ReviewProgress {
    let mut p = ReviewProgress::default();
    for c in replay(log).values() {
        let changed = c.changed_prediction() as u64;
        p.n_reviewed += 1;
        p.n_corrected += changed;
        let cp = p.per_class.entry(c.prior_prediction).or_default();
        cp.n_reviewed += 1;
        cp.n_corrected += changed;
        *p.matrix.entry(c.prior_prediction).or_default().entry(c.final_label()).or_default() += 1;
    }
    p.fraction_corrected = fraction(p.n_corrected, p.n_reviewed);
    for cp in p.per_class.values_mut() {
        cp.fraction_corrected = fraction(cp.n_corrected, cp.n_reviewed);
    }
    p
}

pub fn read_log(path: &Path) -> Result<Vec<Correction>, ReviewError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => return Err(ReviewError::Io { path: path.to_path_buf(), source }),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| ReviewError::Io { path: path.to_path_buf(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ReviewError::Log {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Single appender for the correction log.
pub struct CorrectionLog {
    path: PathBuf,
    file: File,
    entries: Vec<Correction>,
}

impl CorrectionLog {
    pub fn open(path: &Path) -> Result<Self, ReviewError> {
        let entries = read_log(path)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|source| ReviewError::Io { path: dir.to_path_buf(), source })?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| ReviewError::Io { path: path.to_path_buf(), source })?;
        Ok(CorrectionLog { path: path.to_path_buf(), file, entries })
    }

    pub fn append(&mut self, c: Correction) -> Result<(), ReviewError> {
        let mut line = serde_json::to_vec(&c).expect("corrections serialize");
        line.push(b'\n');
        self.file
            .write_all(&line)
            .and_then(|_| self.file.sync_data())
            .map_err(|source| ReviewError::Io { path: self.path.clone(), source })?;
        self.entries.push(c);
        Ok(())
    }

    pub fn entries(&self) -> &[Correction] {
        &self.entries
    }
}

pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

pub struct ReviewService {
    pub dataset: Dataset,
    pub predictions: BTreeMap<String, PredictionRecord>,
    pub image_root: PathBuf,
    log: Mutex<CorrectionLog>,
    clock: Clock,
}

impl ReviewService {
    pub fn new(dataset: Dataset, predictions: Vec<PredictionRecord>, image_root: PathBuf, log: CorrectionLog) -> Self {
        ReviewService {
            dataset,
            predictions: predictions.into_iter().map(|p| (p.image_id.clone(), p)).collect(),
            image_root,
            log: Mutex::new(log),
            clock: Arc::new(Utc::now),
        }
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    fn corrections(&self) -> Vec<Correction> {
        self.log.lock().expect("log lock").entries().to_vec()
    }
}

fn api_error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": message.into() }))).into_response()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantEntry {
    pub participant_id: String,
    pub n_images: usize,
    pub n_predicted: usize,
    pub n_reviewed: usize,
}

async fn participants(State(s): State<Arc<ReviewService>>) -> Json<Vec<ParticipantEntry>> {
    let reviewed: std::collections::BTreeSet<String> = s.corrections().into_iter().map(|c| c.image_id).collect();
    let out = s
        .dataset
        .records
        .iter()
        .map(|(pid, recs)| ParticipantEntry {
            participant_id: pid.clone(),
            n_images: recs.len(),
            n_predicted: recs.iter().filter(|r| s.predictions.contains_key(&r.image_id())).count(),
            n_reviewed: recs.iter().filter(|r| reviewed.contains(&r.image_id())).count(),
        })
        .collect();
    Json(out)
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct PageQuery {
    /// Offset into the participant's chronological frame list.
    pub from: Option<usize>,
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub image_id: String,
    pub timestamp: String,
    pub image_url: Option<String>,
    pub annotated: IntensityClass,
    pub prediction: Option<PredictionRecord>,
    pub correction: Option<Correction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelinePage {
    pub participant_id: String,
    pub from: usize,
    pub limit: usize,
    pub total: usize,
    pub next: Option<usize>,
    pub frames: Vec<Frame>,
}

async fn timeline(
    State(s): State<Arc<ReviewService>>,
    UrlPath(pid): UrlPath<String>,
    Query(q): Query<PageQuery>,
) -> Response {
    let Some(recs) = s.dataset.records.get(&pid) else {
        return api_error(StatusCode::NOT_FOUND, format!("unknown participant {pid}"));
    };
    let from = q.from.unwrap_or(0);
    let limit = q.limit.unwrap_or(DEFAULT_PAGE).clamp(1, MAX_PAGE);
    // latest correction per image, across reviewers
    let latest: BTreeMap<String, Correction> = s.corrections().into_iter().map(|c| (c.image_id.clone(), c)).collect();
    let frames = recs
        .iter()
        .skip(from)
        .take(limit)
        .map(|r| {
            let id = r.image_id();
            Frame {
                image_url: r.image_ref.as_ref().map(|_| format!("/api/images/{id}")),
                timestamp: r.timestamp.to_rfc3339_opts(SecondsFormat::Secs, true),
                annotated: r.intensity,
                prediction: s.predictions.get(&id).cloned(),
                correction: latest.get(&id).cloned(),
                image_id: id,
            }
        })
        .collect();
    let end = from.saturating_add(limit);
    Json(TimelinePage {
        participant_id: pid,
        from,
        limit,
        total: recs.len(),
        next: (end < recs.len()).then_some(end),
        frames,
    })
    .into_response()
}

/// `image_ref` joined under the root, refusing anything that could escape it.
fn contained_path(root: &Path, image_ref: &str) -> Option<PathBuf> {
    let rel = Path::new(image_ref);
    rel.components().all(|c| matches!(c, Component::Normal(_))).then(|| root.join(rel))
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    }
}

async fn image(State(s): State<Arc<ReviewService>>, UrlPath(image_id): UrlPath<String>) -> Response {
    let index = s.dataset.index_by_image_id();
    let Some(image_ref) = index.get(&image_id).and_then(|r| r.image_ref.clone()) else {
        return api_error(StatusCode::NOT_FOUND, format!("no image for {image_id}"));
    };
    let Some(path) = contained_path(&s.image_root, &image_ref) else {
        return api_error(StatusCode::FORBIDDEN, "image reference outside the image root");
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => api_error(StatusCode::NOT_FOUND, format!("image file for {image_id} not readable")),
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionRequest {
    pub image_id: String,
    pub corrected: Verdict,
    #[serde(default)]
    pub reviewer_id: Option<String>,
}

async fn post_correction(State(s): State<Arc<ReviewService>>, body: Bytes) -> Response {
    let req: CorrectionRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return api_error(StatusCode::BAD_REQUEST, format!("malformed correction: {e}")),
    };
    let reviewer_id = req.reviewer_id.unwrap_or_else(|| "anonymous".into());
    if reviewer_id.trim().is_empty() {
        return api_error(StatusCode::BAD_REQUEST, "reviewer_id must not be blank");
    }
    if !s.dataset.index_by_image_id().contains_key(&req.image_id) {
        return api_error(StatusCode::NOT_FOUND, format!("unknown image {}", req.image_id));
    }
    let Some(prior) = s.predictions.get(&req.image_id).and_then(|p| p.predicted) else {
        return api_error(StatusCode::CONFLICT, format!("image {} has no prediction to review", req.image_id));
    };
    let c = Correction {
        image_id: req.image_id,
        reviewer_id,
        corrected: req.corrected,
        at: (s.clock)(),
        prior_prediction: prior,
    };
    let mut log = s.log.lock().expect("log lock");
    match log.append(c.clone()) {
        Ok(()) => (StatusCode::CREATED, Json(c)).into_response(),
        Err(e) => api_error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn progress(State(s): State<Arc<ReviewService>>) -> Json<ReviewProgress> {
    Json(correction_metrics(&s.corrections()))
}

async fn metrics(State(s): State<Arc<ReviewService>>) -> Json<evaluation::EvalReport> {
    let preds: Vec<PredictionRecord> = s.predictions.values().cloned().collect();
    Json(evaluation::report(&s.dataset, &preds, &truth_overrides(&s.corrections())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassHint {
    pub class: IntensityClass,
    pub hotkey: char,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub study_id: String,
    pub classes: Vec<ClassHint>,
    pub confirm_hotkey: char,
    pub order: String,
}

pub fn meta(dataset: &Dataset) -> Meta {
    Meta {
        study_id: dataset.study_id.clone(),
        classes: IntensityClass::EVALUATED
            .iter()
            .map(|c| ClassHint { class: *c, hotkey: c.hotkey().expect("evaluated classes have hotkeys") })
            .collect(),
        confirm_hotkey: CONFIRM_HOTKEY,
        order: "chronological".into(),
    }
}

async fn meta_route(State(s): State<Arc<ReviewService>>) -> Json<Meta> {
    Json(meta(&s.dataset))
}

pub fn router(service: Arc<ReviewService>) -> Router {
    Router::new()
        .route("/api/participants", get(participants))
        .route("/api/participants/{id}/timeline", get(timeline))
        .route("/api/images/{image_id}", get(image))
        .route("/api/corrections", post(post_correction))
        .route("/api/progress", get(progress))
        .route("/api/metrics", get(metrics))
        .route("/api/meta", get(meta_route))
        .with_state(service)
}

/// Binds `addr` and serves until the process ends. Bind failures are returned.
pub async fn serve(service: Arc<ReviewService>, addr: &str) -> io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("review service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service)).await
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;
    use IntensityClass::{Light as L, ModerateVigorous as M, Sedentary as S};

    fn c(image: &str, reviewer: &str, v: Verdict, prior: IntensityClass, t: i64) -> Correction {
        Correction {
            image_id: image.into(),
            reviewer_id: reviewer.into(),
            corrected: v,
            at: Utc.timestamp_opt(t, 0).unwrap(),
            prior_prediction: prior,
        }
    }

    #[test]
    fn verdict_wire_form() {
        assert_eq!(serde_json::to_string(&Verdict::Confirm).unwrap(), "\"confirm\"");
        assert_eq!(serde_json::from_str::<Verdict>("\"LIPA\"").unwrap(), Verdict::Class(L));
        assert!(serde_json::from_str::<Verdict>("\"Sleep\"").is_err());
    }

    #[test]
    fn ten_reviewed_two_corrected() {
        let mut log: Vec<Correction> = (0..8).map(|i| c(&format!("i{i}"), "r", Verdict::Confirm, S, i)).collect();
        log.push(c("i8", "r", Verdict::Class(L), S, 8));
        log.push(c("i9", "r", Verdict::Class(M), L, 9));
        let p = correction_metrics(&log);
        assert_eq!((p.n_reviewed, p.n_corrected), (10, 2));
        assert_eq!(p.fraction_corrected, Some(0.2));
        assert_eq!(p.per_class[&S].n_corrected, 1);
        assert_eq!(p.matrix[&L][&M], 1);
        assert_eq!(correction_metrics(&[]).fraction_corrected, None);
    }

    #[test]
    fn same_class_is_not_a_correction_and_latest_wins() {
        let log = vec![
            c("i", "r", Verdict::Class(M), S, 1),
            c("i", "r", Verdict::Class(S), S, 2),
            c("j", "r", Verdict::Class(S), S, 3),
        ];
        let p = correction_metrics(&log);
        assert_eq!((p.n_reviewed, p.n_corrected), (2, 0));
        assert_eq!(truth_overrides(&log)["i"], S);
    }

    #[test]
    fn log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corrections.jsonl");
        let entries = vec![c("a@1", "r", Verdict::Confirm, S, 1), c("a@2", "q", Verdict::Class(M), L, 2)];
        {
            let mut log = CorrectionLog::open(&path).unwrap();
            for e in &entries {
                log.append(e.clone()).unwrap();
            }
        }
        let reopened = CorrectionLog::open(&path).unwrap();
        assert_eq!(reopened.entries(), entries.as_slice());
        assert_eq!(read_log(&path).unwrap(), entries);
    }

    #[test]
    fn path_containment() {
        let root = Path::new("/data");
        assert_eq!(contained_path(root, "p1/a.png"), Some(PathBuf::from("/data/p1/a.png")));
        assert_eq!(contained_path(root, "../etc/passwd"), None);
        assert_eq!(contained_path(root, "/etc/passwd"), None);
    }

    fn verdict() -> impl Strategy<Value = Verdict> {
        prop_oneof![
            Just(Verdict::Confirm),
            Just(Verdict::Class(S)),
            Just(Verdict::Class(L)),
            Just(Verdict::Class(M))
        ]
    }

    proptest! {
        #[test]
        fn metrics_match_brute_force(entries in prop::collection::vec((0u8..6, 0u8..2, verdict(), 0usize..3), 0..60)) {
            let log: Vec<Correction> = entries
                .iter()
                .enumerate()
                .map(|(t, (img, rev, v, prior))| {
                    c(&format!("i{img}"), &format!("r{rev}"), *v, IntensityClass::EVALUATED[*prior], t as i64)
                })
                .collect();
            let p = correction_metrics(&log);
            // brute force: scan backwards for the last entry of each pair
            let mut seen = std::collections::BTreeSet::new();
            let (mut reviewed, mut corrected) = (0u64, 0u64);
            for e in log.iter().rev() {
                if seen.insert((e.image_id.clone(), e.reviewer_id.clone())) {
                    reviewed += 1;
                    if let Verdict::Class(k) = e.corrected {
                        corrected += (k != e.prior_prediction) as u64;
                    }
                }
            }
            prop_assert_eq!((p.n_reviewed, p.n_corrected), (reviewed, corrected));
        }
    }
}
