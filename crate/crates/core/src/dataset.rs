//! Participant-organised image annotation datasets.
//!
//! On disk a dataset is a directory:
//!
//! ```text
//! manifest.json
//! participants.csv
//! records/<participant_id>.jsonl
//! splits.json            (optional)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, Read};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDateTime, Timelike, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fsutil::{to_json_bytes, write_atomic};
use crate::taxonomy::LabelDictionary;
use crate::IntensityClass;

pub const DATASET_SCHEMA: &str = "camannot-dataset/1";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("missing required column {0:?}")]
    MissingColumn(&'static str),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing manifest in {0}")]
    MissingManifest(PathBuf),
    #[error("corrupt manifest {path}: {message}")]
    CorruptManifest { path: PathBuf, message: String },
    #[error("corrupt record file {path} line {line}: {message}")]
    CorruptRecords { path: PathBuf, line: usize, message: String },
    #[error("split needs at least 3 participants, got {0}")]
    TooFewParticipants(usize),
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    BadFractions((f64, f64, f64)),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Female,
    Male,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Participant {
    pub id: String,
    pub age: Option<u32>,
    pub sex: Option<Sex>,
}

impl Participant {
    pub fn bare(id: impl Into<String>) -> Self {
        Participant { id: id.into(), age: None, sex: None }
    }
}

mod utc_seconds {
    use chrono::{DateTime, SecondsFormat, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ts: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&ts.to_rfc3339_opts(SecondsFormat::Secs, true))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let s = String::deserialize(d)?;
        super::parse_timestamp(&s).ok_or_else(|| serde::de::Error::custom(format!("bad timestamp {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub participant_id: String,
    #[serde(with = "utc_seconds")]
    pub timestamp: DateTime<Utc>,
    pub image_ref: Option<String>,
    pub raw_label: String,
    pub intensity: IntensityClass,
}

impl ImageRecord {
    /// `<participant_id>@<unix seconds>`; unique because (participant,
    /// timestamp) pairs are deduplicated on ingest.
    pub fn image_id(&self) -> String {
        image_id(&self.participant_id, self.timestamp)
    }
}

pub fn image_id(participant_id: &str, timestamp: DateTime<Utc>) -> String {
    format!("{participant_id}@{}", timestamp.timestamp())
}

/// Accepts RFC 3339, or naive `YYYY-MM-DD[T ]HH:MM:SS[.f]` taken as UTC.
/// Sub-second precision is dropped.
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    let parsed = DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .ok()
        .or_else(|| {
            ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"]
                .iter()
                .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
                .map(|n| n.and_utc())
        })?;
    parsed.with_nanosecond(0)
}

fn valid_participant_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub study_id: String,
    pub participants: BTreeMap<String, Participant>,
    /// Per participant, sorted by timestamp.
    pub records: BTreeMap<String, Vec<ImageRecord>>,
}

impl Dataset {
    pub fn n_records(&self) -> usize {
        self.records.values().map(Vec::len).sum()
    }

    pub fn participant_ids(&self) -> Vec<String> {
        self.participants.keys().cloned().collect()
    }

    /// All records in (participant, timestamp) order.
    pub fn iter_records(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records.values().flatten()
    }

    pub fn records_of<'a>(&'a self, participants: &'a BTreeSet<String>) -> impl Iterator<Item = &'a ImageRecord> {
        self.records
            .iter()
            .filter(move |(pid, _)| participants.contains(*pid))
            .flat_map(|(_, rs)| rs)
    }

    pub fn index_by_image_id(&self) -> BTreeMap<String, &ImageRecord> {
        self.iter_records().map(|r| (r.image_id(), r)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Ingested {
    pub dataset: Dataset,
    pub row_errors: Vec<RowError>,
    pub warnings: Vec<String>,
    /// Non-trivial labels the dictionary did not map.
    pub gaps: BTreeSet<String>,
}

/// Parses an annotation CSV (`participant_id,timestamp,raw_label[,image_ref]`)
/// and an optional participants sidecar (`id,age,sex`).
pub fn ingest_csv<R: Read, P: Read>(
    annotations: R,
    participants: Option<P>,
    study_id: &str,
    dict: &LabelDictionary,
) -> Result<Ingested, DatasetError> {
    let mut out = Ingested { dataset: Dataset { study_id: study_id.to_string(), ..Default::default() }, ..Default::default() };

    if let Some(sidecar) = participants {
        read_participants(sidecar, &mut out)?;
    }

    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::Fields).flexible(true).from_reader(annotations);
    let headers = rdr.headers()?.clone();
    let col = |name: &'static str| headers.iter().position(|h| h == name);
    let pid_col = col("participant_id").ok_or(DatasetError::MissingColumn("participant_id"))?;
    let ts_col = col("timestamp").ok_or(DatasetError::MissingColumn("timestamp"))?;
    let label_col = col("raw_label").ok_or(DatasetError::MissingColumn("raw_label"))?;
    let image_col = col("image_ref");

    let mut raw: BTreeMap<String, Vec<ImageRecord>> = BTreeMap::new();
    for (i, row) in rdr.records().enumerate() {
        let line = row.as_ref().ok().and_then(|r| r.position()).map_or(i as u64 + 2, |p| p.line());
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                out.row_errors.push(RowError { line, message: e.to_string() });
                continue;
            }
        };
        let field = |c: usize| row.get(c).unwrap_or("");
        let pid = field(pid_col).to_string();
        if !valid_participant_id(&pid) {
            out.row_errors.push(RowError { line, message: format!("invalid participant_id {pid:?}") });
            continue;
        }
        let Some(timestamp) = parse_timestamp(field(ts_col)) else {
            out.row_errors.push(RowError { line, message: format!("malformed timestamp {:?}", field(ts_col)) });
            continue;
        };
        let raw_label = field(label_col).to_string();
        let lookup = dict.lookup(&raw_label);
        if lookup.is_gap() {
            out.gaps.insert(crate::taxonomy::normalize_label(&raw_label));
        }
        let image_ref = image_col.map(field).filter(|s| !s.is_empty()).map(str::to_string);
        raw.entry(pid.clone()).or_default().push(ImageRecord {
            participant_id: pid,
            timestamp,
            image_ref,
            raw_label,
            intensity: lookup.intensity(),
        });
    }

    for (pid, mut records) in raw {
        // stable: equal timestamps keep file order, so dedup keeps the first
        records.sort_by_key(|r| r.timestamp);
        let before = records.len();
        records.dedup_by(|later, earlier| later.timestamp == earlier.timestamp);
        if records.len() != before {
            out.warnings.push(format!(
                "participant {pid}: dropped {} duplicate timestamp row(s), kept first",
                before - records.len()
            ));
        }
        out.dataset.participants.entry(pid.clone()).or_insert_with(|| Participant::bare(&pid));
        out.dataset.records.insert(pid, records);
    }
    for pid in out.dataset.participants.keys() {
        out.dataset.records.entry(pid.clone()).or_default();
    }
    Ok(out)
}

#[derive(Deserialize)]
struct ParticipantRow {
    id: String,
    #[serde(default)]
    age: String,
    #[serde(default)]
    sex: String,
}

fn read_participants<R: Read>(reader: R, out: &mut Ingested) -> Result<(), DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::Fields).from_reader(reader);
    for (i, row) in rdr.deserialize::<ParticipantRow>().enumerate() {
        let line = i as u64 + 2;
        let row = row?;
        if !valid_participant_id(&row.id) {
            out.row_errors.push(RowError { line, message: format!("participants: invalid id {:?}", row.id) });
            continue;
        }
        let age = match row.age.as_str() {
            "" => None,
            s => match s.parse::<u32>() {
                Ok(a) if a <= 130 => Some(a),
                _ => {
                    out.warnings.push(format!("participant {}: invalid age {s:?} dropped", row.id));
                    None
                }
            },
        };
        let sex = match row.sex.to_ascii_lowercase().as_str() {
            "" => None,
            "female" | "f" => Some(Sex::Female),
            "male" | "m" => Some(Sex::Male),
            other => {
                out.warnings.push(format!("participant {}: unrecognised sex {other:?} dropped", row.id));
                None
            }
        };
        if out.dataset.participants.contains_key(&row.id) {
            out.warnings.push(format!("participants: duplicate id {}, kept first", row.id));
            continue;
        }
        out.dataset.participants.insert(row.id.clone(), Participant { id: row.id, age, sex });
    }
    Ok(())
}

pub fn ingest_paths(
    annotations: &Path,
    participants: Option<&Path>,
    study_id: &str,
    dict: &LabelDictionary,
) -> Result<Ingested, DatasetError> {
    let file = fs::File::open(annotations).map_err(io_err(annotations))?;
    let sidecar = participants.map(|p| fs::File::open(p).map_err(io_err(p))).transpose()?;
    ingest_csv(file, sidecar, study_id, dict)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    n_records: usize,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema: String,
    study_id: String,
    n_records: usize,
    participants: Vec<ManifestEntry>,
}

fn record_file(pid: &str) -> String {
    format!("records/{pid}.jsonl")
}

/// Writes the dataset directory. Output bytes depend only on the dataset.
pub fn persist(dataset: &Dataset, dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(dir.join("records")).map_err(io_err(dir))?;
    let manifest = Manifest {
        schema: DATASET_SCHEMA.to_string(),
        study_id: dataset.study_id.clone(),
        n_records: dataset.n_records(),
        participants: dataset
            .participants
            .keys()
            .map(|id| ManifestEntry {
                id: id.clone(),
                n_records: dataset.records.get(id).map_or(0, Vec::len),
                file: record_file(id),
            })
            .collect(),
    };

    let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    wtr.write_record(["id", "age", "sex"])?;
    for p in dataset.participants.values() {
        let age = p.age.map(|a| a.to_string()).unwrap_or_default();
        let sex = match p.sex {
            Some(Sex::Female) => "female",
            Some(Sex::Male) => "male",
            None => "",
        };
        wtr.write_record([p.id.as_str(), &age, sex])?;
    }
    let participants_csv = wtr.into_inner().map_err(|e| DatasetError::Io {
        path: dir.join("participants.csv"),
        source: std::io::Error::other(e.to_string()),
    })?;
    let path = dir.join("participants.csv");
    write_atomic(&path, &participants_csv).map_err(io_err(&path))?;

    for id in dataset.participants.keys() {
        let mut buf = Vec::new();
        for record in dataset.records.get(id).into_iter().flatten() {
            serde_json::to_writer(&mut buf, record)?;
            buf.push(b'\n');
        }
        let path = dir.join(record_file(id));
        write_atomic(&path, &buf).map_err(io_err(&path))?;
    }
    // manifest last: its presence marks a complete dataset
    let path = dir.join("manifest.json");
    write_atomic(&path, &to_json_bytes(&manifest)?).map_err(io_err(&path))?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Dataset, DatasetError> {
    let manifest_path = dir.join("manifest.json");
    let bytes = match fs::read(&manifest_path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(DatasetError::MissingManifest(dir.to_path_buf()))
        }
        Err(e) => return Err(DatasetError::Io { path: manifest_path, source: e }),
    };
    let corrupt = |message: String| DatasetError::CorruptManifest { path: manifest_path.clone(), message };
    let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| corrupt(e.to_string()))?;
    if manifest.schema != DATASET_SCHEMA {
        return Err(corrupt(format!("unsupported schema {:?}", manifest.schema)));
    }

    let mut dataset = Dataset { study_id: manifest.study_id, ..Default::default() };
    let participants_path = dir.join("participants.csv");
    let file = fs::File::open(&participants_path).map_err(io_err(&participants_path))?;
    let mut scratch = Ingested::default();
    read_participants(file, &mut scratch)?;
    if let Some(e) = scratch.row_errors.first() {
        return Err(DatasetError::CorruptRecords {
            path: participants_path,
            line: e.line as usize,
            message: e.message.clone(),
        });
    }
    dataset.participants = scratch.dataset.participants;

    let mut total = 0;
    for entry in &manifest.participants {
        if !valid_participant_id(&entry.id) || entry.file != record_file(&entry.id) {
            return Err(corrupt(format!("bad participant entry {:?}", entry.id)));
        }
        dataset.participants.entry(entry.id.clone()).or_insert_with(|| Participant::bare(&entry.id));
        let path = dir.join(&entry.file);
        let file = fs::File::open(&path).map_err(io_err(&path))?;
        let mut records = Vec::with_capacity(entry.n_records);
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(&path))?;
            let bad = |message: String| DatasetError::CorruptRecords { path: path.clone(), line: i + 1, message };
            let record: ImageRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            if record.participant_id != entry.id {
                return Err(bad(format!("record belongs to {:?}", record.participant_id)));
            }
            if records.last().is_some_and(|prev: &ImageRecord| prev.timestamp >= record.timestamp) {
                return Err(bad("timestamps not strictly increasing".into()));
            }
            records.push(record);
        }
        if records.len() != entry.n_records {
            return Err(corrupt(format!(
                "participant {} lists {} records, file has {}",
                entry.id,
                entry.n_records,
                records.len()
            )));
        }
        total += records.len();
        dataset.records.insert(entry.id.clone(), records);
    }
    if total != manifest.n_records {
        return Err(corrupt(format!("n_records {} but files hold {total}", manifest.n_records)));
    }
    for pid in dataset.participants.keys() {
        dataset.records.entry(pid.clone()).or_default();
    }
    Ok(dataset)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?} (expected train, val, test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub participant_id: String,
    pub split: Split,
    pub seed: u64,
}

pub const DEFAULT_FRACTIONS: (f64, f64, f64) = (0.70, 0.15, 0.15);

/// `(n_train, n_val, n_test)` for `n` participants: val and test are
/// floored, train takes the remainder.
pub fn split_sizes(n: usize, fractions: (f64, f64, f64)) -> (usize, usize, usize) {
    // the epsilon absorbs representation error such as 0.15 * 20 = 2.9999…
    let n_val = (fractions.1 * n as f64 + 1e-9).floor() as usize;
    let n_test = (fractions.2 * n as f64 + 1e-9).floor() as usize;
    (n - n_val - n_test, n_val, n_test)
}

/// Seeded random partition of participants, a pure function of the sorted
/// ids, the seed, and the fractions.
pub fn split_ids(ids: &[String], seed: u64, fractions: (f64, f64, f64)) -> Result<Vec<SplitAssignment>, DatasetError> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !f.is_finite() || *f < 0.0) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadFractions(fractions));
    }
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    let n = sorted.len();
    if n < 3 {
        return Err(DatasetError::TooFewParticipants(n));
    }
    let (n_train, n_val, _) = split_sizes(n, fractions);
    let mut shuffled = sorted;
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out: Vec<SplitAssignment> = shuffled
        .into_iter()
        .enumerate()
        .map(|(i, participant_id)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            SplitAssignment { participant_id, split, seed }
        })
        .collect();
    out.sort_by(|x, y| x.participant_id.cmp(&y.participant_id));
    Ok(out)
}

pub fn split_participants(
    dataset: &Dataset,
    seed: u64,
    fractions: (f64, f64, f64),
) -> Result<Vec<SplitAssignment>, DatasetError> {
    split_ids(&dataset.participant_ids(), seed, fractions)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub seed: u64,
    pub fractions: (f64, f64, f64),
    pub assignments: BTreeMap<String, Split>,
}

impl SplitFile {
    pub fn new(seed: u64, fractions: (f64, f64, f64), assignments: &[SplitAssignment]) -> Self {
        SplitFile {
            seed,
            fractions,
            assignments: assignments.iter().map(|a| (a.participant_id.clone(), a.split)).collect(),
        }
    }

    pub fn members(&self, split: Split) -> BTreeSet<String> {
        self.assignments.iter().filter(|(_, s)| **s == split).map(|(p, _)| p.clone()).collect()
    }

    pub fn write(&self, dataset_dir: &Path) -> Result<(), DatasetError> {
        let path = dataset_dir.join("splits.json");
        write_atomic(&path, &to_json_bytes(self)?).map_err(io_err(&path))
    }

    pub fn read(dataset_dir: &Path) -> Result<Self, DatasetError> {
        let path = dataset_dir.join("splits.json");
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// One row of an image manifest: every captured frame, labelled or not.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestImage {
    pub participant_id: String,
    pub timestamp: DateTime<Utc>,
    pub image_ref: Option<String>,
}

pub fn read_image_manifest<R: Read>(reader: R) -> Result<Vec<ManifestImage>, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::Fields).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &'static str| headers.iter().position(|h| h == name);
    let pid_col = col("participant_id").ok_or(DatasetError::MissingColumn("participant_id"))?;
    let ts_col = col("timestamp").ok_or(DatasetError::MissingColumn("timestamp"))?;
    let image_col = col("image_ref");
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let ts = row.get(ts_col).unwrap_or("");
        let timestamp = parse_timestamp(ts).ok_or_else(|| DatasetError::CorruptRecords {
            path: PathBuf::from("<image manifest>"),
            line: i + 2,
            message: format!("malformed timestamp {ts:?}"),
        })?;
        out.push(ManifestImage {
            participant_id: row.get(pid_col).unwrap_or("").to_string(),
            timestamp,
            image_ref: image_col.and_then(|c| row.get(c)).filter(|s| !s.is_empty()).map(str::to_string),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dict() -> LabelDictionary {
        let mut d = LabelDictionary::new();
        d.insert("7030 sleeping", IntensityClass::Sleep).unwrap();
        d.insert("5060 shopping miscellaneous", IntensityClass::Light).unwrap();
        d.insert("11580 office work", IntensityClass::Sedentary).unwrap();
        d
    }

    fn ingest(csv: &str) -> Ingested {
        ingest_csv(csv.as_bytes(), None::<&[u8]>, "s", &dict()).unwrap()
    }

    #[test]
    fn ingest_maps_labels() {
        let csv = "participant_id,timestamp,raw_label
P1,2014-05-01T10:00:00Z,7030 sleeping
P1,2014-05-01T10:00:20Z,uncodeable;0001 camera taken off
P1,2014-05-01T10:00:40Z,5060 shopping miscellaneous
";
        let out = ingest(csv);
        let classes: Vec<_> = out.dataset.records["P1"].iter().map(|r| r.intensity).collect();
        assert_eq!(classes, vec![IntensityClass::Sleep, IntensityClass::Unknown, IntensityClass::Light]);
        assert!(out.row_errors.is_empty());
        assert!(out.gaps.is_empty());
    }

    #[test]
    fn empty_csv_is_empty_dataset() {
        let out = ingest("participant_id,timestamp,raw_label,image_ref\n");
        assert_eq!(out.dataset.participants.len(), 0);
        assert_eq!(out.dataset.n_records(), 0);
    }

    #[test]
    fn bad_timestamp_names_line() {
        let out = ingest("participant_id,timestamp,raw_label\nP1,not-a-date,7030 sleeping\n");
        assert_eq!(out.row_errors.len(), 1);
        assert_eq!(out.row_errors[0].line, 2);
        assert!(out.row_errors[0].message.contains("not-a-date"));
    }

    #[test]
    fn missing_column_is_fatal() {
        let err = ingest_csv("participant_id,raw_label\n".as_bytes(), None::<&[u8]>, "s", &dict()).unwrap_err();
        assert!(matches!(err, DatasetError::MissingColumn("timestamp")));
    }

    #[test]
    fn duplicates_keep_first_and_sort() {
        let csv = "participant_id,timestamp,raw_label
P1,2014-05-01 10:01:00,11580 office work
P1,2014-05-01 10:00:00,7030 sleeping
P1,2014-05-01T10:00:00Z,5060 shopping miscellaneous
";
        let out = ingest(csv);
        let recs = &out.dataset.records["P1"];
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].raw_label, "7030 sleeping");
        assert_eq!(recs[1].raw_label, "11580 office work");
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn unmapped_labels_become_gaps() {
        let out = ingest("participant_id,timestamp,raw_label\nP1,2014-05-01T10:00:00Z,9999 Odd Thing\n");
        assert_eq!(out.dataset.records["P1"][0].intensity, IntensityClass::Unknown);
        assert!(out.gaps.contains("9999 odd thing"));
    }

    #[test]
    fn participant_sidecar() {
        let sidecar = "id,age,sex\nP1,34,female\nP2,612,m\nP3,,\n";
        let csv = "participant_id,timestamp,raw_label\nP1,2014-05-01T10:00:00Z,7030 sleeping\n";
        let out = ingest_csv(csv.as_bytes(), Some(sidecar.as_bytes()), "s", &dict()).unwrap();
        let ps = &out.dataset.participants;
        assert_eq!(ps["P1"], Participant { id: "P1".into(), age: Some(34), sex: Some(Sex::Female) });
        assert_eq!(ps["P2"].age, None);
        assert_eq!(ps["P2"].sex, Some(Sex::Male));
        assert_eq!(out.dataset.records["P3"].len(), 0);
        assert!(out.warnings.iter().any(|w| w.contains("612")));
    }

    #[test]
    fn path_like_ids_rejected() {
        let out = ingest("participant_id,timestamp,raw_label\n../x,2014-05-01T10:00:00Z,7030 sleeping\n");
        assert_eq!(out.row_errors.len(), 1);
    }

    fn two_participant() -> Dataset {
        let csv = "participant_id,timestamp,raw_label,image_ref
P1,2014-05-01T10:00:00Z,7030 sleeping,img/a.png
P1,2014-05-01T10:00:20Z,\"uncodeable;0002 image dark/blurred/obscured\",
P2,2014-05-02T09:00:00Z,\"11580 office work\",img/b.png
";
        let sidecar = "id,age,sex\nP1,40,male\n";
        ingest_csv(csv.as_bytes(), Some(sidecar.as_bytes()), "oxf", &dict()).unwrap().dataset
    }

    #[test]
    fn persist_load_round_trip_and_stable_bytes() {
        let ds = two_participant();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        persist(&ds, a.path()).unwrap();
        persist(&ds, b.path()).unwrap();
        assert_eq!(load(a.path()).unwrap(), ds);
        for f in ["manifest.json", "participants.csv", "records/P1.jsonl", "records/P2.jsonl"] {
            let x = fs::read(a.path().join(f)).unwrap();
            assert_eq!(x, fs::read(b.path().join(f)).unwrap(), "{f}");
            assert!(!x.contains(&b'\r'));
        }
    }

    #[test]
    fn load_errors() {
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load(empty.path()), Err(DatasetError::MissingManifest(_))));
        fs::write(empty.path().join("manifest.json"), "{not json").unwrap();
        match load(empty.path()) {
            Err(DatasetError::CorruptManifest { path, .. }) => assert!(path.ends_with("manifest.json")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_sizes_floor_policy() {
        assert_eq!(split_sizes(161, DEFAULT_FRACTIONS), (113, 24, 24));
        assert_eq!(split_sizes(20, DEFAULT_FRACTIONS), (14, 3, 3));
        assert_eq!(split_sizes(3, DEFAULT_FRACTIONS), (3, 0, 0));
    }

    #[test]
    fn split_errors() {
        let ids: Vec<String> = vec!["a".into(), "b".into()];
        assert!(matches!(split_ids(&ids, 0, DEFAULT_FRACTIONS), Err(DatasetError::TooFewParticipants(2))));
        let ids: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        assert!(matches!(split_ids(&ids, 0, (0.5, 0.2, 0.2)), Err(DatasetError::BadFractions(_))));
    }

    #[test]
    fn split_is_deterministic() {
        let ids: Vec<String> = (0..161).map(|i| format!("P{i:03}")).collect();
        let a = split_ids(&ids, 0, DEFAULT_FRACTIONS).unwrap();
        let mut reversed = ids.clone();
        reversed.reverse();
        let b = split_ids(&reversed, 0, DEFAULT_FRACTIONS).unwrap();
        assert_eq!(a, b);
        let counts = |s| a.iter().filter(|x| x.split == s).count();
        assert_eq!((counts(Split::Train), counts(Split::Val), counts(Split::Test)), (113, 24, 24));
    }

    proptest! {
        #[test]
        fn split_partition(n in 3usize..500, seed: u64) {
            let ids: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
            let a = split_ids(&ids, seed, DEFAULT_FRACTIONS).unwrap();
            prop_assert_eq!(a.len(), n);
            let unique: BTreeSet<&str> = a.iter().map(|x| x.participant_id.as_str()).collect();
            prop_assert_eq!(unique.len(), n);
            let (tr, va, te) = split_sizes(n, DEFAULT_FRACTIONS);
            prop_assert_eq!(a.iter().filter(|x| x.split == Split::Train).count(), tr);
            prop_assert_eq!(a.iter().filter(|x| x.split == Split::Val).count(), va);
            prop_assert_eq!(a.iter().filter(|x| x.split == Split::Test).count(), te);
        }

        #[test]
        fn ingest_orders_and_round_trips(rows in prop::collection::vec((0u8..4, 0i64..5000, 0usize..4), 0..60)) {
            let labels = ["7030 sleeping", "5060 shopping miscellaneous", "undefined", "11580 office work"];
            let mut csv = String::from("participant_id,timestamp,raw_label\n");
            for (p, t, l) in &rows {
                let ts = DateTime::from_timestamp(1_400_000_000 + t, 0).unwrap();
                csv.push_str(&format!("P{p},{},{}\n", ts.to_rfc3339(), labels[*l]));
            }
            let ds = ingest(&csv).dataset;
            for recs in ds.records.values() {
                prop_assert!(recs.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
            }
            let dir = tempfile::tempdir().unwrap();
            persist(&ds, dir.path()).unwrap();
            prop_assert_eq!(load(dir.path()).unwrap(), ds);
        }
    }
}
