//! Dataset-quality diagnostics: capture rate, labelled events, time
//! covered, image obscurity statistics, and uncodeable tallies.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{image_id, Dataset, ManifestImage};
use crate::stats::{median, quantile_sorted};
use crate::taxonomy::{is_trivial, normalize_label};
use crate::IntensityClass;

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("image has no pixels")]
    EmptyImage,
    #[error("pixel buffer length {0} is not a multiple of 3")]
    NotRgb(usize),
    #[error("median interval must be positive, got {0}")]
    NonPositiveInterval(f64),
    #[error("decoding {path}: {message}")]
    Decode { path: String, message: String },
}

/// Obscurity statistics: `ln(1 + Σ_c mean_c)` and `ln(1 + Σ_c var_c)` over
/// RGB channels with values in `[0, 255]` (population variance).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageStats {
    pub mean_star: f64,
    pub variance_star: f64,
}

/// `pixels` is interleaved RGB.
pub fn image_stats(pixels: &[u8]) -> Result<ImageStats, AuditError> {
    if pixels.is_empty() {
        return Err(AuditError::EmptyImage);
    }
    if !pixels.len().is_multiple_of(3) {
        return Err(AuditError::NotRgb(pixels.len()));
    }
    let n = (pixels.len() / 3) as u128;
    let mut sum = [0u128; 3];
    let mut sum_sq = [0u128; 3];
    for px in pixels.chunks_exact(3) {
        for c in 0..3 {
            let v = px[c] as u128;
            sum[c] += v;
            sum_sq[c] += v * v;
        }
    }
    // integer accumulation keeps the result independent of pixel order
    let mean_total = sum.iter().sum::<u128>() as f64 / n as f64;
    let var_total: f64 = (0..3)
        .map(|c| (n * sum_sq[c] - sum[c] * sum[c]) as f64 / (n * n) as f64)
        .sum();
    Ok(ImageStats { mean_star: mean_total.ln_1p(), variance_star: var_total.ln_1p() })
}

pub fn image_stats_from_file(path: &Path) -> Result<ImageStats, AuditError> {
    let img = image::open(path).map_err(|e| AuditError::Decode {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    image_stats(img.to_rgb8().as_raw())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DtSummary {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

fn intervals(timestamps: &[i64]) -> Vec<f64> {
    timestamps.windows(2).map(|w| (w[1] - w[0]) as f64).collect()
}

fn summarise_intervals(mut dts: Vec<f64>) -> Option<DtSummary> {
    if dts.is_empty() {
        return None;
    }
    dts.sort_by(f64::total_cmp);
    Some(DtSummary {
        median: quantile_sorted(&dts, 0.5),
        q1: quantile_sorted(&dts, 0.25),
        q3: quantile_sorted(&dts, 0.75),
    })
}

/// Median and quartiles of successive differences of sorted unix-second
/// timestamps; `None` with fewer than two timestamps.
pub fn median_dt(timestamps: &[i64]) -> Option<DtSummary> {
    summarise_intervals(intervals(timestamps))
}

/// Maximal runs of identical non-trivial labels. Trivial labels end a run
/// and are not counted themselves.
pub fn count_labelled_events<S: AsRef<str>>(labels: &[S]) -> usize {
    let mut events = 0;
    let mut current: Option<String> = None;
    for label in labels {
        let label = label.as_ref();
        if is_trivial(label) {
            current = None;
            continue;
        }
        let norm = normalize_label(label);
        if current.as_deref() != Some(norm.as_str()) {
            events += 1;
            current = Some(norm);
        }
    }
    events
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeCovered {
    pub hours: f64,
    pub rounded: u64,
}

/// Labelled images × median interval, in hours.
pub fn time_covered(n_labelled: u64, median_dt_s: f64) -> Result<TimeCovered, AuditError> {
    if median_dt_s.is_nan() || median_dt_s <= 0.0 {
        return Err(AuditError::NonPositiveInterval(median_dt_s));
    }
    let hours = n_labelled as f64 * median_dt_s / 3600.0;
    Ok(TimeCovered { hours, rounded: hours.round() as u64 })
}

pub const UNCODEABLE_DARK: &str = "uncodeable;0002 image dark/blurred/obscured";
pub const UNCODEABLE_CAMERA_OFF: &str = "uncodeable;0001 camera taken off";
pub const UNDEFINED: &str = "undefined";
pub const UNKNOWN: &str = "<unknown>";
pub const UNLABELLED: &str = "unlabelled";
const EMPTY_LABEL: &str = "<empty>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncodeableTally {
    pub n_images: u64,
    pub counts: BTreeMap<String, u64>,
    pub percent: BTreeMap<String, f64>,
}

fn percent(count: u64, total: u64) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * count as f64 / total as f64
    }
}

fn unlabelled_images<'a>(dataset: &Dataset, manifest: &'a [ManifestImage]) -> Vec<&'a ManifestImage> {
    let known: BTreeSet<String> = dataset.iter_records().map(|r| r.image_id()).collect();
    let mut seen = BTreeSet::new();
    manifest
        .iter()
        .filter(|m| {
            let id = image_id(&m.participant_id, m.timestamp);
            !known.contains(&id) && seen.insert(id)
        })
        .collect()
}

/// Percent of all images per trivial-label reason. With an image manifest,
/// frames that have no annotation row at all count as `unlabelled`.
pub fn uncodeable_tally(dataset: &Dataset, manifest: Option<&[ManifestImage]>) -> UncodeableTally {
    let mut counts: BTreeMap<String, u64> =
        [UNCODEABLE_DARK, UNCODEABLE_CAMERA_OFF, UNDEFINED, UNKNOWN].iter().map(|k| (k.to_string(), 0)).collect();
    let mut n_images = 0u64;
    for record in dataset.iter_records() {
        n_images += 1;
        if is_trivial(&record.raw_label) {
            let key = normalize_label(&record.raw_label);
            let key = if key.is_empty() { EMPTY_LABEL.to_string() } else { key };
            *counts.entry(key).or_default() += 1;
        }
    }
    if let Some(manifest) = manifest {
        let unlabelled = unlabelled_images(dataset, manifest).len() as u64;
        counts.insert(UNLABELLED.to_string(), unlabelled);
        n_images += unlabelled;
    }
    let percent = counts.iter().map(|(k, &c)| (k.clone(), percent(c, n_images))).collect();
    UncodeableTally { n_images, counts, percent }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantTimeline {
    pub participant_id: String,
    pub n_images: usize,
    pub n_labelled: usize,
    pub n_events: usize,
    pub median_dt: Option<f64>,
}

pub fn participant_timelines(dataset: &Dataset) -> Vec<ParticipantTimeline> {
    dataset
        .records
        .iter()
        .map(|(pid, records)| {
            let ts: Vec<i64> = records.iter().map(|r| r.timestamp.timestamp()).collect();
            let labels: Vec<&str> = records.iter().map(|r| r.raw_label.as_str()).collect();
            ParticipantTimeline {
                participant_id: pid.clone(),
                n_images: records.len(),
                n_labelled: labels.iter().filter(|l| !is_trivial(l)).count(),
                n_events: count_labelled_events(&labels),
                median_dt: median_dt(&ts).map(|d| d.median),
            }
        })
        .collect()
}

/// Median instances of one class per participant, under both conventions
/// for participants that never show the class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassInstances {
    /// Over participants with at least one instance; `None` when no participant has any.
    pub median_observed: Option<f64>,
    pub n_participants_observed: usize,
    /// Over all participants, absent classes counted as zero.
    pub median_with_zeros: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub study_id: String,
    pub n_participants: usize,
    pub n_images: u64,
    pub n_labelled: u64,
    pub percent_labelled: f64,
    /// Pooled over every within-participant interval.
    pub dt: Option<DtSummary>,
    pub n_unique_labels: usize,
    pub instances_per_participant: BTreeMap<IntensityClass, ClassInstances>,
    pub median_events_per_participant: Option<f64>,
    pub uncodeable: UncodeableTally,
    pub time_covered: Option<TimeCovered>,
}

pub fn study_summary(dataset: &Dataset, manifest: Option<&[ManifestImage]>) -> StudySummary {
    let uncodeable = uncodeable_tally(dataset, manifest);
    let n_labelled = dataset.iter_records().filter(|r| !is_trivial(&r.raw_label)).count() as u64;

    let mut all_dts = Vec::new();
    for records in dataset.records.values() {
        let ts: Vec<i64> = records.iter().map(|r| r.timestamp.timestamp()).collect();
        all_dts.extend(intervals(&ts));
    }
    let dt = summarise_intervals(all_dts);

    let unique: BTreeSet<String> = dataset
        .iter_records()
        .filter(|r| !is_trivial(&r.raw_label))
        .map(|r| normalize_label(&r.raw_label))
        .collect();

    let mut instances_per_participant = BTreeMap::new();
    for class in [
        IntensityClass::Sedentary,
        IntensityClass::Light,
        IntensityClass::ModerateVigorous,
        IntensityClass::Sleep,
    ] {
        let counts: Vec<f64> = dataset
            .records
            .values()
            .map(|rs| rs.iter().filter(|r| r.intensity == class).count() as f64)
            .collect();
        let observed: Vec<f64> = counts.iter().copied().filter(|&c| c > 0.0).collect();
        instances_per_participant.insert(
            class,
            ClassInstances {
                median_observed: median(&observed).ok(),
                n_participants_observed: observed.len(),
                median_with_zeros: median(&counts).ok(),
            },
        );
    }

    let events: Vec<f64> = participant_timelines(dataset).iter().map(|t| t.n_events as f64).collect();

    StudySummary {
        study_id: dataset.study_id.clone(),
        n_participants: dataset.participants.len(),
        n_images: uncodeable.n_images,
        n_labelled,
        percent_labelled: percent(n_labelled, uncodeable.n_images),
        time_covered: dt.and_then(|d| time_covered(n_labelled, d.median).ok()),
        dt,
        n_unique_labels: unique.len(),
        instances_per_participant,
        median_events_per_participant: median(&events).ok(),
        uncodeable,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x}"))
}

/// Markdown rendering of the summary table.
pub fn summary_markdown(s: &StudySummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "| {} | value |", s.study_id);
    let _ = writeln!(out, "|---|---|");
    let _ = writeln!(out, "| Number of participants | {} |", s.n_participants);
    let _ = writeln!(
        out,
        "| Number of labelled images (% all images) | {} ({:.0}%) |",
        s.n_labelled, s.percent_labelled
    );
    let dt = s.dt.map_or_else(|| "n/a".to_string(), |d| format!("{} ({}, {})", d.median, d.q1, d.q3));
    let _ = writeln!(out, "| Median dt (1st, 3rd quartile) between images (s) | {dt} |");
    let _ = writeln!(out, "| No. unique labels | {} |", s.n_unique_labels);
    for (class, inst) in &s.instances_per_participant {
        let _ = writeln!(
            out,
            "| Median instances per participant: {class} | {} (n={}; with zeros: {}) |",
            fmt_opt(inst.median_observed),
            inst.n_participants_observed,
            fmt_opt(inst.median_with_zeros)
        );
    }
    let _ = writeln!(out, "| Median labelled events per participant | {} |", fmt_opt(s.median_events_per_participant));
    let tc = s.time_covered.map_or_else(|| "n/a".to_string(), |t| format!("{} ({:.2})", t.rounded, t.hours));
    let _ = writeln!(out, "| Time covered (h) | {tc} |");
    let _ = writeln!(out);
    let _ = writeln!(out, "| Uncodeable reason | % of images |");
    let _ = writeln!(out, "|---|---|");
    for (reason, pct) in &s.uncodeable.percent {
        let _ = writeln!(out, "| `{reason}` | {pct:.2}% |");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub image_ref: String,
    pub mean_star: f64,
    pub variance_star: f64,
    pub annotated: bool,
}

/// Obscurity statistics for every image that has a readable file under
/// `image_root`. Unreadable images are returned separately.
pub fn scatter_points(
    dataset: &Dataset,
    manifest: Option<&[ManifestImage]>,
    image_root: &Path,
) -> (Vec<ScatterPoint>, Vec<(String, String)>) {
    let mut items: Vec<(String, bool)> = dataset
        .iter_records()
        .filter_map(|r| r.image_ref.clone().map(|i| (i, !is_trivial(&r.raw_label))))
        .collect();
    if let Some(manifest) = manifest {
        items.extend(unlabelled_images(dataset, manifest).into_iter().filter_map(|m| m.image_ref.clone().map(|i| (i, false))));
    }
    let results: Vec<Result<ScatterPoint, (String, String)>> = items
        .into_par_iter()
        .map(|(image_ref, annotated)| {
            image_stats_from_file(&image_root.join(&image_ref))
                .map(|s| ScatterPoint { image_ref: image_ref.clone(), mean_star: s.mean_star, variance_star: s.variance_star, annotated })
                .map_err(|e| (image_ref, e.to_string()))
        })
        .collect();
    let mut points = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(p) => points.push(p),
            Err(f) => failures.push(f),
        }
    }
    (points, failures)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ingest_csv;
    use crate::taxonomy::LabelDictionary;
    use proptest::prelude::*;

    #[test]
    fn black_image() {
        let s = image_stats(&[0u8; 3 * 16]).unwrap();
        assert_eq!((s.mean_star, s.variance_star), (0.0, 0.0));
    }

    #[test]
    fn constant_gray() {
        let s = image_stats(&[128u8; 3 * 25]).unwrap();
        assert!((s.mean_star - 385f64.ln()).abs() < 1e-12);
        assert!((s.mean_star - 5.9532).abs() < 1e-4);
        assert_eq!(s.variance_star, 0.0);
    }

    #[test]
    fn half_black_half_white() {
        let mut px = vec![0u8; 3 * 10];
        px.extend(vec![255u8; 3 * 10]);
        let s = image_stats(&px).unwrap();
        // per channel: mean 127.5, population variance 127.5^2 = 16256.25
        assert!((s.mean_star - 383.5f64.ln()).abs() < 1e-12);
        assert!((s.mean_star - 5.9493).abs() < 1e-4);
        assert!((s.variance_star - (1.0 + 3.0 * 16256.25f64).ln()).abs() < 1e-12);
        assert!((s.variance_star - 10.7949).abs() < 1e-4);
    }

    #[test]
    fn empty_or_ragged_image() {
        assert!(matches!(image_stats(&[]), Err(AuditError::EmptyImage)));
        assert!(matches!(image_stats(&[1, 2]), Err(AuditError::NotRgb(2))));
    }

    #[test]
    fn median_dt_examples() {
        assert_eq!(median_dt(&[0, 24, 48, 72]).unwrap().median, 24.0);
        assert_eq!(median_dt(&[0, 20, 60]).unwrap().median, 30.0);
        assert_eq!(median_dt(&[5]), None);
        assert_eq!(median_dt(&[]), None);
    }

    #[test]
    fn labelled_events() {
        let l = ["A", "A", "B", "B", "B", "uncodeable;0002 image dark/blurred/obscured", "A"];
        assert_eq!(count_labelled_events(&l), 3);
        assert_eq!(count_labelled_events(&["undefined", "<unknown>"]), 0);
        assert_eq!(count_labelled_events(&["A", "B", "A", "B"]), 4);
        // a trivial label splits an otherwise continuous run
        assert_eq!(count_labelled_events(&["A", "undefined", "A"]), 2);
    }

    #[test]
    fn time_covered_examples() {
        let ox = time_covered(231_837, 24.0).unwrap();
        assert!((ox.hours - 1545.58).abs() < 0.005);
        assert_eq!(ox.rounded, 1546);
        let sc = time_covered(46_184, 84.0).unwrap();
        assert!((sc.hours - 1077.63).abs() < 0.005);
        assert_eq!(sc.rounded, 1078);
        assert_eq!(time_covered(0, 24.0).unwrap().hours, 0.0);
        assert!(time_covered(10, 0.0).is_err());
    }

    fn dataset(csv: &str) -> Dataset {
        let mut dict = LabelDictionary::new();
        dict.insert("a", IntensityClass::Sedentary).unwrap();
        dict.insert("b", IntensityClass::Light).unwrap();
        dict.insert("c", IntensityClass::ModerateVigorous).unwrap();
        ingest_csv(csv.as_bytes(), None::<&[u8]>, "t", &dict).unwrap().dataset
    }

    #[test]
    fn tally_half_dark() {
        let ds = dataset(
            "participant_id,timestamp,raw_label
P1,2020-01-01T00:00:00Z,a
P1,2020-01-01T00:00:20Z,uncodeable;0002 image dark/blurred/obscured
P1,2020-01-01T00:00:40Z,uncodeable;0002 image dark/blurred/obscured
P1,2020-01-01T00:01:00Z,b
",
        );
        let t = uncodeable_tally(&ds, None);
        assert_eq!(t.percent[UNCODEABLE_DARK], 50.0);
        assert_eq!(t.percent[UNCODEABLE_CAMERA_OFF], 0.0);
        assert!(!t.percent.contains_key(UNLABELLED));
    }

    #[test]
    fn tally_without_trivial_labels() {
        let ds = dataset("participant_id,timestamp,raw_label\nP1,2020-01-01T00:00:00Z,a\n");
        let t = uncodeable_tally(&ds, None);
        assert!(t.percent.values().all(|&p| p == 0.0));
    }

    #[test]
    fn tally_counts_unlabelled_manifest_frames() {
        let ds = dataset("participant_id,timestamp,raw_label\nP1,2020-01-01T00:00:00Z,a\n");
        let manifest = crate::dataset::read_image_manifest(
            "participant_id,timestamp,image_ref\nP1,2020-01-01T00:00:00Z,x.png\nP1,2020-01-01T00:00:20Z,y.png\n".as_bytes(),
        )
        .unwrap();
        let t = uncodeable_tally(&ds, Some(&manifest));
        assert_eq!(t.n_images, 2);
        assert_eq!(t.percent[UNLABELLED], 50.0);
    }

    #[test]
    fn summary_single_participant_and_absent_class() {
        let ds = dataset(
            "participant_id,timestamp,raw_label
P1,2020-01-01T00:00:00Z,a
P1,2020-01-01T00:00:20Z,a
P1,2020-01-01T00:01:00Z,undefined
",
        );
        let s = study_summary(&ds, None);
        let sb = &s.instances_per_participant[&IntensityClass::Sedentary];
        assert_eq!(sb.median_observed, Some(2.0));
        let lipa = &s.instances_per_participant[&IntensityClass::Light];
        assert_eq!(lipa.median_observed, None);
        assert_eq!(lipa.n_participants_observed, 0);
        assert_eq!(lipa.median_with_zeros, Some(0.0));
        assert_eq!(s.n_labelled, 2);
        assert_eq!(s.dt.unwrap().median, 30.0);
        assert_eq!(s.n_unique_labels, 1);
        let trivial_total: u64 = s.uncodeable.counts.values().sum();
        assert_eq!(trivial_total, s.n_images - s.n_labelled);
        assert!(summary_markdown(&s).contains("| Number of participants | 1 |"));
    }

    proptest! {
        #[test]
        fn mean_star_increases_with_brightness(px in prop::collection::vec(0u8..255, 3..90), bump in 1u8..10) {
            let len = px.len() - px.len() % 3;
            prop_assume!(len > 0);
            let base = &px[..len];
            let brighter: Vec<u8> = base.iter().map(|&v| v.saturating_add(bump).max(v + 1)).collect();
            let a = image_stats(base).unwrap();
            let b = image_stats(&brighter).unwrap();
            prop_assert!(b.mean_star > a.mean_star);
        }

        #[test]
        fn events_ignore_spacing(labels in prop::collection::vec(0usize..4, 0..40)) {
            let names = ["a", "b", "undefined", "c"];
            let ls: Vec<&str> = labels.iter().map(|&i| names[i]).collect();
            let events = count_labelled_events(&ls);
            prop_assert!(events <= ls.iter().filter(|l| !is_trivial(l)).count());
        }

        #[test]
        fn time_covered_linear(n in 0u64..1_000_000, dt in 0.5f64..500.0, k in 1u64..5) {
            let one = time_covered(n, dt).unwrap().hours;
            prop_assert!((time_covered(n * k, dt).unwrap().hours - k as f64 * one).abs() <= 1e-9 * one.max(1.0));
            prop_assert!((time_covered(n, dt * k as f64).unwrap().hours - k as f64 * one).abs() <= 1e-9 * one.max(1.0));
        }
    }
}
