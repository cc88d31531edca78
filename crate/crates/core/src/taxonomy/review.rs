//! Hand-editable review file for turning dendrogram clusters into clean labels.
//!
//! ```text
//! # threshold: 0.2
//! CLUSTER 1: shopping miscellaneous
//!   5060 shopping miscellaneous  [LIPA]
//!   walking;5060 shopping miscellaneous  [LIPA]
//! ```
//!
//! The bracketed intensity on member lines is informational; it is
//! recomputed from the dictionary when merges are applied.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{normalize_label, parse_label, Dendrogram, LabelDictionary};
use crate::IntensityClass;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeProposal {
    pub dendrogram: Dendrogram,
    pub threshold: f64,
    pub proposed_clusters: Vec<Vec<String>>,
}

/// Cut `dendrogram` at `threshold` (clamped to `[0, 2]`).
pub fn propose_merges(dendrogram: Dendrogram, threshold: f64) -> MergeProposal {
    let threshold = threshold.clamp(0.0, 2.0);
    let proposed_clusters = dendrogram.cut(threshold);
    MergeProposal { dendrogram, threshold, proposed_clusters }
}

fn tokens(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn contains_run(haystack: &[&str], needle: &[&str]) -> bool {
    needle.is_empty() || haystack.windows(needle.len()).any(|w| w == needle)
}

/// Longest token run shared by every member's activity text, falling back
/// to the shortest member.
pub fn suggest_clean_name(members: &[String]) -> String {
    let activities: Vec<String> = members.iter().map(|m| parse_label(m).activity).collect();
    let Some(shortest) = activities
        .iter()
        .min_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)))
        .cloned()
    else {
        return String::new();
    };
    let reference = tokens(&shortest);
    let others: Vec<Vec<&str>> = activities.iter().map(|a| tokens(a)).collect();
    for len in (1..=reference.len()).rev() {
        let best = reference
            .windows(len)
            .filter(|w| others.iter().all(|o| contains_run(o, w)))
            .map(|w| w.join(" "))
            .min();
        if let Some(name) = best {
            return name;
        }
    }
    let fallback = members
        .iter()
        .map(|m| normalize_label(m))
        .min_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    fallback.unwrap_or_default()
}

pub fn render_review(proposal: &MergeProposal, dict: Option<&LabelDictionary>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# camannot clean-label review");
    let _ = writeln!(out, "# threshold: {}", proposal.threshold);
    let _ = writeln!(out, "# Edit the name after each colon; move member lines between clusters as needed.");
    for (i, members) in proposal.proposed_clusters.iter().enumerate() {
        let _ = writeln!(out, "CLUSTER {}: {}", i + 1, suggest_clean_name(members));
        for member in members {
            match dict {
                Some(d) => {
                    let _ = writeln!(out, "  {member}  [{}]", d.lookup_intensity(member));
                }
                None => {
                    let _ = writeln!(out, "  {member}");
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReviewCluster {
    pub number: usize,
    pub clean_name: String,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReviewError {
    #[error("review line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("label {label:?} appears in more than one cluster")]
    DuplicateMember { label: String },
    #[error("clean name {0:?} used by more than one cluster")]
    DuplicateCleanName(String),
    #[error("cluster {cluster} ({name}) mixes intensities: {}", fmt_members(.members))]
    IntensityConflict { cluster: usize, name: String, members: Vec<(String, IntensityClass)> },
    #[error("cluster {cluster} ({name}): label {label:?} has no dictionary intensity")]
    Unmapped { cluster: usize, name: String, label: String },
}

fn fmt_members(members: &[(String, IntensityClass)]) -> String {
    members.iter().map(|(l, c)| format!("{l:?}={c}")).collect::<Vec<_>>().join(", ")
}

fn strip_annotation(line: &str) -> &str {
    let trimmed = line.trim();
    if let Some(open) = trimmed.rfind('[') {
        if trimmed.ends_with(']') && trimmed[open + 1..trimmed.len() - 1].parse::<IntensityClass>().is_ok() {
            return trimmed[..open].trim_end();
        }
    }
    trimmed
}

pub fn parse_review(text: &str) -> Result<Vec<ReviewCluster>, ReviewError> {
    let mut clusters: Vec<ReviewCluster> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("CLUSTER ") {
            let (num, name) = rest.split_once(':').ok_or_else(|| ReviewError::Syntax {
                line: line_no,
                message: "expected `CLUSTER <n>: <clean name>`".into(),
            })?;
            let number = num.trim().parse().map_err(|_| ReviewError::Syntax {
                line: line_no,
                message: format!("bad cluster number {:?}", num.trim()),
            })?;
            let clean_name = name.split_whitespace().collect::<Vec<_>>().join(" ");
            if clean_name.is_empty() {
                return Err(ReviewError::Syntax { line: line_no, message: "empty clean name".into() });
            }
            clusters.push(ReviewCluster { number, clean_name, members: Vec::new() });
        } else if line.starts_with(char::is_whitespace) {
            let cluster = clusters.last_mut().ok_or_else(|| ReviewError::Syntax {
                line: line_no,
                message: "member line before any CLUSTER header".into(),
            })?;
            cluster.members.push(normalize_label(strip_annotation(line)));
        } else {
            return Err(ReviewError::Syntax {
                line: line_no,
                message: "expected a CLUSTER header or an indented member".into(),
            });
        }
    }
    Ok(clusters)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanLabel {
    pub name: String,
    pub members: BTreeSet<String>,
    pub intensity: IntensityClass,
}

/// Deduplicated activity names, each grouping raw labels of one intensity.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CleanLabelSet {
    pub clean_labels: Vec<CleanLabel>,
}

impl CleanLabelSet {
    /// Validates disjoint membership, unique names, and that each member's
    /// dictionary intensity agrees with its clean label.
    pub fn new(clusters: Vec<ReviewCluster>, dict: &LabelDictionary) -> Result<Self, ReviewError> {
        let mut seen_members = BTreeSet::new();
        let mut seen_names = BTreeSet::new();
        let mut clean_labels = Vec::new();
        for cluster in clusters {
            if cluster.members.is_empty() {
                continue;
            }
            if !seen_names.insert(cluster.clean_name.clone()) {
                return Err(ReviewError::DuplicateCleanName(cluster.clean_name));
            }
            let mut by_class: BTreeMap<IntensityClass, Vec<String>> = BTreeMap::new();
            for member in &cluster.members {
                if !seen_members.insert(member.clone()) {
                    return Err(ReviewError::DuplicateMember { label: member.clone() });
                }
                let class = dict.lookup_intensity(member);
                if class == IntensityClass::Unknown {
                    return Err(ReviewError::Unmapped {
                        cluster: cluster.number,
                        name: cluster.clean_name.clone(),
                        label: member.clone(),
                    });
                }
                by_class.entry(class).or_default().push(member.clone());
            }
            if by_class.len() > 1 {
                let members = by_class
                    .into_iter()
                    .flat_map(|(c, ms)| ms.into_iter().map(move |m| (m, c)))
                    .collect();
                return Err(ReviewError::IntensityConflict {
                    cluster: cluster.number,
                    name: cluster.clean_name,
                    members,
                });
            }
            let intensity = *by_class.keys().next().expect("non-empty cluster");
            clean_labels.push(CleanLabel {
                name: cluster.clean_name,
                members: cluster.members.into_iter().collect(),
                intensity,
            });
        }
        Ok(CleanLabelSet { clean_labels })
    }

    pub fn is_empty(&self) -> bool {
        self.clean_labels.is_empty()
    }

    pub fn len(&self) -> usize {
        self.clean_labels.len()
    }
}

pub fn apply_merges(review_text: &str, dict: &LabelDictionary) -> Result<CleanLabelSet, ReviewError> {
    CleanLabelSet::new(parse_review(review_text)?, dict)
}
