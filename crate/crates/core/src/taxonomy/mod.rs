//! Compendium-style activity labels and their intensity classes.
//!
//! Raw labels look like `transportation;walking;12150 running`: a chain of
//! `;`-separated hierarchy prefixes whose last segment optionally starts
//! with a 4–5 digit compendium code.

mod cluster;
mod dictionary;
mod review;

pub use cluster::{build_dendrogram, Dendrogram, DendrogramError, LabelEmbedder, Merge};
pub use dictionary::{DictionaryError, LabelDictionary, Lookup, MapSource};
pub use review::{
    apply_merges, parse_review, propose_merges, render_review, suggest_clean_name, CleanLabel,
    CleanLabelSet, MergeProposal, ReviewCluster, ReviewError,
};

use serde::{Deserialize, Serialize};

use crate::IntensityClass;

/// Lower-case, trim around `;`, and collapse runs of whitespace.
pub fn normalize_label(raw: &str) -> String {
    raw.split(';')
        .map(|seg| seg.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase())
        .collect::<Vec<_>>()
        .join(";")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedLabel {
    pub segments: Vec<String>,
    /// Digits exactly as written, so `0002` keeps its leading zeros.
    pub code: Option<String>,
    pub activity: String,
}

impl ParsedLabel {
    pub fn code_number(&self) -> Option<u32> {
        self.code.as_deref().and_then(|c| c.parse().ok())
    }

    /// Rebuild the normalized label string.
    pub fn to_label_string(&self) -> String {
        let last = match (&self.code, self.activity.is_empty()) {
            (Some(code), true) => code.clone(),
            (Some(code), false) => format!("{code} {}", self.activity),
            (None, _) => self.activity.clone(),
        };
        let mut parts = self.segments.clone();
        parts.push(last);
        parts.join(";")
    }
}

pub fn parse_label(raw: &str) -> ParsedLabel {
    let normalized = normalize_label(raw);
    let mut segments: Vec<String> = normalized.split(';').map(str::to_string).collect();
    let last = segments.pop().unwrap_or_default();

    let digits = last.chars().take_while(char::is_ascii_digit).count();
    let rest = &last[digits..];
    if (4..=5).contains(&digits) && (rest.is_empty() || rest.starts_with(' ')) {
        ParsedLabel {
            segments,
            code: Some(last[..digits].to_string()),
            activity: rest.trim_start().to_string(),
        }
    } else {
        ParsedLabel { segments, code: None, activity: last }
    }
}

/// True for the uncodeable / undefined / unknown family and for empty labels.
pub fn is_trivial(raw: &str) -> bool {
    let label = normalize_label(raw);
    label.is_empty() || label.starts_with("uncodeable") || label == "undefined" || label == "<unknown>"
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("MET value must be positive, got {0}")]
pub struct InvalidMet(pub f64);

/// Intensity class from a MET value, posture, and wakefulness.
///
/// Boundaries: SB needs MET <= 1.5 *and* a sitting/lying/reclining posture;
/// MVPA starts at exactly 3.0.
pub fn met_to_intensity(
    met: f64,
    sedentary_posture: bool,
    waking: bool,
) -> Result<IntensityClass, InvalidMet> {
    if met.is_nan() || met <= 0.0 {
        return Err(InvalidMet(met));
    }
    Ok(if !waking {
        IntensityClass::Sleep
    } else if met <= 1.5 && sedentary_posture {
        IntensityClass::Sedentary
    } else if met < 3.0 {
        IntensityClass::Light
    } else {
        IntensityClass::ModerateVigorous
    })
}

/// One compendium row. MET is relative to a 1 kcal/kg/h resting rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompendiumEntry {
    pub code: u32,
    pub description: String,
    pub met: f64,
}

impl CompendiumEntry {
    pub fn new(code: u32, description: impl Into<String>, met: f64) -> Result<Self, InvalidMet> {
        if met.is_nan() || met <= 0.0 {
            return Err(InvalidMet(met));
        }
        Ok(Self { code, description: description.into(), met })
    }

    pub fn intensity(&self, sedentary_posture: bool, waking: bool) -> IntensityClass {
        // met > 0 is a construction invariant
        met_to_intensity(self.met, sedentary_posture, waking).unwrap_or(IntensityClass::Unknown)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_hierarchical_label() {
        let p = parse_label("transportation;walking;12150 running");
        assert_eq!(p.segments, vec!["transportation", "walking"]);
        assert_eq!(p.code.as_deref(), Some("12150"));
        assert_eq!(p.code_number(), Some(12150));
        assert_eq!(p.activity, "running");
    }

    #[test]
    fn parses_code_only_prefix() {
        let p = parse_label("5060 shopping miscellaneous");
        assert!(p.segments.is_empty());
        assert_eq!(p.code_number(), Some(5060));
        assert_eq!(p.activity, "shopping miscellaneous");
    }

    #[test]
    fn label_without_code() {
        let p = parse_label("undefined");
        assert!(p.segments.is_empty());
        assert_eq!(p.code, None);
        assert_eq!(p.activity, "undefined");
    }

    #[test]
    fn code_keeps_leading_zeros() {
        let p = parse_label("uncodeable;0002 image dark/blurred/obscured");
        assert_eq!(p.code.as_deref(), Some("0002"));
        assert_eq!(p.to_label_string(), "uncodeable;0002 image dark/blurred/obscured");
    }

    #[test]
    fn six_digits_or_glued_text_is_not_a_code() {
        assert_eq!(parse_label("123456 thing").code, None);
        assert_eq!(parse_label("12150running").code, None);
        assert_eq!(parse_label("123 thing").code, None);
    }

    #[test]
    fn normalization() {
        assert_eq!(
            normalize_label("  Transportation ; Walking;12150   Running "),
            "transportation;walking;12150 running"
        );
    }

    #[test]
    fn trivial_family() {
        assert!(is_trivial("uncodeable;0002 image dark/blurred/obscured"));
        assert!(is_trivial("uncodeable;0001 camera taken off"));
        assert!(is_trivial("undefined"));
        assert!(is_trivial("<unknown>"));
        assert!(is_trivial("   "));
        assert!(!is_trivial("7030 sleeping"));
    }

    #[test]
    fn met_rule_examples() {
        use IntensityClass::*;
        assert_eq!(met_to_intensity(1.3, true, true).unwrap(), Sedentary);
        assert_eq!(met_to_intensity(3.0, true, true).unwrap(), ModerateVigorous);
        assert_eq!(met_to_intensity(3.0, false, true).unwrap(), ModerateVigorous);
        assert_eq!(met_to_intensity(1.3, false, true).unwrap(), Light);
        assert_eq!(met_to_intensity(0.9, true, false).unwrap(), Sleep);
    }

    #[test]
    fn met_boundaries() {
        use IntensityClass::*;
        assert_eq!(met_to_intensity(1.5, true, true).unwrap(), Sedentary);
        assert_eq!(met_to_intensity(1.5, false, true).unwrap(), Light);
        assert_eq!(met_to_intensity(1.500001, true, true).unwrap(), Light);
        assert_eq!(met_to_intensity(2.999999, true, true).unwrap(), Light);
        assert!(met_to_intensity(0.0, true, true).is_err());
        assert!(met_to_intensity(-1.0, true, true).is_err());
        assert!(met_to_intensity(f64::NAN, true, true).is_err());
    }

    #[test]
    fn compendium_entry_rejects_non_positive_met() {
        assert!(CompendiumEntry::new(7030, "sleeping", 0.0).is_err());
        let e = CompendiumEntry::new(7030, "sleeping", 0.95).unwrap();
        assert_eq!(e.intensity(true, false), IntensityClass::Sleep);
    }

    proptest! {
        #[test]
        fn met_rules_never_emit_unknown(met in 1e-6f64..20.0, seated: bool, waking: bool) {
            let class = met_to_intensity(met, seated, waking).unwrap();
            prop_assert_ne!(class, IntensityClass::Unknown);
        }

        #[test]
        fn parse_round_trips_normalized(
            segs in prop::collection::vec("[a-z][a-z ]{0,8}[a-z]", 0..3),
            code in prop::option::of("[0-9]{4,5}"),
            activity in "[a-z][a-z/ ]{0,15}[a-z]",
        ) {
            let mut last = activity.clone();
            if let Some(c) = &code { last = format!("{c} {activity}"); }
            let mut parts = segs.clone();
            parts.push(last);
            let raw = parts.join(";");
            let normalized = normalize_label(&raw);
            let parsed = parse_label(&raw);
            prop_assert_eq!(parsed.to_label_string(), normalized.clone());
            prop_assert_eq!(parse_label(&normalized), parsed);
        }
    }
}
