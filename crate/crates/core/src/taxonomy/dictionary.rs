use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{is_trivial, normalize_label};
use crate::IntensityClass;

#[derive(Debug, thiserror::Error)]
pub enum DictionaryError {
    #[error("reading dictionary {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("dictionary line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("dictionary: {0}")]
    Csv(#[from] csv::Error),
    #[error("label {label:?} mapped to both {first} and {second}")]
    Conflict { label: String, first: IntensityClass, second: IntensityClass },
}

/// Where a dictionary entry came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapSource {
    #[serde(rename = "2011")]
    Compendium2011,
    #[serde(rename = "2024")]
    Compendium2024,
    Override,
}

impl MapSource {
    fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "2011" => Some(MapSource::Compendium2011),
            "2024" => Some(MapSource::Compendium2024),
            "override" => Some(MapSource::Override),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Lookup {
    Mapped(IntensityClass),
    Overridden { class: IntensityClass, reason: String },
    Trivial,
    /// Non-trivial label with no entry; a gap to fill in the dictionary.
    Unmapped,
}

impl Lookup {
    pub fn intensity(&self) -> IntensityClass {
        match self {
            Lookup::Mapped(c) | Lookup::Overridden { class: c, .. } => *c,
            Lookup::Trivial | Lookup::Unmapped => IntensityClass::Unknown,
        }
    }

    pub fn is_gap(&self) -> bool {
        matches!(self, Lookup::Unmapped)
    }
}

#[derive(Debug, Clone, Deserialize)]
struct DictionaryRow {
    raw_label: String,
    intensity: String,
    #[serde(default)]
    source: String,
    #[serde(default)]
    reason: String,
}

/// Raw label → intensity class, with curated overrides taking precedence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelDictionary {
    entries: BTreeMap<String, IntensityClass>,
    overrides: BTreeMap<String, (IntensityClass, String)>,
}

impl LabelDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, raw: &str, class: IntensityClass) -> Result<(), DictionaryError> {
        let key = normalize_label(raw);
        match self.entries.get(&key) {
            Some(&existing) if existing != class => Err(DictionaryError::Conflict {
                label: key,
                first: existing,
                second: class,
            }),
            _ => {
                self.entries.insert(key, class);
                Ok(())
            }
        }
    }

    pub fn insert_override(&mut self, raw: &str, class: IntensityClass, reason: impl Into<String>) {
        self.overrides.insert(normalize_label(raw), (class, reason.into()));
    }

    pub fn len(&self) -> usize {
        self.entries.len() + self.overrides.keys().filter(|k| !self.entries.contains_key(*k)).count()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty() && self.overrides.is_empty()
    }

    pub fn lookup(&self, raw: &str) -> Lookup {
        if is_trivial(raw) {
            return Lookup::Trivial;
        }
        let key = normalize_label(raw);
        if let Some((class, reason)) = self.overrides.get(&key) {
            return Lookup::Overridden { class: *class, reason: reason.clone() };
        }
        match self.entries.get(&key) {
            Some(&class) => Lookup::Mapped(class),
            None => Lookup::Unmapped,
        }
    }

    pub fn lookup_intensity(&self, raw: &str) -> IntensityClass {
        self.lookup(raw).intensity()
    }

    /// Reads `raw_label,intensity,source,reason` rows.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self, DictionaryError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::Fields).from_reader(reader);
        let mut dict = LabelDictionary::new();
        for (i, row) in rdr.deserialize::<DictionaryRow>().enumerate() {
            let line = i as u64 + 2;
            let row = row?;
            let class: IntensityClass = row
                .intensity
                .parse()
                .map_err(|e: crate::intensity::ParseIntensityError| DictionaryError::Row {
                    line,
                    message: e.to_string(),
                })?;
            let source = if row.source.is_empty() {
                MapSource::Compendium2011
            } else {
                MapSource::parse(&row.source).ok_or_else(|| DictionaryError::Row {
                    line,
                    message: format!("unknown source {:?}", row.source),
                })?
            };
            match source {
                MapSource::Override => dict.insert_override(&row.raw_label, class, row.reason),
                _ => dict.insert(&row.raw_label, class)?,
            }
        }
        Ok(dict)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self, DictionaryError> {
        let file = std::fs::File::open(path)
            .map_err(|source| DictionaryError::Io { path: path.display().to_string(), source })?;
        Self::from_csv_reader(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "raw_label,intensity,source,reason
7030 sleeping,Sleep,2011,
5060 shopping miscellaneous,LIPA,2011,
11580 office wok/computer work general,SB,2011,
cleaning;sweeping carpet or floors general,MVPA,2011,
cleaning;sweeping carpet or floors general,LIPA,override,author discretion
";

    #[test]
    fn loads_and_looks_up() {
        let dict = LabelDictionary::from_csv_reader(SAMPLE.as_bytes()).unwrap();
        assert_eq!(dict.lookup_intensity("7030 Sleeping"), IntensityClass::Sleep);
        assert_eq!(dict.lookup_intensity("5060 shopping miscellaneous"), IntensityClass::Light);
    }

    #[test]
    fn override_takes_precedence() {
        let dict = LabelDictionary::from_csv_reader(SAMPLE.as_bytes()).unwrap();
        match dict.lookup("cleaning;sweeping carpet or floors general") {
            Lookup::Overridden { class, reason } => {
                assert_eq!(class, IntensityClass::Light);
                assert_eq!(reason, "author discretion");
            }
            other => panic!("expected override, got {other:?}"),
        }
    }

    #[test]
    fn trivial_and_unmapped_are_unknown() {
        let dict = LabelDictionary::from_csv_reader(SAMPLE.as_bytes()).unwrap();
        let camera_off = dict.lookup("uncodeable;0001 camera taken off");
        assert_eq!(camera_off, Lookup::Trivial);
        assert_eq!(camera_off.intensity(), IntensityClass::Unknown);
        let gap = dict.lookup("9999 juggling chainsaws");
        assert!(gap.is_gap());
        assert_eq!(gap.intensity(), IntensityClass::Unknown);
    }

    #[test]
    fn conflicting_entries_rejected() {
        let csv = "raw_label,intensity,source,reason\na,SB,2011,\nA,MVPA,2024,\n";
        assert!(matches!(
            LabelDictionary::from_csv_reader(csv.as_bytes()),
            Err(DictionaryError::Conflict { .. })
        ));
    }

    #[test]
    fn bad_intensity_names_line() {
        let csv = "raw_label,intensity,source,reason\na,SB,2011,\nb,vigorous,2011,\n";
        match LabelDictionary::from_csv_reader(csv.as_bytes()) {
            Err(DictionaryError::Row { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
