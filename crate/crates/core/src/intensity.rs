use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Activity-intensity class of a single image.
///
/// `Unknown` is only ever produced for trivial (uncodeable) or unmapped
/// labels, never by the MET rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IntensityClass {
    #[serde(rename = "SB")]
    Sedentary,
    #[serde(rename = "LIPA")]
    Light,
    #[serde(rename = "MVPA")]
    ModerateVigorous,
    #[serde(rename = "Sleep")]
    Sleep,
    #[serde(rename = "Unknown")]
    Unknown,
}

impl IntensityClass {
    pub const ALL: [IntensityClass; 5] = [
        IntensityClass::Sedentary,
        IntensityClass::Light,
        IntensityClass::ModerateVigorous,
        IntensityClass::Sleep,
        IntensityClass::Unknown,
    ];

    /// The three classes that take part in evaluation, in matrix order.
    pub const EVALUATED: [IntensityClass; 3] = [
        IntensityClass::Sedentary,
        IntensityClass::Light,
        IntensityClass::ModerateVigorous,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            IntensityClass::Sedentary => "SB",
            IntensityClass::Light => "LIPA",
            IntensityClass::ModerateVigorous => "MVPA",
            IntensityClass::Sleep => "Sleep",
            IntensityClass::Unknown => "Unknown",
        }
    }

    /// Row/column index in a 3-class confusion matrix.
    pub fn eval_index(self) -> Option<usize> {
        match self {
            IntensityClass::Sedentary => Some(0),
            IntensityClass::Light => Some(1),
            IntensityClass::ModerateVigorous => Some(2),
            _ => None,
        }
    }

    /// Review hotkey hint.
    pub fn hotkey(self) -> Option<char> {
        match self {
            IntensityClass::Sedentary => Some('s'),
            IntensityClass::Light => Some('l'),
            IntensityClass::ModerateVigorous => Some('m'),
            _ => None,
        }
    }
}

impl fmt::Display for IntensityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown intensity class {0:?}")]
pub struct ParseIntensityError(pub String);

impl FromStr for IntensityClass {
    type Err = ParseIntensityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sb" | "sedentary" => Ok(IntensityClass::Sedentary),
            "lipa" | "light" => Ok(IntensityClass::Light),
            "mvpa" => Ok(IntensityClass::ModerateVigorous),
            "sleep" => Ok(IntensityClass::Sleep),
            "unknown" => Ok(IntensityClass::Unknown),
            _ => Err(ParseIntensityError(s.to_string())),
        }
    }
}
