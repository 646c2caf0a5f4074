//! Closed label sets shared by every stage of the pipeline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Diagnostic class. The discriminant is the column index used by every
/// probability vector and confusion matrix in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Covid = 0,
    Pneumonia = 1,
    Healthy = 2,
    Uninformative = 3,
}

impl Class {
    pub const ALL: [Class; 4] = [
        Class::Covid,
        Class::Pneumonia,
        Class::Healthy,
        Class::Uninformative,
    ];

    /// The three classes of the differential diagnosis.
    pub const DIAGNOSTIC: [Class; 3] = [Class::Covid, Class::Pneumonia, Class::Healthy];

    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Class> {
        Class::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Class::Covid => "covid",
            Class::Pneumonia => "pneumonia",
            Class::Healthy => "healthy",
            Class::Uninformative => "uninformative",
        }
    }

    /// Single-letter tag used in the CAM analysis (C, P, H).
    pub fn short(self) -> &'static str {
        match self {
            Class::Covid => "C",
            Class::Pneumonia => "P",
            Class::Healthy => "H",
            Class::Uninformative => "U",
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Class {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "covid" | "c" => Ok(Class::Covid),
            "pneumonia" | "p" => Ok(Class::Pneumonia),
            "healthy" | "h" | "regular" => Ok(Class::Healthy),
            "uninformative" | "u" => Ok(Class::Uninformative),
            other => Err(Error::invalid(format!("unknown label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Probe {
    Convex,
    Linear,
}

impl FromStr for Probe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "convex" => Ok(Probe::Convex),
            "linear" => Ok(Probe::Linear),
            other => Err(Error::invalid(format!("unknown probe `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MediaKind {
    Video,
    Image,
}

impl FromStr for MediaKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "video" | "vid" => Ok(MediaKind::Video),
            "image" | "img" => Ok(MediaKind::Image),
            other => Err(Error::invalid(format!("unknown kind `{other}`"))),
        }
    }
}
