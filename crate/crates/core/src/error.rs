use std::fmt;

use thiserror::Error;

use crate::ir::{KernelKind, Violation};

/// Position of a problem inside an architecture description.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Location {
    pub stage: Option<usize>,
    pub layer: Option<usize>,
}

impl Location {
    pub fn root() -> Self {
        Self::default()
    }

    pub fn stage(stage: usize) -> Self {
        Self {
            stage: Some(stage),
            layer: None,
        }
    }

    pub fn layer(stage: usize, layer: usize) -> Self {
        Self {
            stage: Some(stage),
            layer: Some(layer),
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.stage, self.layer) {
            (Some(s), Some(l)) => write!(f, "stage {s}, layer {l}"),
            (Some(s), None) => write!(f, "stage {s}"),
            _ => write!(f, "network"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error at {location}: {message}")]
    Schema { location: Location, message: String },

    #[error("{} validation violation(s); first: {}", .0.len(), .0.first().map(|v| v.to_string()).unwrap_or_default())]
    Validation(Vec<Violation>),

    #[error("stage index {index} out of range (network has {len} stages)")]
    Index { index: usize, len: usize },

    #[error("no property function registered for {0:?}")]
    UnsupportedKind(KernelKind),

    #[error("shape {width}x{width}x{channels} exceeds oracle bounds ({max_width}x{max_width}x{max_channels})")]
    TooLarge {
        width: usize,
        channels: usize,
        max_width: usize,
        max_channels: usize,
    },

    #[error("stage {0} is empty")]
    EmptyStage(usize),

    #[error("stage {stage} has a run of {run} standard convolutions; the template replaces them in pairs")]
    OddRunLength { stage: usize, run: usize },

    #[error("replacement rule not satisfied on stage {stage}: {summary}")]
    VerificationFailed { stage: usize, summary: String },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
