//! Backend specification strings: how the CLI names model endpoints.
//!
//! - `synthetic:<seed>` — deterministic seeded stand-in, no weights needed.
//! - `recorded:<dir>` — replay tensors from a record store directory.

use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Context};
use modguard::backends::{
    ModelBackend, OutputLayout, RecordedBackend, SyntheticClassifier, SyntheticDetector,
    TensorStore,
};
use modguard::detector::AnchorConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Synthetic { seed: u64 },
    Recorded { dir: PathBuf },
}

impl FromStr for BackendSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some(("synthetic", seed)) => Ok(BackendSpec::Synthetic {
                seed: seed
                    .parse()
                    .with_context(|| format!("invalid synthetic seed {seed:?}"))?,
            }),
            Some(("recorded", dir)) if !dir.is_empty() => Ok(BackendSpec::Recorded {
                dir: PathBuf::from(dir),
            }),
            _ => bail!("backend spec must be synthetic:<seed> or recorded:<dir>, got {s:?}"),
        }
    }
}

impl BackendSpec {
    pub fn build_detector(
        &self,
        anchors: &AnchorConfig,
        input_size: usize,
    ) -> Box<dyn ModelBackend> {
        match self {
            BackendSpec::Synthetic { seed } => {
                Box::new(SyntheticDetector::new(input_size, anchors.clone(), *seed))
            }
            BackendSpec::Recorded { dir } => Box::new(RecordedBackend::new(
                input_size,
                OutputLayout::Detector {
                    anchors: anchors.anchor_count(),
                },
                TensorStore::new(dir.clone()),
            )),
        }
    }

    pub fn build_classifier(&self, classes: usize, input_size: usize) -> Box<dyn ModelBackend> {
        match self {
            BackendSpec::Synthetic { seed } => {
                Box::new(SyntheticClassifier::new(input_size, classes, *seed))
            }
            BackendSpec::Recorded { dir } => Box::new(RecordedBackend::new(
                input_size,
                OutputLayout::Classifier { classes },
                TensorStore::new(dir.clone()),
            )),
        }
    }
}
