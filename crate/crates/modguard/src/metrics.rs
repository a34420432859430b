//! Dataset manifests and the evaluation metric suite: confusion counts,
//! precision/recall/F1, false-positive rate and (mean) average precision.
//!
//! NSFW is the positive class everywhere. Metrics with a zero denominator
//! are reported as absent rather than zero.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{BodyPartClass, BoundingBox};
use crate::pipeline::{Route, VerdictLabel};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction path not present in manifest: {0}")]
    UnknownPath(String),
    #[error("duplicate manifest path: {0}")]
    DuplicatePath(String),
    #[error("{0} is undefined: denominator is zero")]
    UndefinedMetric(&'static str),
    #[error("no positive ground truth in ranking")]
    NoPositives,
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("malformed manifest line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One annotated ground-truth box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub cls: BodyPartClass,
    #[serde(rename = "box")]
    pub box_: BoundingBox,
}

/// One manifest record: an image path, its safe/NSFW ground truth and
/// optional body-part boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: VerdictLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<LabeledBox>>,
}

/// A named evaluation dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, entries: Vec<ManifestEntry>) -> Result<Self, MetricsError> {
        let mut seen = HashSet::new();
        for entry in &entries {
            if !seen.insert(entry.path.as_str()) {
                return Err(MetricsError::DuplicatePath(entry.path.clone()));
            }
        }
        Ok(Self {
            name: name.into(),
            entries,
        })
    }

    /// Parses JSON-lines: one `{path, label, boxes?}` object per line.
    pub fn from_jsonl(name: impl Into<String>, text: &str) -> Result<Self, MetricsError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let entry: ManifestEntry =
                serde_json::from_str(line).map_err(|e| MetricsError::Malformed {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            entries.push(entry);
        }
        Self::new(name, entries)
    }

    pub fn load_jsonl(path: &Path) -> Result<Self, MetricsError> {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "manifest".to_string());
        let text = std::fs::read_to_string(path)?;
        Self::from_jsonl(name, &text)
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("entry serializes"))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Builds a manifest from a folder-per-class layout: `<dir>/safe/*` and
    /// `<dir>/nsfw/*`. Paths are recorded relative to `dir`.
    pub fn from_class_folders(dir: &Path) -> Result<Self, MetricsError> {
        let mut entries = Vec::new();
        for (folder, label) in [("safe", VerdictLabel::Safe), ("nsfw", VerdictLabel::Nsfw)] {
            let class_dir = dir.join(folder);
            if !class_dir.is_dir() {
                continue;
            }
            let mut paths: Vec<_> = std::fs::read_dir(&class_dir)?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_file())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .collect();
            paths.sort();
            for file in paths {
                entries.push(ManifestEntry {
                    path: format!("{folder}/{file}"),
                    label,
                    boxes: None,
                });
            }
        }
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".to_string());
        Self::new(name, entries)
    }

    pub fn label_of(&self, path: &str) -> Option<VerdictLabel> {
        self.entries
            .iter()
            .find(|e| e.path == path)
            .map(|e| e.label)
    }
}

/// Binary confusion counts with NSFW as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    #[serde(rename = "tp")]
    pub true_positives: u64,
    #[serde(rename = "tn")]
    pub true_negatives: u64,
    #[serde(rename = "fp")]
    pub false_positives: u64,
    #[serde(rename = "fn")]
    pub false_negatives: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self {
            true_positives: tp,
            true_negatives: tn,
            false_positives: fp,
            false_negatives: fn_,
        }
    }

    pub fn total(&self) -> u64 {
        self.true_positives + self.true_negatives + self.false_positives + self.false_negatives
    }

    pub fn tally(&mut self, predicted: VerdictLabel, actual: VerdictLabel) {
        match (predicted, actual) {
            (VerdictLabel::Nsfw, VerdictLabel::Nsfw) => self.true_positives += 1,
            (VerdictLabel::Safe, VerdictLabel::Safe) => self.true_negatives += 1,
            (VerdictLabel::Nsfw, VerdictLabel::Safe) => self.false_positives += 1,
            (VerdictLabel::Safe, VerdictLabel::Nsfw) => self.false_negatives += 1,
        }
    }

    /// Shard merge; associative and commutative, so sharded evaluation sums
    /// to the single-pass result.
    pub fn merge(&self, other: &Self) -> Self {
        Self {
            true_positives: self.true_positives + other.true_positives,
            true_negatives: self.true_negatives + other.true_negatives,
            false_positives: self.false_positives + other.false_positives,
            false_negatives: self.false_negatives + other.false_negatives,
        }
    }
}

/// Tallies predicted labels against manifest ground truth.
pub fn confusion(
    predictions: &[(String, VerdictLabel)],
    manifest: &DatasetManifest,
) -> Result<ConfusionCounts, MetricsError> {
    let truth: HashMap<&str, VerdictLabel> = manifest
        .entries
        .iter()
        .map(|e| (e.path.as_str(), e.label))
        .collect();
    let mut counts = ConfusionCounts::default();
    for (path, predicted) in predictions {
        let actual = truth
            .get(path.as_str())
            .ok_or_else(|| MetricsError::UnknownPath(path.clone()))?;
        counts.tally(*predicted, *actual);
    }
    Ok(counts)
}

pub fn precision(c: &ConfusionCounts) -> Result<f64, MetricsError> {
    let denom = c.true_positives + c.false_positives;
    if denom == 0 {
        return Err(MetricsError::UndefinedMetric("precision"));
    }
    Ok(c.true_positives as f64 / denom as f64)
}

pub fn recall(c: &ConfusionCounts) -> Result<f64, MetricsError> {
    let denom = c.true_positives + c.false_negatives;
    if denom == 0 {
        return Err(MetricsError::UndefinedMetric("recall"));
    }
    Ok(c.true_positives as f64 / denom as f64)
}

/// Harmonic mean of precision and recall.
pub fn f1(c: &ConfusionCounts) -> Result<f64, MetricsError> {
    let p = precision(c)?;
    let r = recall(c)?;
    if p + r == 0.0 {
        return Err(MetricsError::UndefinedMetric("f1"));
    }
    Ok(2.0 * p * r / (p + r))
}

/// False-positive rate over the negative (safe) population.
pub fn fpr(c: &ConfusionCounts) -> Result<f64, MetricsError> {
    let denom = c.false_positives + c.true_negatives;
    if denom == 0 {
        return Err(MetricsError::UndefinedMetric("fpr"));
    }
    Ok(c.false_positives as f64 / denom as f64)
}

/// All-points average precision of a confidence ranking.
///
/// Entries are sorted by descending confidence (ties broken by input
/// index); AP is the mean of precision@k over the ranks k holding a
/// positive.
pub fn average_precision(scores: &[(f64, bool)]) -> Result<f64, MetricsError> {
    let positives = scores.iter().filter(|(_, truth)| *truth).count();
    if positives == 0 {
        return Err(MetricsError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].0
            .partial_cmp(&scores[a].0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut hits = 0usize;
    let mut sum = 0.0f64;
    for (rank, &idx) in order.iter().enumerate() {
        if scores[idx].1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Unweighted mean of per-class AP over the classes that have positives.
pub fn mean_average_precision(per_class: &[Vec<(f64, bool)>]) -> Result<f64, MetricsError> {
    let mut aps = Vec::new();
    for class_scores in per_class {
        match average_precision(class_scores) {
            Ok(ap) => aps.push(ap),
            Err(MetricsError::NoPositives) => continue,
            Err(e) => return Err(e),
        }
    }
    if aps.is_empty() {
        return Err(MetricsError::NoPositives);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// One evaluated image: the predicted label, its NSFW confidence and the
/// pipeline route that produced it (when known).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub path: String,
    pub label: VerdictLabel,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route: Option<Route>,
}

/// Full metric suite for one evaluation run. Metrics whose denominator was
/// zero are absent rather than zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub counts: ConfusionCounts,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fpr: Option<f64>,
    /// AP of the NSFW class over the confidence ranking.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap_nsfw: Option<f64>,
    /// On a binary dataset this is the single-class mean, i.e. `ap_nsfw`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    pub map_definition: String,
    pub route_counts: BTreeMap<String, u64>,
}

/// Composes confusion counts, ratio metrics, NSFW AP and the per-route
/// breakdown for a set of per-image predictions.
pub fn evaluate(
    predictions: &[PredictionRecord],
    manifest: &DatasetManifest,
) -> Result<MetricsReport, MetricsError> {
    if manifest.entries.is_empty() {
        return Err(MetricsError::EmptyManifest);
    }
    let labeled: Vec<(String, VerdictLabel)> = predictions
        .iter()
        .map(|p| (p.path.clone(), p.label))
        .collect();
    let counts = confusion(&labeled, manifest)?;

    let ranking: Vec<(f64, bool)> = predictions
        .iter()
        .map(|p| {
            (
                p.confidence,
                manifest.label_of(&p.path) == Some(VerdictLabel::Nsfw),
            )
        })
        .collect();
    let ap_nsfw = match average_precision(&ranking) {
        Ok(ap) => Some(ap),
        Err(MetricsError::NoPositives) => None,
        Err(e) => return Err(e),
    };

    let mut route_counts = BTreeMap::new();
    for p in predictions {
        if let Some(route) = p.route {
            *route_counts.entry(route.to_string()).or_insert(0) += 1;
        }
    }

    Ok(MetricsReport {
        dataset: manifest.name.clone(),
        counts,
        precision: precision(&counts).ok(),
        recall: recall(&counts).ok(),
        f1: f1(&counts).ok(),
        fpr: fpr(&counts).ok(),
        ap_nsfw,
        map: ap_nsfw,
        map_definition: "single-class AP of the NSFW ranking".to_string(),
        route_counts,
    })
}
