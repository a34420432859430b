//! Scan report schema: the JSON document `modguard scan` emits.
//!
//! Field order is fixed by struct order and all floats serialize through
//! shortest-round-trip formatting, so `parse(emit(report)) == report` holds
//! exactly. Paths are stored relative to the scanned directory so reports
//! are comparable across machines.

use modguard::detector::{AnchorConfig, Detection};
use modguard::pipeline::{PipelineConfig, Route, StageTimings, VerdictLabel};
use serde::{Deserialize, Serialize};

/// Schema version of the report document.
pub const REPORT_VERSION: u32 = 1;

/// The configuration a scan actually ran with, echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveConfig {
    pub pipeline: PipelineConfig,
    pub anchors: AnchorConfig,
    pub detector: String,
    pub classifier: String,
    pub classifier_classes: usize,
    pub jobs: usize,
}

/// Outcome for one scanned image. Exactly one of `label`/`error` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<VerdictLabel>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub route: Option<Route>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub detections: Vec<Detection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings_ms: Option<StageTimings>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScanSummary {
    pub scanned: usize,
    pub safe: u64,
    pub nsfw: u64,
    pub errors: u64,
    pub mean_latency_ms: f64,
    pub p50_latency_ms: f64,
    pub p95_latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub report_version: u32,
    pub tool_version: String,
    pub config: EffectiveConfig,
    pub records: Vec<ScanRecord>,
    pub summary: ScanSummary,
}

impl ScanReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(json)
    }

    /// Copy with every wall-time field zeroed: the platform-stable decision
    /// content used for golden comparisons.
    pub fn masked_timings(&self) -> ScanReport {
        let mut out = self.clone();
        for record in &mut out.records {
            if record.timings_ms.is_some() {
                record.timings_ms = Some(StageTimings::default());
            }
        }
        out.summary.mean_latency_ms = 0.0;
        out.summary.p50_latency_ms = 0.0;
        out.summary.p95_latency_ms = 0.0;
        out
    }
}

/// Percentile over unsorted samples, nearest-rank on the sorted copy.
pub fn percentile(samples: &[f64], p: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let rank = ((p / 100.0) * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}
