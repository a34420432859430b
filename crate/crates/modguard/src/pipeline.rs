//! Ensemble orchestration: letterbox, detect, then classify person crops or
//! the whole image, and fuse the evidence into a verdict.
//!
//! The routing rules:
//! - any unsafe body part at or above `unsafe_part_min` flags the image
//!   directly (`DETECTOR_HIT`); the classifier still runs and can only raise
//!   the confidence, never veto;
//! - otherwise person boxes at or above `person_score_min` are cropped with
//!   a margin and classified one by one (`CROPS`);
//! - more than `many_people_cutoff` people, or none at all, sends the whole
//!   anti-aliased image to the classifier (`FULL_IMAGE_*`).

use std::fmt;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ModelBackend, OutputLayout};
use crate::classifier::{ClassScores, ScoreMode};
use crate::detector::{
    count_distinct_people, detect_with_anchors, generate_anchors, AnchorConfig, BodyPartClass,
    BoundingBox, DetectOptions, Detection, DetectorError,
};
use crate::imageops::{self, ImageError, ImageTensor};

/// Pipeline stage names used in error tags and timing breakdowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Decode,
    Preprocess,
    Detector,
    Crops,
    Classifier,
    Post,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Decode => "decode",
            Stage::Preprocess => "preprocess",
            Stage::Detector => "detector",
            Stage::Crops => "crops",
            Stage::Classifier => "classifier",
            Stage::Post => "post",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("backend failed during {stage}: {source}")]
    Backend {
        stage: Stage,
        #[source]
        source: BackendError,
    },
    #[error("image decoding failed: {0}")]
    Decode(#[from] ImageError),
    #[error("detector post-processing failed: {0}")]
    Detector(#[from] DetectorError),
    #[error("invalid pipeline config: {0}")]
    Config(String),
}

/// Final safe/NSFW call for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerdictLabel {
    #[serde(rename = "SAFE")]
    Safe,
    #[serde(rename = "NSFW")]
    Nsfw,
}

impl fmt::Display for VerdictLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerdictLabel::Safe => "SAFE",
            VerdictLabel::Nsfw => "NSFW",
        })
    }
}

/// Which path produced a verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Route {
    #[serde(rename = "DETECTOR_HIT")]
    DetectorHit,
    #[serde(rename = "CROPS")]
    Crops,
    #[serde(rename = "FULL_IMAGE_MANY_PEOPLE")]
    FullImageManyPeople,
    #[serde(rename = "FULL_IMAGE_NO_PERSON")]
    FullImageNoPerson,
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Route::DetectorHit => "DETECTOR_HIT",
            Route::Crops => "CROPS",
            Route::FullImageManyPeople => "FULL_IMAGE_MANY_PEOPLE",
            Route::FullImageNoPerson => "FULL_IMAGE_NO_PERSON",
        })
    }
}

/// Wall time per stage, milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub preprocess_ms: f64,
    pub detector_ms: f64,
    pub crops_ms: f64,
    pub classifier_ms: f64,
    pub post_ms: f64,
}

impl StageTimings {
    pub fn total_ms(&self) -> f64 {
        self.preprocess_ms + self.detector_ms + self.crops_ms + self.classifier_ms + self.post_ms
    }
}

fn default_detector_input() -> usize {
    300
}
fn default_classifier_input() -> usize {
    224
}
fn default_threshold() -> f32 {
    0.5
}
fn default_crop_margin() -> f32 {
    0.1
}
fn default_many_people_cutoff() -> usize {
    2
}

/// Thresholds and sizes steering the ensemble. Loadable from JSON; every
/// field has a conventional default and is CLI-overridable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub detector_input: usize,
    pub classifier_input: usize,
    /// Minimum PERSON score for a box to count as a person.
    pub person_score_min: f32,
    /// Minimum unsafe-part score for a direct detector hit.
    pub unsafe_part_min: f32,
    /// Classifier NSFW confidence at or above which the verdict is NSFW.
    pub nsfw_score_min: f32,
    /// Crop expansion per side, as a fraction of the box size.
    pub crop_margin: f32,
    /// Classify the full image instead when more people than this are found.
    pub many_people_cutoff: usize,
    /// IoU threshold for the detector's per-class NMS.
    pub nms_iou_threshold: f32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            detector_input: default_detector_input(),
            classifier_input: default_classifier_input(),
            person_score_min: default_threshold(),
            unsafe_part_min: default_threshold(),
            nsfw_score_min: default_threshold(),
            crop_margin: default_crop_margin(),
            many_people_cutoff: default_many_people_cutoff(),
            nms_iou_threshold: default_threshold(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.detector_input == 0 || self.classifier_input == 0 {
            return Err(PipelineError::Config("input sizes must be positive".into()));
        }
        for (name, v) in [
            ("person_score_min", self.person_score_min),
            ("unsafe_part_min", self.unsafe_part_min),
            ("nsfw_score_min", self.nsfw_score_min),
            ("nms_iou_threshold", self.nms_iou_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PipelineError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.crop_margin < 0.0 {
            return Err(PipelineError::Config("crop_margin must be >= 0".into()));
        }
        Ok(())
    }
}

/// Verdict for one image, with the evidence that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleVerdict {
    pub label: VerdictLabel,
    /// NSFW evidence strength: max of detector and classifier evidence,
    /// reported for safe verdicts too.
    pub confidence: f64,
    /// Post-NMS detections mapped back to source-image coordinates.
    pub detections: Vec<Detection>,
    /// NSFW confidence of each classified input (crops, or the one full
    /// image).
    pub crop_scores: Vec<f64>,
    pub route: Route,
    pub timings: StageTimings,
}

impl EnsembleVerdict {
    /// The decision content, with timings zeroed: what must be identical
    /// across runs and parallelism levels.
    pub fn decision(&self) -> EnsembleVerdict {
        EnsembleVerdict {
            timings: StageTimings::default(),
            ..self.clone()
        }
    }
}

/// Immutable ensemble: a detector backend with its anchor grid, a classifier
/// backend, and the routing config. Safe to share across threads.
pub struct Pipeline {
    detector: Box<dyn ModelBackend>,
    classifier: Box<dyn ModelBackend>,
    anchor_cfg: AnchorConfig,
    anchors: Vec<BoundingBox>,
    classifier_mode: ScoreMode,
    cfg: PipelineConfig,
}

impl Pipeline {
    pub fn new(
        detector: Box<dyn ModelBackend>,
        classifier: Box<dyn ModelBackend>,
        anchor_cfg: AnchorConfig,
        cfg: PipelineConfig,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let anchors = generate_anchors(&anchor_cfg)?;
        let det_desc = detector.descriptor();
        if det_desc.input_size != cfg.detector_input {
            return Err(PipelineError::Config(format!(
                "detector expects {} input, config says {}",
                det_desc.input_size, cfg.detector_input
            )));
        }
        match det_desc.output_layout {
            OutputLayout::Detector { anchors: n } if n == anchors.len() => {}
            other => {
                return Err(PipelineError::Config(format!(
                    "detector layout {other:?} does not match {} anchors",
                    anchors.len()
                )))
            }
        }
        let clf_desc = classifier.descriptor();
        if clf_desc.input_size != cfg.classifier_input {
            return Err(PipelineError::Config(format!(
                "classifier expects {} input, config says {}",
                clf_desc.input_size, cfg.classifier_input
            )));
        }
        let classifier_mode = match clf_desc.output_layout {
            OutputLayout::Classifier { classes: 81 } => ScoreMode::MultiLabel,
            OutputLayout::Classifier { classes: 2 } => ScoreMode::Binary,
            other => {
                return Err(PipelineError::Config(format!(
                    "classifier layout {other:?} is not 81-way or binary"
                )))
            }
        };
        Ok(Self {
            detector,
            classifier,
            anchor_cfg,
            anchors,
            classifier_mode,
            cfg,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn anchor_config(&self) -> &AnchorConfig {
        &self.anchor_cfg
    }

    /// Runs the full ensemble on one decoded image.
    ///
    /// Stage timings are contiguous timestamp segments, so they account for
    /// the whole call.
    pub fn run(&self, img: &ImageTensor) -> Result<EnsembleVerdict, PipelineError> {
        let started = Instant::now();

        // Letterbox into the detector square.
        let (det_input, transform) = imageops::resize_letterbox(img, self.cfg.detector_input);
        let after_preprocess = Instant::now();

        // Detect, map boxes back to source coordinates and pick the route.
        let raw = self
            .detector
            .invoke(&det_input)
            .map_err(|source| PipelineError::Backend {
                stage: Stage::Detector,
                source,
            })?;
        let opts = DetectOptions {
            score_threshold: self.cfg.person_score_min.min(self.cfg.unsafe_part_min),
            iou_threshold: self.cfg.nms_iou_threshold,
            sigmoid_scores: false,
        };
        let detections: Vec<Detection> =
            detect_with_anchors(&raw, &self.anchors, self.anchor_cfg.variances, &opts)?
                .into_iter()
                .map(|d| Detection {
                    box_: transform.to_source_box(&d.box_),
                    ..d
                })
                .collect();

        // Unsafe-part evidence.
        let detector_evidence = detections
            .iter()
            .filter(|d| d.cls.is_unsafe() && d.score >= self.cfg.unsafe_part_min)
            .map(|d| d.score as f64)
            .fold(None::<f64>, |best, s| Some(best.map_or(s, |b| b.max(s))));

        // Choose classifier inputs.
        let confident: Vec<Detection> = detections
            .iter()
            .filter(|d| d.score >= self.cfg.person_score_min)
            .cloned()
            .collect();
        let people_count = count_distinct_people(&confident);
        let people: Vec<&Detection> = confident
            .iter()
            .filter(|d| d.cls == BodyPartClass::Person)
            .collect();
        let fallback_route = if people_count == 0 {
            Some(Route::FullImageNoPerson)
        } else if people_count > self.cfg.many_people_cutoff {
            Some(Route::FullImageManyPeople)
        } else {
            None
        };
        let after_detector = Instant::now();

        let clf_inputs: Vec<ImageTensor> = if fallback_route.is_some() {
            vec![imageops::resize_antialias(img, self.cfg.classifier_input)]
        } else {
            people
                .iter()
                .filter_map(|person| {
                    match imageops::crop(img, &person.box_, self.cfg.crop_margin) {
                        Ok(patch) => {
                            Some(imageops::resize_antialias(&patch, self.cfg.classifier_input))
                        }
                        // A degenerate crop contributes no evidence.
                        Err(ImageError::EmptyCrop) => None,
                        Err(_) => None,
                    }
                })
                .collect()
        };
        let after_crops = Instant::now();

        let mut crop_scores = Vec::with_capacity(clf_inputs.len());
        for input in &clf_inputs {
            let scores = self
                .classifier
                .invoke(input)
                .map_err(|source| PipelineError::Backend {
                    stage: Stage::Classifier,
                    source,
                })?;
            crop_scores.push(self.nsfw_confidence(&scores));
        }
        let after_classifier = Instant::now();

        // Fuse the two evidences.
        let classifier_evidence = crop_scores.iter().cloned().fold(None::<f64>, |best, s| {
            Some(best.map_or(s, |b| b.max(s)))
        });
        let label = if detector_evidence.is_some()
            || classifier_evidence.is_some_and(|c| c >= self.cfg.nsfw_score_min as f64)
        {
            VerdictLabel::Nsfw
        } else {
            VerdictLabel::Safe
        };
        let confidence = detector_evidence
            .unwrap_or(0.0)
            .max(classifier_evidence.unwrap_or(0.0));
        let route = if detector_evidence.is_some() {
            Route::DetectorHit
        } else {
            fallback_route.unwrap_or(Route::Crops)
        };
        // Release the large intermediate buffers inside the timed window so
        // the stage segments account for the whole call.
        drop(det_input);
        drop(clf_inputs);
        drop(raw);
        let done = Instant::now();

        Ok(EnsembleVerdict {
            label,
            confidence,
            detections,
            crop_scores,
            route,
            timings: StageTimings {
                preprocess_ms: ms_between(started, after_preprocess),
                detector_ms: ms_between(after_preprocess, after_detector),
                crops_ms: ms_between(after_detector, after_crops),
                classifier_ms: ms_between(after_crops, after_classifier),
                post_ms: ms_between(after_classifier, done),
            },
        })
    }

    /// Decodes and runs one encoded payload.
    pub fn run_bytes(&self, payload: &[u8]) -> Result<EnsembleVerdict, PipelineError> {
        let img = imageops::decode_image(payload)?;
        self.run(&img)
    }

    /// Scans encoded payloads with `parallelism` worker threads. Output
    /// order matches input order and per-image failures are captured in
    /// place; decisions are identical for every parallelism level.
    pub fn scan_batch(
        &self,
        payloads: &[impl AsRef<[u8]> + Sync],
        parallelism: usize,
    ) -> Vec<Result<EnsembleVerdict, PipelineError>> {
        assert!(parallelism >= 1, "parallelism must be >= 1");
        if payloads.is_empty() {
            return Vec::new();
        }
        if parallelism == 1 {
            return payloads.iter().map(|p| self.run_bytes(p.as_ref())).collect();
        }

        let workers = parallelism.min(payloads.len());
        let results: Vec<Mutex<Option<Result<EnsembleVerdict, PipelineError>>>> =
            (0..payloads.len()).map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for worker in 0..workers {
                let results = &results;
                scope.spawn(move || {
                    let mut idx = worker;
                    while idx < payloads.len() {
                        let verdict = self.run_bytes(payloads[idx].as_ref());
                        *results[idx].lock().expect("result slot poisoned") = Some(verdict);
                        idx += workers;
                    }
                });
            }
        });
        results
            .into_iter()
            .map(|slot| {
                slot.into_inner()
                    .expect("result slot poisoned")
                    .expect("every slot filled")
            })
            .collect()
    }

    fn nsfw_confidence(&self, raw: &[f32]) -> f64 {
        let values: Vec<f64> = raw.iter().map(|&v| f64::from(v)).collect();
        match ClassScores::new(self.classifier_mode, values) {
            Ok(scores) => scores.nsfw_score(),
            // Out-of-contract backend output falls back to the raw slot.
            Err(_) => raw
                .get(self.classifier_mode.nsfw_index())
                .copied()
                .map(f64::from)
                .unwrap_or(0.0),
        }
    }
}

fn ms_between(start: Instant, end: Instant) -> f64 {
    end.duration_since(start).as_secs_f64() * 1e3
}
