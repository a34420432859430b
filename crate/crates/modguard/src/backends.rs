//! The model-invocation contract and its deterministic implementations.
//!
//! All neural-network execution is isolated behind [`ModelBackend`]. Two
//! implementations ship here: seeded synthetic backends that derive their
//! output from the input pixels (so end-to-end tests need no weights), and a
//! record/replay store that replays captured tensors keyed by a content
//! digest of the decoded image. An adapter to a real runtime can live
//! out-of-tree behind the same trait.
//!
//! Tensor store format (one file per digest, little-endian throughout):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MGT1"
//! 4       1     layout tag: 0 = detector, 1 = classifier
//! 5       4     rows (u32): anchors for detectors, classes for classifiers
//! 9       4     cols (u32): 9 for detectors, 1 for classifiers
//! 13      4*n   rows*cols f32 values, row-major
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::detector::{
    encode_box, generate_anchors, iou, AnchorConfig, BodyPartClass, BoundingBox,
    RAW_VALUES_PER_ANCHOR,
};
use crate::imageops::ImageTensor;

const STORE_MAGIC: &[u8; 4] = b"MGT1";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("input shape mismatch: backend expects {expected}x{expected}, got {got_h}x{got_w}")]
    ShapeMismatch {
        expected: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("no recording for digest {0}")]
    MissingRecording(String),
    #[error("conflicting recording for digest {0}: stored payload differs")]
    Conflict(String),
    #[error("malformed tensor store file {path}: {reason}")]
    MalformedStore { path: PathBuf, reason: String },
    #[error("no anchor can encode scripted box {index}")]
    NoAnchorNear { index: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What a backend consumes and produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    Synthetic,
    Recorded,
}

/// Shape of a backend's raw output tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputLayout {
    /// One row of 4 offsets + 5 class scores per anchor.
    Detector { anchors: usize },
    /// One confidence per class (81 multi-label or 2 binary).
    Classifier { classes: usize },
}

impl OutputLayout {
    pub fn len(&self) -> usize {
        match *self {
            OutputLayout::Detector { anchors } => anchors * RAW_VALUES_PER_ANCHOR,
            OutputLayout::Classifier { classes } => classes,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn tag(&self) -> u8 {
        match self {
            OutputLayout::Detector { .. } => 0,
            OutputLayout::Classifier { .. } => 1,
        }
    }

    fn dims(&self) -> (u32, u32) {
        match *self {
            OutputLayout::Detector { anchors } => (anchors as u32, RAW_VALUES_PER_ANCHOR as u32),
            OutputLayout::Classifier { classes } => (classes as u32, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub input_size: usize,
    pub output_layout: OutputLayout,
}

/// A model execution endpoint. Implementations must be repeatable (same
/// input, identical output) and side-effect free on invoke; recording is the
/// only writer in this module.
pub trait ModelBackend: Send + Sync {
    fn descriptor(&self) -> BackendDescriptor;

    fn invoke(&self, input: &ImageTensor) -> Result<Vec<f32>, BackendError>;
}

fn check_input(descriptor: &BackendDescriptor, input: &ImageTensor) -> Result<(), BackendError> {
    if input.height() != descriptor.input_size || input.width() != descriptor.input_size {
        return Err(BackendError::ShapeMismatch {
            expected: descriptor.input_size,
            got_h: input.height(),
            got_w: input.width(),
        });
    }
    Ok(())
}

/// Hex SHA-256 of the canonical tensor bytes. Keyed on decoded pixels, not
/// file bytes, so a recompressed copy of the same image replays the same
/// recording.
pub fn content_digest(input: &ImageTensor) -> String {
    let hash = Sha256::digest(input.canonical_bytes());
    let mut out = String::with_capacity(64);
    for byte in hash {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

fn digest_seed(input: &ImageTensor, seed: u64) -> u64 {
    let hash = Sha256::digest(input.canonical_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&hash[..8]);
    u64::from_le_bytes(bytes) ^ seed
}

/// Deterministic detector stand-in.
///
/// Output is a pure function of the seed and the input pixels: a
/// digest-seeded draw picks one of a handful of scene shapes (empty, people,
/// crowd, unsafe part) and plants quantized scores on anchor rows with zero
/// offsets, so decoded boxes equal anchors exactly and verdicts stay stable
/// across platforms.
pub struct SyntheticDetector {
    input_size: usize,
    anchors: AnchorConfig,
    seed: u64,
}

impl SyntheticDetector {
    pub fn new(input_size: usize, anchors: AnchorConfig, seed: u64) -> Self {
        Self {
            input_size,
            anchors,
            seed,
        }
    }

    pub fn anchor_config(&self) -> &AnchorConfig {
        &self.anchors
    }
}

impl ModelBackend for SyntheticDetector {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            kind: BackendKind::Synthetic,
            input_size: self.input_size,
            output_layout: OutputLayout::Detector {
                anchors: self.anchors.anchor_count(),
            },
        }
    }

    fn invoke(&self, input: &ImageTensor) -> Result<Vec<f32>, BackendError> {
        check_input(&self.descriptor(), input)?;
        let mut rng = ChaCha8Rng::seed_from_u64(digest_seed(input, self.seed));
        let anchor_total = self.anchors.anchor_count();
        let mut raw = vec![0.0f32; anchor_total * RAW_VALUES_PER_ANCHOR];

        // Scores quantized to 1/128 steps keep the tensor bit-stable.
        let plant = |rng: &mut ChaCha8Rng, raw: &mut Vec<f32>, cls: BodyPartClass| {
            let anchor = rng.gen_range(0..anchor_total);
            let score = rng.gen_range(77..=127) as f32 / 128.0;
            let at = anchor * RAW_VALUES_PER_ANCHOR + 4 + cls.index();
            raw[at] = raw[at].max(score);
        };

        match rng.gen_range(0..5u8) {
            0 => {} // empty scene
            1 => plant(&mut rng, &mut raw, BodyPartClass::Person),
            2 => {
                for _ in 0..2 {
                    plant(&mut rng, &mut raw, BodyPartClass::Person);
                }
            }
            3 => {
                for _ in 0..4 {
                    plant(&mut rng, &mut raw, BodyPartClass::Person);
                }
            }
            _ => {
                plant(&mut rng, &mut raw, BodyPartClass::Person);
                let which = rng.gen_range(0..4usize);
                plant(&mut rng, &mut raw, BodyPartClass::ALL[which]);
            }
        }
        Ok(raw)
    }
}

/// Deterministic classifier stand-in: digest-seeded, quantized confidences.
pub struct SyntheticClassifier {
    input_size: usize,
    classes: usize,
    seed: u64,
}

impl SyntheticClassifier {
    pub fn new(input_size: usize, classes: usize, seed: u64) -> Self {
        Self {
            input_size,
            classes,
            seed,
        }
    }
}

impl ModelBackend for SyntheticClassifier {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            kind: BackendKind::Synthetic,
            input_size: self.input_size,
            output_layout: OutputLayout::Classifier {
                classes: self.classes,
            },
        }
    }

    fn invoke(&self, input: &ImageTensor) -> Result<Vec<f32>, BackendError> {
        check_input(&self.descriptor(), input)?;
        let mut rng = ChaCha8Rng::seed_from_u64(digest_seed(input, self.seed));
        let mut scores: Vec<f32> = (0..self.classes)
            .map(|_| rng.gen_range(0..=128) as f32 / 128.0)
            .collect();
        if self.classes == 2 {
            // Binary heads must emit a distribution.
            let a = (rng.gen_range(0..=128) as f32 / 128.0).clamp(0.0, 1.0);
            scores = vec![a, 1.0 - a];
        }
        Ok(scores)
    }
}

/// Fixed-output backend: replays one prepared tensor for every input of the
/// right shape. This is the vehicle for scripted routing tests.
pub struct ScriptedBackend {
    descriptor: BackendDescriptor,
    tensor: Vec<f32>,
}

impl ScriptedBackend {
    pub fn new(input_size: usize, output_layout: OutputLayout, tensor: Vec<f32>) -> Self {
        assert_eq!(tensor.len(), output_layout.len(), "tensor matches layout");
        Self {
            descriptor: BackendDescriptor {
                kind: BackendKind::Synthetic,
                input_size,
                output_layout,
            },
            tensor,
        }
    }
}

impl ModelBackend for ScriptedBackend {
    fn descriptor(&self) -> BackendDescriptor {
        self.descriptor
    }

    fn invoke(&self, input: &ImageTensor) -> Result<Vec<f32>, BackendError> {
        check_input(&self.descriptor, input)?;
        Ok(self.tensor.clone())
    }
}

/// On-disk append-only store of recorded output tensors.
#[derive(Debug, Clone)]
pub struct TensorStore {
    dir: PathBuf,
}

impl TensorStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn file_for(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.tensor"))
    }

    /// Records an output tensor under a digest. Re-recording an identical
    /// payload is a no-op; a different payload for the same digest is a
    /// conflict.
    pub fn record(
        &self,
        digest: &str,
        layout: OutputLayout,
        data: &[f32],
    ) -> Result<(), BackendError> {
        assert_eq!(data.len(), layout.len(), "tensor matches layout");
        let encoded = encode_tensor(layout, data);
        let path = self.file_for(digest);
        if path.exists() {
            let existing = std::fs::read(&path)?;
            if existing == encoded {
                return Ok(());
            }
            return Err(BackendError::Conflict(digest.to_string()));
        }
        std::fs::create_dir_all(&self.dir)?;
        // Write via a temp file and rename so readers never see a torn file.
        let tmp = self.dir.join(format!(".{digest}.tmp"));
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&encoded)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }

    pub fn load(&self, digest: &str) -> Result<(OutputLayout, Vec<f32>), BackendError> {
        let path = self.file_for(digest);
        if !path.exists() {
            return Err(BackendError::MissingRecording(digest.to_string()));
        }
        let bytes = std::fs::read(&path)?;
        decode_tensor(&bytes).map_err(|reason| BackendError::MalformedStore { path, reason })
    }

    pub fn contains(&self, digest: &str) -> bool {
        self.file_for(digest).exists()
    }
}

fn encode_tensor(layout: OutputLayout, data: &[f32]) -> Vec<u8> {
    let (rows, cols) = layout.dims();
    let mut out = Vec::with_capacity(13 + data.len() * 4);
    out.extend_from_slice(STORE_MAGIC);
    out.push(layout.tag());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_tensor(bytes: &[u8]) -> Result<(OutputLayout, Vec<f32>), String> {
    if bytes.len() < 13 {
        return Err("file shorter than header".into());
    }
    if &bytes[0..4] != STORE_MAGIC {
        return Err("bad magic".into());
    }
    let tag = bytes[4];
    let rows = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let layout = match (tag, cols) {
        (0, c) if c == RAW_VALUES_PER_ANCHOR => OutputLayout::Detector { anchors: rows },
        (1, 1) => OutputLayout::Classifier { classes: rows },
        _ => return Err(format!("unknown layout tag {tag} with {cols} columns")),
    };
    let expected = 13 + rows * cols * 4;
    if bytes.len() != expected {
        return Err(format!("expected {expected} bytes, got {}", bytes.len()));
    }
    let data = bytes[13..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((layout, data))
}

/// Replays recorded tensors keyed by the content digest of the input.
pub struct RecordedBackend {
    descriptor: BackendDescriptor,
    store: TensorStore,
}

impl RecordedBackend {
    pub fn new(input_size: usize, output_layout: OutputLayout, store: TensorStore) -> Self {
        Self {
            descriptor: BackendDescriptor {
                kind: BackendKind::Recorded,
                input_size,
                output_layout,
            },
            store,
        }
    }

    /// Captures another backend's output for `input` into the store, so a
    /// later invoke replays it.
    pub fn record_from(
        &self,
        source: &dyn ModelBackend,
        input: &ImageTensor,
    ) -> Result<(), BackendError> {
        let output = source.invoke(input)?;
        self.store.record(
            &content_digest(input),
            self.descriptor.output_layout,
            &output,
        )
    }

    pub fn store(&self) -> &TensorStore {
        &self.store
    }
}

impl ModelBackend for RecordedBackend {
    fn descriptor(&self) -> BackendDescriptor {
        self.descriptor
    }

    fn invoke(&self, input: &ImageTensor) -> Result<Vec<f32>, BackendError> {
        check_input(&self.descriptor, input)?;
        let (layout, data) = self.store.load(&content_digest(input))?;
        if layout != self.descriptor.output_layout {
            return Err(BackendError::MalformedStore {
                path: self.store.file_for(&content_digest(input)),
                reason: format!(
                    "stored layout {layout:?} does not match descriptor {:?}",
                    self.descriptor.output_layout
                ),
            });
        }
        Ok(data)
    }
}

/// Minimum overlap for an anchor to be considered able to carry a scripted
/// box.
const MIN_ENCODE_IOU: f32 = 0.01;

/// Builds a raw detector tensor that decodes back to the scripted
/// detections: each box is offset-encoded against its best free anchor, all
/// other rows stay at zero scores.
pub fn synthesize_detector_output(
    script: &[(BodyPartClass, f32, BoundingBox)],
    cfg: &AnchorConfig,
) -> Result<Vec<f32>, BackendError> {
    let anchors = generate_anchors(cfg).expect("valid anchor config");
    let mut raw = vec![0.0f32; anchors.len() * RAW_VALUES_PER_ANCHOR];
    let mut taken = vec![false; anchors.len()];

    for (index, (cls, score, box_)) in script.iter().enumerate() {
        let best = anchors
            .iter()
            .enumerate()
            .filter(|(i, anchor)| !taken[*i] && iou(anchor, box_) >= MIN_ENCODE_IOU)
            .max_by(|(_, a), (_, b)| {
                iou(a, box_)
                    .partial_cmp(&iou(b, box_))
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .map(|(i, _)| i);
        let Some(anchor_idx) = best else {
            return Err(BackendError::NoAnchorNear { index });
        };
        taken[anchor_idx] = true;
        let offsets = encode_box(box_, &anchors[anchor_idx], cfg.variances);
        let row = anchor_idx * RAW_VALUES_PER_ANCHOR;
        raw[row..row + 4].copy_from_slice(&offsets);
        raw[row + 4 + cls.index()] = *score;
    }
    Ok(raw)
}
