//! Detector post-processing: anchor generation, box decoding, score
//! thresholding, per-class non-maximum suppression and the distinct-person
//! count used by the pipeline routing.
//!
//! The neural detector itself lives behind the backend contract in
//! [`crate::backends`]; this module only interprets its raw output tensor,
//! laid out as one row of `4 offsets + 5 class scores` per anchor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Values per anchor row in the raw detector output: 4 box offsets followed
/// by one score per body-part class.
pub const RAW_VALUES_PER_ANCHOR: usize = 4 + BodyPartClass::ALL.len();

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("invalid anchor config: {0}")]
    Config(String),
    #[error("length mismatch: {expected} anchors but {got} offset rows")]
    LengthMismatch { expected: usize, got: usize },
    #[error("raw tensor shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
}

/// The five annotation classes of the body-part detector. `Person` is the
/// only label that is not itself unsafe; it drives crop routing instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BodyPartClass {
    #[serde(rename = "F_BREAST")]
    FemaleBreast,
    #[serde(rename = "F_GENITALIA")]
    FemaleGenitalia,
    #[serde(rename = "M_GENITALIA")]
    MaleGenitalia,
    #[serde(rename = "BUTTOCK")]
    Buttock,
    #[serde(rename = "PERSON")]
    Person,
}

impl BodyPartClass {
    pub const ALL: [BodyPartClass; 5] = [
        BodyPartClass::FemaleBreast,
        BodyPartClass::FemaleGenitalia,
        BodyPartClass::MaleGenitalia,
        BodyPartClass::Buttock,
        BodyPartClass::Person,
    ];

    /// Index of the class score within an anchor row.
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn is_unsafe(self) -> bool {
        self != BodyPartClass::Person
    }

    pub fn label(self) -> &'static str {
        match self {
            BodyPartClass::FemaleBreast => "F_BREAST",
            BodyPartClass::FemaleGenitalia => "F_GENITALIA",
            BodyPartClass::MaleGenitalia => "M_GENITALIA",
            BodyPartClass::Buttock => "BUTTOCK",
            BodyPartClass::Person => "PERSON",
        }
    }
}

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub xmin: f32,
    pub ymin: f32,
    pub xmax: f32,
    pub ymax: f32,
}

impl BoundingBox {
    const MIN_EXTENT: f32 = 1e-6;

    pub fn new(xmin: f32, ymin: f32, xmax: f32, ymax: f32) -> Result<Self, DetectorError> {
        let b = Self {
            xmin,
            ymin,
            xmax,
            ymax,
        };
        if !(0.0..=1.0).contains(&xmin)
            || !(0.0..=1.0).contains(&ymin)
            || !(0.0..=1.0).contains(&xmax)
            || !(0.0..=1.0).contains(&ymax)
            || xmin >= xmax
            || ymin >= ymax
        {
            return Err(DetectorError::Config(format!("invalid box {b:?}")));
        }
        Ok(b)
    }

    /// Clamps arbitrary coordinates into the unit square while keeping a
    /// strictly positive extent, so the box invariants always hold.
    pub fn new_clamped(xmin: f32, ymin: f32, xmax: f32, ymax: f32) -> Self {
        let xmin = xmin.clamp(0.0, 1.0 - Self::MIN_EXTENT);
        let ymin = ymin.clamp(0.0, 1.0 - Self::MIN_EXTENT);
        Self {
            xmin,
            ymin,
            xmax: xmax.clamp(xmin + Self::MIN_EXTENT, 1.0),
            ymax: ymax.clamp(ymin + Self::MIN_EXTENT, 1.0),
        }
    }

    pub fn width(&self) -> f32 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f32 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f32, f32) {
        (
            (self.xmin + self.xmax) / 2.0,
            (self.ymin + self.ymax) / 2.0,
        )
    }
}

/// A classified body-part box with its confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub cls: BodyPartClass,
    pub score: f32,
    #[serde(rename = "box")]
    pub box_: BoundingBox,
}

/// Anchor grid description for the detector head: one square feature map per
/// entry in `feature_map_sizes`, one scale per map, with the aspect ratios
/// shared across maps. `variances` are the four offset divisors used by the
/// center-size box coding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub feature_map_sizes: Vec<usize>,
    pub scales: Vec<f32>,
    pub aspect_ratios: Vec<f32>,
    pub variances: [f32; 4],
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.feature_map_sizes.is_empty() {
            return Err(DetectorError::Config("no feature maps".into()));
        }
        if self.feature_map_sizes.contains(&0) {
            return Err(DetectorError::Config("zero-sized feature map".into()));
        }
        if self.scales.len() != self.feature_map_sizes.len() {
            return Err(DetectorError::Config(format!(
                "{} scales for {} feature maps",
                self.scales.len(),
                self.feature_map_sizes.len()
            )));
        }
        if self.aspect_ratios.is_empty() {
            return Err(DetectorError::Config("no aspect ratios".into()));
        }
        if self.scales.iter().any(|&s| s <= 0.0)
            || self.aspect_ratios.iter().any(|&r| r <= 0.0)
            || self.variances.iter().any(|&v| v <= 0.0)
        {
            return Err(DetectorError::Config(
                "scales, ratios and variances must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Total anchors: sum over maps of `grid^2 * ratio count`.
    pub fn anchor_count(&self) -> usize {
        self.feature_map_sizes
            .iter()
            .map(|g| g * g * self.aspect_ratios.len())
            .sum()
    }

    /// Expected raw tensor length for this grid.
    pub fn raw_len(&self) -> usize {
        self.anchor_count() * RAW_VALUES_PER_ANCHOR
    }

    pub fn from_json(json: &str) -> Result<Self, DetectorError> {
        let cfg: AnchorConfig =
            serde_json::from_str(json).map_err(|e| DetectorError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Default for AnchorConfig {
    /// Five square maps from 10x10 down to 1x1 with three aspect ratios and
    /// the customary (0.1, 0.1, 0.2, 0.2) variances.
    fn default() -> Self {
        Self {
            feature_map_sizes: vec![10, 5, 3, 2, 1],
            scales: vec![0.1, 0.25, 0.4, 0.6, 0.85],
            aspect_ratios: vec![1.0, 2.0, 0.5],
            variances: [0.1, 0.1, 0.2, 0.2],
        }
    }
}

/// Generates the anchor boxes for `cfg`, row-major per feature map, one
/// entry per aspect ratio at each cell center, clamped to the unit square.
pub fn generate_anchors(cfg: &AnchorConfig) -> Result<Vec<BoundingBox>, DetectorError> {
    cfg.validate()?;
    let mut anchors = Vec::with_capacity(cfg.anchor_count());
    for (&grid, &scale) in cfg.feature_map_sizes.iter().zip(&cfg.scales) {
        for row in 0..grid {
            for col in 0..grid {
                let cx = (col as f32 + 0.5) / grid as f32;
                let cy = (row as f32 + 0.5) / grid as f32;
                for &ratio in &cfg.aspect_ratios {
                    let root = ratio.sqrt();
                    let w = scale * root;
                    let h = scale / root;
                    anchors.push(BoundingBox::new_clamped(
                        cx - w / 2.0,
                        cy - h / 2.0,
                        cx + w / 2.0,
                        cy + h / 2.0,
                    ));
                }
            }
        }
    }
    Ok(anchors)
}

/// Decodes center-size offsets against their anchors:
/// `center = anchor_center + offset_xy * variance_xy * anchor_size` and
/// `size = anchor_size * exp(offset_wh * variance_wh)`, clamped to `[0, 1]`.
pub fn decode_boxes(
    offsets: &[[f32; 4]],
    anchors: &[BoundingBox],
    variances: [f32; 4],
) -> Result<Vec<BoundingBox>, DetectorError> {
    if offsets.len() != anchors.len() {
        return Err(DetectorError::LengthMismatch {
            expected: anchors.len(),
            got: offsets.len(),
        });
    }
    Ok(offsets
        .iter()
        .zip(anchors)
        .map(|(off, anchor)| decode_one(off, anchor, variances))
        .collect())
}

// Box coding runs in f64 so that zero offsets reproduce their anchors
// bit-for-bit after the center/corner conversions.
fn decode_one(offset: &[f32; 4], anchor: &BoundingBox, variances: [f32; 4]) -> BoundingBox {
    let (axmin, aymin) = (anchor.xmin as f64, anchor.ymin as f64);
    let (axmax, aymax) = (anchor.xmax as f64, anchor.ymax as f64);
    let (aw, ah) = (axmax - axmin, aymax - aymin);
    let cx = (axmin + axmax) / 2.0 + offset[0] as f64 * variances[0] as f64 * aw;
    let cy = (aymin + aymax) / 2.0 + offset[1] as f64 * variances[1] as f64 * ah;
    let w = aw * (offset[2] as f64 * variances[2] as f64).exp();
    let h = ah * (offset[3] as f64 * variances[3] as f64).exp();
    BoundingBox::new_clamped(
        (cx - w / 2.0) as f32,
        (cy - h / 2.0) as f32,
        (cx + w / 2.0) as f32,
        (cy + h / 2.0) as f32,
    )
}

/// Inverse of [`decode_boxes`] for a single box; used when synthesizing raw
/// detector tensors for tests and fixtures.
pub fn encode_box(box_: &BoundingBox, anchor: &BoundingBox, variances: [f32; 4]) -> [f32; 4] {
    let acx = (anchor.xmin as f64 + anchor.xmax as f64) / 2.0;
    let acy = (anchor.ymin as f64 + anchor.ymax as f64) / 2.0;
    let bcx = (box_.xmin as f64 + box_.xmax as f64) / 2.0;
    let bcy = (box_.ymin as f64 + box_.ymax as f64) / 2.0;
    [
        ((bcx - acx) / (variances[0] as f64 * anchor.width() as f64)) as f32,
        ((bcy - acy) / (variances[1] as f64 * anchor.height() as f64)) as f32,
        ((box_.width() as f64 / anchor.width() as f64).ln() / variances[2] as f64) as f32,
        ((box_.height() as f64 / anchor.height() as f64).ln() / variances[3] as f64) as f32,
    ]
}

/// Intersection-over-union of two boxes; 0 when disjoint.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f32 {
    let ix = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let iy = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Greedy non-maximum suppression over a single class.
///
/// Detections are visited by descending score (ties broken by input index);
/// one is kept iff its IoU with every already-kept detection is at most
/// `iou_threshold`. The kept order is returned.
pub fn nms(dets: &[Detection], iou_threshold: f32) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut kept: Vec<Detection> = Vec::new();
    for idx in order {
        let candidate = &dets[idx];
        if kept
            .iter()
            .all(|k| iou(&k.box_, &candidate.box_) <= iou_threshold)
        {
            kept.push(*candidate);
        }
    }
    kept
}

/// Thresholds applied when interpreting a raw detector tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectOptions {
    /// Minimum class score for a candidate to survive.
    pub score_threshold: f32,
    /// IoU threshold for per-class NMS.
    pub iou_threshold: f32,
    /// Apply a sigmoid to class scores first, for backends that emit logits.
    pub sigmoid_scores: bool,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self {
            score_threshold: 0.5,
            iou_threshold: 0.5,
            sigmoid_scores: false,
        }
    }
}

/// Full post-processing for one image: decode every anchor, threshold, run
/// per-class NMS and merge into a single score-descending list.
pub fn detect(
    raw: &[f32],
    cfg: &AnchorConfig,
    opts: &DetectOptions,
) -> Result<Vec<Detection>, DetectorError> {
    let anchors = generate_anchors(cfg)?;
    detect_with_anchors(raw, &anchors, cfg.variances, opts)
}

/// [`detect`] against precomputed anchors, for callers that reuse them.
///
/// Each anchor contributes at most its best-scoring class (ties to the
/// lower class index), so the output can never exceed the anchor count.
pub fn detect_with_anchors(
    raw: &[f32],
    anchors: &[BoundingBox],
    variances: [f32; 4],
    opts: &DetectOptions,
) -> Result<Vec<Detection>, DetectorError> {
    let expected = anchors.len() * RAW_VALUES_PER_ANCHOR;
    if raw.len() != expected {
        return Err(DetectorError::ShapeMismatch {
            expected,
            got: raw.len(),
        });
    }

    let mut per_class: Vec<Vec<Detection>> = vec![Vec::new(); BodyPartClass::ALL.len()];
    for (i, anchor) in anchors.iter().enumerate() {
        let row = &raw[i * RAW_VALUES_PER_ANCHOR..(i + 1) * RAW_VALUES_PER_ANCHOR];
        let (best_cls, mut score) = BodyPartClass::ALL
            .iter()
            .map(|&cls| (cls, row[4 + cls.index()]))
            .fold((BodyPartClass::FemaleBreast, f32::NEG_INFINITY), |acc, c| {
                if c.1 > acc.1 {
                    c
                } else {
                    acc
                }
            });
        if opts.sigmoid_scores {
            score = 1.0 / (1.0 + (-score).exp());
        }
        if score >= opts.score_threshold {
            let offsets = [row[0], row[1], row[2], row[3]];
            per_class[best_cls.index()].push(Detection {
                cls: best_cls,
                score,
                box_: decode_one(&offsets, anchor, variances),
            });
        }
    }

    let mut merged = Vec::new();
    for candidates in &per_class {
        merged.extend(nms(candidates, opts.iou_threshold));
    }
    // Stable sort keeps the class-order tie-break deterministic.
    merged.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(merged)
}

/// Number of distinct people: the count of post-NMS PERSON detections.
pub fn count_distinct_people(dets: &[Detection]) -> usize {
    dets.iter()
        .filter(|d| d.cls == BodyPartClass::Person)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(cls: BodyPartClass, score: f32, b: (f32, f32, f32, f32)) -> Detection {
        Detection {
            cls,
            score,
            box_: BoundingBox::new(b.0, b.1, b.2, b.3).unwrap(),
        }
    }

    /// Independent greedy-suppression oracle: quadratic scan over the
    /// score-sorted list, no shared code with `nms`.
    fn brute_force_nms(dets: &[Detection], threshold: f32) -> Vec<Detection> {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| {
            dets[b]
                .score
                .partial_cmp(&dets[a].score)
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut kept_idx: Vec<usize> = Vec::new();
        'outer: for &i in &order {
            for &j in &kept_idx {
                let a = &dets[i].box_;
                let b = &dets[j].box_;
                let ix = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
                let iy = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
                let inter = ix * iy;
                let union = a.area() + b.area() - inter;
                if inter / union > threshold {
                    continue 'outer;
                }
            }
            kept_idx.push(i);
        }
        kept_idx.into_iter().map(|i| dets[i]).collect()
    }

    fn random_detections(rng: &mut ChaCha8Rng, max_n: usize) -> Vec<Detection> {
        let n = rng.gen_range(0..=max_n);
        (0..n)
            .map(|_| {
                let xmin: f32 = rng.gen_range(0.0..0.8);
                let ymin: f32 = rng.gen_range(0.0..0.8);
                let w: f32 = rng.gen_range(0.05..0.2);
                let h: f32 = rng.gen_range(0.05..0.2);
                det(
                    BodyPartClass::Person,
                    rng.gen_range(0.01..1.0),
                    (xmin, ymin, (xmin + w).min(1.0), (ymin + h).min(1.0)),
                )
            })
            .collect()
    }

    #[test]
    fn bounding_box_rejects_inverted_coords() {
        assert!(BoundingBox::new(0.5, 0.1, 0.4, 0.2).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 1.1, 1.0).is_err());
        assert!(BoundingBox::new(0.1, 0.1, 0.2, 0.2).is_ok());
    }

    #[test]
    fn single_map_single_ratio_centered_anchor() {
        let cfg = AnchorConfig {
            feature_map_sizes: vec![1],
            scales: vec![0.5],
            aspect_ratios: vec![1.0],
            variances: [0.1, 0.1, 0.2, 0.2],
        };
        let anchors = generate_anchors(&cfg).unwrap();
        assert_eq!(anchors.len(), 1);
        let a = anchors[0];
        assert!((a.xmin - 0.25).abs() < 1e-6);
        assert!((a.ymin - 0.25).abs() < 1e-6);
        assert!((a.xmax - 0.75).abs() < 1e-6);
        assert!((a.ymax - 0.75).abs() < 1e-6);
    }

    #[test]
    fn anchor_count_follows_grid_and_ratio_product() {
        let cfg = AnchorConfig {
            feature_map_sizes: vec![2],
            scales: vec![0.3],
            aspect_ratios: vec![1.0, 2.0],
            variances: [0.1, 0.1, 0.2, 0.2],
        };
        assert_eq!(generate_anchors(&cfg).unwrap().len(), 8);

        let cfg2 = AnchorConfig {
            feature_map_sizes: vec![4, 2],
            scales: vec![0.2, 0.5],
            aspect_ratios: vec![1.0],
            variances: [0.1, 0.1, 0.2, 0.2],
        };
        let anchors = generate_anchors(&cfg2).unwrap();
        assert_eq!(anchors.len(), 20);
        for a in anchors {
            assert!(a.xmin >= 0.0 && a.ymin >= 0.0 && a.xmax <= 1.0 && a.ymax <= 1.0);
            assert!(a.xmin < a.xmax && a.ymin < a.ymax);
        }
    }

    #[test]
    fn empty_config_is_rejected() {
        let cfg = AnchorConfig {
            feature_map_sizes: vec![],
            scales: vec![],
            aspect_ratios: vec![1.0],
            variances: [0.1, 0.1, 0.2, 0.2],
        };
        assert!(matches!(
            generate_anchors(&cfg),
            Err(DetectorError::Config(_))
        ));
        let cfg2 = AnchorConfig {
            feature_map_sizes: vec![1],
            scales: vec![0.5],
            aspect_ratios: vec![],
            variances: [0.1, 0.1, 0.2, 0.2],
        };
        assert!(matches!(
            generate_anchors(&cfg2),
            Err(DetectorError::Config(_))
        ));
    }

    #[test]
    fn zero_offsets_decode_to_anchors() {
        let cfg = AnchorConfig::default();
        let anchors = generate_anchors(&cfg).unwrap();
        let offsets = vec![[0.0f32; 4]; anchors.len()];
        let decoded = decode_boxes(&offsets, &anchors, cfg.variances).unwrap();
        assert_eq!(decoded, anchors);
    }

    #[test]
    fn width_offset_doubles_width() {
        let anchor = BoundingBox::new(0.4, 0.4, 0.6, 0.6).unwrap();
        let variances = [0.1, 0.1, 0.2, 0.2];
        let offsets = [[0.0, 0.0, 2.0f32.ln() / 0.2, 0.0]];
        let decoded = decode_boxes(&offsets, &[anchor], variances).unwrap();
        let b = decoded[0];
        assert!((b.width() - 0.4).abs() < 1e-6);
        assert!((b.height() - 0.2).abs() < 1e-6);
        let (cx, cy) = b.center();
        assert!((cx - 0.5).abs() < 1e-6 && (cy - 0.5).abs() < 1e-6);
    }

    #[test]
    fn huge_offsets_stay_clamped_and_valid() {
        let anchor = BoundingBox::new(0.4, 0.4, 0.6, 0.6).unwrap();
        let offsets = [[50.0, 50.0, 10.0, 10.0]];
        let decoded = decode_boxes(&offsets, &[anchor], [0.1, 0.1, 0.2, 0.2]).unwrap();
        let b = decoded[0];
        assert!(b.xmin >= 0.0 && b.ymin >= 0.0 && b.xmax <= 1.0 && b.ymax <= 1.0);
        assert!(b.xmin < b.xmax && b.ymin < b.ymax);
    }

    #[test]
    fn offset_length_mismatch_is_reported() {
        let anchor = BoundingBox::new(0.4, 0.4, 0.6, 0.6).unwrap();
        assert!(matches!(
            decode_boxes(&[[0.0; 4], [0.0; 4]], &[anchor], [0.1, 0.1, 0.2, 0.2]),
            Err(DetectorError::LengthMismatch {
                expected: 1,
                got: 2
            })
        ));
    }

    #[test]
    fn iou_identical_disjoint_and_half() {
        let a = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        let b = BoundingBox::new(0.0, 0.0, 0.2, 0.2).unwrap();
        let c = BoundingBox::new(0.5, 0.5, 0.9, 0.9).unwrap();
        assert_eq!(iou(&b, &c), 0.0);
        // (0,0,1,1) vs (0.5,0,1,1): intersection 0.5, union 1.0.
        let d = BoundingBox::new(0.5, 0.0, 1.0, 1.0).unwrap();
        assert!((iou(&a, &d) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn nms_keeps_single_detection() {
        let dets = vec![det(BodyPartClass::Person, 0.7, (0.1, 0.1, 0.4, 0.4))];
        assert_eq!(nms(&dets, 0.5), dets);
    }

    #[test]
    fn nms_suppresses_duplicate_boxes() {
        let dets = vec![
            det(BodyPartClass::Person, 0.8, (0.1, 0.1, 0.4, 0.4)),
            det(BodyPartClass::Person, 0.9, (0.1, 0.1, 0.4, 0.4)),
        ];
        let kept = nms(&dets, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_matches_brute_force_on_seeded_trials() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6d6f6447);
        for trial in 0..1000 {
            let dets = random_detections(&mut rng, 8);
            let threshold = rng.gen_range(0.05..0.9);
            let fast = nms(&dets, threshold);
            let slow = brute_force_nms(&dets, threshold);
            assert_eq!(fast, slow, "trial {trial} diverged");
            // Idempotence on every trial.
            assert_eq!(nms(&fast, threshold), fast, "trial {trial} not idempotent");
        }
    }

    #[test]
    fn all_scores_below_threshold_yields_empty() {
        let cfg = AnchorConfig::default();
        let raw = vec![0.0f32; cfg.raw_len()];
        let dets = detect(&raw, &cfg, &DetectOptions::default()).unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn detect_recovers_injected_person() {
        let cfg = AnchorConfig::default();
        let anchors = generate_anchors(&cfg).unwrap();
        // Encode a PERSON box against an anchor of the coarsest map.
        let target = BoundingBox::new(0.2, 0.25, 0.75, 0.8).unwrap();
        let anchor_idx = anchors.len() - 1; // the single 1x1-map anchor set ends here
        let offsets = encode_box(&target, &anchors[anchor_idx], cfg.variances);
        let mut raw = vec![0.0f32; cfg.raw_len()];
        let row = anchor_idx * RAW_VALUES_PER_ANCHOR;
        raw[row..row + 4].copy_from_slice(&offsets);
        raw[row + 4 + BodyPartClass::Person.index()] = 0.9;

        let dets = detect(&raw, &cfg, &DetectOptions::default()).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].cls, BodyPartClass::Person);
        assert_eq!(dets[0].score, 0.9);
        assert!(iou(&dets[0].box_, &target) > 0.999);
    }

    #[test]
    fn detect_collapses_overlapping_candidates() {
        let cfg = AnchorConfig {
            feature_map_sizes: vec![1],
            scales: vec![0.5],
            aspect_ratios: vec![1.0, 1.1],
            variances: [0.1, 0.1, 0.2, 0.2],
        };
        // Two near-identical anchors, both scoring high for F_BREAST.
        let mut raw = vec![0.0f32; cfg.raw_len()];
        raw[4 + BodyPartClass::FemaleBreast.index()] = 0.8;
        raw[RAW_VALUES_PER_ANCHOR + 4 + BodyPartClass::FemaleBreast.index()] = 0.7;
        let dets = detect(&raw, &cfg, &DetectOptions::default()).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].score, 0.8);
    }

    #[test]
    fn detect_rejects_bad_shape() {
        let cfg = AnchorConfig::default();
        let raw = vec![0.0f32; cfg.raw_len() - 1];
        assert!(matches!(
            detect(&raw, &cfg, &DetectOptions::default()),
            Err(DetectorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn sigmoid_flag_maps_logits() {
        let cfg = AnchorConfig {
            feature_map_sizes: vec![1],
            scales: vec![0.5],
            aspect_ratios: vec![1.0],
            variances: [0.1, 0.1, 0.2, 0.2],
        };
        let mut raw = vec![-20.0f32; cfg.raw_len()];
        raw[0..4].copy_from_slice(&[0.0; 4]);
        raw[4 + BodyPartClass::Person.index()] = 3.0; // sigmoid(3) ~ 0.953
        let opts = DetectOptions {
            sigmoid_scores: true,
            ..DetectOptions::default()
        };
        let dets = detect(&raw, &cfg, &opts).unwrap();
        assert_eq!(dets.len(), 1);
        assert!((dets[0].score - 0.952574).abs() < 1e-5);
    }

    #[test]
    fn people_counting() {
        assert_eq!(count_distinct_people(&[]), 0);
        let dets = vec![
            det(BodyPartClass::Person, 0.9, (0.0, 0.0, 0.2, 0.2)),
            det(BodyPartClass::Buttock, 0.8, (0.4, 0.4, 0.6, 0.6)),
            det(BodyPartClass::Person, 0.7, (0.7, 0.7, 0.9, 0.9)),
            det(BodyPartClass::Person, 0.6, (0.1, 0.6, 0.3, 0.9)),
        ];
        assert_eq!(count_distinct_people(&dets), 3);
    }

    #[test]
    fn overlapping_people_collapse_before_counting() {
        // Five heavily overlapping person candidates in two clusters.
        let dets = vec![
            det(BodyPartClass::Person, 0.9, (0.10, 0.10, 0.40, 0.40)),
            det(BodyPartClass::Person, 0.8, (0.11, 0.11, 0.41, 0.41)),
            det(BodyPartClass::Person, 0.7, (0.12, 0.09, 0.42, 0.39)),
            det(BodyPartClass::Person, 0.85, (0.60, 0.60, 0.90, 0.90)),
            det(BodyPartClass::Person, 0.6, (0.61, 0.59, 0.91, 0.89)),
        ];
        let kept = nms(&dets, 0.5);
        assert_eq!(count_distinct_people(&kept), 2);
    }

    proptest! {
        #[test]
        fn nms_output_is_subsequence_with_bounded_overlap(seed in 0u64..500, threshold in 0.05f32..0.95) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dets = random_detections(&mut rng, 12);
            let kept = nms(&dets, threshold);
            // Subsequence of input (as a multiset; each kept item appears in input).
            for k in &kept {
                prop_assert!(dets.iter().any(|d| d == k));
            }
            // Scores non-increasing and pairwise IoU bounded.
            for pair in kept.windows(2) {
                prop_assert!(pair[0].score >= pair[1].score);
            }
            for i in 0..kept.len() {
                for j in (i + 1)..kept.len() {
                    prop_assert!(iou(&kept[i].box_, &kept[j].box_) <= threshold + 1e-6);
                }
            }
        }

        #[test]
        fn detect_respects_anchor_count_and_threshold(seed in 0u64..200) {
            let cfg = AnchorConfig {
                feature_map_sizes: vec![3, 1],
                scales: vec![0.3, 0.7],
                aspect_ratios: vec![1.0, 2.0],
                variances: [0.1, 0.1, 0.2, 0.2],
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw: Vec<f32> = (0..cfg.raw_len())
                .map(|i| {
                    if i % RAW_VALUES_PER_ANCHOR < 4 {
                        rng.gen_range(-1.0..1.0)
                    } else {
                        rng.gen_range(0.0..1.0)
                    }
                })
                .collect();
            let opts = DetectOptions::default();
            let dets = detect(&raw, &cfg, &opts).unwrap();
            prop_assert!(dets.len() <= cfg.anchor_count());
            for d in &dets {
                prop_assert!(d.score >= opts.score_threshold);
            }
        }

        #[test]
        fn iou_is_symmetric_and_bounded(
            ax in 0.0f32..0.7, ay in 0.0f32..0.7, aw in 0.05f32..0.3, ah in 0.05f32..0.3,
            bx in 0.0f32..0.7, by in 0.0f32..0.7, bw in 0.05f32..0.3, bh in 0.05f32..0.3,
        ) {
            let a = BoundingBox::new_clamped(ax, ay, ax + aw, ay + ah);
            let b = BoundingBox::new_clamped(bx, by, bx + bw, by + bh);
            let ab = iou(&a, &b);
            let ba = iou(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-6);
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }
}
