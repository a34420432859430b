//! Classifier scoring heads and the weighted cross-entropy loss used to
//! trade precision against recall per class.
//!
//! The per-class loss is
//! `L_i = -(alpha_i * y_i * log(p_i) + beta_i * (1 - y_i) * log(1 - p_i))`
//! aggregated as the mean over classes. Raising `beta` for a class punishes
//! false positives on it (precision up, recall down); raising `alpha`
//! punishes misses (recall up). A small trainable linear head demonstrates
//! the dial at desk scale; real feature extraction stays behind the backend
//! contract.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Class count of the multi-label head: 80 general categories plus NSFW.
pub const MULTI_LABEL_CLASSES: usize = 81;
/// Position of the NSFW score in the multi-label layout (last).
pub const MULTI_LABEL_NSFW_INDEX: usize = 80;
/// Class count of the binary head: SFW then NSFW.
pub const BINARY_CLASSES: usize = 2;
/// Position of the NSFW score in the binary layout.
pub const BINARY_NSFW_INDEX: usize = 1;

/// Each log argument inside the loss is floored at this value, so the terms
/// stay finite for p at 0 or 1 while exact predictions still cost exactly 0.
pub const PROB_EPSILON: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Which activation produced a score vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreMode {
    /// 81 independent sigmoid outputs.
    MultiLabel,
    /// 2 softmax outputs summing to one.
    Binary,
}

impl ScoreMode {
    pub fn class_count(self) -> usize {
        match self {
            ScoreMode::MultiLabel => MULTI_LABEL_CLASSES,
            ScoreMode::Binary => BINARY_CLASSES,
        }
    }

    pub fn nsfw_index(self) -> usize {
        match self {
            ScoreMode::MultiLabel => MULTI_LABEL_NSFW_INDEX,
            ScoreMode::Binary => BINARY_NSFW_INDEX,
        }
    }
}

/// Per-class classifier confidences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub mode: ScoreMode,
    pub values: Vec<f64>,
    pub nsfw_index: usize,
}

impl ClassScores {
    pub fn new(mode: ScoreMode, values: Vec<f64>) -> Result<Self, ClassifierError> {
        if values.len() != mode.class_count() {
            return Err(ClassifierError::DimensionMismatch {
                expected: mode.class_count(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ClassifierError::Config(
                "scores must lie in [0, 1]".into(),
            ));
        }
        if mode == ScoreMode::Binary {
            let sum: f64 = values.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(ClassifierError::Config(format!(
                    "binary scores must sum to 1, got {sum}"
                )));
            }
        }
        Ok(Self {
            mode,
            values,
            nsfw_index: mode.nsfw_index(),
        })
    }

    pub fn nsfw_score(&self) -> f64 {
        self.values[self.nsfw_index]
    }
}

/// Elementwise sigmoid over the 81 multi-label logits.
pub fn sigmoid_scores(logits: &[f64]) -> ClassScores {
    assert_eq!(
        logits.len(),
        MULTI_LABEL_CLASSES,
        "multi-label head takes {MULTI_LABEL_CLASSES} logits"
    );
    ClassScores {
        mode: ScoreMode::MultiLabel,
        values: logits.iter().map(|&z| sigmoid(z)).collect(),
        nsfw_index: MULTI_LABEL_NSFW_INDEX,
    }
}

/// Numerically stable two-way softmax.
pub fn softmax_scores(logits: &[f64]) -> ClassScores {
    assert_eq!(
        logits.len(),
        BINARY_CLASSES,
        "binary head takes {BINARY_CLASSES} logits"
    );
    ClassScores {
        mode: ScoreMode::Binary,
        values: softmax(logits),
        nsfw_index: BINARY_NSFW_INDEX,
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Per-class loss weights: `alpha` scales the positive (miss) term, `beta`
/// the negative (false alarm) term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LossWeights {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self, ClassifierError> {
        if alpha.len() != beta.len() {
            return Err(ClassifierError::DimensionMismatch {
                expected: alpha.len(),
                got: beta.len(),
            });
        }
        if alpha.is_empty() {
            return Err(ClassifierError::Config("weights must be non-empty".into()));
        }
        if alpha.iter().chain(beta.iter()).any(|&w| w <= 0.0) {
            return Err(ClassifierError::Config(
                "weights must be strictly positive".into(),
            ));
        }
        Ok(Self { alpha, beta })
    }

    /// All-ones weights: the loss reduces to standard cross-entropy.
    pub fn uniform(classes: usize) -> Self {
        Self {
            alpha: vec![1.0; classes],
            beta: vec![1.0; classes],
        }
    }

    /// Uniform weights with the NSFW class overridden.
    pub fn with_nsfw(classes: usize, nsfw_index: usize, alpha_nsfw: f64, beta_nsfw: f64) -> Self {
        let mut w = Self::uniform(classes);
        w.alpha[nsfw_index] = alpha_nsfw;
        w.beta[nsfw_index] = beta_nsfw;
        w
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

/// Result of the weighted loss: every per-class term plus their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedLoss {
    pub per_class: Vec<f64>,
    pub mean: f64,
}

/// Weighted cross-entropy of predicted scores against 0/1 labels.
///
/// Each log argument is floored at `1e-7`, so the loss stays finite at the
/// probability extremes and a perfect prediction costs exactly zero.
pub fn weighted_bce_loss(scores: &ClassScores, labels: &[f64], w: &LossWeights) -> WeightedLoss {
    weighted_bce_from_probs(&scores.values, labels, w)
}

fn weighted_bce_from_probs(probs: &[f64], labels: &[f64], w: &LossWeights) -> WeightedLoss {
    assert_eq!(probs.len(), labels.len(), "labels must match class count");
    assert_eq!(probs.len(), w.len(), "weights must match class count");
    debug_assert!(labels.iter().all(|&y| y == 0.0 || y == 1.0));

    let per_class: Vec<f64> = probs
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (&p, &y))| {
            -(w.alpha[i] * y * p.max(PROB_EPSILON).ln()
                + w.beta[i] * (1.0 - y) * (1.0 - p).max(PROB_EPSILON).ln())
        })
        .collect();
    let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
    WeightedLoss { per_class, mean }
}

/// Analytic gradient of the mean weighted loss with respect to the logits.
///
/// For multi-label heads each logit feeds one sigmoid; with uniform weights
/// the gradient reduces to `(p - y) / classes`. For binary heads the
/// gradient flows through the softmax Jacobian. Log terms sitting on their
/// floor contribute zero, matching the implemented loss exactly.
pub fn loss_gradient(logits: &[f64], labels: &[f64], w: &LossWeights, mode: ScoreMode) -> Vec<f64> {
    assert_eq!(logits.len(), labels.len(), "labels must match logits");
    assert_eq!(logits.len(), w.len(), "weights must match logits");
    let classes = logits.len() as f64;

    match mode {
        ScoreMode::MultiLabel => logits
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (&z, &y))| {
                let p = sigmoid(z);
                // d/dz of -(a y ln p + b (1-y) ln(1-p)) with p = sigmoid(z);
                // floored log terms are locally constant.
                let positive = if p > PROB_EPSILON {
                    -w.alpha[i] * y * (1.0 - p)
                } else {
                    0.0
                };
                let negative = if 1.0 - p > PROB_EPSILON {
                    w.beta[i] * (1.0 - y) * p
                } else {
                    0.0
                };
                (positive + negative) / classes
            })
            .collect(),
        ScoreMode::Binary => {
            let probs = softmax(logits);
            let dl_dp: Vec<f64> = probs
                .iter()
                .zip(labels)
                .enumerate()
                .map(|(i, (&p, &y))| {
                    let positive = if p > PROB_EPSILON {
                        -w.alpha[i] * y / p
                    } else {
                        0.0
                    };
                    let negative = if 1.0 - p > PROB_EPSILON {
                        w.beta[i] * (1.0 - y) / (1.0 - p)
                    } else {
                        0.0
                    };
                    (positive + negative) / classes
                })
                .collect();
            // Chain through the softmax Jacobian dp_i/dz_k = p_i (delta - p_k).
            (0..logits.len())
                .map(|k| {
                    dl_dp
                        .iter()
                        .enumerate()
                        .map(|(i, &g)| {
                            let delta = if i == k { 1.0 } else { 0.0 };
                            g * probs[i] * (delta - probs[k])
                        })
                        .sum()
                })
                .collect()
        }
    }
}

/// One training example: a feature vector and 0/1 labels per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub labels: Vec<f64>,
}

/// Optimizer family for the toy head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    SgdNesterov,
    RmsProp,
}

/// Training hyperparameters. `seed` drives weight init and epoch shuffles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl OptimizerConfig {
    /// SGD with Nesterov momentum at the published classifier settings.
    pub fn sgd_nesterov(epochs: usize, seed: u64) -> Self {
        Self {
            kind: OptimizerKind::SgdNesterov,
            learning_rate: 0.04,
            momentum: 0.9,
            batch_size: 32,
            epochs,
            seed,
        }
    }

    /// RMSProp at the published detector settings.
    pub fn rmsprop(epochs: usize, seed: u64) -> Self {
        Self {
            kind: OptimizerKind::RmsProp,
            learning_rate: 0.004,
            momentum: 0.9,
            batch_size: 32,
            epochs,
            seed,
        }
    }

    fn validate(&self) -> Result<(), ClassifierError> {
        if self.learning_rate < 0.0 {
            return Err(ClassifierError::Config("negative learning rate".into()));
        }
        if self.batch_size == 0 {
            return Err(ClassifierError::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// RMSProp smoothing constant (squared-gradient decay).
const RMSPROP_DECAY: f64 = 0.9;
const RMSPROP_EPSILON: f64 = 1e-8;

/// A single linear layer plus activation: the smallest head that exercises
/// the weighted loss and both optimizers end to end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    /// `classes x features` weight matrix.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub mode: ScoreMode,
    pub class_labels: Vec<String>,
}

impl LinearHead {
    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(features).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }

    pub fn predict(&self, features: &[f64]) -> ClassScores {
        let logits = self.logits(features);
        match self.mode {
            ScoreMode::MultiLabel => ClassScores {
                mode: ScoreMode::MultiLabel,
                values: logits.iter().map(|&z| sigmoid(z)).collect(),
                nsfw_index: self.nsfw_index(),
            },
            ScoreMode::Binary => ClassScores {
                mode: ScoreMode::Binary,
                values: softmax(&logits),
                nsfw_index: self.nsfw_index(),
            },
        }
    }

    pub fn nsfw_index(&self) -> usize {
        self.mode.nsfw_index().min(self.bias.len().saturating_sub(1))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("head serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, ClassifierError> {
        serde_json::from_str(json).map_err(|e| ClassifierError::Config(e.to_string()))
    }
}

/// Per-epoch mean loss over the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epoch_losses: Vec<f64>,
}

/// Trains a linear head with mini-batch descent under the weighted loss.
///
/// Deterministic for a fixed seed: initialization and the per-epoch shuffle
/// both come from the config seed, and updates run single-threaded.
pub fn train_toy(
    dataset: &[LabeledSample],
    w: &LossWeights,
    opt: &OptimizerConfig,
    mode: ScoreMode,
) -> Result<(LinearHead, TrainingLog), ClassifierError> {
    opt.validate()?;
    if dataset.is_empty() {
        return Err(ClassifierError::Config("dataset is empty".into()));
    }
    let features = dataset[0].features.len();
    let classes = w.len();
    for sample in dataset {
        if sample.features.len() != features {
            return Err(ClassifierError::DimensionMismatch {
                expected: features,
                got: sample.features.len(),
            });
        }
        if sample.labels.len() != classes {
            return Err(ClassifierError::DimensionMismatch {
                expected: classes,
                got: sample.labels.len(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut head = LinearHead {
        weights: (0..classes)
            .map(|_| (0..features).map(|_| rng.gen_range(-0.01..0.01)).collect())
            .collect(),
        bias: vec![0.0; classes],
        mode,
        class_labels: default_class_labels(mode, classes),
    };

    let mut velocity_w = vec![vec![0.0; features]; classes];
    let mut velocity_b = vec![0.0; classes];
    let mut log = TrainingLog {
        epoch_losses: Vec::with_capacity(opt.epochs),
    };
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for _ in 0..opt.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(opt.batch_size) {
            // Accumulate mean gradients over the batch.
            let mut grad_w = vec![vec![0.0; features]; classes];
            let mut grad_b = vec![0.0; classes];
            for &idx in batch {
                let sample = &dataset[idx];
                let logits = head.logits(&sample.features);
                let probs = match mode {
                    ScoreMode::MultiLabel => logits.iter().map(|&z| sigmoid(z)).collect(),
                    ScoreMode::Binary => softmax(&logits),
                };
                epoch_loss += weighted_bce_from_probs(&probs, &sample.labels, w).mean;
                let g = loss_gradient(&logits, &sample.labels, w, mode);
                for c in 0..classes {
                    for (gw, &x) in grad_w[c].iter_mut().zip(&sample.features) {
                        *gw += g[c] * x;
                    }
                    grad_b[c] += g[c];
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for c in 0..classes {
                for f in 0..features {
                    apply_update(
                        opt,
                        &mut head.weights[c][f],
                        grad_w[c][f] * scale,
                        &mut velocity_w[c][f],
                    );
                }
                apply_update(opt, &mut head.bias[c], grad_b[c] * scale, &mut velocity_b[c]);
            }
        }
        log.epoch_losses.push(epoch_loss / dataset.len() as f64);
    }
    Ok((head, log))
}

/// One parameter update. `state` is the momentum velocity for Nesterov SGD
/// and the squared-gradient average for RMSProp.
fn apply_update(opt: &OptimizerConfig, param: &mut f64, grad: f64, state: &mut f64) {
    match opt.kind {
        OptimizerKind::SgdNesterov => {
            *state = opt.momentum * *state + grad;
            *param -= opt.learning_rate * (grad + opt.momentum * *state);
        }
        OptimizerKind::RmsProp => {
            *state = RMSPROP_DECAY * *state + (1.0 - RMSPROP_DECAY) * grad * grad;
            *param -= opt.learning_rate * grad / (state.sqrt() + RMSPROP_EPSILON);
        }
    }
}

fn default_class_labels(mode: ScoreMode, classes: usize) -> Vec<String> {
    match mode {
        ScoreMode::Binary if classes == BINARY_CLASSES => {
            vec!["sfw".to_string(), "nsfw".to_string()]
        }
        ScoreMode::MultiLabel if classes == MULTI_LABEL_CLASSES => coco_labels()
            .iter()
            .map(|s| s.to_string())
            .chain(std::iter::once("nsfw".to_string()))
            .collect(),
        _ => (0..classes).map(|i| format!("class_{i}")).collect(),
    }
}

/// The 80 familiar COCO category names occupying indices 0..79 of the
/// multi-label head.
pub fn coco_labels() -> [&'static str; 80] {
    [
        "person",
        "bicycle",
        "car",
        "motorcycle",
        "airplane",
        "bus",
        "train",
        "truck",
        "boat",
        "traffic light",
        "fire hydrant",
        "stop sign",
        "parking meter",
        "bench",
        "bird",
        "cat",
        "dog",
        "horse",
        "sheep",
        "cow",
        "elephant",
        "bear",
        "zebra",
        "giraffe",
        "backpack",
        "umbrella",
        "handbag",
        "tie",
        "suitcase",
        "frisbee",
        "skis",
        "snowboard",
        "sports ball",
        "kite",
        "baseball bat",
        "baseball glove",
        "skateboard",
        "surfboard",
        "tennis racket",
        "bottle",
        "wine glass",
        "cup",
        "fork",
        "knife",
        "spoon",
        "bowl",
        "banana",
        "apple",
        "sandwich",
        "orange",
        "broccoli",
        "carrot",
        "hot dog",
        "pizza",
        "donut",
        "cake",
        "chair",
        "couch",
        "potted plant",
        "bed",
        "dining table",
        "toilet",
        "tv",
        "laptop",
        "mouse",
        "remote",
        "keyboard",
        "cell phone",
        "microwave",
        "oven",
        "toaster",
        "sink",
        "refrigerator",
        "book",
        "clock",
        "vase",
        "scissors",
        "teddy bear",
        "hair drier",
        "toothbrush",
    ]
}

/// A row of the precision/recall dial: metrics of a head trained with the
/// given NSFW beta weight, evaluated at the 0.5 threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialRow {
    pub beta_nsfw: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Deterministic two-class 2-D dataset with overlapping clusters, the
/// fixture behind the precision/recall dial. NSFW samples sit around
/// `(+1, +0.4)`, safe ones around `(-1, -0.4)`, with enough spread that the
/// classes genuinely overlap.
pub fn synthetic_overlap_dataset(samples_per_class: usize, seed: u64) -> Vec<LabeledSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dataset = Vec::with_capacity(samples_per_class * 2);
    for class in 0..2 {
        let (cx, cy, label) = if class == 0 {
            (-1.0, -0.4, vec![1.0, 0.0])
        } else {
            (1.0, 0.4, vec![0.0, 1.0])
        };
        for _ in 0..samples_per_class {
            let x = cx + gaussian(&mut rng) * 1.1;
            let y = cy + gaussian(&mut rng) * 1.1;
            dataset.push(LabeledSample {
                features: vec![x, y],
                labels: label.clone(),
            });
        }
    }
    dataset.shuffle(&mut rng);
    dataset
}

/// Standard normal draw via Box-Muller.
fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Precision and recall of a binary head on a labeled set, thresholding the
/// NSFW probability at 0.5. Returns `(precision, recall)`; a denominator of
/// zero yields `NaN` for that metric.
pub fn binary_head_metrics(head: &LinearHead, dataset: &[LabeledSample]) -> (f64, f64) {
    let nsfw = head.nsfw_index();
    let (mut tp, mut fp, mut fn_count) = (0u64, 0u64, 0u64);
    for sample in dataset {
        let predicted = head.predict(&sample.features).values[nsfw] >= 0.5;
        let actual = sample.labels[nsfw] == 1.0;
        match (predicted, actual) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_count += 1,
            (false, false) => {}
        }
    }
    (
        tp as f64 / (tp + fp) as f64,
        tp as f64 / (tp + fn_count) as f64,
    )
}

/// Trains one binary head per NSFW beta value on `dataset` and reports the
/// precision/recall trade-off at the 0.5 threshold.
pub fn precision_recall_dial(
    dataset: &[LabeledSample],
    beta_sweep: &[f64],
    opt: &OptimizerConfig,
) -> Result<Vec<DialRow>, ClassifierError> {
    let mut rows = Vec::with_capacity(beta_sweep.len());
    for &beta in beta_sweep {
        let weights = LossWeights::with_nsfw(BINARY_CLASSES, BINARY_NSFW_INDEX, 1.0, beta);
        let (head, _) = train_toy(dataset, &weights, opt, ScoreMode::Binary)?;
        let (precision, recall) = binary_head_metrics(&head, dataset);
        rows.push(DialRow {
            beta_nsfw: beta,
            precision,
            recall,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    /// Central finite differences of the implemented mean loss.
    fn numeric_gradient(logits: &[f64], labels: &[f64], w: &LossWeights, mode: ScoreMode) -> Vec<f64> {
        let h = 1e-6;
        let loss_at = |z: &[f64]| -> f64 {
            let probs: Vec<f64> = match mode {
                ScoreMode::MultiLabel => z.iter().map(|&v| sigmoid(v)).collect(),
                ScoreMode::Binary => softmax(z),
            };
            weighted_bce_from_probs(&probs, labels, w).mean
        };
        (0..logits.len())
            .map(|i| {
                let mut plus = logits.to_vec();
                let mut minus = logits.to_vec();
                plus[i] += h;
                minus[i] -= h;
                (loss_at(&plus) - loss_at(&minus)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn sigmoid_scores_hit_known_values() {
        let mut logits = vec![0.0; MULTI_LABEL_CLASSES];
        logits[3] = 1e3;
        logits[MULTI_LABEL_NSFW_INDEX] = 3.0f64.ln();
        let scores = sigmoid_scores(&logits);
        assert_eq!(scores.mode, ScoreMode::MultiLabel);
        assert_eq!(scores.values[0], 0.5);
        assert!((scores.values[3] - 1.0).abs() < 1e-12);
        assert!((scores.nsfw_score() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_scores_are_stable_and_exact() {
        let equal = softmax_scores(&[2.0, 2.0]);
        assert!((equal.values[0] - 0.5).abs() < 1e-12);

        let huge = softmax_scores(&[1e4, 0.0]);
        assert!(huge.values.iter().all(|v| v.is_finite()));
        assert!((huge.values[0] - 1.0).abs() < 1e-12);

        let ln3 = softmax_scores(&[3.0f64.ln(), 0.0]);
        assert!((ln3.values[0] - 0.75).abs() < 1e-12);
        assert!((ln3.values[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax_scores(&[1.3, -0.4]);
        let b = softmax_scores(&[1.3 + 123.0, -0.4 + 123.0]);
        assert!((a.values[0] - b.values[0]).abs() < 1e-9);
        assert!((a.values[1] - b.values[1]).abs() < 1e-9);
    }

    #[test]
    fn class_scores_enforce_mode_invariants() {
        assert!(ClassScores::new(ScoreMode::Binary, vec![0.7, 0.3]).is_ok());
        assert!(ClassScores::new(ScoreMode::Binary, vec![0.7, 0.7]).is_err());
        assert!(ClassScores::new(ScoreMode::Binary, vec![0.7]).is_err());
        assert!(ClassScores::new(ScoreMode::MultiLabel, vec![0.5; 81]).is_ok());
        assert!(ClassScores::new(ScoreMode::MultiLabel, vec![1.5; 81]).is_err());
    }

    #[test]
    fn loss_matches_closed_forms() {
        let w = LossWeights::uniform(1);
        let scores = ClassScores {
            mode: ScoreMode::MultiLabel,
            values: vec![0.5],
            nsfw_index: 0,
        };
        let loss = weighted_bce_loss(&scores, &[1.0], &w);
        assert!((loss.mean - LN2).abs() < 1e-9);

        let perfect = ClassScores {
            mode: ScoreMode::MultiLabel,
            values: vec![1.0],
            nsfw_index: 0,
        };
        let zero = weighted_bce_loss(&perfect, &[1.0], &w);
        assert!(zero.mean.abs() < 1e-9);

        let alpha2 = LossWeights::new(vec![2.0], vec![1.0]).unwrap();
        let doubled = weighted_bce_loss(&scores, &[1.0], &alpha2);
        assert!((doubled.mean - 2.0 * LN2).abs() < 1e-9);
    }

    #[test]
    fn loss_is_nonnegative_and_reduces_to_bce() {
        let values = vec![0.2, 0.9, 0.5, 0.01];
        let labels = vec![1.0, 0.0, 1.0, 0.0];
        let w = LossWeights::uniform(4);
        let scores = ClassScores {
            mode: ScoreMode::MultiLabel,
            values: values.clone(),
            nsfw_index: 0,
        };
        let loss = weighted_bce_loss(&scores, &labels, &w);
        assert!(loss.per_class.iter().all(|&l| l >= 0.0));
        // Plain BCE computed directly.
        let expected: f64 = values
            .iter()
            .zip(&labels)
            .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum::<f64>()
            / 4.0;
        assert!((loss.mean - expected).abs() < 1e-12);
    }

    #[test]
    fn scaling_weights_scales_loss_linearly() {
        let values = vec![0.3, 0.8, 0.6];
        let labels = vec![1.0, 0.0, 1.0];
        let base = LossWeights::new(vec![1.0, 2.0, 0.5], vec![1.5, 1.0, 3.0]).unwrap();
        let scaled = LossWeights::new(
            base.alpha.iter().map(|a| a * 2.5).collect(),
            base.beta.iter().map(|b| b * 2.5).collect(),
        )
        .unwrap();
        let scores = ClassScores {
            mode: ScoreMode::MultiLabel,
            values,
            nsfw_index: 0,
        };
        let l1 = weighted_bce_loss(&scores, &labels, &base);
        let l2 = weighted_bce_loss(&scores, &labels, &scaled);
        for (a, b) in l1.per_class.iter().zip(&l2.per_class) {
            assert!((b - a * 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_closed_form_single_class() {
        // y=1, p=sigmoid(0)=0.5, alpha=1 -> gradient -0.5.
        let g = loss_gradient(&[0.0], &[1.0], &LossWeights::uniform(1), ScoreMode::MultiLabel);
        assert!((g[0] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn gradient_vanishes_at_perfect_prediction() {
        let g = loss_gradient(
            &[40.0, -40.0],
            &[1.0, 0.0],
            &LossWeights::uniform(2),
            ScoreMode::MultiLabel,
        );
        assert!(g.iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn gradient_matches_finite_differences_both_modes() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for case in 0..100 {
            let mode = if case % 2 == 0 {
                ScoreMode::MultiLabel
            } else {
                ScoreMode::Binary
            };
            let n = match mode {
                ScoreMode::MultiLabel => rng.gen_range(1..=8),
                ScoreMode::Binary => 2,
            };
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let labels: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..2))).collect();
            let w = LossWeights::new(
                (0..n).map(|_| rng.gen_range(0.2..3.0)).collect(),
                (0..n).map(|_| rng.gen_range(0.2..3.0)).collect(),
            )
            .unwrap();
            let analytic = loss_gradient(&logits, &labels, &w, mode);
            let numeric = numeric_gradient(&logits, &labels, &w, mode);
            for (a, n_) in analytic.iter().zip(&numeric) {
                let denom = n_.abs().max(1e-8);
                assert!(
                    ((a - n_).abs() / denom) < 1e-5 || (a - n_).abs() < 1e-9,
                    "case {case}: analytic {a} vs numeric {n_}"
                );
            }
        }
    }

    fn separable_dataset(n: usize, seed: u64) -> Vec<LabeledSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let positive = i % 2 == 0;
                let (cx, cy) = if positive { (3.0, 3.0) } else { (-3.0, -3.0) };
                LabeledSample {
                    features: vec![cx + gaussian(&mut rng) * 0.5, cy + gaussian(&mut rng) * 0.5],
                    labels: if positive {
                        vec![0.0, 1.0]
                    } else {
                        vec![1.0, 0.0]
                    },
                }
            })
            .collect()
    }

    #[test]
    fn toy_training_fits_separable_data() {
        let dataset = separable_dataset(200, 7);
        let w = LossWeights::uniform(2);
        let opt = OptimizerConfig::sgd_nesterov(50, 7);
        let (head, log) = train_toy(&dataset, &w, &opt, ScoreMode::Binary).unwrap();
        let correct = dataset
            .iter()
            .filter(|s| {
                let p = head.predict(&s.features);
                (p.values[1] >= 0.5) == (s.labels[1] == 1.0)
            })
            .count();
        assert!(
            correct as f64 / dataset.len() as f64 >= 0.99,
            "accuracy {}/{}",
            correct,
            dataset.len()
        );
        assert_eq!(log.epoch_losses.len(), 50);
        assert!(log.epoch_losses.last().unwrap() < &log.epoch_losses[0]);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let dataset = separable_dataset(64, 3);
        let w = LossWeights::uniform(2);
        let mut opt = OptimizerConfig::sgd_nesterov(5, 3);
        opt.learning_rate = 0.0;
        let (head, _) = train_toy(&dataset, &w, &opt, ScoreMode::Binary).unwrap();
        // Fresh init with the same seed reproduces the untouched parameters.
        let mut opt0 = opt.clone();
        opt0.epochs = 0;
        let (init, _) = train_toy(&dataset, &w, &opt0, ScoreMode::Binary).unwrap();
        assert_eq!(head.weights, init.weights);
        assert_eq!(head.bias, init.bias);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let dataset = separable_dataset(100, 5);
        let w = LossWeights::uniform(2);
        let opt = OptimizerConfig::rmsprop(10, 42);
        let (head_a, log_a) = train_toy(&dataset, &w, &opt, ScoreMode::Binary).unwrap();
        let (head_b, log_b) = train_toy(&dataset, &w, &opt, ScoreMode::Binary).unwrap();
        assert_eq!(head_a, head_b);
        assert_eq!(log_a, log_b);
    }

    #[test]
    fn train_rejects_inconsistent_dimensions() {
        let mut dataset = separable_dataset(10, 1);
        dataset[3].features = vec![1.0];
        let w = LossWeights::uniform(2);
        let opt = OptimizerConfig::sgd_nesterov(1, 1);
        assert!(matches!(
            train_toy(&dataset, &w, &opt, ScoreMode::Binary),
            Err(ClassifierError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn head_round_trips_through_json() {
        let dataset = separable_dataset(50, 9);
        let w = LossWeights::uniform(2);
        let opt = OptimizerConfig::sgd_nesterov(3, 9);
        let (head, _) = train_toy(&dataset, &w, &opt, ScoreMode::Binary).unwrap();
        let parsed = LinearHead::from_json(&head.to_json()).unwrap();
        assert_eq!(parsed, head);
    }

    #[test]
    fn dial_raising_beta_trades_recall_for_precision() {
        let dataset = synthetic_overlap_dataset(200, 1234);
        let opt = OptimizerConfig::sgd_nesterov(40, 1234);
        let rows = precision_recall_dial(&dataset, &[1.0, 2.0], &opt).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(
            rows[1].precision >= rows[0].precision,
            "precision fell: {rows:?}"
        );
        assert!(rows[1].recall <= rows[0].recall, "recall rose: {rows:?}");
    }

    #[test]
    fn dial_raising_alpha_keeps_recall_up() {
        let dataset = synthetic_overlap_dataset(200, 1234);
        let opt = OptimizerConfig::sgd_nesterov(40, 1234);
        let base = LossWeights::with_nsfw(2, BINARY_NSFW_INDEX, 1.0, 1.0);
        let boosted = LossWeights::with_nsfw(2, BINARY_NSFW_INDEX, 2.0, 1.0);
        let (head_base, _) = train_toy(&dataset, &base, &opt, ScoreMode::Binary).unwrap();
        let (head_boost, _) = train_toy(&dataset, &boosted, &opt, ScoreMode::Binary).unwrap();
        let (_, recall_base) = binary_head_metrics(&head_base, &dataset);
        let (_, recall_boost) = binary_head_metrics(&head_boost, &dataset);
        assert!(
            recall_boost >= recall_base,
            "recall {recall_boost} < {recall_base}"
        );
    }

    #[test]
    fn dial_single_beta_matches_direct_training() {
        let dataset = synthetic_overlap_dataset(120, 77);
        let opt = OptimizerConfig::sgd_nesterov(20, 77);
        let rows = precision_recall_dial(&dataset, &[1.5], &opt).unwrap();
        assert_eq!(rows.len(), 1);
        let weights = LossWeights::with_nsfw(2, BINARY_NSFW_INDEX, 1.0, 1.5);
        let (head, _) = train_toy(&dataset, &weights, &opt, ScoreMode::Binary).unwrap();
        let (precision, recall) = binary_head_metrics(&head, &dataset);
        assert_eq!(rows[0].precision, precision);
        assert_eq!(rows[0].recall, recall);
    }
}
