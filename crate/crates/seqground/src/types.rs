//! Core data model: timespans, feature tensors, samples, predictions and
//! model configuration.
//!
//! Spans are stored in normalized time throughout; absolute seconds appear
//! only as sample metadata. Ground truth is a list of zero or more spans per
//! diagram, since a step may be skipped, performed once, or repeated.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A normalized `[start, end]` interval with `0 <= start <= end <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timespan {
    start: f64,
    end: f64,
}

impl Timespan {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !start.is_finite() || !end.is_finite() {
            return Err(Error::Validation(format!(
                "timespan must be finite, got [{start}, {end}]"
            )));
        }
        if start > end {
            return Err(Error::Validation(format!(
                "timespan start > end: [{start}, {end}]"
            )));
        }
        if start < 0.0 || end > 1.0 {
            return Err(Error::Validation(format!(
                "timespan out of [0,1]: [{start}, {end}]"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    /// Length of the intersection with `other` (zero when disjoint).
    pub fn intersection_len(&self, other: &Timespan) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }

    /// Plain intersection-over-union; 0 when the union is empty.
    pub fn iou(&self, other: &Timespan) -> f64 {
        let inter = self.intersection_len(other);
        let union = self.length() + other.length() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Per-clip embedding rows for one video.
#[derive(Debug, Clone)]
pub struct VideoFeatures<S: Scalar> {
    pub clips: Array2<S>,
    pub duration_seconds: f64,
}

impl<S: Scalar> VideoFeatures<S> {
    pub fn new(clips: Array2<S>, duration_seconds: f64) -> Result<Self> {
        if clips.nrows() == 0 {
            return Err(Error::Validation("clip_count must be ≥ 1".into()));
        }
        if duration_seconds <= 0.0 {
            return Err(Error::Validation(format!(
                "duration_seconds must be positive, got {duration_seconds}"
            )));
        }
        if clips.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("video features must be finite".into()));
        }
        Ok(Self {
            clips,
            duration_seconds,
        })
    }

    pub fn clip_count(&self) -> usize {
        self.clips.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.clips.ncols()
    }
}

/// Per-diagram embedding rows, in manual-book order.
#[derive(Debug, Clone)]
pub struct DiagramSequence<S: Scalar> {
    pub diagrams: Array2<S>,
}

impl<S: Scalar> DiagramSequence<S> {
    pub fn new(diagrams: Array2<S>) -> Result<Self> {
        if diagrams.nrows() == 0 {
            return Err(Error::Validation("diagram_count must be ≥ 1".into()));
        }
        if diagrams.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("diagram features must be finite".into()));
        }
        Ok(Self { diagrams })
    }

    pub fn diagram_count(&self) -> usize {
        self.diagrams.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.diagrams.ncols()
    }
}

/// One video, its diagram sequence, and the ground-truth spans per diagram.
#[derive(Debug, Clone)]
pub struct GroundingSample<S: Scalar> {
    pub id: String,
    pub video: VideoFeatures<S>,
    pub diagrams: DiagramSequence<S>,
    /// `ground_truth[i]` lists the segments of diagram `i`; may be empty.
    pub ground_truth: Vec<Vec<Timespan>>,
}

impl<S: Scalar> GroundingSample<S> {
    pub fn new(
        id: String,
        video: VideoFeatures<S>,
        diagrams: DiagramSequence<S>,
        ground_truth: Vec<Vec<Timespan>>,
    ) -> Result<Self> {
        if ground_truth.len() != diagrams.diagram_count() {
            return Err(Error::Validation(format!(
                "sample {id}: ground_truth length {} != diagram_count {}",
                ground_truth.len(),
                diagrams.diagram_count()
            )));
        }
        Ok(Self {
            id,
            video,
            diagrams,
            ground_truth,
        })
    }

    pub fn diagram_count(&self) -> usize {
        self.diagrams.diagram_count()
    }

    pub fn clip_count(&self) -> usize {
        self.video.clip_count()
    }
}

/// One scored timespan for a (diagram, query) slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// 0-based diagram index.
    pub diagram_index: usize,
    /// 0-based learnable-query index.
    pub query_index: usize,
    /// Foreground score in `[0,1]`.
    pub score: f64,
    pub span: Timespan,
}

/// Self-attention connectivity pattern over composite queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskType {
    /// Full attention.
    A,
    /// Same diagram only (block diagonal).
    B,
    /// Same query index only (sub-diagonals of period K).
    C,
    /// Union of B and C.
    D,
}

/// How a pair of value sources is merged before the value projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueFusion {
    /// Elementwise sum.
    Add,
    /// Concatenate, then project back to width D.
    ConcatProject,
}

fn default_num_queries() -> usize {
    3
}

fn default_normalize_video_length() -> Option<usize> {
    Some(256)
}

fn default_dropout() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

fn default_mask_type() -> MaskType {
    MaskType::D
}

fn default_value_fusion() -> ValueFusion {
    ValueFusion::ConcatProject
}

/// Architecture hyperparameters for the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    #[serde(default = "default_num_queries")]
    pub num_queries: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_mask_type")]
    pub mask_type: MaskType,
    #[serde(default = "default_value_fusion")]
    pub value_fusion: ValueFusion,
    #[serde(default = "default_true")]
    pub use_diagram_pe: bool,
    #[serde(default = "default_true")]
    pub use_aux_loss: bool,
    /// Interpolate video features to this length; `null` keeps the native length.
    #[serde(default = "default_normalize_video_length")]
    pub normalize_video_length: Option<usize>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_queries == 0 || self.num_heads == 0 {
            return Err(Error::Config(
                "hidden_dim, num_queries and num_heads must be positive".into(),
            ));
        }
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be ≥ 1".into()));
        }
        if self.ffn_dim == 0 {
            return Err(Error::Config("ffn_dim must be positive".into()));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.hidden_dim % 2 != 0 {
            return Err(Error::Config("hidden_dim must be even".into()));
        }
        if (self.hidden_dim / self.num_heads) % 2 != 0 {
            return Err(Error::Config(
                "per-head width must be even for positional encodings".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0,1), got {}",
                self.dropout
            )));
        }
        if let Some(len) = self.normalize_video_length {
            if len < 2 {
                return Err(Error::Config(
                    "normalize_video_length must be ≥ 2".into(),
                ));
            }
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 256,
            num_queries: 3,
            num_layers: 2,
            num_heads: 8,
            ffn_dim: 1024,
            dropout: 0.1,
            mask_type: MaskType::D,
            value_fusion: ValueFusion::ConcatProject,
            use_diagram_pe: true,
            use_aux_loss: true,
            normalize_video_length: Some(256),
        }
    }
}

fn default_lambda_l1() -> f64 {
    10.0
}

fn default_lambda_giou() -> f64 {
    1.0
}

fn default_lambda_score() -> f64 {
    4.0
}

fn default_background_weight() -> f64 {
    0.25
}

/// Weights balancing the three loss terms (also used as matching costs).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "default_lambda_l1")]
    pub lambda_l1: f64,
    #[serde(default = "default_lambda_giou")]
    pub lambda_giou: f64,
    #[serde(default = "default_lambda_score")]
    pub lambda_score: f64,
    /// Down-weight applied to unmatched rows in the score loss.
    #[serde(default = "default_background_weight")]
    pub background_weight: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_l1,
            self.lambda_giou,
            self.lambda_score,
            self.background_weight,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.lambda_l1 == 0.0 && self.lambda_giou == 0.0 && self.lambda_score == 0.0 {
            return Err(Error::Config("loss weights must not all be zero".into()));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_l1: default_lambda_l1(),
            lambda_giou: default_lambda_giou(),
            lambda_score: default_lambda_score(),
            background_weight: default_background_weight(),
        }
    }
}

/// Findings produced by [`validate_sample`]; empty iff the sample is valid.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Check every sample invariant and report all violations.
pub fn validate_sample<S: Scalar>(sample: &GroundingSample<S>) -> ValidationReport {
    let mut findings = Vec::new();
    if sample.video.clip_count() == 0 {
        findings.push("clip_count must be ≥ 1".into());
    }
    if sample.video.duration_seconds <= 0.0 {
        findings.push(format!(
            "duration_seconds must be positive, got {}",
            sample.video.duration_seconds
        ));
    }
    if sample.video.clips.iter().any(|v| !v.is_finite()) {
        findings.push("video features contain non-finite entries".into());
    }
    if sample.diagrams.diagrams.iter().any(|v| !v.is_finite()) {
        findings.push("diagram features contain non-finite entries".into());
    }
    if sample.ground_truth.len() != sample.diagram_count() {
        findings.push(format!(
            "ground_truth length {} != diagram_count {} (length mismatch)",
            sample.ground_truth.len(),
            sample.diagram_count()
        ));
    }
    for (i, spans) in sample.ground_truth.iter().enumerate() {
        for (j, span) in spans.iter().enumerate() {
            if span.start() > span.end() {
                findings.push(format!("diagram {i} span {j}: start > end"));
            }
            if span.start() < 0.0 || span.end() > 1.0 {
                findings.push(format!(
                    "diagram {i} span {j}: end out of [0,1] range [{}, {}]",
                    span.start(),
                    span.end()
                ));
            }
        }
    }
    ValidationReport { findings }
}
