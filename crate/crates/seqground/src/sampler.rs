//! Sliding-window extraction and fixed-length feature interpolation.
//!
//! Long videos are cut into overlapping clip windows; ground truth is
//! intersected with each window, kept only when enough of the segment is
//! visible, and renormalized to window-relative time. A window size of `None`
//! means "the whole video".

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{DiagramSequence, GroundingSample, Timespan, VideoFeatures};

fn default_min_gt_visibility() -> f64 {
    0.5
}

/// Zipped window/stride schedule plus the visibility threshold.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Window sizes in clips; `null` = whole video.
    pub window_sizes: Vec<Option<usize>>,
    /// Strides in clips, zipped with `window_sizes`; `null` only with a
    /// `null` window.
    pub strides: Vec<Option<usize>>,
    /// Minimum fraction of a segment that must fall inside a window for the
    /// segment to be kept.
    #[serde(default = "default_min_gt_visibility")]
    pub min_gt_visibility: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            window_sizes: vec![None],
            strides: vec![None],
            min_gt_visibility: default_min_gt_visibility(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_sizes.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "window_sizes ({}) and strides ({}) must zip",
                self.window_sizes.len(),
                self.strides.len()
            )));
        }
        if self.window_sizes.is_empty() {
            return Err(Error::Config("at least one window size is required".into()));
        }
        for (w, s) in self.window_sizes.iter().zip(&self.strides) {
            match (w, s) {
                (None, None) => {}
                (None, Some(_)) | (Some(_), None) => {
                    return Err(Error::Config(
                        "whole-video windows pair with a null stride (and vice versa)"
                            .into(),
                    ))
                }
                (Some(w), Some(s)) => {
                    if *w == 0 || *s == 0 {
                        return Err(Error::Config(
                            "window size and stride must be positive".into(),
                        ));
                    }
                }
            }
        }
        if !(0.0..=1.0).contains(&self.min_gt_visibility) || self.min_gt_visibility == 0.0 {
            return Err(Error::Config(format!(
                "min_gt_visibility must be in (0, 1], got {}",
                self.min_gt_visibility
            )));
        }
        Ok(())
    }
}

/// One extracted window: a self-contained sample plus its clip range in the
/// parent video.
#[derive(Debug, Clone)]
pub struct WindowSample<S: Scalar> {
    pub sample: GroundingSample<S>,
    /// Half-open clip range `[start, end)` in the parent video.
    pub clip_range: (usize, usize),
}

/// Window start offsets: `{0, s, 2s, …}` while `start + w <= n`, plus a final
/// window ending exactly at `n` when the strided ones stop short.
fn window_starts(n: usize, w: usize, s: usize) -> Vec<usize> {
    if w >= n {
        return vec![0];
    }
    let mut starts = Vec::new();
    let mut start = 0;
    while start + w <= n {
        starts.push(start);
        start += s;
    }
    if starts.last().map(|&last| last + w < n).unwrap_or(true) {
        starts.push(n - w);
    }
    starts
}

/// Cut `sample` into windows of `window` clips every `stride` clips.
///
/// Segments keeping at least `min_gt_visibility` of their duration inside a
/// window survive (clipped and renormalized to window time); windows left
/// with no segments at all are dropped. `window = None` returns the sample
/// unchanged as a single whole-video window.
pub fn sliding_window_sample<S: Scalar>(
    sample: &GroundingSample<S>,
    window: Option<usize>,
    stride: Option<usize>,
    min_gt_visibility: f64,
) -> Result<Vec<WindowSample<S>>> {
    let n = sample.clip_count();
    let (w, s) = match (window, stride) {
        (None, None) => {
            return Ok(vec![WindowSample {
                sample: sample.clone(),
                clip_range: (0, n),
            }])
        }
        (Some(w), Some(s)) if w > 0 && s > 0 => (w, s),
        _ => {
            return Err(Error::Config(
                "window and stride must both be positive or both null".into(),
            ))
        }
    };

    let mut out = Vec::new();
    for start in window_starts(n, w, s) {
        let end = (start + w).min(n);
        let lo = start as f64 / n as f64;
        let hi = end as f64 / n as f64;
        let width = hi - lo;

        let mut ground_truth = Vec::with_capacity(sample.diagram_count());
        let mut any = false;
        for spans in &sample.ground_truth {
            let mut kept = Vec::new();
            for span in spans {
                let inter_s = span.start().max(lo);
                let inter_e = span.end().min(hi);
                if inter_e < inter_s {
                    continue;
                }
                let visible = if span.length() > 0.0 {
                    (inter_e - inter_s) / span.length()
                } else if span.start() >= lo && span.start() <= hi {
                    1.0
                } else {
                    0.0
                };
                if visible + 1e-12 < min_gt_visibility {
                    continue;
                }
                let s_rel = ((inter_s - lo) / width).clamp(0.0, 1.0);
                let e_rel = ((inter_e - lo) / width).clamp(0.0, 1.0);
                kept.push(Timespan::new(s_rel, e_rel)?);
                any = true;
            }
            ground_truth.push(kept);
        }
        if !any {
            continue;
        }

        let clips = sample
            .video
            .clips
            .slice(ndarray::s![start..end, ..])
            .to_owned();
        let video = VideoFeatures::new(clips, sample.video.duration_seconds * width)?;
        let diagrams = DiagramSequence::new(sample.diagrams.diagrams.clone())?;
        let windowed = GroundingSample::new(
            format!("{}#w{}:{}", sample.id, start, end),
            video,
            diagrams,
            ground_truth,
        )?;
        out.push(WindowSample {
            sample: windowed,
            clip_range: (start, end),
        });
    }
    Ok(out)
}

/// Apply the whole window/stride schedule to every sample, in sample order.
pub fn windows_for_training<S: Scalar>(
    samples: &[GroundingSample<S>],
    config: &SamplerConfig,
) -> Result<Vec<WindowSample<S>>> {
    config.validate()?;
    let mut out = Vec::new();
    for sample in samples {
        for (w, s) in config.window_sizes.iter().zip(&config.strides) {
            out.extend(sliding_window_sample(
                sample,
                *w,
                *s,
                config.min_gt_visibility,
            )?);
        }
    }
    Ok(out)
}

/// Endpoint-aligned linear interpolation of feature rows to `target` rows.
///
/// Source position for output row `k` is `k·(N-1)/(T-1)`, so the first and
/// last rows are copied exactly. `target` must be at least 2.
pub fn interpolate_length<S: Scalar>(
    features: &Array2<S>,
    target: usize,
) -> Result<Array2<S>> {
    if target < 2 {
        return Err(Error::Config(format!(
            "interpolation target must be ≥ 2, got {target}"
        )));
    }
    let n = features.nrows();
    if n == 0 {
        return Err(Error::Shape("cannot interpolate an empty feature array".into()));
    }
    let cols = features.ncols();
    let mut out = Array2::zeros((target, cols));
    for k in 0..target {
        let pos = if n == 1 {
            0.0
        } else {
            k as f64 * (n - 1) as f64 / (target - 1) as f64
        };
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        let frac = S::from_real(pos - i0 as f64);
        let one_minus = S::one() - frac;
        for c in 0..cols {
            out[[k, c]] = features[[i0, c]] * one_minus + features[[i1, c]] * frac;
        }
    }
    Ok(out)
}
