//! Evaluation metrics, ordering statistics, and non-learning baselines.
//!
//! Recall@k and mean IoU are computed over *GT-bearing diagram instances*
//! across the whole evaluation split: a diagram with at least one
//! ground-truth segment counts once, diagrams without ground truth are
//! excluded, and a prediction is scored against its best-matching segment.
//! Order statistics (Kendall's tau over midpoints, mean pairwise overlap)
//! are computed per sample and averaged over the samples where they are
//! defined.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::scalar::Scalar;
use crate::types::{GroundingSample, Prediction, Timespan};

/// IoU thresholds reported by [`evaluate`].
pub const RECALL_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// One evaluated sample: the model's predictions (all `MK` rows) next to
/// the ground truth (one list of segments per diagram).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEval {
    pub id: String,
    pub predictions: Vec<Prediction>,
    pub ground_truth: Vec<Vec<Timespan>>,
}

impl SampleEval {
    fn validate(&self) -> Result<()> {
        let m = self.ground_truth.len();
        if m == 0 {
            return Err(Error::Validation(format!(
                "sample {}: no diagrams",
                self.id
            )));
        }
        if self.predictions.is_empty() {
            return Err(Error::Validation(format!(
                "sample {}: no predictions",
                self.id
            )));
        }
        for p in &self.predictions {
            if p.diagram_index >= m {
                return Err(Error::Validation(format!(
                    "sample {}: prediction for diagram {} but only {} diagrams",
                    self.id, p.diagram_index, m
                )));
            }
        }
        Ok(())
    }
}

/// Aggregate evaluation results for one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Recall@1 keyed by IoU threshold ("0.3", "0.5", "0.7").
    pub r_at_1: BTreeMap<String, f64>,
    /// Mean over GT-bearing diagrams of the top-1 span's best IoU.
    pub miou: f64,
    /// Mean per-sample Kendall tau-b between predicted and ground-truth
    /// midpoint orders; absent when no sample has two comparable diagrams.
    pub kendall_tau: Option<f64>,
    /// Mean per-sample pairwise overlap of top-1 spans; absent when no
    /// sample has two diagrams.
    pub mean_overlap: Option<f64>,
    pub per_sample: Vec<PerSampleReport>,
}

/// Per-sample slice of the aggregate report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerSampleReport {
    pub id: String,
    pub miou: f64,
    pub kendall_tau: Option<f64>,
    pub mean_overlap: Option<f64>,
}

/// Rank each diagram's predictions by score (descending; ties broken by
/// lower query index) and keep the top `k`.
pub fn top_k_predictions(predictions: &[Prediction], k: usize) -> Result<Vec<Vec<Prediction>>> {
    if k == 0 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    let m = predictions
        .iter()
        .map(|p| p.diagram_index + 1)
        .max()
        .unwrap_or(0);
    let mut per_diagram: Vec<Vec<Prediction>> = vec![Vec::new(); m];
    for p in predictions {
        per_diagram[p.diagram_index].push(p.clone());
    }
    for (i, rows) in per_diagram.iter_mut().enumerate() {
        if rows.is_empty() {
            return Err(Error::Validation(format!(
                "diagram {i} has no predictions"
            )));
        }
        if k > rows.len() {
            return Err(Error::Validation(format!(
                "k = {k} exceeds the {} predictions of diagram {i}",
                rows.len()
            )));
        }
        rows.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .expect("scores must be comparable")
                .then(a.query_index.cmp(&b.query_index))
        });
        rows.truncate(k);
    }
    Ok(per_diagram)
}

fn best_iou(span: &Timespan, segments: &[Timespan]) -> f64 {
    segments
        .iter()
        .map(|g| span.iou(g))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Fraction of GT-bearing diagrams whose top-`k` spans contain at least one
/// span with IoU ≥ `threshold` against some ground-truth segment.
pub fn recall_at_k(evals: &[SampleEval], k: usize, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Validation(format!(
            "IoU threshold must be in (0, 1], got {threshold}"
        )));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for eval in evals {
        eval.validate()?;
        let ranked = top_k_predictions(&eval.predictions, k)?;
        for (i, segments) in eval.ground_truth.iter().enumerate() {
            if segments.is_empty() {
                continue;
            }
            total += 1;
            if ranked[i]
                .iter()
                .any(|p| best_iou(&p.span, segments) >= threshold)
            {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Validation(
            "evaluation set has no ground-truth-bearing diagrams".into(),
        ));
    }
    Ok(hits as f64 / total as f64)
}

/// Mean over GT-bearing diagrams of the best IoU between the top-1 span and
/// the diagram's segments.
pub fn mean_iou(evals: &[SampleEval]) -> Result<f64> {
    let mut sum = 0.0;
    let mut total = 0usize;
    for eval in evals {
        eval.validate()?;
        let ranked = top_k_predictions(&eval.predictions, 1)?;
        for (i, segments) in eval.ground_truth.iter().enumerate() {
            if segments.is_empty() {
                continue;
            }
            total += 1;
            sum += best_iou(&ranked[i][0].span, segments);
        }
    }
    if total == 0 {
        return Err(Error::Validation(
            "evaluation set has no ground-truth-bearing diagrams".into(),
        ));
    }
    Ok(sum / total as f64)
}

fn count_inversions(values: &mut [f64], buffer: &mut Vec<f64>) -> u64 {
    let n = values.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let (left, right) = values.split_at_mut(mid);
    let mut inversions = count_inversions(left, buffer) + count_inversions(right, buffer);
    buffer.clear();
    let (mut i, mut j) = (0, 0);
    while i < left.len() && j < right.len() {
        if left[i] <= right[j] {
            buffer.push(left[i]);
            i += 1;
        } else {
            // left[i..] are all strictly greater than right[j].
            inversions += (left.len() - i) as u64;
            buffer.push(right[j]);
            j += 1;
        }
    }
    buffer.extend_from_slice(&left[i..]);
    buffer.extend_from_slice(&right[j..]);
    values.copy_from_slice(buffer);
    inversions
}

fn tie_pairs(sorted: &[f64]) -> u64 {
    let mut pairs = 0u64;
    let mut run = 1u64;
    for i in 1..sorted.len() {
        if sorted[i] == sorted[i - 1] {
            run += 1;
        } else {
            pairs += run * (run - 1) / 2;
            run = 1;
        }
    }
    pairs + run * (run - 1) / 2
}

/// Kendall tau-b between two equally long lists, counting discordances with
/// a merge sort (Knight's method). Returns `None` when either list is
/// constant (denominator zero) or has fewer than two entries.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "tau inputs must pair up");
    let n = x.len() as u64;
    if n < 2 {
        return None;
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| {
        x[a].partial_cmp(&x[b])
            .expect("midpoints must be comparable")
            .then(y[a].partial_cmp(&y[b]).expect("midpoints must be comparable"))
    });

    let n0 = n * (n - 1) / 2;
    // Tie pair counts in x and jointly in (x, y), from the sorted order.
    let mut n1 = 0u64;
    let mut n3 = 0u64;
    let mut x_run = 1u64;
    let mut xy_run = 1u64;
    for w in 1..order.len() {
        let (a, b) = (order[w - 1], order[w]);
        if x[a] == x[b] {
            x_run += 1;
            if y[a] == y[b] {
                xy_run += 1;
            } else {
                n3 += xy_run * (xy_run - 1) / 2;
                xy_run = 1;
            }
        } else {
            n1 += x_run * (x_run - 1) / 2;
            n3 += xy_run * (xy_run - 1) / 2;
            x_run = 1;
            xy_run = 1;
        }
    }
    n1 += x_run * (x_run - 1) / 2;
    n3 += xy_run * (xy_run - 1) / 2;

    let mut ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();
    let mut buffer = Vec::with_capacity(ys.len());
    let discordant = count_inversions(&mut ys, &mut buffer);
    let n2 = tie_pairs(&ys);

    let denom = ((n0 - n1) as f64) * ((n0 - n2) as f64);
    if denom <= 0.0 {
        return None;
    }
    let concordant = (n0 - n1 - n2 + n3 - discordant) as f64;
    Some((concordant - discordant as f64) / denom.sqrt())
}

fn top1_midpoints(eval: &SampleEval) -> Result<Vec<(usize, f64)>> {
    let ranked = top_k_predictions(&eval.predictions, 1)?;
    Ok(ranked
        .iter()
        .enumerate()
        .map(|(i, rows)| (i, rows[0].span.midpoint()))
        .collect())
}

/// Per-sample Kendall tau-b between predicted top-1 midpoints and
/// ground-truth midpoints (first segment per diagram), averaged over
/// samples where it is defined.
pub fn kendall_tau_midpoints(evals: &[SampleEval]) -> Result<Option<f64>> {
    let mut taus = Vec::new();
    for eval in evals {
        eval.validate()?;
        let midpoints = top1_midpoints(eval)?;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (i, predicted) in midpoints {
            if let Some(first) = eval.ground_truth[i].first() {
                x.push(predicted);
                y.push(first.midpoint());
            }
        }
        if x.len() < 2 {
            continue; // fewer than two comparable diagrams
        }
        if let Some(tau) = kendall_tau_b(&x, &y) {
            taus.push(tau);
        }
    }
    if taus.is_empty() {
        return Ok(None);
    }
    Ok(Some(taus.iter().sum::<f64>() / taus.len() as f64))
}

/// Per-sample mean pairwise intersection length of top-1 spans (all
/// diagrams), averaged over samples with at least two diagrams.
pub fn mean_overlap(evals: &[SampleEval]) -> Result<Option<f64>> {
    let mut overlaps = Vec::new();
    for eval in evals {
        eval.validate()?;
        let ranked = top_k_predictions(&eval.predictions, 1)?;
        let spans: Vec<Timespan> = ranked.iter().map(|rows| rows[0].span).collect();
        let m = spans.len();
        if m < 2 {
            continue;
        }
        let mut total = 0.0;
        for i in 0..m {
            for j in (i + 1)..m {
                total += spans[i].intersection_len(&spans[j]);
            }
        }
        overlaps.push(total / (m * (m - 1) / 2) as f64);
    }
    if overlaps.is_empty() {
        return Ok(None);
    }
    Ok(Some(overlaps.iter().sum::<f64>() / overlaps.len() as f64))
}

fn threshold_key(threshold: f64) -> String {
    format!("{threshold:.1}")
}

/// Compute the full report at k=1 over the standard thresholds.
pub fn evaluate(evals: &[SampleEval]) -> Result<EvalReport> {
    if evals.is_empty() {
        return Err(Error::Validation("evaluation set is empty".into()));
    }
    let mut r_at_1 = BTreeMap::new();
    for threshold in RECALL_THRESHOLDS {
        r_at_1.insert(threshold_key(threshold), recall_at_k(evals, 1, threshold)?);
    }
    let miou = mean_iou(evals)?;
    let kendall_tau = kendall_tau_midpoints(evals)?;
    let overlap = mean_overlap(evals)?;

    let mut per_sample = Vec::with_capacity(evals.len());
    for eval in evals {
        let single = std::slice::from_ref(eval);
        per_sample.push(PerSampleReport {
            id: eval.id.clone(),
            miou: mean_iou(single)?,
            kendall_tau: kendall_tau_midpoints(single)?,
            mean_overlap: mean_overlap(single)?,
        });
    }
    Ok(EvalReport {
        r_at_1,
        miou,
        kendall_tau,
        mean_overlap: overlap,
        per_sample,
    })
}

fn baseline_evals<S: Scalar>(
    samples: &[GroundingSample<S>],
    mut span_for: impl FnMut() -> Timespan,
) -> Vec<SampleEval> {
    samples
        .iter()
        .map(|sample| {
            let predictions = (0..sample.diagrams.diagram_count())
                .map(|i| Prediction {
                    diagram_index: i,
                    query_index: 0,
                    score: 1.0,
                    span: span_for(),
                })
                .collect();
            SampleEval {
                id: sample.id.clone(),
                predictions,
                ground_truth: sample.ground_truth.clone(),
            }
        })
        .collect()
}

/// Baseline that predicts the whole video for every diagram. Its mIoU
/// equals the mean normalized ground-truth segment length.
pub fn baseline_full_duration<S: Scalar>(samples: &[GroundingSample<S>]) -> Result<EvalReport> {
    let full = Timespan::new(0.0, 1.0).expect("unit span is valid");
    evaluate(&baseline_evals(samples, || full))
}

/// Baseline that predicts a sorted pair of uniform draws per diagram.
pub fn baseline_random<S: Scalar>(samples: &[GroundingSample<S>], seed: u64) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    evaluate(&baseline_evals(samples, || {
        let a: f64 = rng.random();
        let b: f64 = rng.random();
        Timespan::new(a.min(b), a.max(b)).expect("sorted uniform pair is valid")
    }))
}

/// Write normalized `(start, end)` pairs as CSV (6 decimal places) for
/// external density plotting.
pub fn export_bias_data(spans: &[Timespan], path: &Path) -> Result<()> {
    let mut csv = String::from("start,end\n");
    for span in spans {
        writeln!(csv, "{:.6},{:.6}", span.start(), span.end()).expect("write to string");
    }
    write_atomic(path, csv.as_bytes())
}

/// All ground-truth segments of a split, flattened in sample order.
pub fn all_ground_truth_spans<S: Scalar>(samples: &[GroundingSample<S>]) -> Vec<Timespan> {
    samples
        .iter()
        .flat_map(|s| s.ground_truth.iter().flatten().copied())
        .collect()
}
