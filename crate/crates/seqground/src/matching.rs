//! Prediction-to-segment matching and the training losses built on it.
//!
//! Each diagram's `K` predictions are matched to its ground-truth segments by
//! a minimum-cost assignment on a `K x K` matrix padded with zero-cost "no
//! segment" columns, so matching never crosses diagram boundaries. The
//! matched pairs feed an L1 span loss and a generalized-IoU loss; every
//! prediction feeds a foreground/background score loss.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::hungarian::min_cost_assignment;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};
use crate::types::{LossWeights, Timespan};

/// Generalized IoU for closed intervals, in `[-1, 1]`.
///
/// Extends plain IoU with a penalty for the dead space between disjoint
/// spans: `iou - |hull \ union| / |hull|`. Two zero-length spans at the same
/// point (empty union, empty hull) score 0.
pub fn giou_1d(a: &Timespan, b: &Timespan) -> f64 {
    let inter = a.intersection_len(b);
    let union = a.length() + b.length() - inter;
    let hull = a.end().max(b.end()) - a.start().min(b.start());
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let penalty = if hull > 0.0 {
        (hull - union) / hull
    } else {
        0.0
    };
    iou - penalty
}

/// Assignment cost of pairing one scored prediction with one GT segment.
pub fn match_cost(
    pred_span: (f64, f64),
    pred_score: f64,
    gt_span: &Timespan,
    weights: &LossWeights,
) -> f64 {
    let pred = span_of(pred_span);
    let l1 = (pred_span.0 - gt_span.start()).abs() + (pred_span.1 - gt_span.end()).abs();
    weights.lambda_l1 * l1 + weights.lambda_giou * (1.0 - giou_1d(&pred, gt_span))
        - weights.lambda_score * pred_score
}

fn span_of((s, e): (f64, f64)) -> Timespan {
    // Predictions are clamped to ordered [0,1] pairs upstream; fall back to
    // the raw interval arithmetic if a caller hands us something odd.
    Timespan::new(s.clamp(0.0, 1.0).min(e.clamp(0.0, 1.0)), e.clamp(0.0, 1.0))
        .expect("clamped span is valid")
}

/// Outcome of matching: per-composite-row targets plus per-diagram counts.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// For composite row `r`, the index of the GT segment (within its
    /// diagram's list) it was matched to, or `None` for background.
    pub assigned: Vec<Option<usize>>,
    /// Number of GT segments per diagram.
    pub gt_counts: Vec<usize>,
}

impl MatchResult {
    /// Diagrams with at least one GT segment.
    pub fn positive_diagrams(&self) -> usize {
        self.gt_counts.iter().filter(|&&c| c > 0).count()
    }
}

/// Match each diagram's `num_queries` predictions against its GT segments.
///
/// `spans` and `scores` are laid out diagram-major (`r = i·K + j`). Errors if
/// any diagram has more GT segments than there are queries to cover them.
pub fn restricted_match(
    spans: &[(f64, f64)],
    scores: &[f64],
    ground_truth: &[Vec<Timespan>],
    num_queries: usize,
    weights: &LossWeights,
) -> Result<MatchResult> {
    let m = ground_truth.len();
    let k = num_queries;
    if spans.len() != m * k || scores.len() != m * k {
        return Err(Error::Matching(format!(
            "expected {} predictions ({} diagrams x {} queries), got {} spans / {} scores",
            m * k,
            m,
            k,
            spans.len(),
            scores.len()
        )));
    }
    if spans
        .iter()
        .any(|(s, e)| !s.is_finite() || !e.is_finite())
        || scores.iter().any(|s| !s.is_finite())
    {
        return Err(Error::Matching(
            "predictions contain non-finite values".into(),
        ));
    }

    let mut assigned = vec![None; m * k];
    let mut gt_counts = Vec::with_capacity(m);
    for (i, segments) in ground_truth.iter().enumerate() {
        let c = segments.len();
        gt_counts.push(c);
        if c > k {
            return Err(Error::Matching(format!(
                "diagram {i} has {c} ground-truth segments but only {k} queries"
            )));
        }
        if c == 0 {
            continue;
        }
        // K x K cost: real segments in the first c columns, zero-cost
        // "no segment" padding after.
        let mut cost = Array2::zeros((k, k));
        for row in 0..k {
            let r = i * k + row;
            for (col, seg) in segments.iter().enumerate() {
                cost[[row, col]] = match_cost(spans[r], scores[r], seg, weights);
            }
        }
        let assign = min_cost_assignment(&cost);
        for (row, &col) in assign.iter().enumerate() {
            if col < c {
                assigned[i * k + row] = Some(col);
            }
        }
    }
    Ok(MatchResult {
        assigned,
        gt_counts,
    })
}

/// The individual loss terms of one forward pass, as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub l1: Var,
    pub giou: Var,
    pub score: Var,
    pub total: Var,
}

/// Plain-number view of [`LossTerms`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub giou: f64,
    pub score: f64,
    pub total: f64,
}

/// Build the matched span losses and the score loss on `tape`.
///
/// `spans` is the `(MK, 2)` node of clamped `[start, end]` predictions and
/// `score_logits` the `(MK, 1)` node of raw (pre-sigmoid) scores. Matched
/// diagrams contribute to the span losses with weight `1 / (M_pos · C_i)`;
/// diagrams without segments are excluded entirely. The score loss is a
/// weighted binary cross-entropy over all `MK` rows, background rows
/// down-weighted by `background_weight`, averaged over `MK`.
pub fn build_losses<S: Scalar>(
    tape: &mut Tape<S>,
    spans: Var,
    score_logits: Var,
    matching: &MatchResult,
    ground_truth: &[Vec<Timespan>],
    weights: &LossWeights,
) -> LossTerms {
    let mk = matching.assigned.len();
    let k = mk / ground_truth.len().max(1);
    assert_eq!(tape.value(spans).dim(), (mk, 2), "span node shape");
    assert_eq!(tape.value(score_logits).dim(), (mk, 1), "score node shape");

    let m_pos = matching.positive_diagrams();

    // Matched rows in ascending composite order, with their targets/weights.
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut row_weights = Vec::new();
    for (r, assignment) in matching.assigned.iter().enumerate() {
        if let Some(gt_idx) = assignment {
            let diagram = r / k;
            let c = matching.gt_counts[diagram];
            rows.push(r);
            targets.push(ground_truth[diagram][*gt_idx]);
            row_weights.push(1.0 / (m_pos as f64 * c as f64));
        }
    }

    let (l1, giou) = if rows.is_empty() {
        (tape.constant_scalar(S::zero()), tape.constant_scalar(S::zero()))
    } else {
        let p = rows.len();
        let matched = tape.gather_rows(spans, &rows);
        let target_arr = Array2::from_shape_fn((p, 2), |(r, c)| {
            S::from_real(if c == 0 {
                targets[r].start()
            } else {
                targets[r].end()
            })
        });
        let weight_arr =
            Array2::from_shape_fn((p, 2), |(r, _)| S::from_real(row_weights[r]));
        let target_node = tape.constant(target_arr.clone());
        let weight_node = tape.constant(weight_arr);

        let diff = tape.sub(matched, target_node);
        let adiff = tape.abs(diff);
        let weighted = tape.mul(adiff, weight_node);
        let l1 = tape.sum_all(weighted);

        // Per-row generalized IoU, composed from interval arithmetic.
        let s1 = tape.slice_cols(matched, 0, 1);
        let e1 = tape.slice_cols(matched, 1, 2);
        let s2 = tape.constant(Array2::from_shape_fn((p, 1), |(r, _)| {
            S::from_real(targets[r].start())
        }));
        let e2 = tape.constant(Array2::from_shape_fn((p, 1), |(r, _)| {
            S::from_real(targets[r].end())
        }));
        let min_e = tape.min_ew(e1, e2);
        let max_s = tape.max_ew(s1, s2);
        let raw_inter = tape.sub(min_e, max_s);
        let inter = tape.relu(raw_inter);
        let len1 = tape.sub(e1, s1);
        let len2 = tape.constant(Array2::from_shape_fn((p, 1), |(r, _)| {
            S::from_real(targets[r].length())
        }));
        let len_sum = tape.add(len1, len2);
        let union = tape.sub(len_sum, inter);
        let max_e = tape.max_ew(e1, e2);
        let min_s = tape.min_ew(s1, s2);
        let hull = tape.sub(max_e, min_s);
        // Floor denominators at a tiny epsilon so fully degenerate pairs give
        // the defined limit (0) instead of NaN.
        let eps = tape.constant(Array2::from_elem((p, 1), S::from_real(1e-12)));
        let union_floor = tape.max_ew(union, eps);
        let hull_floor = tape.max_ew(hull, eps);
        let iou = tape.div(inter, union_floor);
        let dead = tape.sub(hull, union);
        let penalty = tape.div(dead, hull_floor);
        let giou_col = tape.sub(iou, penalty);
        let ones = tape.constant(Array2::from_elem((p, 1), S::one()));
        let one_minus = tape.sub(ones, giou_col);
        let w_col = tape.constant(Array2::from_shape_fn((p, 1), |(r, _)| {
            S::from_real(row_weights[r])
        }));
        let weighted_giou = tape.mul(one_minus, w_col);
        let giou = tape.sum_all(weighted_giou);
        (l1, giou)
    };

    // Score loss over every composite row.
    let score_targets = Array2::from_shape_fn((mk, 1), |(r, _)| {
        if matching.assigned[r].is_some() {
            S::one()
        } else {
            S::zero()
        }
    });
    let bw = S::from_real(weights.background_weight);
    let score_weights = Array2::from_shape_fn((mk, 1), |(r, _)| {
        if matching.assigned[r].is_some() {
            S::one()
        } else {
            bw
        }
    });
    let bce_sum = tape.bce_with_logits_weighted(score_logits, score_targets, score_weights);
    let score = tape.scale(bce_sum, S::from_real(1.0 / mk as f64));

    let l1_term = tape.scale(l1, S::from_real(weights.lambda_l1));
    let giou_term = tape.scale(giou, S::from_real(weights.lambda_giou));
    let score_term = tape.scale(score, S::from_real(weights.lambda_score));
    let partial = tape.add(l1_term, giou_term);
    let total = tape.add(partial, score_term);

    LossTerms {
        l1,
        giou,
        score,
        total,
    }
}

/// Mean of several `1x1` nodes (used to average per-layer losses).
pub fn mean_of_scalars<S: Scalar>(tape: &mut Tape<S>, terms: &[Var]) -> Var {
    assert!(!terms.is_empty());
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = tape.add(acc, *t);
    }
    tape.scale(acc, S::from_real(1.0 / terms.len() as f64))
}

/// Match and evaluate the losses for plain prediction arrays.
///
/// `spans` holds clamped `[start, end]` rows, `scores` sigmoid outputs in
/// `(0, 1)`; scores are converted back to logits for the numerically stable
/// cross-entropy (clamped away from {0,1} by 1e-7).
pub fn compute_losses<S: Scalar>(
    spans: &Array2<S>,
    scores: &[S],
    ground_truth: &[Vec<Timespan>],
    num_queries: usize,
    weights: &LossWeights,
) -> Result<(LossBreakdown, MatchResult)> {
    let span_pairs: Vec<(f64, f64)> = (0..spans.nrows())
        .map(|r| (spans[[r, 0]].to_real(), spans[[r, 1]].to_real()))
        .collect();
    let score_f64: Vec<f64> = scores.iter().map(|s| s.to_real()).collect();
    let matching = restricted_match(
        &span_pairs,
        &score_f64,
        ground_truth,
        num_queries,
        weights,
    )?;

    let mut tape = Tape::new();
    let span_node = tape.leaf(spans.clone());
    let logit_arr = Array2::from_shape_fn((scores.len(), 1), |(r, _)| {
        let p = scores[r].to_real().clamp(1e-7, 1.0 - 1e-7);
        S::from_real((p / (1.0 - p)).ln())
    });
    let logit_node = tape.leaf(logit_arr);
    let terms = build_losses(
        &mut tape,
        span_node,
        logit_node,
        &matching,
        ground_truth,
        weights,
    );
    let breakdown = LossBreakdown {
        l1: tape.scalar(terms.l1).to_real(),
        giou: tape.scalar(terms.giou).to_real(),
        score: tape.scalar(terms.score).to_real(),
        total: tape.scalar(terms.total).to_real(),
    };
    Ok((breakdown, matching))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn ts(s: f64, e: f64) -> Timespan {
        Timespan::new(s, e).unwrap()
    }

    #[test]
    fn giou_identical_spans_is_one() {
        assert_abs_diff_eq!(giou_1d(&ts(0.2, 0.7), &ts(0.2, 0.7)), 1.0);
    }

    #[test]
    fn giou_disjoint_spans_with_gap() {
        // inter 0, union 0.4, hull 1.0 → 0 - 0.6.
        assert_abs_diff_eq!(giou_1d(&ts(0.0, 0.2), &ts(0.8, 1.0)), -0.6, epsilon = 1e-12);
    }

    #[test]
    fn giou_nested_span() {
        // inter 0.25, union 1.0, hull 1.0 → 0.25.
        assert_abs_diff_eq!(giou_1d(&ts(0.0, 0.25), &ts(0.0, 1.0)), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn giou_touching_spans_is_zero() {
        assert_abs_diff_eq!(giou_1d(&ts(0.0, 0.5), &ts(0.5, 1.0)), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn giou_degenerate_cases() {
        // Same zero-length point: empty union and hull → 0 by definition.
        assert_eq!(giou_1d(&ts(0.3, 0.3), &ts(0.3, 0.3)), 0.0);
        // Distinct zero-length points: hull positive, all of it dead space.
        assert_abs_diff_eq!(giou_1d(&ts(0.2, 0.2), &ts(0.7, 0.7)), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn giou_is_symmetric() {
        let a = ts(0.1, 0.4);
        let b = ts(0.3, 0.9);
        assert_abs_diff_eq!(giou_1d(&a, &b), giou_1d(&b, &a), epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn giou_bounded_and_below_iou(
            s1 in 0.0f64..1.0, l1 in 0.0f64..1.0,
            s2 in 0.0f64..1.0, l2 in 0.0f64..1.0,
        ) {
            let a = ts(s1.min(1.0), (s1 + l1).min(1.0));
            let b = ts(s2.min(1.0), (s2 + l2).min(1.0));
            let g = giou_1d(&a, &b);
            prop_assert!((-1.0..=1.0 + 1e-12).contains(&g));
            prop_assert!(g <= a.iou(&b) + 1e-12);
        }
    }

    #[test]
    fn match_cost_perfect_prediction() {
        // Exact span with full confidence: 10·0 + 1·(1-1) - 4·1 = -4.
        let w = LossWeights::default();
        let gt = ts(0.3, 0.6);
        assert_abs_diff_eq!(match_cost((0.3, 0.6), 1.0, &gt, &w), -4.0, epsilon = 1e-12);
    }

    #[test]
    fn restricted_match_prefers_closest_spans() {
        let w = LossWeights::default();
        // One diagram, two queries, two GT segments.
        let spans = vec![(0.62, 0.85), (0.05, 0.3)];
        let scores = vec![0.9, 0.8];
        let gt = vec![vec![ts(0.0, 0.3), ts(0.6, 0.9)]];
        let result = restricted_match(&spans, &scores, &gt, 2, &w).unwrap();
        assert_eq!(result.assigned, vec![Some(1), Some(0)]);
        assert_eq!(result.gt_counts, vec![2]);
    }

    #[test]
    fn restricted_match_pads_with_background() {
        let w = LossWeights::default();
        // Three queries, one GT segment: exactly one row matched.
        let spans = vec![(0.0, 0.1), (0.4, 0.6), (0.9, 1.0)];
        let scores = vec![0.5, 0.5, 0.5];
        let gt = vec![vec![ts(0.4, 0.6)]];
        let result = restricted_match(&spans, &scores, &gt, 3, &w).unwrap();
        let matched: Vec<_> = result
            .assigned
            .iter()
            .enumerate()
            .filter(|(_, a)| a.is_some())
            .collect();
        assert_eq!(matched.len(), 1);
        assert_eq!(matched[0].0, 1);
    }

    #[test]
    fn restricted_match_never_crosses_diagrams() {
        let w = LossWeights::default();
        // Diagram 0's queries sit exactly on diagram 1's segment, but they
        // must still be matched within diagram 0.
        let spans = vec![(0.7, 0.9), (0.7, 0.9), (0.0, 0.2), (0.0, 0.2)];
        let scores = vec![0.5; 4];
        let gt = vec![vec![ts(0.0, 0.2)], vec![ts(0.7, 0.9)]];
        let result = restricted_match(&spans, &scores, &gt, 2, &w).unwrap();
        let d0: Vec<_> = result.assigned[..2].iter().filter(|a| a.is_some()).collect();
        let d1: Vec<_> = result.assigned[2..].iter().filter(|a| a.is_some()).collect();
        assert_eq!(d0.len(), 1);
        assert_eq!(d1.len(), 1);
    }

    #[test]
    fn too_many_segments_is_an_error() {
        let w = LossWeights::default();
        let spans = vec![(0.0, 0.1), (0.2, 0.3)];
        let scores = vec![0.5, 0.5];
        let gt = vec![vec![ts(0.0, 0.1), ts(0.2, 0.3), ts(0.5, 0.6)]];
        let err = restricted_match(&spans, &scores, &gt, 2, &w).unwrap_err();
        assert!(err.to_string().contains("3 ground-truth segments"), "{err}");
    }

    #[test]
    fn matching_is_globally_optimal_within_a_diagram() {
        // Compare against brute force over all row→column bijections of the
        // padded cost matrix.
        let w = LossWeights::default();
        for seed in 0..50u64 {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let k = 3;
            let c = rng.random_range(1..=k);
            let spans: Vec<(f64, f64)> = (0..k)
                .map(|_| {
                    let s: f64 = rng.random_range(0.0..0.8);
                    (s, s + rng.random_range(0.0..(1.0 - s)))
                })
                .collect();
            let scores: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..0.99)).collect();
            let gt: Vec<Timespan> = (0..c)
                .map(|_| {
                    let s: f64 = rng.random_range(0.0..0.8);
                    ts(s, s + rng.random_range(0.01..(1.0 - s)))
                })
                .collect();

            let result =
                restricted_match(&spans, &scores, &[gt.clone()], k, &w).unwrap();
            let total: f64 = result
                .assigned
                .iter()
                .enumerate()
                .filter_map(|(r, a)| {
                    a.map(|col| match_cost(spans[r], scores[r], &gt[col], &w))
                })
                .sum();

            // Brute force over permutations of padded columns.
            let mut cols: Vec<usize> = (0..k).collect();
            let mut best = f64::INFINITY;
            permute_cost(&mut cols, 0, &spans, &scores, &gt, &w, &mut best);
            assert_abs_diff_eq!(total, best, epsilon = 1e-9);
        }
    }

    fn permute_cost(
        cols: &mut Vec<usize>,
        i: usize,
        spans: &[(f64, f64)],
        scores: &[f64],
        gt: &[Timespan],
        w: &LossWeights,
        best: &mut f64,
    ) {
        if i == cols.len() {
            let total: f64 = cols
                .iter()
                .enumerate()
                .filter(|(_, &c)| c < gt.len())
                .map(|(r, &c)| match_cost(spans[r], scores[r], &gt[c], w))
                .sum();
            if total < *best {
                *best = total;
            }
            return;
        }
        for j in i..cols.len() {
            cols.swap(i, j);
            permute_cost(cols, i + 1, spans, scores, gt, w, best);
            cols.swap(i, j);
        }
    }

    #[test]
    fn span_losses_hit_reference_values() {
        // Single diagram, single query, prediction [0,0.2] vs GT [0.8,1.0]:
        // L1 = 0.8 + 0.8 = 1.6, gIoU loss = 1 - (-0.6) = 1.6.
        let w = LossWeights::default();
        let spans = ndarray::arr2(&[[0.0f64, 0.2]]);
        let scores = vec![0.5f64];
        let gt = vec![vec![ts(0.8, 1.0)]];
        let (loss, matching) = compute_losses(&spans, &scores, &gt, 1, &w).unwrap();
        assert_eq!(matching.assigned, vec![Some(0)]);
        assert_abs_diff_eq!(loss.l1, 1.6, epsilon = 1e-9);
        assert_abs_diff_eq!(loss.giou, 1.6, epsilon = 1e-9);
        assert_abs_diff_eq!(
            loss.total,
            w.lambda_l1 * 1.6 + w.lambda_giou * 1.6 + w.lambda_score * loss.score,
            epsilon = 1e-9
        );
    }

    #[test]
    fn score_loss_weights_background_rows() {
        // K=2, one GT: matched row logit 0 → ln 2 with weight 1; background
        // row logit 0 → ln 2 with weight 0.25; mean over 2 rows.
        let w = LossWeights::default();
        let spans = ndarray::arr2(&[[0.4f64, 0.6], [0.0, 0.05]]);
        let scores = vec![0.5f64, 0.5];
        let gt = vec![vec![ts(0.4, 0.6)]];
        let (loss, matching) = compute_losses(&spans, &scores, &gt, 2, &w).unwrap();
        assert_eq!(matching.assigned[0], Some(0));
        assert_eq!(matching.assigned[1], None);
        let ln2 = std::f64::consts::LN_2;
        assert_abs_diff_eq!(loss.score, (ln2 + 0.25 * ln2) / 2.0, epsilon = 1e-6);
    }

    #[test]
    fn empty_diagrams_are_excluded_from_span_losses() {
        // Diagram 1 has no GT: weights use M_pos = 1 and C_0 = 2.
        let w = LossWeights::default();
        let spans = ndarray::arr2(&[[0.0f64, 0.2], [0.5, 0.7], [0.0, 1.0], [0.0, 1.0]]);
        let scores = vec![0.5f64; 4];
        let gt = vec![vec![ts(0.0, 0.2), ts(0.5, 0.7)], vec![]];
        let (loss, matching) = compute_losses(&spans, &scores, &gt, 2, &w).unwrap();
        assert_eq!(matching.positive_diagrams(), 1);
        // Both diagram-0 queries match exactly: L1 = 0, gIoU loss = 0.
        assert_abs_diff_eq!(loss.l1, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(loss.giou, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn repeated_segment_weights_average_within_diagram() {
        // One diagram with two GT segments, predictions off by 0.1 on one
        // endpoint each: each matched pair contributes 0.1 with weight 1/2.
        let w = LossWeights::default();
        let spans = ndarray::arr2(&[[0.0f64, 0.3], [0.5, 0.9]]);
        let scores = vec![0.5f64, 0.5];
        let gt = vec![vec![ts(0.1, 0.3), ts(0.5, 0.8)]];
        let (loss, _) = compute_losses(&spans, &scores, &gt, 2, &w).unwrap();
        assert_abs_diff_eq!(loss.l1, 0.5 * 0.1 + 0.5 * 0.1, epsilon = 1e-9);
    }

    #[test]
    fn no_ground_truth_anywhere_gives_zero_span_loss() {
        let w = LossWeights::default();
        let spans = ndarray::arr2(&[[0.0f64, 0.2], [0.5, 0.7]]);
        let scores = vec![0.7f64, 0.2];
        let gt = vec![vec![], vec![]];
        let (loss, matching) = compute_losses(&spans, &scores, &gt, 1, &w).unwrap();
        assert!(matching.assigned.iter().all(|a| a.is_none()));
        assert_eq!(loss.l1, 0.0);
        assert_eq!(loss.giou, 0.0);
        assert!(loss.score > 0.0);
    }

    #[test]
    fn losses_are_differentiable_through_the_tape() {
        let w = LossWeights::default();
        let gt = vec![vec![ts(0.3, 0.6)]];
        let spans0 = ndarray::arr2(&[[0.2f64, 0.5]]);
        let matching = restricted_match(&[(0.2, 0.5)], &[0.6], &gt, 1, &w).unwrap();

        let mut tape = Tape::new();
        let spans = tape.leaf(spans0);
        let logits = tape.leaf(ndarray::arr2(&[[0.4f64]]));
        let terms = build_losses(&mut tape, spans, logits, &matching, &gt, &w);
        let grads = tape.backward(terms.total);
        let gs = grads.get(spans).unwrap();
        let gl = grads.get(logits).unwrap();
        assert!(gs.iter().any(|g| g.abs() > 1e-9));
        assert!(gl.iter().all(|g| g.is_finite()));
        // Moving the start toward GT (increasing it) should reduce the loss.
        assert!(gs[[0, 0]] < 0.0);
    }
}
