//! Planted-alignment synthetic datasets with an analytic grounding oracle.
//!
//! Each sample plants an ordered sequence of step segments on a clip grid:
//! every diagram gets a unit-norm prototype vector, clips inside a step's
//! segment carry that prototype (plus Gaussian noise), background clips
//! carry pure noise, and the planted segments are recorded as ground truth.
//! Irregularities mimic real instruction videos: steps can be missing,
//! repeated (a second disjoint segment), or overlapping their neighbor
//! (clips in the overlap carry the normalized sum of both prototypes).
//! Because boundaries snap to the clip grid, a cosine-similarity oracle
//! recovers the planted spans exactly in the noise-free case.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{DiagramSequence, GroundingSample, Timespan, VideoFeatures};

/// Cosine-similarity floor below which the oracle labels a clip background.
pub const ORACLE_THRESHOLD: f64 = 0.5;

/// Dataset shape and irregularity knobs. Ranges are inclusive `[min, max]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_samples: usize,
    pub clip_count: [usize; 2],
    pub diagram_count: [usize; 2],
    pub feature_dim: usize,
    /// Standard deviation of the Gaussian feature noise.
    pub noise_sigma: f64,
    /// Probability that a step has no segment at all.
    pub prob_missing_step: f64,
    /// Probability that a present step gets a second, disjoint segment.
    pub prob_repeated_step: f64,
    /// Probability that a segment overlaps its successor (different step).
    pub prob_overlap: f64,
    /// Fraction of the timeline reserved for background clips.
    pub background_frac: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_samples: 100,
            clip_count: [32, 64],
            diagram_count: [2, 5],
            feature_dim: 32,
            noise_sigma: 0.1,
            prob_missing_step: 0.1,
            prob_repeated_step: 0.1,
            prob_overlap: 0.2,
            background_frac: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::Config("num_samples must be positive".into()));
        }
        for (name, [lo, hi]) in [
            ("clip_count", self.clip_count),
            ("diagram_count", self.diagram_count),
        ] {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!(
                    "{name} range [{lo}, {hi}] must satisfy 1 ≤ min ≤ max"
                )));
            }
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be ≥ 0".into()));
        }
        for (name, p) in [
            ("prob_missing_step", self.prob_missing_step),
            ("prob_repeated_step", self.prob_repeated_step),
            ("prob_overlap", self.prob_overlap),
        ] {
            if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !(0.0..1.0).contains(&self.background_frac) {
            return Err(Error::Config(format!(
                "background_frac must be in [0, 1), got {}",
                self.background_frac
            )));
        }
        Ok(())
    }
}

/// One generated sample plus generation-time facts that the plain sample
/// does not carry.
#[derive(Debug, Clone)]
pub struct SynthSample<S: Scalar> {
    pub sample: GroundingSample<S>,
    /// Diagram index pairs whose planted segments overlap in time.
    pub overlap_pairs: Vec<(usize, usize)>,
}

/// One planted segment on the clip grid: diagram label and clip range
/// `[start, end)`.
struct PlantedSegment {
    diagram: usize,
    start: usize,
    end: usize,
}

fn bernoulli(rng: &mut ChaCha8Rng, p: f64) -> bool {
    p >= 1.0 || (p > 0.0 && rng.random::<f64>() < p)
}

/// Split `total` into `parts` positive integers, uniformly at random.
fn random_composition(rng: &mut ChaCha8Rng, total: usize, parts: usize) -> Vec<usize> {
    assert!(parts >= 1 && total >= parts);
    let mut cuts: Vec<usize> = Vec::with_capacity(parts - 1);
    // Sample distinct cut points from 1..total.
    let mut available: Vec<usize> = (1..total).collect();
    for _ in 0..parts - 1 {
        let pick = rng.random_range(0..available.len());
        cuts.push(available.swap_remove(pick));
    }
    cuts.sort_unstable();
    let mut lengths = Vec::with_capacity(parts);
    let mut prev = 0;
    for &c in &cuts {
        lengths.push(c - prev);
        prev = c;
    }
    lengths.push(total - prev);
    lengths
}

fn generate_one<S: Scalar>(config: &SynthConfig, index: usize) -> Result<SynthSample<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(index as u64));
    let n = rng.random_range(config.clip_count[0]..=config.clip_count[1]);
    let m = rng.random_range(config.diagram_count[0]..=config.diagram_count[1]);
    let dim = config.feature_dim;

    // Unit-norm prototypes, one per diagram.
    let mut prototypes = Array2::<f64>::zeros((m, dim));
    for i in 0..m {
        loop {
            let row: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for (c, v) in row.iter().enumerate() {
                    prototypes[[i, c]] = v / norm;
                }
                break;
            }
        }
    }

    // Segment label sequence: ordered steps, some missing, some repeated.
    let present: Vec<usize> = (0..m)
        .filter(|_| !bernoulli(&mut rng, config.prob_missing_step))
        .collect();
    let mut labels: Vec<usize> = present.clone();
    for &step in &present {
        if bernoulli(&mut rng, config.prob_repeated_step) {
            // Insert the repeat strictly after the first occurrence.
            let first = labels.iter().position(|&l| l == step).expect("present");
            let at = rng.random_range(first + 1..=labels.len());
            labels.insert(at, step);
        }
    }

    // Clip budget: background floor plus at least one clip per segment.
    let background = (config.background_frac * n as f64).ceil() as usize;
    let active = n.saturating_sub(background);
    if labels.len() > active {
        return Err(Error::Generation(format!(
            "sample {index}: {} segments do not fit into {active} non-background clips \
             (video has {n} clips, background floor {background})",
            labels.len()
        )));
    }

    let mut segments: Vec<PlantedSegment> = Vec::with_capacity(labels.len());
    let mut overlap_pairs = Vec::new();
    if !labels.is_empty() {
        let lengths = random_composition(&mut rng, active, labels.len());

        // Overlap flags between consecutive segments of different steps.
        // Consecutive overlaps are not chained so a clip carries at most
        // two active steps.
        let mut overlap_amounts = vec![0usize; labels.len()];
        for k in 1..labels.len() {
            let can_overlap = labels[k - 1] != labels[k]
                && overlap_amounts[k - 1] == 0
                && lengths[k - 1] > 1
                && lengths[k] > 1;
            if can_overlap && bernoulli(&mut rng, config.prob_overlap) {
                let cap = lengths[k - 1].min(lengths[k]) - 1;
                overlap_amounts[k] = rng.random_range(1..=cap);
            }
        }

        // Background clips go into the gap slots around segments; a gap
        // inside an overlapping pair stays empty by construction.
        let freed: usize = overlap_amounts.iter().sum();
        let gap_total = background + freed;
        let mut gaps = vec![0usize; labels.len() + 1];
        let open_slots: Vec<usize> = (0..labels.len() + 1)
            .filter(|&g| g == 0 || g == labels.len() || overlap_amounts[g] == 0)
            .collect();
        for _ in 0..gap_total {
            gaps[open_slots[rng.random_range(0..open_slots.len())]] += 1;
        }

        let mut cursor = gaps[0];
        for k in 0..labels.len() {
            if overlap_amounts[k] > 0 {
                cursor -= overlap_amounts[k];
            }
            segments.push(PlantedSegment {
                diagram: labels[k],
                start: cursor,
                end: cursor + lengths[k],
            });
            if overlap_amounts[k] > 0 {
                let pair = (labels[k - 1], labels[k]);
                overlap_pairs.push((pair.0.min(pair.1), pair.0.max(pair.1)));
            }
            cursor += lengths[k] + gaps[k + 1];
        }
        debug_assert_eq!(cursor, n, "layout must cover the clip grid exactly");
    }

    // Ground truth: clip ranges on the grid, merged per diagram when a
    // repeat landed directly adjacent to (or overlapping) its sibling.
    let mut gt_ranges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); m];
    for seg in &segments {
        gt_ranges[seg.diagram].push((seg.start, seg.end));
    }
    let mut ground_truth: Vec<Vec<Timespan>> = Vec::with_capacity(m);
    for ranges in &mut gt_ranges {
        ranges.sort_unstable();
        let mut merged: Vec<(usize, usize)> = Vec::with_capacity(ranges.len());
        for &(s, e) in ranges.iter() {
            match merged.last_mut() {
                Some(last) if s <= last.1 => last.1 = last.1.max(e),
                _ => merged.push((s, e)),
            }
        }
        ground_truth.push(
            merged
                .iter()
                .map(|&(s, e)| {
                    Timespan::new(s as f64 / n as f64, e as f64 / n as f64)
                        .expect("grid spans are valid")
                })
                .collect(),
        );
    }

    // Per-clip active steps (at most two, in segment order).
    let mut active_steps: Vec<Vec<usize>> = vec![Vec::new(); n];
    for seg in &segments {
        for clip in seg.start..seg.end {
            active_steps[clip].push(seg.diagram);
        }
    }

    let sigma = config.noise_sigma;
    let noise = |rng: &mut ChaCha8Rng| -> f64 {
        if sigma == 0.0 {
            0.0
        } else {
            sigma * rng.sample::<f64, _>(StandardNormal)
        }
    };

    let mut clips = Array2::<f64>::zeros((n, dim));
    for clip in 0..n {
        let base: Array1<f64> = match active_steps[clip].as_slice() {
            [] => Array1::zeros(dim),
            [step] => prototypes.row(*step).to_owned(),
            steps => {
                let mut sum = Array1::<f64>::zeros(dim);
                for &s in steps {
                    sum = sum + prototypes.row(s);
                }
                let norm = sum.dot(&sum).sqrt().max(1e-12);
                sum / norm
            }
        };
        for c in 0..dim {
            clips[[clip, c]] = base[c] + noise(&mut rng);
        }
    }

    let mut diagrams = Array2::<f64>::zeros((m, dim));
    for i in 0..m {
        for c in 0..dim {
            diagrams[[i, c]] = prototypes[[i, c]] + noise(&mut rng);
        }
    }

    let to_s = |a: &Array2<f64>| a.mapv(S::from_real);
    let sample = GroundingSample::new(
        format!("synth-{index:05}"),
        VideoFeatures::new(to_s(&clips), n as f64)?,
        DiagramSequence::new(to_s(&diagrams))?,
        ground_truth,
    )?;
    Ok(SynthSample {
        sample,
        overlap_pairs,
    })
}

/// Generate the whole dataset. Samples are independently seeded as
/// `seed + index`, so generation parallelizes without changing results.
pub fn generate_dataset<S: Scalar>(config: &SynthConfig) -> Result<Vec<SynthSample<S>>> {
    config.validate()?;
    (0..config.num_samples)
        .into_par_iter()
        .map(|index| generate_one(config, index))
        .collect()
}

/// [`generate_dataset`] stripped to the plain samples.
pub fn generate_samples<S: Scalar>(config: &SynthConfig) -> Result<Vec<GroundingSample<S>>> {
    Ok(generate_dataset(config)?
        .into_iter()
        .map(|s| s.sample)
        .collect())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Analytic grounding: label each clip with its argmax-cosine diagram
/// (background when every similarity is below [`ORACLE_THRESHOLD`]) and
/// merge maximal label runs into spans. On noise-free samples this returns
/// exactly the planted spans.
pub fn oracle_ground<S: Scalar>(sample: &GroundingSample<S>) -> Vec<Vec<Timespan>> {
    let n = sample.video.clip_count();
    let m = sample.diagrams.diagram_count();
    let clip_rows: Vec<Vec<f64>> = (0..n)
        .map(|r| sample.video.clips.row(r).iter().map(|v| v.to_real()).collect())
        .collect();
    let diagram_rows: Vec<Vec<f64>> = (0..m)
        .map(|r| {
            sample
                .diagrams
                .diagrams
                .row(r)
                .iter()
                .map(|v| v.to_real())
                .collect()
        })
        .collect();

    let labels: Vec<Option<usize>> = clip_rows
        .iter()
        .map(|clip| {
            let (mut best, mut best_sim) = (0usize, f64::NEG_INFINITY);
            for (i, d) in diagram_rows.iter().enumerate() {
                let sim = cosine(clip, d);
                if sim > best_sim {
                    best = i;
                    best_sim = sim;
                }
            }
            (best_sim >= ORACLE_THRESHOLD).then_some(best)
        })
        .collect();

    let mut spans: Vec<Vec<Timespan>> = vec![Vec::new(); m];
    let mut clip = 0;
    while clip < n {
        match labels[clip] {
            None => clip += 1,
            Some(diagram) => {
                let start = clip;
                while clip < n && labels[clip] == Some(diagram) {
                    clip += 1;
                }
                spans[diagram].push(
                    Timespan::new(start as f64 / n as f64, clip as f64 / n as f64)
                        .expect("grid spans are valid"),
                );
            }
        }
    }
    spans
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn clean_config() -> SynthConfig {
        SynthConfig {
            num_samples: 10,
            clip_count: [20, 30],
            diagram_count: [2, 4],
            feature_dim: 16,
            noise_sigma: 0.0,
            prob_missing_step: 0.0,
            prob_repeated_step: 0.0,
            prob_overlap: 0.0,
            background_frac: 0.1,
            seed: 42,
        }
    }

    #[test]
    fn zero_noise_clips_equal_their_prototype() {
        let dataset = generate_dataset::<f64>(&clean_config()).unwrap();
        for item in &dataset {
            let s = &item.sample;
            let n = s.video.clip_count();
            for (diagram, spans) in s.ground_truth.iter().enumerate() {
                for span in spans {
                    let start = (span.start() * n as f64).round() as usize;
                    let end = (span.end() * n as f64).round() as usize;
                    for clip in start..end {
                        for c in 0..s.video.feature_dim() {
                            assert_eq!(
                                s.video.clips[[clip, c]],
                                s.diagrams.diagrams[[diagram, c]],
                                "sample {} clip {clip} diagram {diagram}",
                                s.id
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_dataset::<f64>(&SynthConfig::default()).unwrap();
        let b = generate_dataset::<f64>(&SynthConfig::default()).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.sample.id, y.sample.id);
            assert_eq!(x.sample.video.clips, y.sample.video.clips);
            assert_eq!(x.sample.diagrams.diagrams, y.sample.diagrams.diagrams);
            assert_eq!(x.sample.ground_truth, y.sample.ground_truth);
            assert_eq!(x.overlap_pairs, y.overlap_pairs);
        }
        let mut other = SynthConfig::default();
        other.seed = 1;
        let c = generate_dataset::<f64>(&other).unwrap();
        assert_ne!(a[0].sample.video.clips, c[0].sample.video.clips);
    }

    #[test]
    fn all_steps_missing_leaves_empty_ground_truth() {
        let mut config = clean_config();
        config.prob_missing_step = 1.0;
        let dataset = generate_dataset::<f64>(&config).unwrap();
        for item in &dataset {
            assert!(item.sample.ground_truth.iter().all(|g| g.is_empty()));
            // Noise-free background clips are zero vectors, so the oracle
            // sees nothing either.
            let recovered = oracle_ground(&item.sample);
            assert!(recovered.iter().all(|g| g.is_empty()));
        }
    }

    #[test]
    fn infeasible_config_is_a_generation_error() {
        let mut config = clean_config();
        config.clip_count = [3, 3];
        config.diagram_count = [4, 4];
        let err = generate_dataset::<f64>(&config).unwrap_err();
        assert!(matches!(err, Error::Generation(_)), "{err}");
        assert!(err.to_string().contains("segments"), "{err}");
    }

    #[test]
    fn oracle_recovers_planted_spans_exactly_at_zero_noise() {
        let mut config = clean_config();
        config.num_samples = 25;
        config.prob_missing_step = 0.2;
        config.prob_repeated_step = 0.3;
        let dataset = generate_dataset::<f64>(&config).unwrap();
        for item in &dataset {
            let recovered = oracle_ground(&item.sample);
            assert_eq!(recovered.len(), item.sample.ground_truth.len());
            for (found, planted) in recovered.iter().zip(&item.sample.ground_truth) {
                assert_eq!(found.len(), planted.len(), "sample {}", item.sample.id);
                for (f, p) in found.iter().zip(planted) {
                    assert_abs_diff_eq!(f.start(), p.start(), epsilon = 1e-12);
                    assert_abs_diff_eq!(f.end(), p.end(), epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn per_diagram_spans_are_disjoint_and_overlaps_are_recorded() {
        let mut config = clean_config();
        config.num_samples = 50;
        config.prob_repeated_step = 0.5;
        config.prob_overlap = 0.7;
        config.noise_sigma = 0.05;
        let dataset = generate_dataset::<f64>(&config).unwrap();
        let mut saw_overlap = false;
        for item in &dataset {
            for spans in &item.sample.ground_truth {
                for w in spans.windows(2) {
                    assert!(
                        w[0].end() <= w[1].start() + 1e-12,
                        "per-diagram spans must be disjoint: {w:?}"
                    );
                }
            }
            // Cross-diagram overlap only where recorded.
            let gt = &item.sample.ground_truth;
            for i in 0..gt.len() {
                for j in (i + 1)..gt.len() {
                    let overlap: f64 = gt[i]
                        .iter()
                        .flat_map(|a| gt[j].iter().map(move |b| a.intersection_len(b)))
                        .sum();
                    let recorded = item.overlap_pairs.contains(&(i, j));
                    if overlap > 1e-12 {
                        saw_overlap = true;
                        assert!(recorded, "unrecorded overlap between {i} and {j}");
                    }
                }
            }
        }
        assert!(saw_overlap, "config should produce at least one overlap");
    }

    #[test]
    fn noisy_oracle_stays_within_one_clip_of_planted_boundaries() {
        // Background clips are pure noise, so their cosine against any
        // diagram is a random direction's projection: at 64 dimensions the
        // 0.5 threshold sits ~4 standard deviations out and false positives
        // are vanishingly rare.
        let config = SynthConfig {
            num_samples: 100,
            clip_count: [200, 200],
            diagram_count: [4, 4],
            feature_dim: 64,
            noise_sigma: 0.05,
            prob_missing_step: 0.0,
            prob_repeated_step: 0.0,
            prob_overlap: 0.0,
            background_frac: 0.1,
            seed: 7,
        };
        let dataset = generate_dataset::<f64>(&config).unwrap();
        let tolerance = 1.0 / 200.0 + 1e-12;
        let mut good = 0;
        for item in &dataset {
            let recovered = oracle_ground(&item.sample);
            let ok = item
                .sample
                .ground_truth
                .iter()
                .zip(&recovered)
                .all(|(planted, found)| {
                    planted.len() == found.len()
                        && planted.iter().zip(found).all(|(p, f)| {
                            (p.start() - f.start()).abs() <= tolerance
                                && (p.end() - f.end()).abs() <= tolerance
                        })
                });
            if ok {
                good += 1;
            }
        }
        assert!(good >= 95, "only {good}/100 samples recovered cleanly");
    }

    #[test]
    fn dataset_round_trips_through_manifest_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = clean_config();
        config.num_samples = 3;
        config.noise_sigma = 0.1;
        let samples = generate_samples::<f64>(&config).unwrap();
        let manifest_path = crate::io::manifest::save_dataset(dir.path(), &samples).unwrap();
        let loaded = crate::io::manifest::load_samples::<f64>(&manifest_path).unwrap();
        assert_eq!(loaded.len(), samples.len());
        for (a, b) in samples.iter().zip(&loaded) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.video.clips, b.video.clips);
            assert_eq!(a.diagrams.diagrams, b.diagrams.diagrams);
            assert_eq!(a.ground_truth, b.ground_truth);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut config = SynthConfig::default();
        config.prob_overlap = 1.5;
        assert!(config.validate().is_err());
        let mut config = SynthConfig::default();
        config.clip_count = [10, 5];
        assert!(config.validate().is_err());
        let mut config = SynthConfig::default();
        config.background_frac = 1.0;
        assert!(config.validate().is_err());
        let mut config = SynthConfig::default();
        config.noise_sigma = -0.1;
        assert!(config.validate().is_err());
    }
}
