//! Contrastive alignment of clip and diagram features in a shared space.
//!
//! Two two-layer perceptrons project raw clip and diagram features (each
//! concatenated with a sinusoidal progress-rate row) into the model's hidden
//! space. They can be pretrained with a symmetric InfoNCE objective whose
//! positives are (clip, diagram) pairs where the clip's center falls inside
//! one of the diagram's ground-truth spans; background clips never form
//! pairs. Logits are cosine similarities divided by a learnable temperature.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::checkpoint;
use crate::model::GroundingModel;
use crate::optim::{AdamW, UpdateEntry};
use crate::pe::normalized_pe;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};
use crate::types::GroundingSample;

/// `relu(x·W1 + b1)·W2 + b2` with biases stored as single rows.
#[derive(Debug, Clone)]
pub struct TwoLayerMlp<S: Scalar> {
    pub w1: Array2<S>,
    pub b1: Array2<S>,
    pub w2: Array2<S>,
    pub b2: Array2<S>,
}

impl<S: Scalar> TwoLayerMlp<S> {
    /// Xavier-uniform weights, zero biases.
    pub fn new<R: Rng>(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut R) -> Self {
        let mut xavier = |rows: usize, cols: usize| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| S::from_real(rng.random_range(-a..a)))
        };
        let w1 = xavier(in_dim, hidden);
        let w2 = xavier(hidden, out_dim);
        Self {
            w1,
            b1: Array2::zeros((1, hidden)),
            w2,
            b2: Array2::zeros((1, out_dim)),
        }
    }

    /// An MLP that computes the identity map: the hidden layer splits the
    /// input into positive and negative parts (`relu(x)`, `relu(-x)`) and
    /// the output layer recombines them as `relu(x) - relu(-x) = x`.
    pub fn identity(dim: usize) -> Self {
        let mut w1 = Array2::zeros((dim, 2 * dim));
        let mut w2 = Array2::zeros((2 * dim, dim));
        for i in 0..dim {
            w1[[i, i]] = S::one();
            w1[[i, dim + i]] = -S::one();
            w2[[i, i]] = S::one();
            w2[[dim + i, i]] = -S::one();
        }
        Self {
            w1,
            b1: Array2::zeros((1, 2 * dim)),
            w2,
            b2: Array2::zeros((1, dim)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w2.ncols()
    }

    /// Plain (non-recorded) forward pass.
    pub fn forward(&self, x: &Array2<S>) -> Result<Array2<S>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "input width {} does not match projection input width {}",
                x.ncols(),
                self.in_dim()
            )));
        }
        let h = (x.dot(&self.w1) + &self.b1).mapv(|v| v.max(S::zero()));
        Ok(h.dot(&self.w2) + &self.b2)
    }

    /// Forward pass over tape nodes (for training).
    fn forward_tape(&self, tape: &mut Tape<S>, x: Var, params: &MlpVars) -> Var {
        let h = tape.matmul(x, params.w1);
        let h = tape.add_broadcast_row(h, params.b1);
        let h = tape.relu(h);
        let out = tape.matmul(h, params.w2);
        tape.add_broadcast_row(out, params.b2)
    }
}

struct MlpVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

fn bind_mlp<S: Scalar>(tape: &mut Tape<S>, mlp: &TwoLayerMlp<S>) -> MlpVars {
    MlpVars {
        w1: tape.leaf(mlp.w1.clone()),
        b1: tape.leaf(mlp.b1.clone()),
        w2: tape.leaf(mlp.w2.clone()),
        b2: tape.leaf(mlp.b2.clone()),
    }
}

/// The pair of input projections shared between alignment pretraining and
/// the grounding model, plus the learnable contrastive temperature.
#[derive(Debug, Clone)]
pub struct ProjectionPair<S: Scalar> {
    pub video: TwoLayerMlp<S>,
    pub diagram: TwoLayerMlp<S>,
    sprf_dim: usize,
    /// `1x1`; temperature = exp of this entry.
    pub log_temperature: Array2<S>,
}

/// Widths stored alongside checkpointed projections.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProjectionDims {
    video_dim: usize,
    diagram_dim: usize,
    sprf_dim: usize,
    hidden: usize,
    out_dim: usize,
}

impl<S: Scalar> ProjectionPair<S> {
    pub fn new(
        video_dim: usize,
        diagram_dim: usize,
        sprf_dim: usize,
        hidden: usize,
        out_dim: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Self> {
        if video_dim == 0 || diagram_dim == 0 || hidden == 0 || out_dim == 0 {
            return Err(Error::Config(
                "projection widths must be positive".into(),
            ));
        }
        if sprf_dim % 2 != 0 {
            return Err(Error::Config("sprf_dim must be even (or 0)".into()));
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive and finite, got {temperature}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let video = TwoLayerMlp::new(video_dim + sprf_dim, hidden, out_dim, &mut rng);
        let diagram = TwoLayerMlp::new(diagram_dim + sprf_dim, hidden, out_dim, &mut rng);
        Ok(Self {
            video,
            diagram,
            sprf_dim,
            log_temperature: Array2::from_elem((1, 1), S::from_real(temperature.ln())),
        })
    }

    /// Identity projections (no progress-rate inputs, both widths equal to
    /// the output width). Useful as a neutral starting point and in tests.
    pub fn identity(dim: usize, temperature: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("dim must be positive".into()));
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive and finite, got {temperature}"
            )));
        }
        Ok(Self {
            video: TwoLayerMlp::identity(dim),
            diagram: TwoLayerMlp::identity(dim),
            sprf_dim: 0,
            log_temperature: Array2::from_elem((1, 1), S::from_real(temperature.ln())),
        })
    }

    pub fn sprf_dim(&self) -> usize {
        self.sprf_dim
    }

    pub fn out_dim(&self) -> usize {
        self.video.out_dim()
    }

    /// Raw clip-feature width expected by [`project_video`](Self::project_video).
    pub fn video_dim(&self) -> usize {
        self.video.in_dim() - self.sprf_dim
    }

    /// Raw diagram-feature width expected by
    /// [`project_diagrams`](Self::project_diagrams).
    pub fn diagram_dim(&self) -> usize {
        self.diagram.in_dim() - self.sprf_dim
    }

    pub fn temperature(&self) -> f64 {
        self.log_temperature[[0, 0]].to_real().exp()
    }

    /// Append progress-rate rows (when enabled) and project clip features.
    pub fn project_video(&self, clips: &Array2<S>) -> Result<Array2<S>> {
        self.video.forward(&with_sprf(clips, self.sprf_dim)?)
    }

    /// Append progress-rate rows (when enabled) and project diagram features.
    pub fn project_diagrams(&self, diagrams: &Array2<S>) -> Result<Array2<S>> {
        self.diagram.forward(&with_sprf(diagrams, self.sprf_dim)?)
    }

    /// Copy these projections into a grounding model's input projections.
    /// Shapes must match the model's dims exactly.
    pub fn apply_to_model(&self, model: &mut GroundingModel<S>) -> Result<()> {
        if model.dims().sprf_dim != self.sprf_dim {
            return Err(Error::Config(format!(
                "model sprf_dim {} does not match projections' {}",
                model.dims().sprf_dim,
                self.sprf_dim
            )));
        }
        for (name, value) in self.named_params() {
            if name == "log_temperature" {
                continue;
            }
            model.set_param(&format!("proj.{name}"), value)?;
        }
        Ok(())
    }

    fn named_params(&self) -> Vec<(String, Array2<S>)> {
        vec![
            ("video.w1".into(), self.video.w1.clone()),
            ("video.b1".into(), self.video.b1.clone()),
            ("video.w2".into(), self.video.w2.clone()),
            ("video.b2".into(), self.video.b2.clone()),
            ("diagram.w1".into(), self.diagram.w1.clone()),
            ("diagram.b1".into(), self.diagram.b1.clone()),
            ("diagram.w2".into(), self.diagram.w2.clone()),
            ("diagram.b2".into(), self.diagram.b2.clone()),
            ("log_temperature".into(), self.log_temperature.clone()),
        ]
    }

    /// Persist the projections as a checkpoint directory.
    pub fn save(&self, dir: &Path, extra: &serde_json::Value) -> Result<()> {
        let dims = ProjectionDims {
            video_dim: self.video_dim(),
            diagram_dim: self.diagram_dim(),
            sprf_dim: self.sprf_dim,
            hidden: self.video.hidden_dim(),
            out_dim: self.out_dim(),
        };
        let metadata = serde_json::json!({
            "kind": "projection_pair",
            "dims": dims,
            "extra": extra,
        });
        checkpoint::save_params(dir, &self.named_params(), &metadata)
    }

    /// Load a checkpoint written by [`save`](Self::save).
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let (entries, metadata) = checkpoint::load_params::<S>(dir)?;
        let kind = metadata.get("kind").and_then(|v| v.as_str());
        if kind != Some("projection_pair") {
            return Err(Error::format(
                &dir.join("checkpoint.json"),
                format!("not a projection checkpoint (kind = {kind:?})"),
            ));
        }
        let dims: ProjectionDims = serde_json::from_value(
            metadata
                .get("dims")
                .cloned()
                .ok_or_else(|| Error::Config("checkpoint missing projection dims".into()))?,
        )
        .map_err(|e| Error::Config(format!("bad projection dims in checkpoint: {e}")))?;
        let mut pair = Self::new(
            dims.video_dim,
            dims.diagram_dim,
            dims.sprf_dim,
            dims.hidden,
            dims.out_dim,
            0.07,
            0,
        )?;
        for (name, value) in entries {
            let slot: &mut Array2<S> = match name.as_str() {
                "video.w1" => &mut pair.video.w1,
                "video.b1" => &mut pair.video.b1,
                "video.w2" => &mut pair.video.w2,
                "video.b2" => &mut pair.video.b2,
                "diagram.w1" => &mut pair.diagram.w1,
                "diagram.b1" => &mut pair.diagram.b1,
                "diagram.w2" => &mut pair.diagram.w2,
                "diagram.b2" => &mut pair.diagram.b2,
                "log_temperature" => &mut pair.log_temperature,
                other => {
                    return Err(Error::format(
                        &dir.join("checkpoint.json"),
                        format!("unexpected projection parameter {other}"),
                    ))
                }
            };
            if slot.dim() != value.dim() {
                return Err(Error::Shape(format!(
                    "parameter {name}: expected shape {:?}, got {:?}",
                    slot.dim(),
                    value.dim()
                )));
            }
            *slot = value;
        }
        let extra = metadata
            .get("extra")
            .cloned()
            .unwrap_or(serde_json::Value::Null);
        Ok((pair, extra))
    }
}

fn with_sprf<S: Scalar>(features: &Array2<S>, sprf_dim: usize) -> Result<Array2<S>> {
    if features.nrows() == 0 {
        return Err(Error::Shape("features must have at least one row".into()));
    }
    if sprf_dim == 0 {
        return Ok(features.clone());
    }
    let table = normalized_pe::<S>(features.nrows(), sprf_dim)?;
    Ok(
        ndarray::concatenate(Axis(1), &[features.view(), table.view()])
            .expect("row counts match"),
    )
}

/// One cross-entropy term of the InfoNCE objective: `-log softmax(sim/τ)`
/// at the positive index.
pub fn info_nce_term(similarities: &[f64], positive: usize, temperature: f64) -> f64 {
    assert!(positive < similarities.len());
    assert!(temperature > 0.0);
    let logits: Vec<f64> = similarities.iter().map(|s| s / temperature).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    max + denom.ln() - logits[positive]
}

/// Settings for [`contrastive_pretrain`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Initial temperature; it is learned (in log space) from there.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 1e-3,
            temperature: 0.07,
            seed: 0,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// (clip index, diagram index) pairs for one sample: a clip is positive for
/// a diagram when the clip's center time lies inside one of that diagram's
/// ground-truth spans. Clips matching no diagram (background) are excluded.
pub fn positive_pairs<S: Scalar>(sample: &GroundingSample<S>) -> Vec<(usize, usize)> {
    let n = sample.video.clips.nrows();
    let mut pairs = Vec::new();
    for clip in 0..n {
        let center = (clip as f64 + 0.5) / n as f64;
        for (diagram, spans) in sample.ground_truth.iter().enumerate() {
            if spans
                .iter()
                .any(|s| s.start() <= center && center <= s.end())
            {
                pairs.push((clip, diagram));
            }
        }
    }
    pairs
}

/// Assemble the raw MLP inputs (feature ⊕ progress-rate row) for one
/// sample's positive pairs.
fn batch_inputs<S: Scalar>(
    sample: &GroundingSample<S>,
    pairs: &[(usize, usize)],
    sprf_dim: usize,
) -> Result<(Array2<S>, Array2<S>)> {
    let video_in = with_sprf(&sample.video.clips, sprf_dim)?;
    let diagram_in = with_sprf(&sample.diagrams.diagrams, sprf_dim)?;
    let pick = |src: &Array2<S>, rows: Vec<usize>| {
        Array2::from_shape_fn((rows.len(), src.ncols()), |(r, c)| src[[rows[r], c]])
    };
    let v = pick(&video_in, pairs.iter().map(|p| p.0).collect());
    let d = pick(&diagram_in, pairs.iter().map(|p| p.1).collect());
    Ok((v, d))
}

/// Record the symmetric InfoNCE loss for one batch of paired inputs.
/// Row `b` of each input matrix is the `b`-th positive pair; everything
/// off-diagonal acts as a negative.
fn record_batch_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pair: &ProjectionPair<S>,
    video_vars: &MlpVars,
    diagram_vars: &MlpVars,
    log_temp: Var,
    video_in: &Array2<S>,
    diagram_in: &Array2<S>,
) -> Var {
    let b = video_in.nrows();
    let v_in = tape.constant(video_in.clone());
    let d_in = tape.constant(diagram_in.clone());
    let ev = pair.video.forward_tape(tape, v_in, video_vars);
    let ed = pair.diagram.forward_tape(tape, d_in, diagram_vars);
    let ev = tape.l2_normalize_rows(ev);
    let ed = tape.l2_normalize_rows(ed);
    let sims = tape.matmul_nt(ev, ed);
    let neg_log_temp = tape.neg(log_temp);
    let inv_temp = tape.exp(neg_log_temp);
    let logits = tape.scale_by_var(sims, inv_temp);
    let all = Array2::from_elem((b, b), true);
    let targets: Vec<usize> = (0..b).collect();
    let loss_v = tape.masked_cross_entropy_mean(logits, &all, &targets);
    let logits_t = tape.transpose(logits);
    let loss_d = tape.masked_cross_entropy_mean(logits_t, &all, &targets);
    let sum = tape.add(loss_v, loss_d);
    tape.scale(sum, S::from_real(0.5))
}

/// Evaluate (without updating) the symmetric InfoNCE loss of one batch of
/// positive pairs under the current projections.
pub fn contrastive_batch_loss<S: Scalar>(
    pair: &ProjectionPair<S>,
    sample: &GroundingSample<S>,
    pairs: &[(usize, usize)],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Validation("batch has no positive pairs".into()));
    }
    let (video_in, diagram_in) = batch_inputs(sample, pairs, pair.sprf_dim)?;
    let mut tape = Tape::new();
    let video_vars = bind_mlp(&mut tape, &pair.video);
    let diagram_vars = bind_mlp(&mut tape, &pair.diagram);
    let log_temp = tape.leaf(pair.log_temperature.clone());
    let loss = record_batch_loss(
        &mut tape,
        pair,
        &video_vars,
        &diagram_vars,
        log_temp,
        &video_in,
        &diagram_in,
    );
    Ok(tape.scalar(loss).to_real())
}

/// Pretrain the projections with the symmetric InfoNCE objective. Each
/// sample forms one batch (its positive pairs; other pairs in the batch act
/// as negatives). Samples without positive pairs are skipped with a
/// warning. Returns the mean batch loss per epoch.
pub fn contrastive_pretrain<S: Scalar>(
    pair: &mut ProjectionPair<S>,
    samples: &[GroundingSample<S>],
    config: &AlignConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    let all_pairs: Vec<Vec<(usize, usize)>> = samples.iter().map(positive_pairs).collect();
    let usable: Vec<usize> = (0..samples.len())
        .filter(|&i| !all_pairs[i].is_empty())
        .collect();
    for (i, pairs) in all_pairs.iter().enumerate() {
        if pairs.is_empty() {
            log::warn!(
                "alignment: sample {} has no positive pairs; skipping",
                samples[i].id
            );
        }
    }
    if usable.is_empty() {
        return Err(Error::Training(
            "no sample contains a positive (clip, diagram) pair".into(),
        ));
    }

    pair.log_temperature = Array2::from_elem((1, 1), S::from_real(config.temperature.ln()));
    let mut optimizer = AdamW::<S>::new(0.0);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut order = usable.clone();
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for &idx in &order {
            let (video_in, diagram_in) =
                batch_inputs(&samples[idx], &all_pairs[idx], pair.sprf_dim)?;
            let mut tape = Tape::new();
            let video_vars = bind_mlp(&mut tape, &pair.video);
            let diagram_vars = bind_mlp(&mut tape, &pair.diagram);
            let log_temp = tape.leaf(pair.log_temperature.clone());
            let loss = record_batch_loss(
                &mut tape,
                pair,
                &video_vars,
                &diagram_vars,
                log_temp,
                &video_in,
                &diagram_in,
            );
            let loss_value = tape.scalar(loss).to_real();
            if !loss_value.is_finite() {
                return Err(Error::Training(format!(
                    "alignment loss became non-finite ({loss_value}) on sample {} in epoch {epoch}",
                    samples[idx].id
                )));
            }
            total += loss_value;

            let grads = tape.backward(loss);
            let zero_like = |slot: &Array2<S>| Array2::<S>::zeros(slot.dim());
            let grad_of = |var: Var, slot: &Array2<S>| {
                grads.get(var).cloned().unwrap_or_else(|| zero_like(slot))
            };
            let grad_arrays = [
                grad_of(video_vars.w1, &pair.video.w1),
                grad_of(video_vars.b1, &pair.video.b1),
                grad_of(video_vars.w2, &pair.video.w2),
                grad_of(video_vars.b2, &pair.video.b2),
                grad_of(diagram_vars.w1, &pair.diagram.w1),
                grad_of(diagram_vars.b1, &pair.diagram.b1),
                grad_of(diagram_vars.w2, &pair.diagram.w2),
                grad_of(diagram_vars.b2, &pair.diagram.b2),
                grad_of(log_temp, &pair.log_temperature),
            ];
            let mut entries = vec![
                UpdateEntry {
                    param: &mut pair.video.w1,
                    grad: &grad_arrays[0],
                    decay: false,
                },
                UpdateEntry {
                    param: &mut pair.video.b1,
                    grad: &grad_arrays[1],
                    decay: false,
                },
                UpdateEntry {
                    param: &mut pair.video.w2,
                    grad: &grad_arrays[2],
                    decay: false,
                },
                UpdateEntry {
                    param: &mut pair.video.b2,
                    grad: &grad_arrays[3],
                    decay: false,
                },
                UpdateEntry {
                    param: &mut pair.diagram.w1,
                    grad: &grad_arrays[4],
                    decay: false,
                },
                UpdateEntry {
                    param: &mut pair.diagram.b1,
                    grad: &grad_arrays[5],
                    decay: false,
                },
                UpdateEntry {
                    param: &mut pair.diagram.w2,
                    grad: &grad_arrays[6],
                    decay: false,
                },
                UpdateEntry {
                    param: &mut pair.diagram.b2,
                    grad: &grad_arrays[7],
                    decay: false,
                },
                UpdateEntry {
                    param: &mut pair.log_temperature,
                    grad: &grad_arrays[8],
                    decay: false,
                },
            ];
            optimizer.step(&mut entries, config.learning_rate);
        }
        epoch_losses.push(total / order.len() as f64);
    }
    Ok(epoch_losses)
}

/// Mean cosine similarity of projected positive pairs minus mean cosine
/// similarity of projected negative pairs, over the given samples.
pub fn positive_negative_margin<S: Scalar>(
    pair: &ProjectionPair<S>,
    samples: &[GroundingSample<S>],
) -> Result<f64> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for sample in samples {
        let pairs = positive_pairs(sample);
        let positive: std::collections::BTreeSet<(usize, usize)> =
            pairs.iter().copied().collect();
        let ev = pair.project_video(&sample.video.clips)?;
        let ed = pair.project_diagrams(&sample.diagrams.diagrams)?;
        let unit = |row: ndarray::ArrayView1<'_, S>| -> Array1<f64> {
            let v: Array1<f64> = row.iter().map(|x| x.to_real()).collect();
            let n = v.dot(&v).sqrt().max(1e-12);
            v / n
        };
        for clip in 0..ev.nrows() {
            let vu = unit(ev.row(clip));
            for diagram in 0..ed.nrows() {
                let du = unit(ed.row(diagram));
                let cos = vu.dot(&du);
                if positive.contains(&(clip, diagram)) {
                    pos.push(cos);
                } else {
                    neg.push(cos);
                }
            }
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Validation(
            "margin needs at least one positive and one negative pair".into(),
        ));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(mean(&pos) - mean(&neg))
}
