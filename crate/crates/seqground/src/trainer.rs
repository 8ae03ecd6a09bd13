//! The optimization loop: windowed batch assembly, per-layer matched
//! losses, AdamW updates, and per-epoch validation with checkpointing.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{build_losses, mean_of_scalars, restricted_match};
use crate::metrics::{self, EvalReport, SampleEval};
use crate::model::{ForwardOptions, GroundingModel};
use crate::optim::{clip_global_norm, AdamW, MultiStepLr, UpdateEntry};
use crate::sampler::{windows_for_training, SamplerConfig, WindowSample};
use crate::scalar::Scalar;
use crate::types::{GroundingSample, LossWeights};

/// Optimization hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs at which the learning rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    pub seed: u64,
    /// Keep imported `proj.*` parameters fixed during training.
    pub freeze_projections: bool,
    pub sampler: SamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            epochs: 60,
            batch_size: 16,
            lr_milestones: vec![40],
            lr_gamma: 0.1,
            grad_clip: 0.1,
            seed: 0,
            freeze_projections: false,
            sampler: SamplerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be ≥ 0".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be ≥ 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !self.lr_milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "lr_milestones must be strictly ascending".into(),
            ));
        }
        if !(self.lr_gamma.is_finite() && self.lr_gamma > 0.0) {
            return Err(Error::Config("lr_gamma must be positive".into()));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        self.sampler.validate()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-window loss over the epoch.
    pub train_loss: f64,
    /// Validation mean IoU; absent when no validation samples were given.
    pub val_miou: Option<f64>,
    pub lr: f64,
}

/// What [`train`] hands back.
#[derive(Debug)]
pub struct TrainOutcome<S: Scalar> {
    /// The best-on-validation model (the final model when validation is
    /// empty).
    pub model: GroundingModel<S>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Predict every sample with the current parameters and score the split.
pub fn evaluate_model<S: Scalar>(
    model: &GroundingModel<S>,
    samples: &[GroundingSample<S>],
) -> Result<EvalReport> {
    let evals = samples
        .par_iter()
        .map(|s| {
            let predictions = model.predict(&s.video.clips, &s.diagrams.diagrams)?;
            Ok(SampleEval {
                id: s.id.clone(),
                predictions,
                ground_truth: s.ground_truth.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    metrics::evaluate(&evals)
}

/// Weight decay applies to matrices, not to bias rows or layer-norm
/// gains; the learnable query bank is a matrix even when it has one row.
fn wants_decay<S: Scalar>(name: &str, value: &Array2<S>) -> bool {
    value.nrows() > 1 || name == "queries"
}

/// Loss and per-parameter gradients of one training window.
struct ItemGrads<S: Scalar> {
    loss: f64,
    grads: Vec<Array2<S>>,
}

fn window_grads<S: Scalar>(
    model: &GroundingModel<S>,
    window: &WindowSample<S>,
    trainable: &[String],
    weights: &LossWeights,
    dropout_seed: u64,
) -> Result<ItemGrads<S>> {
    let sample = &window.sample;
    let mut tape = crate::tensor::Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let pass = model.forward(
        &mut tape,
        &sample.video.clips,
        &sample.diagrams.diagrams,
        ForwardOptions::train(&mut rng),
    )?;

    let layers: &[crate::model::LayerHeads] = if model.config().use_aux_loss {
        &pass.layers
    } else {
        std::slice::from_ref(pass.layers.last().expect("num_layers >= 1"))
    };

    let k = model.config().num_queries;
    let mut layer_totals = Vec::with_capacity(layers.len());
    for heads in layers {
        let span_arr = tape.value(heads.spans);
        let logit_arr = tape.value(heads.score_logits);
        let spans: Vec<(f64, f64)> = (0..span_arr.nrows())
            .map(|r| (span_arr[[r, 0]].to_real(), span_arr[[r, 1]].to_real()))
            .collect();
        // Matching ranks rows by foreground probability; the monotone
        // sigmoid keeps the ordering of the raw logits.
        let scores: Vec<f64> = (0..logit_arr.nrows())
            .map(|r| {
                let z = logit_arr[[r, 0]].to_real();
                1.0 / (1.0 + (-z).exp())
            })
            .collect();
        let matching = restricted_match(&spans, &scores, &sample.ground_truth, k, weights)?;
        let terms = build_losses(
            &mut tape,
            heads.spans,
            heads.score_logits,
            &matching,
            &sample.ground_truth,
            weights,
        );
        layer_totals.push(terms.total);
    }
    let loss_var = mean_of_scalars(&mut tape, &layer_totals);
    let loss = tape.scalar(loss_var).to_real();
    if !loss.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss ({loss}) on sample {}",
            sample.id
        )));
    }

    let grads = tape.backward(loss_var);
    let by_name: std::collections::BTreeMap<&str, crate::tensor::Var> = pass
        .param_vars
        .iter()
        .map(|(n, v)| (n.as_str(), *v))
        .collect();
    let mut out = Vec::with_capacity(trainable.len());
    for name in trainable {
        let var = by_name[name.as_str()];
        match grads.get(var) {
            Some(g) => out.push(g.clone()),
            None => out.push(Array2::zeros(tape.value(var).raw_dim())),
        }
    }
    Ok(ItemGrads { loss, grads: out })
}

/// Run the optimization loop.
///
/// `model` is the starting point (typically freshly initialized, possibly
/// with imported projection weights). Training windows are cut from
/// `train_samples` by the sampler configuration; `val_samples` are scored
/// whole at every epoch and select the returned model. When `out_dir` is
/// given, each epoch overwrites the `last/` checkpoint, improvements are
/// copied to `best/`, and one JSON record per epoch is appended to
/// `metrics.jsonl`.
pub fn train<S: Scalar>(
    mut model: GroundingModel<S>,
    train_samples: &[GroundingSample<S>],
    val_samples: &[GroundingSample<S>],
    config: &TrainConfig,
    weights: &LossWeights,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    weights.validate()?;

    let windows = windows_for_training(train_samples, &config.sampler)?;
    if windows.is_empty() {
        return Err(Error::Training(
            "the sampler produced no training windows (all ground truth dropped?)".into(),
        ));
    }

    // Fixed parameter order drives gradient layout and update order.
    let trainable: Vec<String> = model
        .params()
        .iter()
        .filter(|(name, _)| !(config.freeze_projections && name.starts_with("proj.")))
        .map(|(name, _)| name.to_string())
        .collect();
    let decay_flags: Vec<bool> = trainable
        .iter()
        .map(|n| wants_decay(n, model.params().get(n).expect("trainable name")))
        .collect();

    let schedule = MultiStepLr::new(
        config.learning_rate,
        config.lr_milestones.clone(),
        config.lr_gamma,
    );
    let mut optimizer = AdamW::<S>::new(config.weight_decay);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);

    let metrics_path = out_dir.map(|d| d.join("metrics.jsonl"));
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = metrics_path.as_ref().expect("out_dir given");
        fs::write(path, b"").map_err(|e| Error::io(path, e))?;
    }

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, GroundingModel<S>, f64)> = None;
    let mut dropout_counter: u64 = 0;

    for epoch in 0..config.epochs {
        let lr = schedule.at_epoch(epoch);
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let seeds: Vec<u64> = (0..batch.len())
                .map(|j| config.seed.wrapping_add(0x5EED).wrapping_add(dropout_counter + j as u64))
                .collect();
            dropout_counter += batch.len() as u64;

            let items: Result<Vec<ItemGrads<S>>> = batch
                .par_iter()
                .zip(seeds.par_iter())
                .map(|(&w, &seed)| window_grads(&model, &windows[w], &trainable, weights, seed))
                .collect();
            let items = items.map_err(|e| {
                let ids: Vec<&str> = batch
                    .iter()
                    .map(|&w| windows[w].sample.id.as_str())
                    .collect();
                Error::Training(format!(
                    "epoch {epoch}, batch {batch_idx} (samples [{}]): {e}",
                    ids.join(", ")
                ))
            })?;

            // Deterministic reduction: items arrive in batch order, sum
            // runs sequentially in parameter order.
            let inv = S::from_real(1.0 / batch.len() as f64);
            let mut grads: Vec<Array2<S>> = items[0].grads.clone();
            for item in &items[1..] {
                for (acc, g) in grads.iter_mut().zip(&item.grads) {
                    *acc += g;
                }
            }
            for g in &mut grads {
                g.mapv_inplace(|v| v * inv);
            }
            loss_sum += items.iter().map(|i| i.loss).sum::<f64>();

            clip_global_norm(&mut grads, config.grad_clip);

            let params = model.params_mut();
            let mut entries: Vec<UpdateEntry<'_, S>> = Vec::with_capacity(trainable.len());
            let mut grad_iter = grads.iter();
            let mut name_iter = trainable.iter().peekable();
            for (name, value) in params.iter_mut() {
                if name_iter.peek().map(|n| n.as_str()) == Some(name) {
                    name_iter.next();
                    entries.push(UpdateEntry {
                        param: value,
                        grad: grad_iter.next().expect("one grad per trainable"),
                        decay: decay_flags[entries.len()],
                    });
                }
            }
            optimizer.step(&mut entries, lr);
        }
        let train_loss = loss_sum / windows.len() as f64;

        let val_miou = if val_samples.is_empty() {
            None
        } else {
            Some(evaluate_model(&model, val_samples)?.miou)
        };

        let record = EpochRecord {
            epoch,
            train_loss,
            val_miou,
            lr,
        };
        log::info!(
            "epoch {epoch}: train_loss {train_loss:.6}, val_miou {:?}, lr {lr:e}",
            val_miou
        );

        let improved = match (&best, val_miou) {
            (None, _) => true,
            // Without validation the latest model is always "best".
            (Some(_), None) => true,
            (Some((_, _, best_miou)), Some(miou)) => miou > *best_miou,
        };
        if improved {
            best = Some((epoch, model.clone(), val_miou.unwrap_or(f64::NEG_INFINITY)));
        }

        if let Some(dir) = out_dir {
            let extra = serde_json::json!({
                "epoch": epoch,
                "train_loss": train_loss,
                "val_miou": val_miou,
            });
            model.save(&dir.join("last"), &extra)?;
            if improved {
                model.save(&dir.join("best"), &extra)?;
            }
            let path = metrics_path.as_ref().expect("out_dir given");
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::format(path, e.to_string()))?;
            let mut file = fs::OpenOptions::new()
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
        }

        history.push(record);
    }

    let (best_epoch, best_model, _) = best.expect("epochs >= 1");
    Ok(TrainOutcome {
        model: best_model,
        history,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use crate::synth::{generate_samples, SynthConfig};
    use crate::types::{MaskType, ModelConfig, ValueFusion};

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            hidden_dim: 16,
            num_queries: 2,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 32,
            dropout: 0.0,
            mask_type: MaskType::D,
            value_fusion: ValueFusion::Add,
            use_diagram_pe: true,
            use_aux_loss: true,
            normalize_video_length: None,
        }
    }

    fn tiny_dims() -> ModelDims {
        ModelDims {
            video_dim: 12,
            diagram_dim: 12,
            sprf_dim: 4,
            proj_hidden: 16,
        }
    }

    fn tiny_data(count: usize, seed: u64) -> Vec<GroundingSample<f64>> {
        let config = SynthConfig {
            num_samples: count,
            clip_count: [10, 14],
            diagram_count: [2, 3],
            feature_dim: 12,
            noise_sigma: 0.05,
            prob_missing_step: 0.0,
            prob_repeated_step: 0.0,
            prob_overlap: 0.0,
            background_frac: 0.1,
            seed,
        };
        generate_samples(&config).unwrap()
    }

    fn quick_train_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 3e-3,
            weight_decay: 1e-4,
            epochs,
            batch_size: 4,
            lr_milestones: vec![],
            lr_gamma: 0.1,
            grad_clip: 0.1,
            seed: 9,
            freeze_projections: false,
            sampler: SamplerConfig::default(),
        }
    }

    fn new_model() -> GroundingModel<f64> {
        GroundingModel::new(tiny_model_config(), tiny_dims(), 3).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let model = new_model();
        let before: Vec<(String, ndarray::Array2<f64>)> = model
            .params()
            .iter()
            .map(|(n, v)| (n.to_string(), v.clone()))
            .collect();
        let data = tiny_data(4, 0);
        let mut config = quick_train_config(1);
        config.learning_rate = 0.0;
        let outcome = train(model, &data, &[], &config, &LossWeights::default(), None).unwrap();
        for (name, old) in &before {
            assert_eq!(
                outcome.model.params().get(name).unwrap(),
                old,
                "parameter {name} moved at lr=0"
            );
        }
    }

    #[test]
    fn fixed_seed_reproduces_the_loss_trajectory() {
        let data = tiny_data(6, 1);
        let val = tiny_data(2, 100);
        let config = quick_train_config(2);
        let run = |_: ()| {
            train(
                new_model(),
                &data,
                &val,
                &config,
                &LossWeights::default(),
                None,
            )
            .unwrap()
        };
        let a = run(());
        let b = run(());
        assert_eq!(a.history, b.history);
        assert_eq!(a.best_epoch, b.best_epoch);
        for (name, value) in a.model.params().iter() {
            assert_eq!(b.model.params().get(name).unwrap(), value, "{name}");
        }
    }

    #[test]
    fn epoch_mean_loss_decreases_on_easy_data() {
        let data = tiny_data(8, 2);
        let outcome = train(
            new_model(),
            &data,
            &[],
            &quick_train_config(8),
            &LossWeights::default(),
            None,
        )
        .unwrap();
        let first = outcome.history.first().unwrap().train_loss;
        let last = outcome.history.last().unwrap().train_loss;
        assert!(
            last < first,
            "loss should fall on easy data: first {first}, last {last}"
        );
    }

    #[test]
    fn frozen_projections_stay_fixed_while_the_rest_move() {
        let model = new_model();
        let before: Vec<(String, ndarray::Array2<f64>)> = model
            .params()
            .iter()
            .map(|(n, v)| (n.to_string(), v.clone()))
            .collect();
        let data = tiny_data(4, 3);
        let mut config = quick_train_config(1);
        config.freeze_projections = true;
        let outcome = train(model, &data, &[], &config, &LossWeights::default(), None).unwrap();
        let mut moved = 0;
        for (name, old) in &before {
            let new = outcome.model.params().get(name).unwrap();
            if name.starts_with("proj.") {
                assert_eq!(new, old, "frozen parameter {name} moved");
            } else if new != old {
                moved += 1;
            }
        }
        assert!(moved > 0, "unfrozen parameters should move");
    }

    #[test]
    fn checkpoints_and_metrics_log_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data(4, 4);
        let val = tiny_data(2, 5);
        let outcome = train(
            new_model(),
            &data,
            &val,
            &quick_train_config(2),
            &LossWeights::default(),
            Some(dir.path()),
        )
        .unwrap();

        let text = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        for (i, line) in lines.iter().enumerate() {
            let record: EpochRecord = serde_json::from_str(line).unwrap();
            assert_eq!(record.epoch, i);
            assert_eq!(record, outcome.history[i]);
            assert!(record.val_miou.is_some());
        }

        let (last, extra) = GroundingModel::<f64>::load(&dir.path().join("last")).unwrap();
        assert_eq!(extra["epoch"], 1);
        let (best, best_extra) = GroundingModel::<f64>::load(&dir.path().join("best")).unwrap();
        assert_eq!(best_extra["epoch"], outcome.best_epoch as u64 as i64);
        for (name, value) in outcome.model.params().iter() {
            assert_eq!(best.params().get(name).unwrap(), value, "{name}");
        }
        // The last checkpoint holds the final epoch's parameters.
        assert_eq!(last.config().num_queries, 2);
    }

    #[test]
    fn poisoned_parameters_abort_with_the_batch_ids() {
        let mut model = new_model();
        // Overflowing score logits drive the BCE loss to infinity.
        let w = model.params_mut().get_mut("score.w").unwrap();
        w.fill(1e308);
        let data = tiny_data(3, 6);
        let err = train(
            model,
            &data,
            &[],
            &quick_train_config(1),
            &LossWeights::default(),
            None,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Training(_)), "{msg}");
        assert!(msg.contains("synth-"), "batch ids missing: {msg}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut config = TrainConfig::default();
        config.epochs = 0;
        assert!(config.validate().is_err());
        let mut config = TrainConfig::default();
        config.lr_milestones = vec![10, 10];
        assert!(config.validate().is_err());
        let mut config = TrainConfig::default();
        config.grad_clip = 0.0;
        assert!(config.validate().is_err());
    }
}
