//! The grounding decoder: composite queries over diagram sequences attending
//! into video clips, emitting scored timespans per (diagram, query) pair.
//!
//! Queries and keys are split into a content part and a positional part; the
//! attention logit is the scaled dot product of the concatenated parts, which
//! decomposes exactly into the sum of a content-content and a
//! positional-positional term. Self-attention over composite rows is
//! restricted by a configurable mask; cross-attention reads the full clip
//! sequence. Layers are post-norm; the span and score heads are shared across
//! layers so intermediate layers can be supervised too.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::checkpoint;
use crate::pe::normalized_pe;
use crate::queries::{build_mask, CompositeIndex};
use crate::sampler::interpolate_length;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};
use crate::types::{ModelConfig, Prediction, Timespan, ValueFusion};

/// Named parameters in stable insertion order.
#[derive(Debug, Clone)]
pub struct ParamStore<S: Scalar> {
    entries: Vec<(String, Array2<S>)>,
    index: BTreeMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<S>) {
        let name = name.into();
        assert!(
            self.index.insert(name.clone(), self.entries.len()).is_none(),
            "duplicate parameter {name}"
        );
        self.entries.push((name, value));
    }

    pub fn get(&self, name: &str) -> Option<&Array2<S>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<S>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<S>)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<S>)> {
        self.entries.iter_mut().map(|(n, a)| (n.as_str(), a))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    pub fn to_vec(&self) -> Vec<(String, Array2<S>)> {
        self.entries.clone()
    }
}

/// Input/projection widths that, together with [`ModelConfig`], fix every
/// parameter shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    /// Width of raw clip features.
    pub video_dim: usize,
    /// Width of raw diagram features.
    pub diagram_dim: usize,
    /// Width of the relative-position rows concatenated to clip features
    /// before projection (0 disables them).
    pub sprf_dim: usize,
    /// Hidden width of the two-layer input projections.
    pub proj_hidden: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.video_dim == 0 || self.diagram_dim == 0 || self.proj_hidden == 0 {
            return Err(Error::Config(
                "video_dim, diagram_dim and proj_hidden must be positive".into(),
            ));
        }
        if self.sprf_dim % 2 != 0 {
            return Err(Error::Config("sprf_dim must be even (or 0)".into()));
        }
        Ok(())
    }
}

/// Per-head attention inputs captured for inspection.
#[derive(Debug, Clone)]
pub struct AttentionParts<S: Scalar> {
    pub q_content: Array2<S>,
    pub q_positional: Array2<S>,
    pub k_content: Array2<S>,
    pub k_positional: Array2<S>,
    pub scale: S,
}

/// Attention logits via the definitional form: scaled dot product of the
/// concatenated (content ⊕ positional) query and key rows.
pub fn joint_attention_logits_concat<S: Scalar>(parts: &AttentionParts<S>) -> Array2<S> {
    let q = ndarray::concatenate(
        ndarray::Axis(1),
        &[parts.q_content.view(), parts.q_positional.view()],
    )
    .expect("query parts must have equal row counts");
    let k = ndarray::concatenate(
        ndarray::Axis(1),
        &[parts.k_content.view(), parts.k_positional.view()],
    )
    .expect("key parts must have equal row counts");
    q.dot(&k.t()).mapv(|v| v * parts.scale)
}

/// Attention logits via the decomposed form: content·contentᵀ plus
/// positional·positionalᵀ, scaled. Algebraically equal to
/// [`joint_attention_logits_concat`].
pub fn joint_attention_logits_sum<S: Scalar>(parts: &AttentionParts<S>) -> Array2<S> {
    let c = parts.q_content.dot(&parts.k_content.t());
    let p = parts.q_positional.dot(&parts.k_positional.t());
    (c + p).mapv(|v| v * parts.scale)
}

/// Recorded attention for one decoder layer (one entry per head).
#[derive(Debug, Clone)]
pub struct LayerAttention<S: Scalar> {
    /// `MK x MK` masked self-attention weights.
    pub self_weights: Vec<Array2<S>>,
    /// `MK x N` cross-attention weights.
    pub cross_weights: Vec<Array2<S>>,
    pub self_parts: Vec<AttentionParts<S>>,
    pub cross_parts: Vec<AttentionParts<S>>,
}

/// Attention maps for every layer of one forward pass.
#[derive(Debug, Clone)]
pub struct AttentionRecord<S: Scalar> {
    pub layers: Vec<LayerAttention<S>>,
}

/// Span/score outputs read off one decoder layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerHeads {
    /// `(MK, 2)` clamped `[start, end]` rows.
    pub spans: Var,
    /// `(MK, 1)` raw foreground logits.
    pub score_logits: Var,
}

/// Everything produced by one forward pass.
#[derive(Debug)]
pub struct ForwardPass<S: Scalar> {
    /// One entry per decoder layer, in depth order; the last is the output.
    pub layers: Vec<LayerHeads>,
    /// Tape bindings of every parameter, for gradient extraction.
    pub param_vars: Vec<(String, Var)>,
    pub attention: Option<AttentionRecord<S>>,
    /// Clip count after optional length normalization.
    pub effective_clips: usize,
}

/// Dropout/recording switches for [`GroundingModel::forward`].
pub struct ForwardOptions<'a> {
    /// `Some` enables dropout (training mode).
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
    pub record_attention: bool,
}

impl ForwardOptions<'static> {
    pub fn eval() -> Self {
        Self {
            dropout_rng: None,
            record_attention: false,
        }
    }

    pub fn eval_with_attention() -> Self {
        Self {
            dropout_rng: None,
            record_attention: true,
        }
    }
}

impl<'a> ForwardOptions<'a> {
    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            dropout_rng: Some(rng),
            record_attention: false,
        }
    }
}

/// Decoder over composite diagram-sequence queries.
#[derive(Debug, Clone)]
pub struct GroundingModel<S: Scalar> {
    config: ModelConfig,
    dims: ModelDims,
    params: ParamStore<S>,
}

impl<S: Scalar> GroundingModel<S> {
    /// Build a freshly initialized model: Xavier-uniform weights, zero
    /// biases, unit layer-norm gains, standard-normal learnable queries.
    pub fn new(config: ModelConfig, dims: ModelDims, seed: u64) -> Result<Self> {
        config.validate()?;
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.hidden_dim;
        let ph = dims.proj_hidden;

        let mut xavier = |params: &mut ParamStore<S>, name: &str, rows: usize, cols: usize| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            let arr =
                Array2::from_shape_fn((rows, cols), |_| S::from_real(rng.random_range(-a..a)));
            params.insert(name, arr);
        };
        let zeros = |params: &mut ParamStore<S>, name: &str, rows: usize, cols: usize| {
            params.insert(name, Array2::zeros((rows, cols)));
        };
        let ones = |params: &mut ParamStore<S>, name: &str, cols: usize| {
            params.insert(name, Array2::from_elem((1, cols), S::one()));
        };

        xavier(&mut params, "proj.video.w1", dims.video_dim + dims.sprf_dim, ph);
        zeros(&mut params, "proj.video.b1", 1, ph);
        xavier(&mut params, "proj.video.w2", ph, d);
        zeros(&mut params, "proj.video.b2", 1, d);
        xavier(&mut params, "proj.diagram.w1", dims.diagram_dim + dims.sprf_dim, ph);
        zeros(&mut params, "proj.diagram.b1", 1, ph);
        xavier(&mut params, "proj.diagram.w2", ph, d);
        zeros(&mut params, "proj.diagram.b2", 1, d);

        {
            let mut rng2 = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            let queries = Array2::from_shape_fn((config.num_queries, d), |_| {
                S::from_real(rng2.sample::<f64, _>(StandardNormal))
            });
            params.insert("queries", queries);
        }

        let v_in = match config.value_fusion {
            ValueFusion::Add => d,
            ValueFusion::ConcatProject => 2 * d,
        };
        for layer in 0..config.num_layers {
            for block in ["self", "cross"] {
                let p = |tail: &str| format!("layer{layer}.{block}.{tail}");
                xavier(&mut params, &p("wq_c"), d, d);
                xavier(&mut params, &p("wq_p"), d, d);
                xavier(&mut params, &p("wk_c"), d, d);
                xavier(&mut params, &p("wk_p"), d, d);
                xavier(&mut params, &p("wv"), v_in, d);
                xavier(&mut params, &p("wo"), d, d);
                zeros(&mut params, &p("bo"), 1, d);
            }
            for ln in ["ln1", "ln2", "ln3"] {
                ones(&mut params, &format!("layer{layer}.{ln}.gain"), d);
                zeros(&mut params, &format!("layer{layer}.{ln}.bias"), 1, d);
            }
            xavier(&mut params, &format!("layer{layer}.ffn.w1"), d, config.ffn_dim);
            zeros(&mut params, &format!("layer{layer}.ffn.b1"), 1, config.ffn_dim);
            xavier(&mut params, &format!("layer{layer}.ffn.w2"), config.ffn_dim, d);
            zeros(&mut params, &format!("layer{layer}.ffn.b2"), 1, d);
        }

        xavier(&mut params, "span.w1", d, d);
        zeros(&mut params, "span.b1", 1, d);
        xavier(&mut params, "span.w2", d, d);
        zeros(&mut params, "span.b2", 1, d);
        xavier(&mut params, "span.w3", d, 2);
        zeros(&mut params, "span.b3", 1, 2);
        xavier(&mut params, "score.w", d, 1);
        zeros(&mut params, "score.b", 1, 1);

        Ok(Self {
            config,
            dims,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    /// Overwrite one parameter; the shape must match.
    pub fn set_param(&mut self, name: &str, value: Array2<S>) -> Result<()> {
        let current = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if current.dim() != value.dim() {
            return Err(Error::Shape(format!(
                "parameter {name}: expected shape {:?}, got {:?}",
                current.dim(),
                value.dim()
            )));
        }
        *current = value;
        Ok(())
    }

    /// Run the decoder over one sample's features.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        video: &Array2<S>,
        diagrams: &Array2<S>,
        mut opts: ForwardOptions<'_>,
    ) -> Result<ForwardPass<S>> {
        if video.ncols() != self.dims.video_dim {
            return Err(Error::Shape(format!(
                "video features have width {}, model expects {}",
                video.ncols(),
                self.dims.video_dim
            )));
        }
        if diagrams.ncols() != self.dims.diagram_dim {
            return Err(Error::Shape(format!(
                "diagram features have width {}, model expects {}",
                diagrams.ncols(),
                self.dims.diagram_dim
            )));
        }
        if video.nrows() == 0 || diagrams.nrows() == 0 {
            return Err(Error::Shape("features must have at least one row".into()));
        }

        let cfg = &self.config;
        let d = cfg.hidden_dim;
        let heads = cfg.num_heads;
        let dk = d / heads;
        let m = diagrams.nrows();
        let k = cfg.num_queries;
        let index = CompositeIndex::new(m, k);
        let mk = index.len();

        // Optional length normalization, then optional progress-rate
        // concatenation — both on plain arrays, since inputs are constants.
        let clip_features = match cfg.normalize_video_length {
            Some(len) => interpolate_length(video, len)?,
            None => video.clone(),
        };
        let n = clip_features.nrows();
        let with_sprf = |features: Array2<S>| -> Result<Array2<S>> {
            if self.dims.sprf_dim == 0 {
                return Ok(features);
            }
            let table = normalized_pe::<S>(features.nrows(), self.dims.sprf_dim)?;
            Ok(
                ndarray::concatenate(ndarray::Axis(1), &[features.view(), table.view()])
                    .expect("row counts match"),
            )
        };
        let video_in = with_sprf(clip_features)?;
        let diagram_in = with_sprf(diagrams.clone())?;

        // Bind every parameter to the tape once.
        let mut param_vars = Vec::with_capacity(self.params.len());
        let mut lookup: BTreeMap<&str, Var> = BTreeMap::new();
        for (name, value) in self.params.iter() {
            let var = tape.leaf(value.clone());
            param_vars.push((name.to_string(), var));
            lookup.insert(name, var);
        }
        let v = |name: &str| -> Var {
            *lookup
                .get(name)
                .unwrap_or_else(|| panic!("parameter {name} not registered"))
        };

        let drop_p = if opts.dropout_rng.is_some() {
            cfg.dropout
        } else {
            0.0
        };
        // Applies dropout only in training mode with p > 0.
        macro_rules! maybe_dropout {
            ($tape:expr, $x:expr) => {{
                if drop_p > 0.0 {
                    let rng = opts.dropout_rng.as_deref_mut().expect("training rng");
                    $tape.dropout($x, drop_p, rng)
                } else {
                    $x
                }
            }};
        }

        // Input projections (two-layer MLPs).
        let project = |tape: &mut Tape<S>, input: Var, prefix: &str| -> Var {
            let h = tape.matmul(input, v(&format!("{prefix}.w1")));
            let h = tape.add_broadcast_row(h, v(&format!("{prefix}.b1")));
            let h = tape.relu(h);
            let out = tape.matmul(h, v(&format!("{prefix}.w2")));
            tape.add_broadcast_row(out, v(&format!("{prefix}.b2")))
        };
        let video_node = tape.constant(video_in);
        let diagram_node = tape.constant(diagram_in);
        let f_v = project(tape, video_node, "proj.video");
        let f_i = project(tape, diagram_node, "proj.diagram");

        // Positional tables (constants on the tape).
        let p_v = {
            let table = normalized_pe::<S>(n, d)?;
            tape.constant(table)
        };
        let p_i_rows = if cfg.use_diagram_pe {
            let table = normalized_pe::<S>(m, d)?;
            let rows = index.diagram_of_rows();
            let gathered = Array2::from_shape_fn((mk, d), |(r, c)| table[[rows[r], c]]);
            Some(tape.constant(gathered))
        } else {
            None
        };

        // Composite state: content from diagram features, positional from
        // the learnable queries (static across layers).
        let mut x = tape.gather_rows(f_i, &index.diagram_of_rows());
        let qtile = tape.gather_rows(v("queries"), &index.query_of_rows());

        let self_mask = build_mask(m, k, cfg.mask_type);
        let cross_mask = Array2::from_elem((mk, n), true);
        let scale = S::from_real(1.0 / (2.0 * dk as f64).sqrt());

        let mut layers = Vec::with_capacity(cfg.num_layers);
        let mut attention_layers = Vec::new();

        for layer in 0..cfg.num_layers {
            let name = |block: &str, tail: &str| format!("layer{layer}.{block}.{tail}");
            let mut layer_attention = LayerAttention {
                self_weights: Vec::new(),
                cross_weights: Vec::new(),
                self_parts: Vec::new(),
                cross_parts: Vec::new(),
            };

            // One attention block; `kc_src`/`kp_src` are the key/value side
            // (the composite rows themselves for self-attention, the clip
            // sequence for cross-attention).
            let attend = |tape: &mut Tape<S>,
                              block: &str,
                              q_c_src: Var,
                              q_p_src: Var,
                              k_c_src: Var,
                              k_p_src: Var,
                              mask: &Array2<bool>,
                              record_weights: &mut Vec<Array2<S>>,
                              record_parts: &mut Vec<AttentionParts<S>>,
                              record: bool|
             -> Var {
                let qc = tape.matmul(q_c_src, v(&name(block, "wq_c")));
                let qp = tape.matmul(q_p_src, v(&name(block, "wq_p")));
                let kc = tape.matmul(k_c_src, v(&name(block, "wk_c")));
                let kp = tape.matmul(k_p_src, v(&name(block, "wk_p")));
                let fused = match cfg.value_fusion {
                    ValueFusion::Add => tape.add(k_c_src, k_p_src),
                    ValueFusion::ConcatProject => tape.concat_cols(k_c_src, k_p_src),
                };
                let values = tape.matmul(fused, v(&name(block, "wv")));

                let mut head_outputs = Vec::with_capacity(heads);
                for h in 0..heads {
                    let lo = h * dk;
                    let hi = lo + dk;
                    let qc_h = tape.slice_cols(qc, lo, hi);
                    let qp_h = tape.slice_cols(qp, lo, hi);
                    let kc_h = tape.slice_cols(kc, lo, hi);
                    let kp_h = tape.slice_cols(kp, lo, hi);
                    let v_h = tape.slice_cols(values, lo, hi);
                    // Scaled joint logits: content·contentᵀ + positional·positionalᵀ.
                    let lc = tape.matmul_nt(qc_h, kc_h);
                    let lp = tape.matmul_nt(qp_h, kp_h);
                    let joint = tape.add(lc, lp);
                    let logits = tape.scale(joint, scale);
                    let weights = tape.masked_softmax_rows(logits, mask);
                    if record {
                        record_weights.push(tape.value(weights).clone());
                        record_parts.push(AttentionParts {
                            q_content: tape.value(qc_h).clone(),
                            q_positional: tape.value(qp_h).clone(),
                            k_content: tape.value(kc_h).clone(),
                            k_positional: tape.value(kp_h).clone(),
                            scale,
                        });
                    }
                    head_outputs.push(tape.matmul(weights, v_h));
                }
                let mut merged = head_outputs[0];
                for h in &head_outputs[1..] {
                    merged = tape.concat_cols(merged, *h);
                }
                let out = tape.matmul(merged, v(&name(block, "wo")));
                tape.add_broadcast_row(out, v(&name(block, "bo")))
            };

            // Masked self-attention over composite rows.
            let self_out = attend(
                tape,
                "self",
                x,
                qtile,
                x,
                qtile,
                &self_mask,
                &mut layer_attention.self_weights,
                &mut layer_attention.self_parts,
                opts.record_attention,
            );
            let self_out = maybe_dropout!(tape, self_out);
            let res = tape.add(x, self_out);
            x = tape.layer_norm(
                res,
                v(&format!("layer{layer}.ln1.gain")),
                v(&format!("layer{layer}.ln1.bias")),
            );

            // Inject diagram-order information before reading the video.
            if let Some(pi) = p_i_rows {
                x = tape.add(x, pi);
            }

            // Cross-attention into the clip sequence.
            let cross_out = attend(
                tape,
                "cross",
                x,
                qtile,
                f_v,
                p_v,
                &cross_mask,
                &mut layer_attention.cross_weights,
                &mut layer_attention.cross_parts,
                opts.record_attention,
            );
            let cross_out = maybe_dropout!(tape, cross_out);
            let res = tape.add(x, cross_out);
            x = tape.layer_norm(
                res,
                v(&format!("layer{layer}.ln2.gain")),
                v(&format!("layer{layer}.ln2.bias")),
            );

            // Feed-forward.
            let h = tape.matmul(x, v(&format!("layer{layer}.ffn.w1")));
            let h = tape.add_broadcast_row(h, v(&format!("layer{layer}.ffn.b1")));
            let h = tape.relu(h);
            let h = maybe_dropout!(tape, h);
            let y = tape.matmul(h, v(&format!("layer{layer}.ffn.w2")));
            let y = tape.add_broadcast_row(y, v(&format!("layer{layer}.ffn.b2")));
            let y = maybe_dropout!(tape, y);
            let res = tape.add(x, y);
            x = tape.layer_norm(
                res,
                v(&format!("layer{layer}.ln3.gain")),
                v(&format!("layer{layer}.ln3.bias")),
            );

            // Shared heads read this layer's state.
            let h1 = tape.matmul(x, v("span.w1"));
            let h1 = tape.add_broadcast_row(h1, v("span.b1"));
            let h1 = tape.relu(h1);
            let h2 = tape.matmul(h1, v("span.w2"));
            let h2 = tape.add_broadcast_row(h2, v("span.b2"));
            let h2 = tape.relu(h2);
            let cw = tape.matmul(h2, v("span.w3"));
            let cw = tape.add_broadcast_row(cw, v("span.b3"));
            let cw = tape.sigmoid(cw);
            let center = tape.slice_cols(cw, 0, 1);
            let width = tape.slice_cols(cw, 1, 2);
            let half = tape.scale(width, S::from_real(0.5));
            let start_raw = tape.sub(center, half);
            let end_raw = tape.add(center, half);
            let start = tape.clamp01(start_raw);
            let end = tape.clamp01(end_raw);
            let spans = tape.concat_cols(start, end);

            let logits = tape.matmul(x, v("score.w"));
            let score_logits = tape.add_broadcast_row(logits, v("score.b"));

            layers.push(LayerHeads {
                spans,
                score_logits,
            });
            if opts.record_attention {
                attention_layers.push(layer_attention);
            }
        }

        Ok(ForwardPass {
            layers,
            param_vars,
            attention: opts.record_attention.then_some(AttentionRecord {
                layers: attention_layers,
            }),
            effective_clips: n,
        })
    }

    /// Inference convenience: run eval-mode forward and collect one scored
    /// span per (diagram, query) pair, in composite-row order.
    pub fn predict(
        &self,
        video: &Array2<S>,
        diagrams: &Array2<S>,
    ) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, video, diagrams, ForwardOptions::eval())?;
        let last = pass.layers.last().expect("num_layers >= 1");
        let spans = tape.value(last.spans);
        let logits = tape.value(last.score_logits);
        let k = self.config.num_queries;
        let mut out = Vec::with_capacity(spans.nrows());
        for r in 0..spans.nrows() {
            let z = logits[[r, 0]].to_real();
            let score = if z >= 0.0 {
                1.0 / (1.0 + (-z).exp())
            } else {
                let e = z.exp();
                e / (1.0 + e)
            };
            let (s, e) = (spans[[r, 0]].to_real(), spans[[r, 1]].to_real());
            out.push(Prediction {
                diagram_index: r / k,
                query_index: r % k,
                score,
                span: Timespan::new(s, e)?,
            });
        }
        Ok(out)
    }

    /// Persist config, dims and all parameters as a checkpoint directory.
    pub fn save(&self, dir: &Path, extra: &serde_json::Value) -> Result<()> {
        let metadata = serde_json::json!({
            "kind": "grounding_model",
            "config": self.config,
            "dims": self.dims,
            "extra": extra,
        });
        checkpoint::save_params(dir, &self.params.to_vec(), &metadata)
    }

    /// Load a checkpoint written by [`save`](Self::save).
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let (entries, metadata) = checkpoint::load_params::<S>(dir)?;
        let kind = metadata.get("kind").and_then(|v| v.as_str());
        if kind != Some("grounding_model") {
            return Err(Error::format(
                &dir.join("checkpoint.json"),
                format!("not a grounding model checkpoint (kind = {kind:?})"),
            ));
        }
        let config: ModelConfig = serde_json::from_value(
            metadata
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Config("checkpoint missing model config".into()))?,
        )
        .map_err(|e| Error::Config(format!("bad model config in checkpoint: {e}")))?;
        let dims: ModelDims = serde_json::from_value(
            metadata
                .get("dims")
                .cloned()
                .ok_or_else(|| Error::Config("checkpoint missing model dims".into()))?,
        )
        .map_err(|e| Error::Config(format!("bad model dims in checkpoint: {e}")))?;

        let mut model = Self::new(config, dims, 0)?;
        let expected: Vec<String> = model.params.names().map(String::from).collect();
        let found: Vec<&String> = entries.iter().map(|(n, _)| n).collect();
        if expected.len() != found.len()
            || expected.iter().zip(&found).any(|(a, b)| a != *b)
        {
            return Err(Error::format(
                &dir.join("checkpoint.json"),
                "checkpoint parameters do not match the model architecture",
            ));
        }
        for (name, value) in entries {
            model.set_param(&name, value)?;
        }
        let extra = metadata
            .get("extra")
            .cloned()
            .unwrap_or(serde_json::Value::Null);
        Ok((model, extra))
    }
}
