//! Tape-based reverse-mode automatic differentiation over 2-D arrays.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles; calling
//! [`Tape::backward`] on a `1x1` loss node replays the tape in reverse and
//! accumulates gradients for every node that (transitively) depends on a
//! leaf. Scalars are `1x1` arrays; there is no implicit broadcasting beyond
//! the explicitly named ops.

use ndarray::{s, Array2, Axis};
use rand::Rng;

use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S: Scalar> {
    Leaf,
    Constant,
    Add(Var, Var),
    /// `a + row` where `row` is `1xC`, added to every row of `a`.
    AddBroadcastRow(Var, Var),
    Sub(Var, Var),
    Neg(Var),
    Scale(Var, S),
    /// Elementwise product.
    Mul(Var, Var),
    /// Elementwise quotient.
    Div(Var, Var),
    MatMul(Var, Var),
    /// `a · bᵀ`.
    MatMulNT(Var, Var),
    Transpose(Var),
    ConcatCols(Var, Var),
    SliceCols {
        input: Var,
        start: usize,
    },
    GatherRows {
        input: Var,
        indices: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    MinEw(Var, Var),
    MaxEw(Var, Var),
    Clamp01(Var),
    MaskedSoftmaxRows {
        input: Var,
        mask: Array2<bool>,
    },
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        normalized: Array2<S>,
        inv_std: Vec<S>,
    },
    SumAll(Var),
    Dropout {
        input: Var,
        mask: Array2<S>,
    },
    /// Broadcast-multiply `a` by the single entry of a `1x1` node.
    ScaleByVar(Var, Var),
    BceWithLogits {
        logits: Var,
        targets: Array2<S>,
        weights: Array2<S>,
    },
    /// Mean over rows of `logsumexp(allowed) - logit[target]`.
    MaskedCrossEntropyMean {
        logits: Var,
        mask: Array2<bool>,
        target_cols: Vec<usize>,
    },
    L2NormalizeRows {
        input: Var,
        norms: Vec<S>,
    },
}

struct Node<S: Scalar> {
    value: Array2<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<S: Scalar> {
    grads: Vec<Option<Array2<S>>>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient of the loss w.r.t. `var`, if `var` influenced the loss.
    pub fn get(&self, var: Var) -> Option<&Array2<S>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

/// Records a computation as it is built so it can be differentiated.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Current value of a node.
    pub fn value(&self, var: Var) -> &Array2<S> {
        &self.nodes[var.0].value
    }

    /// Value of a `1x1` node as a plain scalar.
    pub fn scalar(&self, var: Var) -> S {
        let v = self.value(var);
        assert_eq!(v.dim(), (1, 1), "scalar() called on non-1x1 node");
        v[[0, 0]]
    }

    fn push(&mut self, value: Array2<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input (model parameter or tracked activation).
    pub fn leaf(&mut self, value: Array2<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A fixed input; no gradient flows into it.
    pub fn constant(&mut self, value: Array2<S>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A `1x1` constant.
    pub fn constant_scalar(&mut self, value: S) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    /// Add a `1xC` row vector to every row of `a`.
    pub fn add_broadcast_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "broadcast operand must be 1xC");
        assert_eq!(self.value(a).ncols(), self.value(row).ncols());
        let v = self.value(a) + &self.value(row).row(0);
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddBroadcastRow(a, row), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| -x);
        let rg = self.rg(a);
        self.push(v, Op::Neg(a), rg)
    }

    pub fn scale(&mut self, a: Var, k: S) -> Var {
        let v = self.value(a).mapv(|x| x * k);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, k), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) / self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Div(a, b), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ` without materializing the transpose as a node.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulNT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).nrows(), self.value(b).nrows());
        let v = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols shape mismatch");
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::ConcatCols(a, b), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        assert!(start < end && end <= self.value(a).ncols());
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        self.push(v, Op::SliceCols { input: a, start }, rg)
    }

    /// Output row `k` equals input row `indices[k]`; rows may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let src = self.value(a);
        assert!(indices.iter().all(|&i| i < src.nrows()));
        let mut v = Array2::zeros((indices.len(), src.ncols()));
        for (k, &i) in indices.iter().enumerate() {
            v.row_mut(k).assign(&src.row(i));
        }
        let rg = self.rg(a);
        self.push(
            v,
            Op::GatherRows {
                input: a,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(S::zero()));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(stable_sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.exp());
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.abs());
        let rg = self.rg(a);
        self.push(v, Op::Abs(a), rg)
    }

    pub fn min_ew(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| if x <= y { x } else { y });
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MinEw(a, b), rg)
    }

    pub fn max_ew(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| if x >= y { x } else { y });
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MaxEw(a, b), rg)
    }

    pub fn clamp01(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mapv(|x| x.max(S::zero()).min(S::one()));
        let rg = self.rg(a);
        self.push(v, Op::Clamp01(a), rg)
    }

    /// Row-wise softmax restricted to `mask`; masked entries are exactly zero
    /// in the output and receive exactly zero gradient.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &Array2<bool>) -> Var {
        let z = self.value(a);
        assert_eq!(z.dim(), mask.dim(), "mask shape mismatch");
        let (rows, cols) = z.dim();
        let mut v = Array2::zeros((rows, cols));
        for r in 0..rows {
            let mut max = S::neg_infinity();
            for c in 0..cols {
                if mask[[r, c]] && z[[r, c]] > max {
                    max = z[[r, c]];
                }
            }
            assert!(
                max > S::neg_infinity(),
                "masked softmax row {r} has no allowed entries"
            );
            let mut denom = S::zero();
            for c in 0..cols {
                if mask[[r, c]] {
                    let e = (z[[r, c]] - max).exp();
                    v[[r, c]] = e;
                    denom += e;
                }
            }
            for c in 0..cols {
                if mask[[r, c]] {
                    v[[r, c]] /= denom;
                }
            }
        }
        let rg = self.rg(a);
        self.push(
            v,
            Op::MaskedSoftmaxRows {
                input: a,
                mask: mask.clone(),
            },
            rg,
        )
    }

    /// Row-wise layer normalization with learnable `1xC` gain and bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        assert_eq!(self.value(gain).dim(), (1, cols));
        assert_eq!(self.value(bias).dim(), (1, cols));
        let eps = S::from_real(1e-5);
        let n = S::from_real(cols as f64);
        let mut normalized = Array2::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let is = S::one() / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                normalized[[r, c]] = (x[[r, c]] - mean) * is;
            }
        }
        let g = self.value(gain);
        let b = self.value(bias);
        let mut v = Array2::zeros((rows, cols));
        for r in 0..rows {
            for c in 0..cols {
                v[[r, c]] = normalized[[r, c]] * g[[0, c]] + b[[0, c]];
            }
        }
        let rg = self.rg(a) || self.rg(gain) || self.rg(bias);
        self.push(
            v,
            Op::LayerNorm {
                input: a,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        )
    }

    /// Sum of all entries, as a `1x1` node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::SumAll(a), rg)
    }

    /// Inverted dropout: keeps entries with probability `1-p` and rescales
    /// them by `1/(1-p)`. `p = 0` is the identity (mask of ones).
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout p must be in [0,1)");
        let keep = S::from_real(1.0 / (1.0 - p));
        let mask = if p == 0.0 {
            Array2::from_elem(self.value(a).dim(), S::one())
        } else {
            let dim = self.value(a).dim();
            Array2::from_shape_fn(dim, |_| {
                if rng.random::<f64>() < p {
                    S::zero()
                } else {
                    keep
                }
            })
        };
        let v = self.value(a) * &mask;
        let rg = self.rg(a);
        self.push(v, Op::Dropout { input: a, mask }, rg)
    }

    /// Multiply every entry of `a` by the single entry of `1x1` node `s`.
    pub fn scale_by_var(&mut self, a: Var, sv: Var) -> Var {
        assert_eq!(self.value(sv).dim(), (1, 1));
        let k = self.value(sv)[[0, 0]];
        let v = self.value(a).mapv(|x| x * k);
        let rg = self.rg(a) || self.rg(sv);
        self.push(v, Op::ScaleByVar(a, sv), rg)
    }

    /// Numerically stable weighted binary cross-entropy on raw logits,
    /// summed over all entries (`1x1` output).
    pub fn bce_with_logits_weighted(
        &mut self,
        logits: Var,
        targets: Array2<S>,
        weights: Array2<S>,
    ) -> Var {
        let z = self.value(logits);
        assert_eq!(z.dim(), targets.dim());
        assert_eq!(z.dim(), weights.dim());
        let mut total = S::zero();
        for ((zv, yv), wv) in z.iter().zip(targets.iter()).zip(weights.iter()) {
            let z = *zv;
            let term = z.max(S::zero()) - z * *yv + (S::one() + (-z.abs()).exp()).ln();
            total += *wv * term;
        }
        let rg = self.rg(logits);
        self.push(
            Array2::from_elem((1, 1), total),
            Op::BceWithLogits {
                logits,
                targets,
                weights,
            },
            rg,
        )
    }

    /// Mean over rows of the masked cross-entropy `logsumexp(allowed) - z[target]`.
    /// Each row's target column must be allowed by the mask.
    pub fn masked_cross_entropy_mean(
        &mut self,
        logits: Var,
        mask: &Array2<bool>,
        target_cols: &[usize],
    ) -> Var {
        let z = self.value(logits);
        let (rows, cols) = z.dim();
        assert_eq!(mask.dim(), (rows, cols));
        assert_eq!(target_cols.len(), rows);
        let mut total = S::zero();
        for r in 0..rows {
            let t = target_cols[r];
            assert!(t < cols && mask[[r, t]], "target column must be allowed");
            let mut max = S::neg_infinity();
            for c in 0..cols {
                if mask[[r, c]] && z[[r, c]] > max {
                    max = z[[r, c]];
                }
            }
            let mut denom = S::zero();
            for c in 0..cols {
                if mask[[r, c]] {
                    denom += (z[[r, c]] - max).exp();
                }
            }
            total += max + denom.ln() - z[[r, t]];
        }
        let mean = total / S::from_real(rows as f64);
        let rg = self.rg(logits);
        self.push(
            Array2::from_elem((1, 1), mean),
            Op::MaskedCrossEntropyMean {
                logits,
                mask: mask.clone(),
                target_cols: target_cols.to_vec(),
            },
            rg,
        )
    }

    /// Scale each row to unit Euclidean norm (rows with norm below 1e-12
    /// stay unchanged).
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        let floor = S::from_real(1e-12);
        let mut v = Array2::zeros((rows, cols));
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let n = x.row(r).iter().map(|&e| e * e).sum::<S>().sqrt().max(floor);
            norms.push(n);
            for c in 0..cols {
                v[[r, c]] = x[[r, c]] / n;
            }
        }
        let rg = self.rg(a);
        self.push(v, Op::L2NormalizeRows { input: a, norms }, rg)
    }

    /// Reverse pass from a `1x1` loss node. Nodes recorded after `loss` are
    /// ignored.
    pub fn backward(&self, loss: Var) -> Grads<S> {
        assert_eq!(
            self.value(loss).dim(),
            (1, 1),
            "backward() needs a 1x1 loss node"
        );
        let mut grads: Vec<Option<Array2<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), S::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Array2<S>>],
        var: Var,
        delta: Array2<S>,
    ) {
        if !self.rg(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, idx: usize, g: &Array2<S>, grads: &mut [Option<Array2<S>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBroadcastRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accumulate(grads, *row, summed);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.mapv(|x| -x));
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.mapv(|x| -x)),
            Op::Scale(a, k) => self.accumulate(grads, *a, g.mapv(|x| x * *k)),
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, g * self.value(*b));
                self.accumulate(grads, *b, g * self.value(*a));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                self.accumulate(grads, *a, g / bv);
                let da = g * &node.value / bv;
                self.accumulate(grads, *b, da.mapv(|x| -x));
            }
            Op::MatMul(a, b) => {
                self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                self.accumulate(grads, *b, self.value(*a).t().dot(g));
            }
            Op::MatMulNT(a, b) => {
                self.accumulate(grads, *a, g.dot(self.value(*b)));
                self.accumulate(grads, *b, g.t().dot(self.value(*a)));
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.t().to_owned()),
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).ncols();
                self.accumulate(grads, *a, g.slice(s![.., ..ca]).to_owned());
                self.accumulate(grads, *b, g.slice(s![.., ca..]).to_owned());
            }
            Op::SliceCols { input, start } => {
                let mut da = Array2::zeros(self.value(*input).dim());
                da.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.accumulate(grads, *input, da);
            }
            Op::GatherRows { input, indices } => {
                let mut da = Array2::zeros(self.value(*input).dim());
                for (k, &i) in indices.iter().enumerate() {
                    let mut row = da.row_mut(i);
                    row += &g.row(k);
                }
                self.accumulate(grads, *input, da);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let da = ndarray::Zip::from(g)
                    .and(x)
                    .map_collect(|&gv, &xv| if xv > S::zero() { gv } else { S::zero() });
                self.accumulate(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let da = ndarray::Zip::from(g)
                    .and(y)
                    .map_collect(|&gv, &yv| gv * yv * (S::one() - yv));
                self.accumulate(grads, *a, da);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g * &node.value),
            Op::Abs(a) => {
                let x = self.value(*a);
                let da = ndarray::Zip::from(g).and(x).map_collect(|&gv, &xv| {
                    if xv > S::zero() {
                        gv
                    } else if xv < S::zero() {
                        -gv
                    } else {
                        S::zero()
                    }
                });
                self.accumulate(grads, *a, da);
            }
            Op::MinEw(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let da = ndarray::Zip::from(g)
                    .and(av)
                    .and(bv)
                    .map_collect(|&gv, &x, &y| if x <= y { gv } else { S::zero() });
                let db = ndarray::Zip::from(g)
                    .and(av)
                    .and(bv)
                    .map_collect(|&gv, &x, &y| if x <= y { S::zero() } else { gv });
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::MaxEw(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let da = ndarray::Zip::from(g)
                    .and(av)
                    .and(bv)
                    .map_collect(|&gv, &x, &y| if x >= y { gv } else { S::zero() });
                let db = ndarray::Zip::from(g)
                    .and(av)
                    .and(bv)
                    .map_collect(|&gv, &x, &y| if x >= y { S::zero() } else { gv });
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Clamp01(a) => {
                let x = self.value(*a);
                let da = ndarray::Zip::from(g).and(x).map_collect(|&gv, &xv| {
                    if xv >= S::zero() && xv <= S::one() {
                        gv
                    } else {
                        S::zero()
                    }
                });
                self.accumulate(grads, *a, da);
            }
            Op::MaskedSoftmaxRows { input, mask } => {
                let y = &node.value;
                let (rows, cols) = y.dim();
                let mut da = Array2::zeros((rows, cols));
                for r in 0..rows {
                    let mut dot = S::zero();
                    for c in 0..cols {
                        if mask[[r, c]] {
                            dot += g[[r, c]] * y[[r, c]];
                        }
                    }
                    for c in 0..cols {
                        if mask[[r, c]] {
                            da[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                }
                self.accumulate(grads, *input, da);
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (rows, cols) = normalized.dim();
                let gv = self.value(*gain);
                let n = S::from_real(cols as f64);
                let mut dx = Array2::zeros((rows, cols));
                let mut dgain = Array2::zeros((1, cols));
                let mut dbias = Array2::zeros((1, cols));
                for r in 0..rows {
                    let mut sum_dn = S::zero();
                    let mut sum_dn_xhat = S::zero();
                    for c in 0..cols {
                        let dn = g[[r, c]] * gv[[0, c]];
                        sum_dn += dn;
                        sum_dn_xhat += dn * normalized[[r, c]];
                        dgain[[0, c]] += g[[r, c]] * normalized[[r, c]];
                        dbias[[0, c]] += g[[r, c]];
                    }
                    for c in 0..cols {
                        let dn = g[[r, c]] * gv[[0, c]];
                        dx[[r, c]] = inv_std[r]
                            * (dn - sum_dn / n - normalized[[r, c]] * sum_dn_xhat / n);
                    }
                }
                self.accumulate(grads, *input, dx);
                self.accumulate(grads, *gain, dgain);
                self.accumulate(grads, *bias, dbias);
            }
            Op::SumAll(a) => {
                let da = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                self.accumulate(grads, *a, da);
            }
            Op::Dropout { input, mask } => {
                self.accumulate(grads, *input, g * mask);
            }
            Op::ScaleByVar(a, sv) => {
                let k = self.value(*sv)[[0, 0]];
                self.accumulate(grads, *a, g.mapv(|x| x * k));
                let ds = (g * self.value(*a)).sum();
                self.accumulate(grads, *sv, Array2::from_elem((1, 1), ds));
            }
            Op::BceWithLogits {
                logits,
                targets,
                weights,
            } => {
                let z = self.value(*logits);
                let scale = g[[0, 0]];
                let mut dz = Array2::zeros(z.dim());
                ndarray::Zip::from(&mut dz)
                    .and(z)
                    .and(targets)
                    .and(weights)
                    .for_each(|d, &zv, &yv, &wv| {
                        *d = scale * wv * (stable_sigmoid(zv) - yv);
                    });
                self.accumulate(grads, *logits, dz);
            }
            Op::MaskedCrossEntropyMean {
                logits,
                mask,
                target_cols,
            } => {
                let z = self.value(*logits);
                let (rows, cols) = z.dim();
                let scale = g[[0, 0]] / S::from_real(rows as f64);
                let mut dz = Array2::zeros((rows, cols));
                for r in 0..rows {
                    let mut max = S::neg_infinity();
                    for c in 0..cols {
                        if mask[[r, c]] && z[[r, c]] > max {
                            max = z[[r, c]];
                        }
                    }
                    let mut denom = S::zero();
                    for c in 0..cols {
                        if mask[[r, c]] {
                            denom += (z[[r, c]] - max).exp();
                        }
                    }
                    for c in 0..cols {
                        if mask[[r, c]] {
                            let p = (z[[r, c]] - max).exp() / denom;
                            let y = if c == target_cols[r] {
                                S::one()
                            } else {
                                S::zero()
                            };
                            dz[[r, c]] = scale * (p - y);
                        }
                    }
                }
                self.accumulate(grads, *logits, dz);
            }
            Op::L2NormalizeRows { input, norms } => {
                let y = &node.value;
                let (rows, cols) = y.dim();
                let mut dx = Array2::zeros((rows, cols));
                for r in 0..rows {
                    let mut dot = S::zero();
                    for c in 0..cols {
                        dot += g[[r, c]] * y[[r, c]];
                    }
                    for c in 0..cols {
                        dx[[r, c]] = (g[[r, c]] - dot * y[[r, c]]) / norms[r];
                    }
                }
                self.accumulate(grads, *input, dx);
            }
        }
    }
}

fn stable_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}
