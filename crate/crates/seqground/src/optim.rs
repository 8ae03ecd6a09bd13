//! First-order optimization utilities: AdamW with decoupled weight decay,
//! global-norm gradient clipping, and a multi-step learning-rate schedule.

use ndarray::Array2;

use crate::scalar::Scalar;

/// One parameter update: the array to modify, its gradient, and whether
/// weight decay applies (decay is skipped for biases, gains and other
/// single-row parameters by convention at the call site).
pub struct UpdateEntry<'a, S: Scalar> {
    pub param: &'a mut Array2<S>,
    pub grad: &'a Array2<S>,
    pub decay: bool,
}

/// AdamW optimizer state. The entry list passed to [`step`](AdamW::step)
/// must keep the same order and shapes across calls.
#[derive(Debug, Clone)]
pub struct AdamW<S: Scalar> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step_count: u64,
    first_moment: Vec<Array2<S>>,
    second_moment: Vec<Array2<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update with the given learning rate.
    pub fn step(&mut self, entries: &mut [UpdateEntry<'_, S>], learning_rate: f64) {
        if self.first_moment.is_empty() {
            for e in entries.iter() {
                self.first_moment.push(Array2::zeros(e.param.dim()));
                self.second_moment.push(Array2::zeros(e.param.dim()));
            }
        }
        assert_eq!(
            entries.len(),
            self.first_moment.len(),
            "optimizer was initialized with a different parameter list"
        );
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let b1 = S::from_real(self.beta1);
        let b2 = S::from_real(self.beta2);
        let one_minus_b1 = S::from_real(1.0 - self.beta1);
        let one_minus_b2 = S::from_real(1.0 - self.beta2);

        for (i, entry) in entries.iter_mut().enumerate() {
            assert_eq!(
                entry.param.dim(),
                self.first_moment[i].dim(),
                "parameter {i} changed shape between steps"
            );
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            ndarray::Zip::from(&mut *m)
                .and(entry.grad)
                .for_each(|m, &g| *m = b1 * *m + one_minus_b1 * g);
            ndarray::Zip::from(&mut *v)
                .and(entry.grad)
                .for_each(|v, &g| *v = b2 * *v + one_minus_b2 * g * g);
            let decay = if entry.decay { self.weight_decay } else { 0.0 };
            ndarray::Zip::from(&mut *entry.param)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let m_hat = m.to_real() / bias1;
                    let v_hat = v.to_real() / bias2;
                    let step = learning_rate * m_hat / (v_hat.sqrt() + self.eps);
                    let decayed = learning_rate * decay * p.to_real();
                    *p = S::from_real(p.to_real() - step - decayed);
                });
        }
    }
}

/// Scale all gradients in place so their joint L2 norm does not exceed
/// `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Array2<S>], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let mut sum_sq = 0.0;
    for g in grads.iter() {
        for &x in g.iter() {
            let x = x.to_real();
            sum_sq += x * x;
        }
    }
    let norm = sum_sq.sqrt();
    if norm > max_norm {
        let scale = S::from_real(max_norm / norm);
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}

/// Learning rate that drops by `gamma` at each milestone epoch (0-based:
/// the drop takes effect from the milestone epoch onward).
#[derive(Debug, Clone)]
pub struct MultiStepLr {
    base: f64,
    milestones: Vec<usize>,
    gamma: f64,
}

impl MultiStepLr {
    pub fn new(base: f64, mut milestones: Vec<usize>, gamma: f64) -> Self {
        milestones.sort_unstable();
        Self {
            base,
            milestones,
            gamma,
        }
    }

    pub fn at_epoch(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.gamma.powi(drops as i32)
    }
}
