use std::f64::consts::PI;

use crate::model::{ParamId, ParamStore};
use crate::Scalar;

/// Adam with a cosine-decayed learning rate, updating trainable tensors only.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    total_steps: usize,
    step: usize,
    state: Vec<(ParamId, Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, peak_lr: f64, total_steps: usize) -> Self {
        let state = params
            .trainable()
            .into_iter()
            .map(|id| {
                let n = params.get(id).numel();
                (id, vec![T::zero(); n], vec![T::zero(); n])
            })
            .collect();
        Self {
            peak_lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps: total_steps.max(1),
            step: 0,
            state,
        }
    }

    /// Rate used by the next call to [`Adam::step`]: `peak · ½(1 + cos(π·t/T))`.
    pub fn current_lr(&self) -> f64 {
        let progress = self.step as f64 / self.total_steps as f64;
        0.5 * self.peak_lr * (1.0 + (PI * progress.min(1.0)).cos())
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update from the gradients accumulated in `params`.
    /// Tensors without a gradient slot are left alone.
    pub fn step(&mut self, params: &mut ParamStore<T>) {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        for (id, m, v) in &mut self.state {
            let tensor = params.get_mut(*id);
            let Some(grad) = tensor.grad().map(<[T]>::to_vec) else {
                continue;
            };
            for (((w, g), m), v) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * *g;
                *v = b2 * *v + (T::one() - b2) * *g * *g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
