use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::numerics::Matrix;

/// AdamW with decoupled weight decay and per-tensor step counts.
///
/// A tensor whose learning rate is exactly zero is skipped entirely (no
/// moment update, no decay), so frozen tensors stay bit-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: Vec<Moments>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub name: String,
    pub m: Matrix,
    pub v: Matrix,
    pub steps: u64,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            state: Vec::new(),
        }
    }

    pub fn moments(&self) -> &[Moments] {
        &self.state
    }

    pub fn restore_moments(&mut self, state: Vec<Moments>) {
        self.state = state;
    }

    /// One update. `lr_for(name)` gives each tensor's rate; `decay(name)`
    /// says whether weight decay applies to it.
    pub fn step<P: Parameters>(
        &mut self,
        params: &mut P,
        grads: &P,
        lr_for: impl Fn(&str) -> f64,
        decay: impl Fn(&str) -> bool,
    ) {
        let grads = grads.tensors();
        let mut tensors = params.tensors_mut();
        if self.state.is_empty() {
            self.state = tensors
                .iter()
                .map(|(name, t)| Moments {
                    name: name.clone(),
                    m: Matrix::zeros(t.rows(), t.cols()),
                    v: Matrix::zeros(t.rows(), t.cols()),
                    steps: 0,
                })
                .collect();
        }
        assert_eq!(self.state.len(), tensors.len(), "optimizer/parameter layout");
        for ((name, p), ((_, g), st)) in tensors
            .iter_mut()
            .zip(grads.iter().zip(self.state.iter_mut()))
        {
            debug_assert_eq!(name, &st.name);
            let lr = lr_for(name);
            if lr == 0.0 {
                continue;
            }
            st.steps += 1;
            let bc1 = 1.0 - self.beta1.powi(st.steps as i32);
            let bc2 = 1.0 - self.beta2.powi(st.steps as i32);
            let wd = if decay(name) { self.weight_decay } else { 0.0 };
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let p = p.as_mut_slice();
            let m = st.m.as_mut_slice();
            let v = st.v.as_mut_slice();
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(g.as_slice()).zip(m).zip(v) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * (mhat / (vhat.sqrt() + eps) + wd * *pi);
            }
        }
    }
}
