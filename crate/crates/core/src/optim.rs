//! Adam optimizer over the tape's registered parameters.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, TensorId};

/// Per-parameter Adam state: first/second moments and a step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// Adam with bias correction (β1=0.9, β2=0.999, ε=1e-8 by default).
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    states: Vec<(TensorId, AdamState)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, states: Vec::new() }
    }

    /// Track every parameter currently registered on the tape.
    pub fn attach<F: Real>(&mut self, tape: &Tape<F>) {
        self.states = tape
            .params()
            .iter()
            .map(|&(_, id)| {
                let n = tape.value(id).numel();
                (id, AdamState { m: vec![0.0; n], v: vec![0.0; n], step: 0 })
            })
            .collect();
    }

    /// Apply one update to every trainable parameter, consuming its gradient.
    ///
    /// Frozen parameters (requires_grad off) are skipped; a trainable
    /// parameter without a gradient is a contract error.
    pub fn step<F: Real>(&mut self, tape: &mut Tape<F>) -> Result<()> {
        if self.states.is_empty() {
            return Err(Error::Contract("optimizer has no attached parameters".into()));
        }
        for (id, st) in &mut self.states {
            if !tape.requires_grad(*id) {
                tape.take_grad(*id);
                continue;
            }
            let grad = tape
                .take_grad(*id)
                .ok_or_else(|| Error::Contract("adam_step before backward: missing gradient".into()))?;
            st.step += 1;
            let bc1 = 1.0 - self.beta1.powi(st.step as i32);
            let bc2 = 1.0 - self.beta2.powi(st.step as i32);
            let data = tape.value_mut(*id).data_mut();
            for i in 0..data.len() {
                let g = grad[i].as_f64();
                st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g;
                st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                let upd = self.lr * mhat / (vhat.sqrt() + self.eps);
                data[i] = F::from_f64(data[i].as_f64() - upd);
            }
        }
        Ok(())
    }
}
