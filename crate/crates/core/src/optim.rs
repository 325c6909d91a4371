//! First-order optimizers over the dense parameter tables: an
//! adaptive-moment method (default) and plain gradient descent.

use crate::checkpoint::TrainState;
use crate::policy::{GradAccum, Mat, PolicyParams};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam(Adam),
    Sgd,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, vocab_size: usize) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(vocab_size)),
            OptimizerKind::Sgd => Optimizer::Sgd,
        }
    }

    /// One descent step: `params ← params − lr · transform(grad)`.
    pub fn step(&mut self, params: &mut PolicyParams, grad: &GradAccum, lr: f64) {
        match self {
            Optimizer::Adam(adam) => adam.step(params, grad, lr),
            Optimizer::Sgd => {
                params.w_trans.add_scaled(&grad.w_trans, -lr);
                params.w_ctx.add_scaled(&grad.w_ctx, -lr);
            }
        }
    }

    pub fn save_into(&self, state: &mut TrainState) {
        match self {
            Optimizer::Adam(adam) => {
                state.opt_step = adam.t;
                state.opt_m = Some((adam.m_trans.clone(), adam.m_ctx.clone()));
                state.opt_v = Some((adam.v_trans.clone(), adam.v_ctx.clone()));
            }
            Optimizer::Sgd => {
                state.opt_step = 0;
                state.opt_m = None;
                state.opt_v = None;
            }
        }
    }

    pub fn restore(kind: OptimizerKind, vocab_size: usize, state: &TrainState) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => {
                let mut adam = Adam::new(vocab_size);
                adam.t = state.opt_step;
                if let (Some((mt, mc)), Some((vt, vc))) = (&state.opt_m, &state.opt_v) {
                    adam.m_trans = mt.clone();
                    adam.m_ctx = mc.clone();
                    adam.v_trans = vt.clone();
                    adam.v_ctx = vc.clone();
                }
                Optimizer::Adam(adam)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m_trans: Mat,
    pub m_ctx: Mat,
    pub v_trans: Mat,
    pub v_ctx: Mat,
}

impl Adam {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m_trans: Mat::zeros(vocab_size + 1, vocab_size),
            m_ctx: Mat::zeros(vocab_size, vocab_size),
            v_trans: Mat::zeros(vocab_size + 1, vocab_size),
            v_ctx: Mat::zeros(vocab_size, vocab_size),
        }
    }

    fn step(&mut self, params: &mut PolicyParams, grad: &GradAccum, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        Self::update_table(
            params.w_trans.as_mut_slice(),
            grad.w_trans.as_slice(),
            self.m_trans.as_mut_slice(),
            self.v_trans.as_mut_slice(),
            self.beta1,
            self.beta2,
            self.eps,
            lr,
            bc1,
            bc2,
        );
        Self::update_table(
            params.w_ctx.as_mut_slice(),
            grad.w_ctx.as_slice(),
            self.m_ctx.as_mut_slice(),
            self.v_ctx.as_mut_slice(),
            self.beta1,
            self.beta2,
            self.eps,
            lr,
            bc1,
            bc2,
        );
    }

    #[allow(clippy::too_many_arguments)]
    fn update_table(
        params: &mut [f64],
        grad: &[f64],
        m: &mut [f64],
        v: &mut [f64],
        beta1: f64,
        beta2: f64,
        eps: f64,
        lr: f64,
        bc1: f64,
        bc2: f64,
    ) {
        for i in 0..params.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
