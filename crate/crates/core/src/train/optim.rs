use crate::error::{Error, Result};
use crate::model::{OptimizerState, ParamSet};

/// Adam with decoupled weight decay. Decay applies only to parameters whose
/// `decay` flag is set (matrices and embeddings; never biases, LayerNorm
/// affines, or the non-parameter zero value vector, which does not exist in
/// the parameter set at all).
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
        }
    }

    /// One update from the gradients currently accumulated on the parameters.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, param) in params.iter_mut().enumerate() {
            let decay = param.decay;
            let t = &mut param.tensor;
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let Some(grad) = t.grad() else { continue };
            // A parameter outside the step's subgraph (all-zero gradient,
            // e.g. the condition table in a w/o-condition run) is left
            // untouched: no moment update and no decay.
            if grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let grad = grad.to_vec();
            let data = t.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                if !g.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite gradient in parameter index {idx}"
                    )));
                }
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let mut update = m_hat / (v_hat.sqrt() + self.eps);
                if decay {
                    update += self.weight_decay * data[i];
                }
                data[i] -= lr * update;
            }
        }
        Ok(())
    }

    pub fn state(&self) -> OptimizerState {
        OptimizerState {
            step: self.step,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn restore(params: &ParamSet, weight_decay: f64, state: OptimizerState) -> Result<Self> {
        if state.m.len() != params.len() || state.v.len() != params.len() {
            return Err(Error::Data(
                "optimizer state does not match parameter set".into(),
            ));
        }
        Ok(AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: state.step,
            m: state.m,
            v: state.v,
        })
    }
}

/// Linear warmup to the peak over `warmup_proportion` of the run, then
/// linear decay to zero: lr(0) = 0, lr(warmup) = peak, lr(total) = 0.
pub fn lr_at(step: usize, total_steps: usize, peak: f64, warmup_proportion: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let total = total_steps as f64;
    let warmup = warmup_proportion * total;
    let s = step as f64;
    if s < warmup {
        peak * s / warmup
    } else if warmup >= total {
        peak
    } else {
        (peak * (total - s) / (total - warmup)).max(0.0)
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(params: &mut ParamSet, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for p in params.iter() {
        if let Some(g) = p.tensor.grad() {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.tensor.grad_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    norm
}
