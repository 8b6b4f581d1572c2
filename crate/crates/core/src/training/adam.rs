use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates per parameter tensor, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }
}

/// Bias-corrected Adam update from the accumulated gradients, which are
/// zeroed afterwards.
pub fn adam_step(params: &mut ModelParams, state: &mut AdamState, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (_, tensor)) in params.iter_mut().enumerate() {
        let (data, grad) = tensor.data_and_grad_mut();
        let Some(grad) = grad else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..data.len() {
            let g = grad[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            data[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            grad[j] = 0.0;
        }
    }
}
