use crate::encoder::BranchParams;
use crate::tensorgraph::{GradientMap, GraphTensor};

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &BranchParams, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.params().iter().map(|p| vec![0.0; p.values.len()]).collect();
        Self { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update. `vars[i]` is the graph handle of parameter `i`;
    /// parameters without a gradient are treated as having a zero one.
    pub fn step(&mut self, params: &mut BranchParams, vars: &[GraphTensor], grads: &GradientMap) {
        self.step_scaled(params, vars, grads, 1.0);
    }

    /// [`Adam::step`] with the learning rate multiplied by `lr_scale`.
    pub fn step_scaled(&mut self, params: &mut BranchParams, vars: &[GraphTensor], grads: &GradientMap, lr_scale: f64) {
        self.t += 1;
        let lr = self.lr * lr_scale;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.params_mut().iter_mut().enumerate() {
            let g = grads.get(vars[i]);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.values.len() {
                let gj = g.map_or(0.0, |g| g[j]) + self.weight_decay * p.values[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.values[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}
