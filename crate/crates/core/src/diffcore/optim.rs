use super::{ParamSet, Tensor};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.tensors().map(Tensor::zeros_like).collect(),
            v: params.tensors().map(Tensor::zeros_like).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.tensors_mut().enumerate() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for k in 0..p.len() {
                let gk = g.data()[k];
                let mk = self.beta1 * m.data()[k] + (1.0 - self.beta1) * gk;
                let vk = self.beta2 * v.data()[k] + (1.0 - self.beta2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let update = (mk / bc1) / ((vk / bc2).sqrt() + self.eps);
                let pk = p.data()[k];
                p.data_mut()[k] = pk - lr * (update + self.weight_decay * pk);
            }
        }
    }

    /// Moment estimates, for checkpointing.
    pub fn state(&self) -> (u64, &[Tensor], &[Tensor]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

/// Cosine annealing from `lr_init` at progress 0 to `lr_final` at progress 1.
pub fn cosine_lr(lr_init: f64, lr_final: f64, progress: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (std::f64::consts::PI * p).cos())
}
