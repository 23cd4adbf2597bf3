/// Adam with decoupled weight decay. Parameters are addressed by slot so one
/// optimiser can drive several tensors; each slot keeps its own moments.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    slots: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            slots: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Advances the shared step counter used for bias correction. Call once
    /// per optimisation step before the `update`s of that step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, slot: usize, param: &mut [f64], grad: &[f64], lr: f64, decay: bool) {
        assert_eq!(param.len(), grad.len(), "param/grad length mismatch");
        assert!(self.t > 0, "begin_step must be called before update");
        if self.slots.len() <= slot {
            self.slots.resize_with(slot + 1, Default::default);
        }
        let (m, v) = &mut self.slots[slot];
        if m.len() != param.len() {
            *m = vec![0.0; param.len()];
            *v = vec![0.0; param.len()];
        }
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            let mut delta = m_hat / (v_hat.sqrt() + self.eps);
            if decay {
                delta += self.weight_decay * param[i];
            }
            param[i] -= lr * delta;
        }
    }
}
