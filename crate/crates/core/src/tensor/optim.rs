//! AdamW: Adam with decoupled weight decay.

use super::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Per-parameter first/second moment state plus the shared step counter.
///
/// Parameters stream through [`AdamW::update`] in a fixed visit order each
/// step; moment slots are matched positionally and validated by shape.
#[derive(Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    cursor: usize,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            cursor: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Start a new optimization step; call before streaming parameters.
    pub fn begin_step(&mut self) {
        self.step += 1;
        self.cursor = 0;
    }

    /// Apply the decoupled-weight-decay Adam update to one parameter and
    /// zero its gradient. Panics if the gradient is missing.
    pub fn update(&mut self, name: &str, param: &mut Tensor) {
        let n = param.numel();
        if self.moments.len() == self.cursor {
            self.moments.push((vec![0.0; n], vec![0.0; n]));
        }
        let (m, v) = &mut self.moments[self.cursor];
        self.cursor += 1;
        assert_eq!(
            m.len(),
            n,
            "optimizer state shape drifted for parameter {name}"
        );

        let grad = param
            .grad()
            .unwrap_or_else(|| panic!("missing gradient for parameter {name}"))
            .to_vec();

        let c = self.cfg;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        let data = param.data_mut();
        for i in 0..n {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            data[i] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * data[i]);
        }
        param.zero_grad();
    }
}
