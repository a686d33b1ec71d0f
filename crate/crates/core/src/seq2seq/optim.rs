use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    /// Length of the linear decay to zero. `None` keeps the rate constant.
    pub total_steps: Option<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 3e-5,
            total_steps: None,
        }
    }
}

/// Adam with a linear learning-rate schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: OptimizerConfig,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig, n_params: usize) -> Self {
        Adam {
            cfg,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        match self.cfg.total_steps {
            Some(total) if total > 0 => self.cfg.lr * (1.0 - self.step as f64 / total as f64).max(0.0),
            _ => self.cfg.lr,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(OptimizerConfig { lr: 0.1, total_steps: None }, 2);
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.update(&mut p, &g);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2), "{p:?}");
    }

    #[test]
    fn linear_schedule_reaches_zero() {
        let mut opt = Adam::new(OptimizerConfig { lr: 1.0, total_steps: Some(4) }, 1);
        let mut p = vec![0.0];
        let mut lrs = vec![];
        for _ in 0..5 {
            lrs.push(opt.current_lr());
            opt.update(&mut p, &[1.0]);
        }
        assert_eq!(lrs, vec![1.0, 0.75, 0.5, 0.25, 0.0]);
    }
}
