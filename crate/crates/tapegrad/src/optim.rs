use crate::params::ParamSet;
use std::collections::HashMap;
use std::f64::consts::PI;

/// First/second moment buffers for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// One bias-corrected Adam update of `data` in place.
    pub fn step(
        &mut self,
        data: &mut [f64],
        grad: &[f64],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) {
        assert_eq!(data.len(), grad.len());
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..data.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            data[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Adam over a named parameter set. `weight_decay` here is classic L2
/// (added to the gradient before the moment update).
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    states: HashMap<String, AdamState>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            states: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[(String, Vec<f64>)]) {
        self.step_with_lr(params, grads, self.lr)
    }

    pub fn step_with_lr(&mut self, params: &mut ParamSet, grads: &[(String, Vec<f64>)], lr: f64) {
        for (name, grad) in grads {
            let p = match params.get_mut(name) {
                Some(p) => p,
                None => continue,
            };
            let st = self
                .states
                .entry(name.clone())
                .or_insert_with(|| AdamState::new(p.len()));
            if self.weight_decay > 0.0 {
                let g2: Vec<f64> = grad
                    .iter()
                    .zip(&p.data)
                    .map(|(g, w)| g + self.weight_decay * w)
                    .collect();
                st.step(&mut p.data, &g2, lr, self.beta1, self.beta2, self.eps);
            } else {
                st.step(&mut p.data, grad, lr, self.beta1, self.beta2, self.eps);
            }
        }
    }
}

/// AdamW: Adam with the weight decay decoupled from the gradient moments
/// and applied directly to the parameters.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    states: HashMap<String, AdamState>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            states: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[(String, Vec<f64>)]) {
        self.step_with_lr(params, grads, self.lr)
    }

    pub fn step_with_lr(&mut self, params: &mut ParamSet, grads: &[(String, Vec<f64>)], lr: f64) {
        for (name, grad) in grads {
            let p = match params.get_mut(name) {
                Some(p) => p,
                None => continue,
            };
            if self.weight_decay > 0.0 {
                let decay = lr * self.weight_decay;
                for w in p.data.iter_mut() {
                    *w -= decay * *w;
                }
            }
            let st = self
                .states
                .entry(name.clone())
                .or_insert_with(|| AdamState::new(p.len()));
            st.step(&mut p.data, grad, lr, self.beta1, self.beta2, self.eps);
        }
    }
}

/// Cosine-annealed learning rate with warm restarts. Cycle `i` has length
/// `period * t_mult^i` steps; the rate falls from `base_lr` to `min_lr`
/// along a half cosine and jumps back at each restart.
#[derive(Debug, Clone)]
pub struct CosineAnnealing {
    pub base_lr: f64,
    pub min_lr: f64,
    pub period: usize,
    pub t_mult: usize,
}

impl CosineAnnealing {
    pub fn new(base_lr: f64, min_lr: f64, period: usize, t_mult: usize) -> Self {
        assert!(period >= 1);
        assert!(t_mult >= 1);
        CosineAnnealing {
            base_lr,
            min_lr,
            period,
            t_mult,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let mut t = step;
        let mut len = self.period;
        while t >= len {
            t -= len;
            len *= self.t_mult;
        }
        self.min_lr
            + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * t as f64 / len as f64).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::NdArray;

    #[test]
    fn adam_minimizes_quadratic() {
        // f(w) = (w - 3)^2, gradient 2(w - 3)
        let mut params = ParamSet::new();
        params.insert("w", NdArray::new(vec![1], vec![0.0]));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let w = params.get("w").unwrap().data[0];
            let g = vec![("w".to_string(), vec![2.0 * (w - 3.0)])];
            opt.step(&mut params, &g);
        }
        assert!((params.get("w").unwrap().data[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn adamw_decay_shrinks_weights_without_gradient() {
        let mut params = ParamSet::new();
        params.insert("w", NdArray::new(vec![1], vec![10.0]));
        let mut opt = AdamW::new(0.1, 0.5);
        let g = vec![("w".to_string(), vec![0.0])];
        opt.step(&mut params, &g);
        // decoupled decay: w <- w - lr*wd*w = 10 * (1 - 0.05)
        assert!((params.get("w").unwrap().data[0] - 9.5).abs() < 1e-12);
    }

    #[test]
    fn cosine_restarts_reset_rate() {
        let sched = CosineAnnealing::new(1.0, 0.0, 10, 1);
        assert!((sched.lr_at(0) - 1.0).abs() < 1e-12);
        assert!(sched.lr_at(9) < 0.1);
        // warm restart at step 10
        assert!((sched.lr_at(10) - 1.0).abs() < 1e-12);
        let long = CosineAnnealing::new(1.0, 0.0, 10, 2);
        // second cycle is 20 steps long
        assert!((long.lr_at(10) - 1.0).abs() < 1e-12);
        assert!((long.lr_at(20) - 0.5).abs() < 1e-12);
    }
}
