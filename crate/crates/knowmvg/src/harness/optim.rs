//! Adam-style optimizer with decoupled weight decay and a warmup-decay
//! schedule: linear ramp over the warmup steps, then linear decay to zero at
//! `total_steps` (constant if `total_steps` is 0). Frozen parameters and
//! parameters without gradients are left untouched.

use indexmap::IndexMap;

use crate::numerics::{GradMap, ParamSet, Real, Tensor};

/// Accumulate one sample's gradients into a running sum.
pub fn accumulate<T: Real>(acc: &mut GradMap<T>, grads: GradMap<T>) {
    for (name, g) in grads {
        match acc.entry(name) {
            indexmap::map::Entry::Occupied(mut e) => {
                let sum = e.get_mut();
                assert_eq!(sum.shape(), g.shape());
                for (a, b) in sum.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *a += *b;
                }
            }
            indexmap::map::Entry::Vacant(e) => {
                e.insert(g);
            }
        }
    }
}

/// Scale every gradient in place (batch averaging).
pub fn scale_grads<T: Real>(grads: &mut GradMap<T>, factor: f64) {
    let f = T::cast(factor);
    for g in grads.values_mut() {
        for v in g.as_mut_slice() {
            *v *= f;
        }
    }
}

pub struct AdamW<T: Real> {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Step count at which the decay ramp reaches zero; 0 disables decay.
    pub total_steps: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps_taken: usize,
    first: IndexMap<String, Tensor<T>>,
    second: IndexMap<String, Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64, warmup_steps: usize, total_steps: usize) -> Self {
        AdamW {
            lr,
            weight_decay,
            warmup_steps,
            total_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps_taken: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }

    /// Learning rate for the next step (1-indexed inside the warmup ramp).
    pub fn next_lr(&self) -> f64 {
        let t = (self.steps_taken + 1) as f64;
        if self.warmup_steps > 0 && t < self.warmup_steps as f64 {
            return self.lr * t / self.warmup_steps as f64;
        }
        if self.total_steps > self.warmup_steps {
            // hits zero one step past the end, so the last step stays nonzero
            let span = (self.total_steps + 1 - self.warmup_steps) as f64;
            let into = (t - self.warmup_steps as f64).clamp(0.0, span);
            return self.lr * (1.0 - into / span);
        }
        self.lr
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &GradMap<T>) {
        let lr_t = self.next_lr();
        self.steps_taken += 1;
        let t = self.steps_taken as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        for (name, grad) in grads {
            let param = match params.get(name) {
                Ok(p) if p.trainable => p,
                _ => continue,
            };
            assert_eq!(
                param.value.shape(),
                grad.shape(),
                "gradient shape mismatch for `{name}`"
            );
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.rows(), grad.cols()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.rows(), grad.cols()));
            for ((m_i, v_i), &g) in m
                .as_mut_slice()
                .iter_mut()
                .zip(v.as_mut_slice())
                .zip(grad.as_slice())
            {
                let g = g.as_f64();
                let mf = self.beta1 * m_i.as_f64() + (1.0 - self.beta1) * g;
                let vf = self.beta2 * v_i.as_f64() + (1.0 - self.beta2) * g * g;
                *m_i = T::cast(mf);
                *v_i = T::cast(vf);
            }
            let m = &self.first[name];
            let v = &self.second[name];
            let value = params.value_mut(name).expect("checked above");
            for ((p, m_i), v_i) in value
                .as_mut_slice()
                .iter_mut()
                .zip(m.as_slice())
                .zip(v.as_slice())
            {
                let m_hat = m_i.as_f64() / bc1;
                let v_hat = v_i.as_f64() / bc2;
                let update = m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p.as_f64();
                *p = T::cast(p.as_f64() - lr_t * update);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_grads(params: &ParamSet<f64>) -> GradMap<f64> {
        // loss = Σ p², gradient 2p
        let mut g = GradMap::new();
        for (name, p) in params.iter() {
            g.insert(name.to_string(), p.value.map(|x| 2.0 * x));
        }
        g
    }

    #[test]
    fn descends_a_quadratic() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::row_vector(vec![1.0, -2.0, 0.5]), true);
        let mut opt = AdamW::new(0.05, 0.0, 0, 0);
        let start: f64 = params.value("w").unwrap().as_slice().iter().map(|x| x * x).sum();
        for _ in 0..200 {
            let g = quadratic_grads(&params);
            opt.step(&mut params, &g);
        }
        let end: f64 = params.value("w").unwrap().as_slice().iter().map(|x| x * x).sum();
        assert!(end < start * 1e-3, "no progress: {start} -> {end}");
    }

    #[test]
    fn warmup_ramps_linearly() {
        let mut opt = AdamW::<f64>::new(1.0, 0.0, 10, 0);
        let mut params = ParamSet::new();
        params.insert("w", Tensor::scalar(0.0), true);
        let mut g = GradMap::new();
        g.insert("w".to_string(), Tensor::scalar(1.0));
        assert!((opt.next_lr() - 0.1).abs() < 1e-12);
        for _ in 0..4 {
            opt.step(&mut params, &g);
        }
        assert!((opt.next_lr() - 0.5).abs() < 1e-12);
        for _ in 0..10 {
            opt.step(&mut params, &g);
        }
        assert!((opt.next_lr() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decay_ramp_reaches_near_zero() {
        let mut opt = AdamW::<f64>::new(1.0, 0.0, 10, 110);
        let mut params = ParamSet::new();
        params.insert("w", Tensor::scalar(0.0), true);
        let mut g = GradMap::new();
        g.insert("w".to_string(), Tensor::scalar(1.0));
        for _ in 0..10 {
            opt.step(&mut params, &g);
        }
        // t = 11, one step into a 101-step ramp
        assert!((opt.next_lr() - (1.0 - 1.0 / 101.0)).abs() < 1e-12);
        for _ in 0..55 {
            opt.step(&mut params, &g);
        }
        assert!((opt.next_lr() - (1.0 - 56.0 / 101.0)).abs() < 1e-12);
        for _ in 0..44 {
            opt.step(&mut params, &g);
        }
        // the final step still moves
        let last = opt.next_lr();
        assert!(last > 0.0 && (last - 1.0 / 101.0).abs() < 1e-12, "{last}");
    }

    #[test]
    fn frozen_parameters_never_move() {
        let mut params = ParamSet::new();
        params.insert("a", Tensor::scalar(1.0), true);
        params.insert("b", Tensor::scalar(1.0), false);
        let mut g = GradMap::new();
        g.insert("a".to_string(), Tensor::scalar(1.0));
        g.insert("b".to_string(), Tensor::scalar(1.0));
        let mut opt = AdamW::new(0.1, 0.0, 0, 0);
        opt.step(&mut params, &g);
        assert!(params.value("a").unwrap().item() < 1.0);
        assert_eq!(params.value("b").unwrap().item(), 1.0);
    }

    #[test]
    fn decay_is_decoupled_from_the_gradient() {
        // with zero gradient and nonzero decay, the parameter shrinks by
        // exactly lr·wd·p per step
        let mut params = ParamSet::new();
        params.insert("w", Tensor::scalar(1.0), true);
        let mut g = GradMap::new();
        g.insert("w".to_string(), Tensor::scalar(0.0));
        let mut opt = AdamW::new(0.5, 0.1, 0, 0);
        opt.step(&mut params, &g);
        let got: f64 = params.value("w").unwrap().item();
        assert!((got - (1.0 - 0.5 * 0.1)).abs() < 1e-12, "{got}");
    }
}
