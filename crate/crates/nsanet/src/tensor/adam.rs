//! Adam optimizer with bias correction.
//!
//! Moment state is kept in `f64` per parameter name, independent of the
//! training storage precision; updates read gradients through `to_f64` and
//! write values back with `from_f64`. The step is a single-writer sweep in
//! the caller-supplied parameter order, so training is deterministic.

use super::{Param, Scalar};
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    state: BTreeMap<String, Moments>,
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over all parameters. Gradients are read from each
    /// `Param::grad` and left untouched (callers zero them per batch).
    pub fn step<T: Scalar>(&mut self, params: &mut [&mut Param<T>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for p in params.iter_mut() {
            let entry = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
            });
            debug_assert_eq!(entry.m.len(), p.len(), "param {} resized", p.name);
            for i in 0..p.len() {
                let g = p.grad[i].to_f64();
                entry.m[i] = self.beta1 * entry.m[i] + (1.0 - self.beta1) * g;
                entry.v[i] = self.beta2 * entry.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = entry.m[i] / bc1;
                let vhat = entry.v[i] / bc2;
                let new = p.value[i].to_f64() - self.lr * mhat / (vhat.sqrt() + self.eps);
                p.value[i] = T::from_f64(new);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Param::<f64>::new("p", vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.value.clone();
        let mut adam = Adam::new(0.1);
        for _ in 0..5 {
            adam.step(&mut [&mut p]);
        }
        assert_eq!(p.value, before);
        assert_eq!(adam.steps_taken(), 5);
    }

    #[test]
    fn scalar_quadratic_converges() {
        // minimize (x − 3)², gradient 2(x − 3)
        let mut p = Param::<f64>::new("x", vec![1], vec![-4.0]).unwrap();
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            p.grad[0] = 2.0 * (p.value[0] - 3.0);
            adam.step(&mut [&mut p]);
        }
        assert!(
            (p.value[0] - 3.0).abs() < 1e-3,
            "converged to {}",
            p.value[0]
        );
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut p = Param::<f32>::new("x", vec![2], vec![1.0, -1.0]).unwrap();
            let mut adam = Adam::new(0.01);
            for k in 0..50 {
                p.grad[0] = (k as f32).sin();
                p.grad[1] = (k as f32).cos();
                adam.step(&mut [&mut p]);
            }
            p.value
        };
        let a = run();
        let b = run();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }

    #[test]
    fn state_is_tracked_per_parameter_name() {
        let mut a = Param::<f64>::new("a", vec![1], vec![0.0]).unwrap();
        let mut b = Param::<f64>::new("b", vec![1], vec![0.0]).unwrap();
        let mut adam = Adam::new(0.1);
        // a sees a constant gradient, b sees none: only a should move
        a.grad[0] = 1.0;
        adam.step(&mut [&mut a, &mut b]);
        assert!(a.value[0] < 0.0);
        assert_eq!(b.value[0], 0.0);

        // first step with bias correction moves by exactly lr·g/(|g|+eps)·…
        // oracle: m̂ = g, v̂ = g², so Δ = lr·g/(√(g²)+eps) ≈ lr
        assert!((a.value[0] + 0.1).abs() < 1e-6);
    }
}
