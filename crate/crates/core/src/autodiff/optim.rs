//! Adam with a warmup-then-step-decay learning-rate schedule.

use crate::error::{Result, XabaError};
use crate::scalar::{lit, Scalar};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const MAX_LR: f64 = 2e-3;

/// Linear warmup over `warmup_frac` of the run, then one multiplicative drop at `decay_at`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub max_lr: f64,
    pub total_steps: usize,
    pub warmup_frac: f64,
    pub decay_at: f64,
    pub decay: f64,
}

impl LrSchedule {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        LrSchedule {
            max_lr,
            total_steps,
            warmup_frac: 0.05,
            decay_at: 0.8,
            decay: 0.1,
        }
    }

    /// Learning rate for zero-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let warmup = (self.warmup_frac * self.total_steps as f64).ceil() as usize;
        if step < warmup {
            return self.max_lr * (step + 1) as f64 / warmup as f64;
        }
        if step as f64 >= self.decay_at * self.total_steps as f64 {
            self.max_lr * self.decay
        } else {
            self.max_lr
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimState<T> {
    /// Zero moments shaped like `params`.
    pub fn new(params: &[&mut [T]]) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        OptimState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. With `lr == 0` the moments advance but the
/// parameters are left untouched.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut [T]],
    grads: &[Vec<T>],
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(XabaError::config(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(XabaError::config(format!(
                "adam: parameter {i} has mismatched lengths"
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (lit::<T>(BETA1), lit::<T>(BETA2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let (lr_t, eps) = (lit::<T>(lr), lit::<T>(ADAM_EPS));
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (T::one() - b1) * g[j];
            v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
            if lr != 0.0 {
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr_t * mh / (vh.sqrt() + eps);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = LrSchedule::new(MAX_LR, 500);
        assert!((s.lr(0) - MAX_LR / 25.0).abs() < 1e-15);
        assert_eq!(s.lr(24), MAX_LR);
        assert_eq!(s.lr(399), MAX_LR);
        assert!((s.lr(400) - MAX_LR * 0.1).abs() < 1e-15);
        assert!((s.lr(499) - MAX_LR * 0.1).abs() < 1e-15);
        let tiny = LrSchedule::new(1.0, 1);
        assert_eq!(tiny.lr(0), 1.0);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut w = vec![0.5f32, -1.25, 3.0];
        let before = w.clone();
        let mut params = [w.as_mut_slice()];
        let mut state = OptimState::new(&params);
        for _ in 0..10 {
            adam_step(&mut params, &[vec![0.0; 3]], &mut state, MAX_LR).unwrap();
        }
        assert_eq!(w, before);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut w = vec![0.1f32, 0.2];
        let mut params = [w.as_mut_slice()];
        let mut state = OptimState::new(&params);
        adam_step(&mut params, &[vec![3.0, -7.0]], &mut state, 0.0).unwrap();
        assert_eq!(w, vec![0.1, 0.2]);
    }

    #[test]
    fn constant_gradient_moves_by_lr_times_sign() {
        // With g constant, m̂ = g and v̂ = g² after bias correction, so each
        // step is lr·g/(|g|+ε).
        for g in [4.0f64, -0.01] {
            let mut w = vec![0.0f64];
            let mut state = OptimState::new(&[w.as_mut_slice()]);
            let mut prev = 0.0;
            for _ in 0..200 {
                adam_step(&mut [w.as_mut_slice()], &[vec![g]], &mut state, 1e-3).unwrap();
                let step = w[0] - prev;
                assert!((step + 1e-3 * g.signum()).abs() < 1e-8, "{step}");
                prev = w[0];
            }
        }
    }

    #[test]
    fn mismatch_is_config_error() {
        let mut w = vec![0.0f32; 2];
        let mut state = OptimState::new(&[w.as_mut_slice()]);
        assert!(adam_step(&mut [w.as_mut_slice()], &[vec![0.0; 3]], &mut state, 1e-3).is_err());
    }
}
