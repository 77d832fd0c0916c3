use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Linear warmup to the peak, then cosine decay to the final rate.
    Cosine,
    /// Linear warmup to the peak, then constant.
    Constant,
}

/// Learning-rate schedule over `total` steps; `step` is zero-based.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub kind: Schedule,
    pub peak: f64,
    pub final_lr: f64,
    pub warmup_ratio: f64,
    pub total: u64,
}

impl LrSchedule {
    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_ratio * self.total as f64).ceil() as u64
    }

    pub fn at(&self, step: u64) -> f64 {
        let warm = self.warmup_steps();
        if step < warm {
            return self.peak * (step + 1) as f64 / warm as f64;
        }
        match self.kind {
            Schedule::Constant => self.peak,
            Schedule::Cosine => {
                let span = self.total.saturating_sub(warm).max(1) as f64;
                let progress = ((step - warm) as f64 / span).min(1.0);
                self.final_lr + 0.5 * (self.peak - self.final_lr) * (1.0 + (PI * progress).cos())
            }
        }
    }
}

/// Global L2 norm of a gradient set.
pub fn global_norm<T: Scalar>(grads: &ParamSet<T>) -> f64 {
    grads.iter().map(|(_, g)| g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norms before and after.
pub fn clip_global_norm<T: Scalar>(grads: &mut ParamSet<T>, max_norm: f64) -> (f64, f64) {
    let before = global_norm(grads);
    if before > max_norm && before > 0.0 {
        let s = T::from_f64(max_norm / before);
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
    (before, global_norm(grads))
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamSet<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW { beta1, beta2, eps, weight_decay, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    /// One update of every tensor in `grads` (a subset of `params`).
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::InvalidShape(format!("{name}: {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            let m = self.m.get_mut(name)?;
            let v = self.v.get_mut(name)?;
            let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
            let (one_b1, one_b2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
            let step = T::from_f64(lr);
            let decay = T::from_f64(lr * self.weight_decay);
            let (bc1, bc2, eps) = (T::from_f64(bc1), T::from_f64(bc2), T::from_f64(self.eps));
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi = *pi - decay * *pi - step * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_shape() {
        let s = LrSchedule { kind: Schedule::Cosine, peak: 2e-4, final_lr: 2e-5, warmup_ratio: 0.05, total: 100 };
        assert_eq!(s.warmup_steps(), 5);
        assert!((s.at(0) - 2e-4 / 5.0).abs() < 1e-15);
        assert!((s.at(4) - 2e-4).abs() < 1e-15);
        assert!((s.at(5) - 2e-4).abs() < 1e-15);
        assert!((s.at(100) - 2e-5).abs() < 1e-15);
        for k in 5..99 {
            assert!(s.at(k + 1) <= s.at(k));
        }
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = ParamSet::new();
        g.insert("a", Tensor::from_vec(vec![3.0f64, 4.0]).unwrap());
        let (before, after) = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!(after <= 1.0 + 1e-12);
        let (b, a) = clip_global_norm(&mut g, 10.0);
        assert_eq!(a, b);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::from_vec(vec![1.0f64, -1.0]).unwrap());
        let mut g = ParamSet::new();
        g.insert("x", Tensor::from_vec(vec![0.5f64, -2.0]).unwrap());
        let mut opt = AdamW::new(&p, 0.9, 0.95, 1e-12, 0.0);
        opt.step(&mut p, &g, 0.1).unwrap();
        let x = p.get("x").unwrap().data();
        assert!((x[0] - 0.9).abs() < 1e-9 && (x[1] + 0.9).abs() < 1e-9);
    }
}
