use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Grads, NnError, ParamStore, Tensor2};
use crate::math;

/// AdamW hyper-parameters. Weight decay is decoupled from the gradient and
/// applied only to tensors registered with `decay = true`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment accumulators, shaped like the parameters they track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<Tensor2>,
    pub v: Vec<Tensor2>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(ps: &ParamStore) -> Self {
        let zeros: Vec<Tensor2> = ps
            .tensors()
            .iter()
            .map(|p| Tensor2::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

impl AdamW {
    /// One update at learning rate `lr` (overriding `self.lr`, so schedules
    /// can drive it).
    pub fn step(&self, ps: &mut ParamStore, g: &Grads, st: &mut OptimizerState, lr: f64) -> Result<(), NnError> {
        if st.m.len() != ps.len() || g.tensors().len() != ps.len() {
            return Err(NnError::Shape {
                op: "adamw",
                left: (ps.len(), 0),
                right: (g.tensors().len(), st.m.len()),
            });
        }
        st.step += 1;
        let t = st.step as i32;
        let bc1 = 1.0 - math::powf(self.beta1, t as f64);
        let bc2 = 1.0 - math::powf(self.beta2, t as f64);
        for (i, p) in ps.tensors_mut().iter_mut().enumerate() {
            let gt = &g.tensors()[i];
            if gt.shape() != p.value.shape() || st.m[i].shape() != p.value.shape() {
                return Err(NnError::Shape {
                    op: "adamw",
                    left: p.value.shape(),
                    right: gt.shape(),
                });
            }
            let decay = if p.decay { self.weight_decay } else { 0.0 };
            let m = st.m[i].data_mut();
            let v = st.v[i].data_mut();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let gj = gt.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * (mh / (math::sqrt(vh) + self.eps) + decay * *w);
            }
        }
        Ok(())
    }
}

/// Linear warm-up over `warmup` steps, then cosine decay from `base` to
/// `min` at step `total`.
pub fn cosine_lr(base: f64, min: f64, warmup: u64, step: u64, total: u64) -> f64 {
    if warmup > 0 && step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup.min(step)) as f64 / span as f64).min(1.0);
    min + 0.5 * (base - min) * (1.0 + math::cos(core::f64::consts::PI * progress))
}

/// Rescales `g` so its global norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_grad_norm(g: &mut Grads, max_norm: f64) -> f64 {
    let n = g.norm();
    if n > max_norm && n > 0.0 {
        g.scale(max_norm / n);
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore {
        let mut ps = ParamStore::new();
        ps.add("x", Tensor2::from_vec(1, 1, alloc::vec![x]).unwrap(), true);
        ps
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut ps = scalar_store(0.7);
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut st = OptimizerState::new(&ps);
        let g = Grads::zeros_like(&ps);
        for _ in 0..5 {
            opt.step(&mut ps, &g, &mut st, 0.1).unwrap();
        }
        assert_eq!(ps.tensors()[0].value.data()[0], 0.7);
    }

    #[test]
    fn first_step_on_square_descends() {
        let mut ps = scalar_store(1.0);
        let opt = AdamW::default();
        let mut st = OptimizerState::new(&ps);
        let mut g = Grads::zeros_like(&ps);
        let id = ps.ids().next().unwrap();
        g.get_mut(id).data_mut()[0] = 2.0;
        opt.step(&mut ps, &g, &mut st, 0.01).unwrap();
        let x = ps.get(id).data()[0];
        assert!(x < 1.0 && x > 0.0);
    }

    #[test]
    fn schedule_endpoints() {
        assert!((cosine_lr(1.0, 0.1, 0, 0, 100) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(1.0, 0.1, 0, 100, 100) - 0.1).abs() < 1e-12);
        assert!((cosine_lr(1.0, 0.0, 10, 4, 110) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut ps = ParamStore::new();
        ps.add("a", Tensor2::zeros(1, 2), true);
        let mut g = Grads::zeros_like(&ps);
        let id = ps.ids().next().unwrap();
        g.get_mut(id).data_mut().copy_from_slice(&[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.norm() - 1.0).abs() < 1e-12);
    }
}
