use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::{exempt_from_decay, Params};
use crate::numerics::Tensor;

/// Decoupled-weight-decay Adam.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments per parameter plus the shared step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn bit_eq(&self, other: &AdamState) -> bool {
        let eq = |a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>| {
            a.len() == b.len() && a.iter().zip(b).all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
        };
        self.t == other.t && eq(&self.m, &other.m) && eq(&self.v, &other.v)
    }
}

impl AdamW {
    /// One update of every parameter that has a gradient. Parameters
    /// without a gradient (frozen or unused) are left untouched, decay
    /// included. Rank-1 tensors (biases, norms, mask tokens) are not decayed.
    ///
    /// All gradients are checked before anything is written, so a failed
    /// step leaves `params` and `state` as they were.
    pub fn step(&self, params: &mut Params, grads: &BTreeMap<String, Tensor>, state: &mut AdamState, lr: f32) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        state.t += 1;
        let t = state.t as i32;
        let bc1 = 1.0 - (self.beta1 as f64).powi(t);
        let bc2 = 1.0 - (self.beta2 as f64).powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let decay = if exempt_from_decay(p) { 0.0 } else { self.weight_decay };
            let shrink = 1.0 - lr * decay;
            let step_size = (lr as f64 / bc1) as f32;
            let bc2_sqrt = bc2.sqrt() as f32;
            let (b1, b2) = (self.beta1, self.beta2);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                if decay != 0.0 {
                    *w *= shrink;
                }
                *w -= step_size * *mi / (vi.sqrt() / bc2_sqrt + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warm-up from 0 to `base_lr` over `warmup_steps`, then half-cosine
/// decay to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    0.5 * base_lr * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f32, rank2: bool) -> Params {
        let mut p = Params::new();
        let shape: &[usize] = if rank2 { &[1, 1] } else { &[1] };
        p.insert(name, Tensor::full(shape, v));
        p
    }

    fn grads(name: &str, g: f32, rank2: bool) -> BTreeMap<String, Tensor> {
        let shape: &[usize] = if rank2 { &[1, 1] } else { &[1] };
        BTreeMap::from([(name.to_string(), Tensor::full(shape, g))])
    }

    #[test]
    fn zero_gradient_and_zero_decay_is_a_no_op() {
        let opt = AdamW { weight_decay: 0.0, ..AdamW::default() };
        let mut p = one("w", 0.7, true);
        let before = p.clone();
        let mut s = AdamState::default();
        for _ in 0..3 {
            opt.step(&mut p, &grads("w", 0.0, true), &mut s, 1e-2).unwrap();
        }
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn single_step_matches_closed_form() {
        // w0 = 0.5, g = 0.2, lr = 0.1, wd = 0.05, t = 1:
        // m = 0.1*g, v = 0.05*g^2, mhat = g, vhat = g^2
        // w1 = w0*(1 - lr*wd) - lr * g / (|g| + eps)
        let opt = AdamW::default();
        let mut p = one("w", 0.5, true);
        let mut s = AdamState::default();
        opt.step(&mut p, &grads("w", 0.2, true), &mut s, 0.1).unwrap();
        let (w0, g, lr, wd, eps) = (0.5f64, 0.2f64, 0.1f64, 0.05f64, 1e-8f64);
        let expected = w0 * (1.0 - lr * wd) - lr * g / (g.abs() + eps);
        let got = p.get("w").unwrap().item() as f64;
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
        assert_eq!(s.t, 1);
        assert!((s.m["w"].item() as f64 - 0.1 * g).abs() < 1e-7);
        assert!((s.v["w"].item() as f64 - 0.05 * g * g).abs() < 1e-8);
    }

    #[test]
    fn decay_only_is_multiplicative() {
        let opt = AdamW::default();
        let mut p = one("w", 0.8, true);
        let mut s = AdamState::default();
        opt.step(&mut p, &grads("w", 0.0, true), &mut s, 0.3).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.8 * (1.0 - 0.3 * 0.05));
    }

    #[test]
    fn rank_one_tensors_are_exempt_from_decay() {
        let opt = AdamW::default();
        let mut p = one("b", 0.8, false);
        let mut s = AdamState::default();
        opt.step(&mut p, &grads("b", 0.0, false), &mut s, 0.3).unwrap();
        assert_eq!(p.get("b").unwrap().item(), 0.8);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let opt = AdamW::default();
        let mut p = one("encoder.block1.attn.wq", 0.8, true);
        let before = p.clone();
        let mut s = AdamState::default();
        let e = opt
            .step(&mut p, &grads("encoder.block1.attn.wq", f32::NAN, true), &mut s, 0.1)
            .unwrap_err()
            .to_string();
        assert!(e.contains("encoder.block1.attn.wq"), "{e}");
        assert!(p.bit_eq(&before));
        assert_eq!(s.t, 0);
    }

    #[test]
    fn cosine_schedule_cases() {
        let base = 1e-3;
        assert_eq!(cosine_lr(0, 100, 10, base), 0.0);
        assert!((cosine_lr(5, 100, 10, base) - base / 2.0).abs() < 1e-12);
        assert!((cosine_lr(10, 100, 10, base) - base).abs() < 1e-12);
        assert!((cosine_lr(55, 100, 10, base) - base / 2.0).abs() < 1e-9);
        assert!(cosine_lr(100, 100, 10, base).abs() < 1e-9);
        assert_eq!(cosine_lr(0, 100, 0, base), base);
        let lrs: Vec<f64> = (10..=100).map(|s| cosine_lr(s, 100, 10, base)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
