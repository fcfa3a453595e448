//! AdamW and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::diffgraph::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &[Tensor], weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Weight decay is applied to the parameters directly,
    /// not folded into the gradient moments.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} arrays, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Dimension {
                    op: "adamw",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                if self.weight_decay != 0.0 {
                    *w -= lr * self.weight_decay * *w;
                }
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * d;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * d * d;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `lr_max` at step 0 to 0 at step `total − 1`.
pub fn cosine_lr(lr_max: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr_max;
    }
    let frac = step.min(total - 1) as f64 / (total - 1) as f64;
    lr_max * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook Adam, written out separately.
    fn adam_reference(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: i32, lr: f64) {
        for i in 0..p.len() {
            m[i] = 0.9 * m[i] + (1.0 - 0.9) * g[i];
            v[i] = 0.999 * v[i] + (1.0 - 0.999) * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            p[i] -= lr * mh / (vh.sqrt() + 1e-8);
        }
    }

    fn grad_of(p: &[f64]) -> Vec<f64> {
        // Gradient of a fixed quartic bowl.
        p.iter().enumerate().map(|(i, x)| 4.0 * x.powi(3) - (i as f64 + 1.0)).collect()
    }

    #[test]
    fn zero_decay_matches_plain_adam_bitwise() {
        let init = vec![0.5, -1.5, 2.0, 0.1];
        let mut params = vec![Tensor::row_vector(init.clone())];
        let mut opt = AdamW::new(&params, 0.0);
        let (mut p, mut m, mut v) = (init, vec![0.0; 4], vec![0.0; 4]);
        for t in 1..=10 {
            let lr = cosine_lr(0.05, t - 1, 10);
            let g = grad_of(params[0].data());
            opt.step(&mut params, &[Tensor::row_vector(g)], lr).unwrap();
            let gr = grad_of(&p);
            adam_reference(&mut p, &gr, &mut m, &mut v, t as i32, lr);
            assert_eq!(params[0].data(), p.as_slice());
        }
    }

    #[test]
    fn decay_shrinks_weights_with_zero_gradient() {
        let mut params = vec![Tensor::row_vector(vec![2.0])];
        let mut opt = AdamW::new(&params, 0.1);
        opt.step(&mut params, &[Tensor::row_vector(vec![0.0])], 0.5).unwrap();
        assert!((params[0].item() - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = vec![Tensor::row_vector(vec![3.0, -2.0])];
        let mut opt = AdamW::new(&params, 0.0);
        for _ in 0..2000 {
            let g: Vec<f64> = params[0].data().iter().map(|x| 2.0 * (x - 1.0)).collect();
            opt.step(&mut params, &[Tensor::row_vector(g)], 0.01).unwrap();
        }
        assert!(params[0].data().iter().all(|x| (x - 1.0).abs() < 1e-3));
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-4, 0, 120), 1e-4);
        assert!(cosine_lr(1e-4, 119, 120) <= 1e-7);
        assert!((cosine_lr(1.0, 50, 101) - 0.5).abs() < 1e-12);
        assert_eq!(cosine_lr(0.3, 0, 1), 0.3);
        let lrs: Vec<f64> = (0..30).map(|s| cosine_lr(1.0, s, 30)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn mismatched_grads_are_rejected() {
        let mut params = vec![Tensor::row_vector(vec![1.0, 2.0])];
        let mut opt = AdamW::new(&params, 0.0);
        assert!(opt.step(&mut params, &[Tensor::row_vector(vec![1.0])], 0.1).is_err());
        assert!(opt.step(&mut params, &[], 0.1).is_err());
    }
}
