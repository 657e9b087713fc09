//! AdamW over named parameter trees.

use std::collections::BTreeMap;

use crate::numerics::Tensor;
use crate::params::Visit;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Forgets moment estimates and the step counter.
    pub fn reset(&mut self) {
        self.step = 0;
        self.moments.clear();
    }

    /// One update. `lr_scale(key)` multiplies the base rate per parameter;
    /// a scale of 0 freezes the parameter (it is left bit-identical).
    pub fn step<T>(&mut self, params: &mut T, grads: &T, lr_scale: impl Fn(&str) -> f64)
    where
        T: Visit<Tensor<f64>>,
    {
        let mut g: BTreeMap<String, &Tensor<f64>> = BTreeMap::new();
        grads.visit("", &mut |k, t| {
            g.insert(k, t);
        });
        let mut norm2 = 0.0;
        for (k, t) in &g {
            if lr_scale(k) != 0.0 {
                norm2 += t.data().iter().map(|v| v * v).sum::<f64>();
            }
        }
        let clip = match self.clip_norm {
            Some(c) if norm2.sqrt() > c => c / norm2.sqrt(),
            _ => 1.0,
        };
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (lr, eps, wd) = (self.lr, self.eps, self.weight_decay);
        let moments = &mut self.moments;
        params.visit_mut("", &mut |k, p| {
            let scale = lr_scale(&k);
            if scale == 0.0 {
                return;
            }
            let Some(grad) = g.get(&k) else { return };
            let rate = lr * scale;
            let (m, v) = moments
                .entry(k)
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = grad.data()[i] * clip;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                *w -= rate * (update + wd * *w);
            }
        });
    }
}

#[cfg(test)]
#[allow(dead_code)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    struct Pair<P> {
        a: P,
        b: P,
    }

    crate::params::leaf_params!(Pair { a => "a", b => "b" });

    #[test]
    fn minimizes_quadratic_and_respects_freeze() {
        let mut p = Pair {
            a: Tensor::row_vector(vec![3.0, -2.0]),
            b: Tensor::row_vector(vec![1.0]),
        };
        let frozen = p.b.clone();
        let mut opt = AdamW::new(0.05);
        for _ in 0..2000 {
            let g = Pair {
                a: p.a.scale(2.0),
                b: p.b.scale(2.0),
            };
            opt.step(&mut p, &g, |k| if k == "b" { 0.0 } else { 1.0 });
        }
        assert!(p.a.max_abs() < 1e-3);
        assert_eq!(p.b, frozen);
    }

    #[test]
    fn first_step_moves_each_coordinate_by_lr() {
        let mut p = Pair {
            a: Tensor::row_vector(vec![0.0, 0.0]),
            b: Tensor::row_vector(vec![0.0]),
        };
        let g = Pair {
            a: Tensor::row_vector(vec![0.3, -0.01]),
            b: Tensor::row_vector(vec![0.2]),
        };
        let mut opt = AdamW::new(0.1);
        opt.clip_norm = None;
        opt.step(&mut p, &g, |_| 1.0);
        assert!((p.a.at(0, 0) + 0.1).abs() < 1e-6);
        assert!((p.a.at(0, 1) - 0.1).abs() < 1e-5);
    }
}
