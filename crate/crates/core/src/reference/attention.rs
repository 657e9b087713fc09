use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LpaError, Result};
use crate::numerics::{Backend, Eager, Real, Tensor};
use crate::params::leaf_params;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d: usize,
    pub heads: usize,
    /// Optional per-head slopes `s_h`; scores get `-s_h |i - j|` added
    /// before the softmax. Empty means no positional bias.
    #[serde(default)]
    pub position_slopes: Vec<f64>,
}

impl AttentionConfig {
    pub fn new(d: usize, heads: usize) -> Self {
        Self {
            d,
            heads,
            position_slopes: vec![],
        }
    }

    pub fn head_width(&self) -> usize {
        self.d / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d == 0 || self.d % self.heads != 0 {
            return Err(LpaError::Config(format!(
                "d = {} must be a positive multiple of heads = {}",
                self.d, self.heads
            )));
        }
        if !self.position_slopes.is_empty() && self.position_slopes.len() != self.heads {
            return Err(LpaError::Config(format!(
                "{} position slopes for {} heads",
                self.position_slopes.len(),
                self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<P> {
    pub w_q: P,
    pub w_k: P,
    pub w_v: P,
    pub w_o: P,
}

leaf_params!(AttentionParams {
    w_q => "W_Q",
    w_k => "W_K",
    w_v => "W_V",
    w_o => "W_O",
});

impl AttentionParams<Tensor<f64>> {
    /// Uniform init with variance `1/d` per entry.
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        let a = (3.0 / d as f64).sqrt();
        let mut m = || Tensor::from_fn(d, d, |_, _| rng.gen_range(-a..a));
        Self {
            w_q: m(),
            w_k: m(),
            w_v: m(),
            w_o: m(),
        }
    }
}

fn distance_bias(n: usize, slope: f64) -> Tensor<f64> {
    Tensor::from_fn(n, n, |i, j| -slope * (i as f64 - j as f64).abs())
}

/// Per-head score probabilities, each `n x n` with rows summing to one.
pub fn eval_attention_probs<B: Backend>(
    b: &B,
    x: &B::M,
    p: &AttentionParams<B::M>,
    cfg: &AttentionConfig,
) -> (Vec<B::M>, B::M) {
    let (n, _) = b.dims(x);
    let dh = cfg.head_width();
    let q = b.matmul(x, &p.w_q);
    let k = b.matmul(x, &p.w_k);
    let v = b.matmul(x, &p.w_v);
    let scale = 1.0 / (dh as f64).sqrt();
    let probs = (0..cfg.heads)
        .map(|h| {
            let qs = b.slice_cols(&q, h * dh, (h + 1) * dh);
            let ks = b.slice_cols(&k, h * dh, (h + 1) * dh);
            let mut scores = b.scale(&b.matmul(&qs, &b.transpose(&ks)), scale);
            if let Some(&s) = cfg.position_slopes.get(h) {
                if s != 0.0 {
                    scores = b.add(&scores, &b.constant(distance_bias(n, s)));
                }
            }
            b.softmax_rows(&scores)
        })
        .collect();
    (probs, v)
}

/// Multi-head scaled dot-product attention, `n x d`.
pub fn eval_attention<B: Backend>(
    b: &B,
    x: &B::M,
    p: &AttentionParams<B::M>,
    cfg: &AttentionConfig,
) -> B::M {
    let dh = cfg.head_width();
    let (probs, v) = eval_attention_probs(b, x, p, cfg);
    let outs: Vec<B::M> = probs
        .iter()
        .enumerate()
        .map(|(h, a)| b.matmul(a, &b.slice_cols(&v, h * dh, (h + 1) * dh)))
        .collect();
    let joined = if outs.len() == 1 {
        outs.into_iter().next().unwrap()
    } else {
        b.concat_cols(&outs)
    };
    b.matmul(&joined, &p.w_o)
}

/// Softmax attention layer with f64 master parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub config: AttentionConfig,
    pub params: AttentionParams<Tensor<f64>>,
}

impl AttentionLayer {
    pub fn init(config: AttentionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = AttentionParams::init(config.d, &mut rng);
        Ok(Self { config, params })
    }

    fn check(&self, x_shape: &[usize]) -> Result<()> {
        self.config.validate()?;
        let d = self.config.d;
        for (name, w) in [
            ("W_Q", &self.params.w_q),
            ("W_K", &self.params.w_k),
            ("W_V", &self.params.w_v),
            ("W_O", &self.params.w_o),
        ] {
            if w.dims() != (d, d) {
                return Err(LpaError::Shape(format!("{name} is {:?}, expected {d}x{d}", w.shape())));
            }
        }
        if x_shape.len() != 2 || x_shape[1] != d {
            return Err(LpaError::Shape(format!("attention with d = {d} got input {x_shape:?}")));
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x.shape())?;
        if x.rows() == 0 {
            return Ok(Tensor::zeros(0, self.config.d));
        }
        let b = Eager::<T>::new();
        let p = self.params.map(&mut |t| t.cast::<T>());
        Ok(eval_attention(&b, x, &p, &self.config))
    }

    /// Score probabilities per head.
    pub fn probabilities(&self, x: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        self.check(x.shape())?;
        let b = Eager::<f64>::new();
        Ok(eval_attention_probs(&b, x, &self.params, &self.config).0)
    }
}

/// Attention forward on an `n x d` input.
pub fn attention_forward<T: Real>(x: &Tensor<T>, layer: &AttentionLayer) -> Result<Tensor<T>> {
    layer.forward(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matmul;

    fn layer(d: usize, heads: usize, seed: u64) -> AttentionLayer {
        AttentionLayer::init(AttentionConfig::new(d, heads), seed).unwrap()
    }

    #[test]
    fn single_token_passes_value_through() {
        let l = layer(6, 2, 1);
        let x = Tensor::from_fn(1, 6, |_, c| c as f64 - 2.5);
        let y = l.forward(&x).unwrap();
        let expect = matmul(&matmul(&x, &l.params.w_v).unwrap(), &l.params.w_o).unwrap();
        assert!(y.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn identical_tokens_give_identical_outputs() {
        let l = layer(4, 2, 2);
        let x = Tensor::from_fn(5, 4, |_, c| 0.3 * c as f64 - 0.2);
        let y = l.forward(&x).unwrap();
        for t in 1..5 {
            for c in 0..4 {
                assert!((y.at(t, c) - y.at(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_pairwise_loop_oracle() {
        let l = layer(8, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn(4, 8, |_, _| rng.gen_range(-1.0..1.0));
        let y = l.forward(&x).unwrap();
        let p = &l.params;
        let proj = |w: &Tensor<f64>, t: usize, c: usize| (0..8).map(|i| x.at(t, i) * w.at(i, c)).sum::<f64>();
        let mut concat = vec![vec![0.0; 8]; 4];
        for h in 0..2 {
            for i in 0..4 {
                let scores: Vec<f64> = (0..4)
                    .map(|j| {
                        (0..4)
                            .map(|c| proj(&p.w_q, i, h * 4 + c) * proj(&p.w_k, j, h * 4 + c))
                            .sum::<f64>()
                            / 2.0
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for j in 0..4 {
                    let a = (scores[j] - m).exp() / z;
                    for c in 0..4 {
                        concat[i][h * 4 + c] += a * proj(&p.w_v, j, h * 4 + c);
                    }
                }
            }
        }
        for i in 0..4 {
            for c in 0..8 {
                let o: f64 = (0..8).map(|k| concat[i][k] * p.w_o.at(k, c)).sum();
                assert!((y.at(i, c) - o).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn probability_rows_sum_to_one_with_position_bias() {
        let mut cfg = AttentionConfig::new(4, 2);
        cfg.position_slopes = vec![0.0, 2.0];
        let l = AttentionLayer::init(cfg, 4).unwrap();
        let x = Tensor::from_fn(7, 4, |t, c| ((t * 3 + c) % 5) as f64 * 0.4);
        for p in l.probabilities(&x).unwrap() {
            for r in 0..7 {
                assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_bad_shapes_and_configs() {
        assert!(AttentionLayer::init(AttentionConfig::new(6, 4), 0).is_err());
        let l = layer(4, 1, 0);
        assert!(l.forward(&Tensor::<f64>::zeros(3, 5)).is_err());
    }
}
