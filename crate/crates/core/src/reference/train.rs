use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::numerics::Backend;
use crate::optim::AdamW;

use super::data::Sample;
use super::encoder::{eval_encoder, eval_mse, eval_readout, ToyEncoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherTraining {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TeacherTraining {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 8,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Trains every parameter on the denoising objective
/// `mean((readout(noisy) - clean)^2)`. Returns the per-step batch loss.
pub fn train_teacher(enc: &mut ToyEncoder, data: &[Sample], cfg: &TeacherTraining) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let taus = enc.taus();
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let tape = Tape::new();
        let p = enc.bind(&tape, &|_| true);
        let mut total = None;
        for _ in 0..cfg.batch.max(1) {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let s = &data[order[cursor]];
            cursor += 1;
            let x = tape.constant(s.noisy.clone());
            let tr = eval_encoder(&tape, &x, &p, &enc.mixers, &taus);
            let y = eval_readout(&tape, &tr.hidden, &p);
            let l = eval_mse(&tape, &y, &tape.constant(s.clean.clone()));
            total = Some(match total {
                Some(acc) => tape.add(&acc, &l),
                None => l,
            });
        }
        let loss = tape.scale(&total.unwrap(), 1.0 / cfg.batch.max(1) as f64);
        losses.push(tape.value(&loss).at(0, 0));
        let g = tape.backward(loss);
        let grads = p.map(&mut |v| g.get(*v));
        opt.step(&mut enc.params, &grads, |_| 1.0);
    }
    losses
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::data::{dataset, SyntheticConfig};
    use crate::reference::EncoderConfig;

    #[test]
    fn denoising_loss_decreases() {
        let data_cfg = SyntheticConfig {
            length: 24,
            channels: 4,
            ..Default::default()
        };
        let data = dataset(&data_cfg, 16, 1);
        let cfg = EncoderConfig {
            d_in: 4,
            d: 8,
            heads: 2,
            layers: 2,
            ffn_mult: 2,
        };
        let mut enc = ToyEncoder::new(cfg, 2).unwrap();
        let losses = train_teacher(
            &mut enc,
            &data,
            &TeacherTraining {
                steps: 60,
                batch: 4,
                lr: 5e-3,
                seed: 3,
            },
        );
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < 0.7 * head, "{head} -> {tail}");
    }
}
