use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::mixer::{eval_lpa, LpaLayer};
use crate::numerics::{Backend, Tensor};
use crate::optim::AdamW;
use crate::params::Visit;
use crate::reference::eval_mse;

use super::sweep::eval_elastic_net;

/// Mixer input and the output the layer should reproduce.
#[derive(Debug, Clone, PartialEq)]
pub struct TapPair {
    pub input: Tensor<f64>,
    pub target: Tensor<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Temperature at each optimizer step.
    pub taus: Vec<f64>,
    /// `(lambda1, lambda2)` elastic-net weights on the amplitudes.
    pub elastic_net: Option<(f64, f64)>,
    pub seed: u64,
}

impl FitOptions {
    pub fn steps(&self, pairs: usize) -> usize {
        self.epochs * pairs.div_ceil(self.batch.max(1))
    }

    fn tau(&self, step: usize) -> f64 {
        self.taus
            .get(step)
            .or(self.taus.last())
            .copied()
            .unwrap_or(1.0)
    }
}

/// Trains one LPA layer in isolation on tap pairs. Returns per-step losses;
/// stops early (last loss non-finite) if the loss diverges.
pub fn fit_lpa_to_pairs(layer: &mut LpaLayer, pairs: &[TapPair], opts: &FitOptions) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = AdamW::new(opts.lr);
    let mut keys = Vec::new();
    layer.params.visit("", &mut |k, _| keys.push(k));
    let batch = opts.batch.max(1);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut losses = Vec::new();
    for step in 0..opts.steps(pairs.len()) {
        let start = (step * batch) % pairs.len().max(1);
        if start == 0 {
            order.shuffle(&mut rng);
        }
        let idx = &order[start..(start + batch).min(order.len())];
        let tape = Tape::new();
        let all = |_: &str| true;
        let p = layer.params.map(&mut tape.binder(&keys, &all));
        let tau = opts.tau(step);
        let mut total: Option<Var> = None;
        for &i in idx {
            let x = tape.constant(pairs[i].input.clone());
            let y = eval_lpa(&tape, &x, &p, &layer.config, tau, None).y;
            let l = eval_mse(&tape, &y, &tape.constant(pairs[i].target.clone()));
            total = Some(match total {
                Some(acc) => tape.add(&acc, &l),
                None => l,
            });
        }
        let Some(total) = total else { break };
        let mut loss = tape.scale(&total, 1.0 / idx.len() as f64);
        let fit = tape.value(&loss).at(0, 0);
        if let Some((l1, l2)) = opts.elastic_net {
            let amps: Vec<Var> = p.heads.iter().map(|h| h.amp).collect();
            loss = tape.add(&loss, &eval_elastic_net(&tape, &amps, l1, l2));
        }
        losses.push(fit);
        if !tape.value(&loss).at(0, 0).is_finite() {
            break;
        }
        let g = tape.backward(loss);
        let grads = p.map(&mut |v| g.get(*v));
        opt.step(&mut layer.params, &grads, |_| 1.0);
    }
    losses
}
