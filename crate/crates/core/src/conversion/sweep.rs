use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LpaError, Result};
use crate::gates::PulseSplit;
use crate::mixer::{LpaConfig, LpaLayer};
use crate::numerics::{Backend, Tensor};
use crate::reference::ToyEncoder;

use super::init::selective_init;
use super::train::{fit_lpa_to_pairs, FitOptions, TapPair};

pub const SWEEP_HEADER: &str = "layer,mse,surviving,order_rank";
const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepHyperparams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub theta: f64,
    pub floor: usize,
    pub epochs: usize,
    /// Base pulses per family per head; the sweep uses `overprovision` times as many.
    pub base_split: PulseSplit,
    pub overprovision: usize,
    pub lr: f64,
    pub batch: usize,
    pub tau: f64,
    pub seed: u64,
}

impl Default for SweepHyperparams {
    fn default() -> Self {
        Self {
            lambda1: 0.01,
            lambda2: 0.001,
            theta: 0.1,
            floor: 4,
            epochs: 2,
            base_split: PulseSplit::uniform(2),
            overprovision: 3,
            lr: 5e-4,
            batch: 4,
            tau: 1.0,
            seed: 0,
        }
    }
}

impl SweepHyperparams {
    pub fn sweep_split(&self) -> PulseSplit {
        let k = self.overprovision.max(1);
        PulseSplit {
            aperiodic: self.base_split.aperiodic * k,
            periodic: self.base_split.periodic * k,
            positional: self.base_split.positional * k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(LpaError::Config("elastic-net weights must be non-negative".into()));
        }
        if self.floor == 0 {
            return Err(LpaError::Config("pruning floor must be at least 1".into()));
        }
        if !(self.tau > 0.0) || !(self.lr > 0.0) {
            return Err(LpaError::Config("sweep tau and lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSweep {
    pub layer: usize,
    /// Mean squared error over all elements of all samples; NaN if failed.
    pub mse: f64,
    pub surviving: usize,
    pub total_pulses: usize,
    /// Counts of `|a| / max|a|` in ten equal bins over `[0, 1]`.
    pub amplitude_histogram: Vec<usize>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub layers: Vec<LayerSweep>,
    /// Layers sorted by increasing MSE; failed layers last.
    pub order: Vec<usize>,
}

impl SweepReport {
    pub fn rank_of(&self, layer: usize) -> Option<usize> {
        self.order.iter().position(|&l| l == layer)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{SWEEP_HEADER}\n");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                l.layer,
                l.mse,
                l.surviving,
                self.rank_of(l.layer).unwrap_or(usize::MAX)
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|source| LpaError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// `lambda1 * sum|a| + lambda2 * sum a^2` on any backend, as a `1 x 1` node.
pub fn eval_elastic_net<B: Backend>(b: &B, amps: &[B::M], lambda1: f64, lambda2: f64) -> B::M {
    let mut total = b.constant(Tensor::scalar(0.0));
    for a in amps {
        let l1 = b.scale(&b.sum_all(&b.abs(a)), lambda1);
        let l2 = b.scale(&b.sum_all(&b.mul(a, a)), lambda2);
        total = b.add(&total, &b.add(&l1, &l2));
    }
    total
}

pub fn elastic_net(amps: &[Tensor<f64>], lambda1: f64, lambda2: f64) -> f64 {
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for a in amps {
        for &v in a.data() {
            l1 += v.abs();
            l2 += v * v;
        }
    }
    lambda1 * l1 + lambda2 * l2
}

/// Pulses with `|a| > theta * max|a|`, but never fewer than `floor` (or all
/// pulses, if there are fewer than `floor`).
pub fn count_surviving(amps: &[f64], theta: f64, floor: usize) -> usize {
    let max = amps.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let above = amps.iter().filter(|a| a.abs() > theta * max).count();
    above.max(floor.min(amps.len()))
}

fn histogram(amps: &[f64]) -> Vec<usize> {
    let max = amps.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let mut h = vec![0; HISTOGRAM_BINS];
    for a in amps {
        let r = if max > 0.0 { a.abs() / max } else { 0.0 };
        h[((r * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)] += 1;
    }
    h
}

fn amplitudes(layer: &LpaLayer) -> Vec<f64> {
    layer
        .params
        .heads
        .iter()
        .flat_map(|h| h.amp.data().iter().copied())
        .collect()
}

fn layer_mse(layer: &LpaLayer, pairs: &[TapPair], tau: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for p in pairs {
        let y = layer.forward_with(&p.input, tau, None)?.y;
        for (a, b) in y.data().iter().zip(p.target.data()) {
            total += (a - b) * (a - b);
        }
        count += y.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Probes every attention layer: swaps in an overprovisioned LPA layer,
/// fits it to that layer's input/output taps with an elastic-net penalty on
/// the amplitudes, records the MSE and surviving pulse count, and puts the
/// original attention back.
pub fn mse_sweep(teacher: &mut ToyEncoder, data: &[Tensor<f64>], hp: &SweepHyperparams) -> Result<SweepReport> {
    hp.validate()?;
    if data.is_empty() {
        return Err(LpaError::Config("sweep needs at least one sample".into()));
    }
    let mut taps: Vec<Vec<TapPair>> = vec![Vec::with_capacity(data.len()); teacher.layers()];
    for x in data {
        let out = teacher.forward(x)?;
        for (l, t) in out.taps.into_iter().enumerate() {
            taps[l].push(TapPair {
                input: t.mix_input,
                target: t.mix_output,
            });
        }
    }
    let mut layers = Vec::with_capacity(teacher.layers());
    for (l, pairs) in taps.iter().enumerate() {
        let original = teacher
            .attention_layer(l)
            .ok_or_else(|| LpaError::Config(format!("layer {l} is not an attention layer")))?;
        let mut cfg = LpaConfig::new(teacher.config.d, original.config.heads, hp.sweep_split());
        cfg.tau = hp.tau;
        let seed = hp.seed.wrapping_add(l as u64);
        teacher.set_lpa(l, selective_init(&original, cfg, seed)?)?;
        let mut probe = teacher.lpa_layer(l).expect("just placed");
        let opts = FitOptions {
            epochs: hp.epochs,
            batch: hp.batch,
            lr: hp.lr,
            taus: vec![hp.tau],
            elastic_net: Some((hp.lambda1, hp.lambda2)),
            seed,
        };
        let losses = fit_lpa_to_pairs(&mut probe, pairs, &opts);
        let fitted = teacher.set_lpa(l, probe.clone());
        teacher.set_attention(l, original)?;
        fitted?;

        let amps = amplitudes(&probe);
        let diverged = losses.last().is_some_and(|v| !v.is_finite()) || amps.iter().any(|a| !a.is_finite());
        let mse = if diverged { f64::NAN } else { layer_mse(&probe, pairs, hp.tau)? };
        let failure = if diverged || !mse.is_finite() {
            Some(format!(
                "loss diverged after {} steps (last {:?})",
                losses.len(),
                losses.last()
            ))
        } else {
            None
        };
        layers.push(LayerSweep {
            layer: l,
            mse: if failure.is_some() { f64::NAN } else { mse },
            surviving: count_surviving(&amps, hp.theta, hp.floor),
            total_pulses: amps.len(),
            amplitude_histogram: histogram(&amps),
            failure,
        });
    }
    let key = |s: &LayerSweep| if s.failure.is_some() { f64::INFINITY } else { s.mse };
    let mut order: Vec<usize> = (0..layers.len()).collect();
    order.sort_by(|&a, &b| key(&layers[a]).total_cmp(&key(&layers[b])).then(a.cmp(&b)));
    Ok(SweepReport { layers, order })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn surviving_respects_floor() {
        let a = [1.0, 0.05, 0.5, 0.01, 0.0, 0.2];
        assert_eq!(count_surviving(&a, 0.1, 1), 3);
        assert_eq!(count_surviving(&a, 0.1, 4), 4);
        assert_eq!(count_surviving(&a[..2], 0.1, 4), 2);
        assert_eq!(count_surviving(&[0.0; 5], 0.1, 4), 4);
    }

    #[test]
    fn penalty_on_tape_matches_direct_sum() {
        let amps = vec![
            Tensor::row_vector(vec![0.5, -1.25, 2.0]),
            Tensor::row_vector(vec![-0.1, 0.0, 3.0]),
        ];
        let tape = Tape::new();
        let vars: Vec<_> = amps.iter().map(|a| tape.leaf(a.clone())).collect();
        let v = tape.value(&eval_elastic_net(&tape, &vars, 0.01, 0.001)).at(0, 0);
        assert!((v - elastic_net(&amps, 0.01, 0.001)).abs() < 1e-10);
    }

    #[test]
    fn histogram_bins() {
        let h = histogram(&[1.0, 0.05, 0.55, -1.0]);
        assert_eq!(h[0], 1);
        assert_eq!(h[5], 1);
        assert_eq!(h[9], 2);
    }

    #[test]
    fn csv_layout() {
        let mk = |layer, mse| LayerSweep {
            layer,
            mse,
            surviving: 4,
            total_pulses: 6,
            amplitude_histogram: vec![0; 10],
            failure: None,
        };
        let r = SweepReport {
            layers: vec![mk(0, 0.5), mk(1, 0.25)],
            order: vec![1, 0],
        };
        assert_eq!(r.to_csv(), "layer,mse,surviving,order_rank\n0,0.5,4,1\n1,0.25,4,0\n");
    }
}
