//! Test-only oracles shared by the integration and acceptance suites.
//!
//! Nothing here calls into the layer's forward code: the brute-force
//! evaluator recomputes every gate and every sum with scalar loops.

#![allow(dead_code)]

use std::f64::consts::PI;

use lpa_core::gates::PulseSplit;
use lpa_core::hardgate::saturation_report;
use lpa_core::mixer::{LpaConfig, LpaLayer};
use lpa_core::numerics::Tensor;
use lpa_core::params::Visit;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GUARD: f64 = 1e-8;

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

/// Per-pulse, per-position gate values of one head computed with scalar
/// loops: `g[p][t]`.
pub fn brute_gates(layer: &LpaLayer, x: &Tensor<f64>, head: usize, tau: f64, bias: &[f64]) -> Vec<Vec<f64>> {
    let cfg = &layer.config;
    let hp = &layer.params.heads[head];
    let n = x.rows();
    let dh = cfg.head_width();
    let off = head * dh;
    let mut g = Vec::new();
    let mut bias_iter = bias.iter().copied();

    if cfg.split.aperiodic > 0 {
        let ap = &hp.aperiodic;
        let k = ap.conv.rows();
        let half = dh / 2;
        // h[t][j]
        let mut h = vec![vec![0.0; half]; n];
        for t in 0..n {
            let mut conv = vec![0.0; dh];
            for (c, cv) in conv.iter_mut().enumerate() {
                for j in 0..k {
                    let src = t as isize - (k as isize - 1) + j as isize;
                    if src >= 0 {
                        *cv += ap.conv.at(j, c) * x.at(src as usize, off + c);
                    }
                }
            }
            let mut a1 = vec![0.0; dh];
            for (j, a) in a1.iter_mut().enumerate() {
                let mut s = ap.b1.at(0, j);
                for (i, cv) in conv.iter().enumerate() {
                    s += cv * ap.w1.at(i, j);
                }
                *a = gelu(s);
            }
            for j in 0..half {
                let mut s = ap.b2.at(0, j);
                for (i, a) in a1.iter().enumerate() {
                    s += a * ap.w2.at(i, j);
                }
                h[t][j] = s;
            }
        }
        for p in 0..cfg.split.aperiodic {
            let scores: Vec<f64> = (0..n)
                .map(|t| (0..half).map(|j| h[t][j] * ap.query.at(j, p)).sum::<f64>() / tau)
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            let wts: Vec<f64> = scores.iter().map(|s| (s - m).exp() / z).collect();
            let c: f64 = (0..n).map(|t| t as f64 * wts[t]).sum();
            let mut f = ap.width_b.at(0, 0);
            for j in 0..half {
                let hb: f64 = (0..n).map(|t| wts[t] * h[t][j]).sum();
                f += hb * ap.width_w.at(j, 0);
            }
            let w = softplus(f) + bias_iter.next().unwrap_or(0.0);
            g.push(
                (0..n)
                    .map(|t| {
                        let t = t as f64;
                        sig((t - c + w) / tau) * sig((c + w - t) / tau)
                    })
                    .collect(),
            );
        }
    }
    for p in 0..cfg.split.periodic {
        let pp = &hp.periodic;
        let period = 2f64.powf(softplus(pp.rho.at(p, 0)) + 2.0);
        let duty = sig(pp.duty.at(p, 0));
        let beta = bias_iter.next().unwrap_or(0.0);
        g.push(
            (0..n)
                .map(|t| {
                    let theta = 2.0 * PI * t as f64 / period - pp.phase.at(p, 0);
                    sig((theta.cos() - (PI * duty).cos() + beta) / tau)
                })
                .collect(),
        );
    }
    for p in 0..cfg.split.positional {
        let pq = &hp.positional;
        let beta = bias_iter.next().unwrap_or(0.0);
        g.push(
            (0..n)
                .map(|t| {
                    let s = if n > 1 { t as f64 / (n - 1) as f64 } else { 0.0 };
                    let mut z = pq.bias.at(p, 0) + beta;
                    for k in 0..pq.alpha.cols() {
                        let arg = 2.0 * PI * (k + 1) as f64 * s;
                        z += pq.alpha.at(p, k) * arg.sin() + pq.beta.at(p, k) * arg.cos();
                    }
                    sig(z / tau)
                })
                .collect(),
        );
    }
    g
}

/// Direct per-position evaluation of the gated accumulation with the
/// active mask, summed over heads and projected by `W_O`.
pub fn brute_forward(layer: &LpaLayer, x: &Tensor<f64>, tau: f64, prev: Option<&[f64]>) -> Tensor<f64> {
    let cfg = &layer.config;
    let (n, d) = x.dims();
    let dh = cfg.head_width();
    let ph = cfg.pulses_per_head();
    let pr = &layer.params;
    // value projection v[t][c] = sum_i x[t][i] W_V[i][c]
    let v: Vec<Vec<f64>> = (0..n)
        .map(|t| (0..d).map(|c| (0..d).map(|i| x.at(t, i) * pr.w_v.at(i, c)).sum()).collect())
        .collect();
    let bias: Vec<f64> = match (&pr.cross, prev) {
        (Some(proj), Some(prev)) => (0..proj.cols())
            .map(|q| (0..proj.rows()).map(|r| prev[r] * proj.at(r, q)).sum())
            .collect(),
        _ => vec![],
    };
    let mut concat = vec![vec![0.0; d]; n];
    let mut coverage = vec![0.0; n];
    for h in 0..cfg.heads {
        let hb: Vec<f64> = if bias.is_empty() { vec![] } else { bias[h * ph..(h + 1) * ph].to_vec() };
        let g = brute_gates(layer, x, h, tau, &hb);
        let hp = &pr.heads[h];
        let lz: Vec<f64> = (0..ph).map(|p| hp.wlogit.at(0, p)).collect();
        let mx = lz.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let zs: f64 = lz.iter().map(|l| (l - mx).exp()).sum();
        let w: Vec<f64> = lz.iter().map(|l| (l - mx).exp() / zs).collect();
        let mut vbar = vec![vec![0.0; dh]; ph];
        for p in 0..ph {
            let mass: f64 = g[p].iter().sum();
            if mass < GUARD {
                continue;
            }
            for c in 0..dh {
                vbar[p][c] = (0..n).map(|t| g[p][t] * v[t][h * dh + c]).sum::<f64>() / mass;
            }
        }
        for t in 0..n {
            let den: f64 = (0..ph).map(|p| w[p] * g[p][t]).sum();
            coverage[t] += (0..ph).map(|p| g[p][t]).sum::<f64>();
            if den < GUARD {
                continue;
            }
            for c in 0..dh {
                let num: f64 = (0..ph).map(|p| w[p] * g[p][t] * hp.amp.at(0, p) * vbar[p][c]).sum();
                concat[t][h * dh + c] = num / den;
            }
        }
    }
    Tensor::from_fn(n, d, |t, c| {
        let m = 1.0 - (-coverage[t]).exp();
        m * (0..d).map(|i| concat[t][i] * pr.w_o.at(i, c)).sum::<f64>()
    })
}

/// Random layer with every parameter perturbed away from its init.
pub fn random_layer(rng: &mut ChaCha8Rng, d: usize, heads: usize, split: PulseSplit, tau: f64, cross: Option<usize>) -> LpaLayer {
    let mut cfg = LpaConfig::new(d, heads, split);
    cfg.tau = tau;
    cfg.bases = rng.gen_range(1..=4);
    cfg.kernel = rng.gen_range(1..=5);
    cfg.cross_layer_inputs = cross;
    let mut layer = LpaLayer::init(cfg, rng.gen()).unwrap();
    layer.params.visit_mut("", &mut |k, t| {
        for v in t.data_mut() {
            let jitter = if k.ends_with("rho") || k.ends_with("width.b") {
                rng.gen_range(-1.0..1.0)
            } else {
                rng.gen_range(-0.8..0.8)
            };
            *v += jitter;
        }
        if k.ends_with("amp") || k.ends_with("wlogit") {
            for v in t.data_mut() {
                *v = rng.gen_range(-1.5..1.5);
            }
        }
    });
    layer
}

/// Random instance sizes: `n <= 8`, `d <= 8`, `P <= 4` per head, `H in {1, 2}`.
pub fn random_small_instance(seed: u64) -> (LpaLayer, Tensor<f64>, Option<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = rng.gen_range(1..=2);
    let dh = 2 * rng.gen_range(1..=(4 / heads));
    let d = dh * heads;
    let n = rng.gen_range(1..=8);
    let total = rng.gen_range(1..=4);
    let a = rng.gen_range(0..=total);
    let pp = rng.gen_range(0..=(total - a));
    let split = PulseSplit { aperiodic: a, periodic: pp, positional: total - a - pp };
    let tau = rng.gen_range(0.3..2.5);
    let cross = if rng.gen_bool(0.3) { Some(rng.gen_range(1..=5)) } else { None };
    let layer = random_layer(&mut rng, d, heads, split, tau, cross);
    let x = Tensor::from_fn(n, d, |_, _| rng.gen_range(-2.0..2.0));
    let prev = cross.map(|c| (0..c).map(|_| rng.gen_range(0.0..1.0)).collect());
    (layer, x, prev)
}

/// Outcome of a finite-difference comparison over every parameter element.
#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_key: String,
}

/// Relative error with a floor on the denominator: gradients whose
/// magnitude is below `floor` are compared on an absolute scale of `floor`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central differences (step `h`) of `sum(upstream * y)` for every
/// parameter element and every input element.
pub fn finite_difference_check(layer: &LpaLayer, x: &Tensor<f64>, upstream: &Tensor<f64>, prev: Option<&[f64]>, h: f64, floor: f64) -> GradCheck {
    let objective = |l: &LpaLayer, x: &Tensor<f64>| -> f64 {
        let y = l.forward_with(x, l.config.tau, prev).unwrap().y;
        y.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
    };
    let grads = layer.gradients(x, upstream, prev).unwrap();
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    grads.params.visit("", &mut |k, t| analytic.push((k, t.data().to_vec())));
    let mut report = GradCheck::default();

    for (key, an) in &analytic {
        for e in 0..an.len() {
            let bump = |delta: f64| {
                let mut l = layer.clone();
                l.params.visit_mut("", &mut |k, t| {
                    if &k == key {
                        t.data_mut()[e] += delta;
                    }
                });
                objective(&l, x)
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            let r = rel_err(an[e], fd, floor);
            report.checked += 1;
            if r > report.worst_rel {
                report.worst_rel = r;
                report.worst_key = format!("{key}[{e}] analytic {:.3e} fd {:.3e}", an[e], fd);
            }
        }
    }
    for e in 0..x.len() {
        let bump = |delta: f64| {
            let mut xx = x.clone();
            xx.data_mut()[e] += delta;
            objective(layer, &xx)
        };
        let fd = (bump(h) - bump(-h)) / (2.0 * h);
        let r = rel_err(grads.x.data()[e], fd, floor);
        report.checked += 1;
        if r > report.worst_rel {
            report.worst_rel = r;
            report.worst_key = format!("x[{e}]");
        }
    }
    report
}

/// Rejection-samples small layers at temperature `tau` whose every
/// pre-sigmoid numerator and aperiodic argmax gap on their input clears
/// `margin`. Returns up to `count` instances and the number of draws made.
pub fn saturated_instances(tau: f64, margin: f64, count: usize, max_draws: usize) -> (Vec<(LpaLayer, Tensor<f64>)>, usize) {
    let mut out = Vec::new();
    let mut draws = 0;
    while out.len() < count && draws < max_draws {
        draws += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(draws as u64);
        let heads = rng.gen_range(1..=2);
        let d = 4 * heads;
        let total = rng.gen_range(1..=4);
        let a = rng.gen_range(0..=total);
        let pp = rng.gen_range(0..=(total - a));
        let split = PulseSplit { aperiodic: a, periodic: pp, positional: total - a - pp };
        let layer = random_layer(&mut rng, d, heads, split, tau, None);
        let n = rng.gen_range(2..=12);
        let x = Tensor::from_fn(n, d, |_, _| rng.gen_range(-2.0..2.0));
        if saturation_report(&x, &layer, None, tau, margin).unwrap().satisfied() {
            out.push((layer, x));
        }
    }
    (out, draws)
}

/// Integer thresholding of a periodic pulse: positions where
/// `cos(2 pi t / T - phi) > cos(pi d)`, plus the positions within `eps` of
/// the threshold, which either answer may claim.
pub fn periodic_threshold(period: f64, phase: f64, duty: f64, n: usize, eps: f64) -> (Vec<bool>, Vec<bool>) {
    let thr = (PI * duty).cos();
    let mut on = vec![false; n];
    let mut boundary = vec![false; n];
    for t in 0..n {
        let c = (2.0 * PI * t as f64 / period - phase).cos();
        on[t] = c > thr;
        boundary[t] = (c - thr).abs() < eps;
    }
    (on, boundary)
}

/// Dense membership of inclusive segments.
pub fn segments_to_mask(segments: &[(usize, usize)], n: usize) -> Vec<bool> {
    let mut m = vec![false; n];
    for &(s, e) in segments {
        for v in &mut m[s..=e.min(n.saturating_sub(1))] {
            *v = true;
        }
    }
    m
}
