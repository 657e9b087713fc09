//! Self-check suite: named properties across every module, each run over
//! several seeded trials. Used by `lpa verify`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::conversion::{count_surviving, elastic_net, eval_elastic_net, temperature_at, CurriculumSchedule};
use crate::gates::{periodic_gate, positional_gate, aperiodic_gate, rho_for_period, PulseSplit};
use crate::hardgate::{
    compile_layer, compile_positional, hard_forward, periodic_segments, DeltaMode, PositionalCache, Strategy,
};
use crate::mixer::{LpaConfig, LpaLayer};
use crate::numerics::{causal_dwconv, Backend, kernels, matmul, prefix_sum, range_sum, sigmoid, softmax, softplus, transpose, Tensor};
use crate::perfmodel::{attention_cost, lpa_cost, memory_table, Dtype, HardwareProfile, Precision};
use crate::reference::{AttentionConfig, AttentionLayer, EncoderConfig, ToyEncoder};

type Check = fn(&mut ChaCha8Rng, bool) -> Result<(), String>;

pub struct Property {
    pub name: &'static str,
    pub trials: usize,
    check: Check,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: &'static str,
    pub trials: usize,
    pub passed: bool,
    /// Seed of the first failing trial.
    pub seed: Option<u64>,
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub results: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> usize {
        self.results.iter().filter(|r| !r.passed).count()
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(r, c, |_, _| rng.gen_range(-scale..scale))
}

fn random_layer(rng: &mut ChaCha8Rng) -> LpaLayer {
    let heads = rng.gen_range(1..=2);
    let d = heads * 2 * rng.gen_range(1..=3);
    let split = PulseSplit {
        aperiodic: rng.gen_range(0..=2),
        periodic: rng.gen_range(1..=2),
        positional: rng.gen_range(0..=2),
    };
    let mut cfg = LpaConfig::new(d, heads, split);
    cfg.tau = rng.gen_range(0.3..2.0);
    cfg.bases = rng.gen_range(1..=4);
    cfg.kernel = rng.gen_range(1..=4);
    let mut layer = LpaLayer::init(cfg, rng.gen()).expect("valid config");
    for h in &mut layer.params.heads {
        h.wlogit = random_tensor(rng, 1, split.total(), 1.0);
        h.amp = random_tensor(rng, 1, split.total(), 1.5);
        h.periodic.rho = Tensor::from_fn(split.periodic, 1, |_, _| rho_for_period(rng.gen_range(4.5..16.0)));
        h.periodic.duty = random_tensor(rng, split.periodic, 1, 2.0);
    }
    layer
}

fn rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.max_abs_diff(b) / a.max_abs().max(b.max_abs()).max(1e-12)
}

fn softmax_normalized(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let n = rng.gen_range(1..20);
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
    let p = softmax(&v, rng.gen_range(0.01..3.0)).map_err(err)?;
    let s: f64 = p.iter().sum();
    ensure((s - 1.0).abs() < 1e-12 && p.iter().all(|&x| x >= 0.0), || format!("sum {s}"))
}

fn prefix_range_sum(rng: &mut ChaCha8Rng, fault: bool) -> Result<(), String> {
    let (n, d) = (rng.gen_range(1..40), rng.gen_range(1..5));
    let x = random_tensor(rng, n, d, 1.0);
    let s = rng.gen_range(0..n);
    let e = rng.gen_range(s..n);
    let got = range_sum(&prefix_sum(&x), s, e);
    for (c, g) in got.iter().enumerate() {
        let mut want: f64 = (s..=e).map(|t| x.at(t, c)).sum();
        if fault {
            want += 1e-3;
        }
        if (g - want).abs() > 1e-9 {
            return Err(format!("[{s},{e}] column {c}: {g} vs {want}"));
        }
    }
    Ok(())
}

fn matmul_transpose_identity(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let (m, k, n) = (rng.gen_range(1..7), rng.gen_range(1..7), rng.gen_range(1..7));
    let a = random_tensor(rng, m, k, 1.0);
    let b = random_tensor(rng, k, n, 1.0);
    let ab = matmul(&a, &b).map_err(err)?;
    let btat = matmul(&transpose(&b), &transpose(&a)).map_err(err)?;
    ensure(transpose(&ab).max_abs_diff(&btat) < 1e-12, || "(AB)^T != B^T A^T".into())
}

fn dwconv_causal(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let (n, d, k) = (rng.gen_range(2..20), rng.gen_range(1..4), rng.gen_range(1..5));
    let x = random_tensor(rng, n, d, 1.0);
    let w = random_tensor(rng, k, d, 1.0);
    let t0 = rng.gen_range(1..n);
    let mut x2 = x.clone();
    for t in t0..n {
        for c in 0..d {
            x2.set(t, c, rng.gen_range(-5.0..5.0));
        }
    }
    let a = causal_dwconv(&x, &w).map_err(err)?;
    let b = causal_dwconv(&x2, &w).map_err(err)?;
    ensure(a.slice_rows(0, t0) == b.slice_rows(0, t0), || format!("future rows leak before {t0}"))
}

fn sigmoid_softplus_identities(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let x: f64 = rng.gen_range(-30.0..30.0);
    let s = sigmoid(x);
    ensure(s > 0.0 && s < 1.0 || x.abs() > 25.0, || format!("sigmoid({x}) = {s}"))?;
    ensure((sigmoid(-x) - (1.0 - s)).abs() < 1e-12, || "sigmoid symmetry".into())?;
    ensure((softplus(x) - softplus(-x) - x).abs() < 1e-9, || "softplus(x) - softplus(-x) != x".into())
}

fn gates_in_unit_interval(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let layer = random_layer(rng);
    let n = rng.gen_range(1..16);
    let x = random_tensor(rng, n, layer.config.d, 1.0);
    let tau = rng.gen_range(0.05..3.0);
    let h = &layer.params.heads[0];
    let dh = layer.config.head_width();
    let mut mats = vec![periodic_gate(&h.periodic, n, tau).map_err(err)?];
    mats.push(positional_gate(&h.positional, n, tau).map_err(err)?);
    if layer.config.split.aperiodic > 0 {
        mats.push(aperiodic_gate(&x.slice_cols(0, dh), &h.aperiodic, tau).map_err(err)?.gates);
    }
    for g in mats {
        if let Some(v) = g.values.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(format!("gate value {v}"));
        }
    }
    Ok(())
}

fn periodic_is_periodic(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let layer = random_layer(rng);
    let mut p = layer.params.heads[0].periodic.clone();
    let period = rng.gen_range(5..12) as f64;
    p.rho.set(0, 0, rho_for_period(period));
    let n = 3 * period as usize;
    let g = periodic_gate(&p, n, rng.gen_range(0.1..2.0)).map_err(err)?;
    let actual = crate::gates::period_of(p.rho.at(0, 0));
    let shift = actual.round() as usize;
    for t in 0..n - shift {
        if (g.values.at(t, 0) - g.values.at(t + shift, 0)).abs() > 1e-6 {
            return Err(format!("period {actual}: g[{t}] != g[{}]", t + shift));
        }
    }
    Ok(())
}

fn positional_content_free(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let layer = random_layer(rng);
    let n = rng.gen_range(1..30);
    let p = &layer.params.heads[0].positional;
    let a = positional_gate(p, n, 0.7).map_err(err)?;
    let b = positional_gate(p, n, 0.7).map_err(err)?;
    ensure(a == b, || "positional gate not reproducible".into())
}

fn lower_temperature_sharpens(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let layer = random_layer(rng);
    let p = &layer.params.heads[0].periodic;
    let n = rng.gen_range(4..30);
    let hot = periodic_gate(p, n, 2.0).map_err(err)?;
    let cold = periodic_gate(p, n, 0.2).map_err(err)?;
    for (h, c) in hot.values.data().iter().zip(cold.values.data()) {
        if (c - 0.5).abs() + 1e-12 < (h - 0.5).abs() {
            return Err(format!("gate moved toward 0.5: {h} -> {c}"));
        }
    }
    Ok(())
}

fn mask_range(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let layer = random_layer(rng);
    let n = rng.gen_range(1..12);
    let x = random_tensor(rng, n, layer.config.d, 1.0);
    let out = layer.forward(&x).map_err(err)?;
    ensure(out.mask.iter().all(|&m| (0.0..1.0).contains(&m)), || format!("{:?}", out.mask))
}

fn f32_matches_f64(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let layer = random_layer(rng);
    let n = rng.gen_range(1..12);
    let x = random_tensor(rng, n, layer.config.d, 1.0);
    let a = layer.forward(&x).map_err(err)?.y;
    let b = layer.forward(&x.cast::<f32>()).map_err(err)?.y.cast::<f64>();
    let r = rel(&a, &b);
    ensure(r < 1e-4, || format!("relative difference {r}"))
}

fn periodic_pulse_permutation(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let mut layer = random_layer(rng);
    if layer.config.split.periodic < 2 {
        return Ok(());
    }
    let n = rng.gen_range(1..10);
    let x = random_tensor(rng, n, layer.config.d, 1.0);
    let before = layer.forward(&x).map_err(err)?.y;
    let a = layer.config.split.aperiodic;
    let (i, j) = (0, 1);
    for h in &mut layer.params.heads {
        for t in [&mut h.periodic.rho, &mut h.periodic.phase, &mut h.periodic.duty] {
            let (u, v) = (t.at(i, 0), t.at(j, 0));
            t.set(i, 0, v);
            t.set(j, 0, u);
        }
        for t in [&mut h.wlogit, &mut h.amp] {
            let (u, v) = (t.at(0, a + i), t.at(0, a + j));
            t.set(0, a + i, v);
            t.set(0, a + j, u);
        }
    }
    let after = layer.forward(&x).map_err(err)?.y;
    let r = rel(&before, &after);
    ensure(r < 1e-12, || format!("output changed by {r}"))
}

fn tape_gradient_matches_fd(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let layer = random_layer(rng);
    let n = rng.gen_range(1..6);
    let x = random_tensor(rng, n, layer.config.d, 1.0);
    let up = random_tensor(rng, x.rows(), x.cols(), 1.0);
    let g = layer.gradients(&x, &up, None).map_err(err)?;
    let f = |l: &LpaLayer| -> f64 {
        let y = l.forward(&x).expect("valid").y;
        y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
    };
    let h = 1e-5;
    let mut checked = 0;
    for (hi, head) in layer.params.heads.iter().enumerate() {
        for (which, t) in [("amp", &head.amp), ("wlogit", &head.wlogit)] {
            let k = rng.gen_range(0..t.len());
            let nudge = |delta: f64| {
                let mut l = layer.clone();
                let hp = &mut l.params.heads[hi];
                let t = if which == "amp" { &mut hp.amp } else { &mut hp.wlogit };
                t.data_mut()[k] += delta;
                l
            };
            let (plus, minus) = (nudge(h), nudge(-h));
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let gt = if which == "amp" { &g.params.heads[hi].amp } else { &g.params.heads[hi].wlogit };
            let an = gt.data()[k];
            let e = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            if e > 1e-4 {
                return Err(format!("head {hi} {which}[{k}]: tape {an} vs fd {fd}"));
            }
            checked += 1;
        }
    }
    ensure(checked > 0, || "nothing checked".into())
}

fn store_round_trip_is_stable(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let cfg = EncoderConfig {
        d_in: 3,
        d: 8,
        heads: 2,
        layers: 2,
        ffn_mult: 2,
    };
    let mut enc = ToyEncoder::new(cfg, rng.gen()).map_err(err)?;
    let mut lcfg = LpaConfig::new(8, 2, PulseSplit::uniform(1));
    lcfg.bases = 2;
    enc.set_lpa(1, LpaLayer::init(lcfg, rng.gen()).map_err(err)?).map_err(err)?;
    let once = crate::params::ParamStore::from_json(&enc.to_store().to_json().map_err(err)?).map_err(err)?;
    let loaded = ToyEncoder::from_store(&once).map_err(err)?;
    let twice = loaded.to_store();
    ensure(twice.to_json().map_err(err)? == once.to_json().map_err(err)?, || "store not idempotent".into())?;
    let x = random_tensor(rng, 5, 3, 1.0);
    let r = rel(&enc.hidden(&x).map_err(err)?, &loaded.hidden(&x).map_err(err)?);
    ensure(r < 1e-5, || format!("reloaded model differs by {r}"))
}

fn programs_well_formed(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let layer = random_layer(rng);
    let n = rng.gen_range(1..40);
    let x = random_tensor(rng, n, layer.config.d, 1.0);
    let progs = compile_layer(&x, &layer, None, DeltaMode::OneHot, None).map_err(err)?;
    for (h, p) in progs.iter().enumerate() {
        for q in &p.pulses {
            if !q.is_well_formed(x.rows()) {
                return Err(format!("head {h} pulse {}: {:?}", q.pulse, q.segments));
            }
        }
    }
    Ok(())
}

fn prefix_strategy_matches_dense(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let layer = random_layer(rng);
    let n = rng.gen_range(1..60);
    let x = random_tensor(rng, n, layer.config.d, 1.0);
    let progs = compile_layer(&x, &layer, None, DeltaMode::OneHot, None).map_err(err)?;
    let a = hard_forward(&x, &layer, &progs, Strategy::Dense).map_err(err)?.y;
    let b = hard_forward(&x, &layer, &progs, Strategy::PrefixSum).map_err(err)?.y;
    ensure(a.max_abs_diff(&b) < 1e-10, || format!("diff {}", a.max_abs_diff(&b)))
}

fn periodic_matches_thresholding(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let period = rng.gen_range(4.0..40.0);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let duty = rng.gen_range(0.0..1.0);
    let n = rng.gen_range(1..100);
    let segs = periodic_segments(period, phase, duty, 0.0, n);
    let thr = (PI * duty).cos();
    for t in 0..n {
        let c = (2.0 * PI * t as f64 / period - phase).cos();
        if (c - thr).abs() < 1e-9 {
            continue;
        }
        let on = segs.iter().any(|&(s, e)| s <= t && t <= e);
        if on != (c > thr) {
            return Err(format!("T={period} phi={phase} d={duty} t={t}: compiled {on}"));
        }
    }
    Ok(())
}

fn hard_indicator_is_soft_majority(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let layer = random_layer(rng);
    let n = rng.gen_range(1..40);
    let head = &layer.params.heads[0];
    let tau = 1e-6;
    let soft = positional_gate(&head.positional, n, tau).map_err(err)?;
    let hard = compile_positional(&head.positional, n, None);
    let z = crate::gates::positional_logits(&crate::numerics::Eager::<f64>::new(), &head.positional, n, None);
    for (q, prog) in hard.iter().enumerate() {
        for t in 0..n {
            if z.at(q, t).abs() < 1e-4 {
                continue;
            }
            if prog.contains(t) != (soft.values.at(t, q) > 0.5) {
                return Err(format!("pulse {q} t={t}"));
            }
        }
    }
    Ok(())
}

fn positional_cache_consistent(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let layer = random_layer(rng);
    let cache = PositionalCache::new();
    let p = &layer.params.heads[0].positional;
    let n = rng.gen_range(1..50);
    let a = cache.get_or_compile(p, n, None);
    let b = cache.get_or_compile(p, n, None);
    ensure(*a == compile_positional(p, n, None) && a == b && cache.len() == 1, || "cache mismatch".into())
}

fn roofline_totals_and_bounds(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let m4 = HardwareProfile::m4_pro();
    let t = rng.gen_range(1..20000);
    let d = 8 * rng.gen_range(1..200);
    for c in [
        attention_cost(t, d, 4, &m4, Precision::uniform(Dtype::F16)),
        lpa_cost(t, d, rng.gen_range(0..64), &m4, Precision::mixed()),
    ] {
        let sum: f64 = c.components.iter().map(|x| x.time_s).sum();
        ensure((sum - c.layer_time_s()).abs() <= 1e-15 * sum, || "total != sum".into())?;
        for x in &c.components {
            ensure(x.time_s >= x.compute_s && x.time_s >= x.memory_s, || format!("{} below a bound", x.name))?;
        }
    }
    Ok(())
}

fn projections_independent_of_pulses(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let m4 = HardwareProfile::m4_pro();
    let (t, d) = (rng.gen_range(1..10000), 4 * rng.gen_range(1..300));
    let a = lpa_cost(t, d, rng.gen_range(0..100), &m4, Precision::mixed());
    let b = lpa_cost(t, d, rng.gen_range(0..100), &m4, Precision::mixed());
    ensure(a.components[0] == b.components[0], || "projection cost depends on P".into())
}

fn memory_ratio_is_frames_over_pulses(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let s = rng.gen_range(1..300) as f64;
    let p = rng.gen_range(1..64);
    let row = &memory_table(&[s], 50.0, p, Dtype::F32)[0];
    let want = row.frames as f64 / p as f64;
    ensure((row.ratio() - want).abs() < 1e-9 * want, || format!("{} vs {want}", row.ratio()))
}

fn schedule_monotone(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let s = CurriculumSchedule {
        steps: rng.gen_range(1..200),
        ..Default::default()
    };
    for k in 1..s.steps + 5 {
        ensure(temperature_at(k, &s) <= temperature_at(k - 1, &s), || format!("step {k}"))?;
    }
    Ok(())
}

fn elastic_net_consistent(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let amps: Vec<Tensor<f64>> = (0..rng.gen_range(1..4)).map(|_| random_tensor(rng, 1, 5, 3.0)).collect();
    let (l1, l2) = (rng.gen_range(0.0..0.1), rng.gen_range(0.0..0.01));
    let tape = Tape::new();
    let vars: Vec<_> = amps.iter().map(|a| tape.leaf(a.clone())).collect();
    let t = tape.value(&eval_elastic_net(&tape, &vars, l1, l2)).at(0, 0);
    let d = elastic_net(&amps, l1, l2);
    ensure((t - d).abs() < 1e-10, || format!("{t} vs {d}"))
}

fn surviving_never_below_floor(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let a: Vec<f64> = (0..rng.gen_range(0..40)).map(|_| rng.gen_range(-1.0..1.0) * rng.gen_range(0.0..1.0f64).powi(4)).collect();
    let f = rng.gen_range(1..8);
    let k = count_surviving(&a, 0.1, f);
    ensure(k >= f.min(a.len()) && k <= a.len(), || format!("{k} of {} with floor {f}", a.len()))
}

fn attention_rows_stochastic(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let heads = rng.gen_range(1..=3);
    let cfg = AttentionConfig {
        position_slopes: (0..heads).map(|_| rng.gen_range(0.0..2.0)).collect(),
        ..AttentionConfig::new(2 * heads, heads)
    };
    let layer = AttentionLayer::init(cfg, rng.gen()).map_err(err)?;
    let n = rng.gen_range(1..12);
    let x = random_tensor(rng, n, 2 * heads, 2.0);
    for p in layer.probabilities(&x).map_err(err)? {
        for r in 0..p.rows() {
            let s: f64 = p.row(r).iter().sum();
            ensure((s - 1.0).abs() < 1e-12, || format!("row {r} sums to {s}"))?;
        }
    }
    Ok(())
}

fn pulse_weights_sum_to_one(rng: &mut ChaCha8Rng, _: bool) -> Result<(), String> {
    let layer = random_layer(rng);
    for h in &layer.params.heads {
        let w = kernels::softmax_rows(&h.wlogit);
        let s = w.sum();
        ensure((s - 1.0).abs() < 1e-12, || format!("weights sum to {s}"))?;
    }
    Ok(())
}

pub fn properties() -> Vec<Property> {
    let p = |name, trials, check: Check| Property { name, trials, check };
    vec![
        p("numerics.softmax_normalized", 50, softmax_normalized),
        p("numerics.prefix_range_sum", 50, prefix_range_sum),
        p("numerics.matmul_transpose_identity", 30, matmul_transpose_identity),
        p("numerics.dwconv_causal", 30, dwconv_causal),
        p("numerics.sigmoid_softplus_identities", 100, sigmoid_softplus_identities),
        p("gates.unit_interval", 30, gates_in_unit_interval),
        p("gates.periodic_is_periodic", 30, periodic_is_periodic),
        p("gates.positional_content_free", 20, positional_content_free),
        p("gates.lower_temperature_sharpens", 30, lower_temperature_sharpens),
        p("mixer.mask_range", 30, mask_range),
        p("mixer.pulse_weights_sum_to_one", 30, pulse_weights_sum_to_one),
        p("mixer.f32_matches_f64", 30, f32_matches_f64),
        p("mixer.periodic_pulse_permutation", 20, periodic_pulse_permutation),
        p("mixer.tape_gradient_matches_fd", 10, tape_gradient_matches_fd),
        p("reference.attention_rows_stochastic", 20, attention_rows_stochastic),
        p("reference.store_round_trip", 5, store_round_trip_is_stable),
        p("hardgate.programs_well_formed", 30, programs_well_formed),
        p("hardgate.prefix_matches_dense", 30, prefix_strategy_matches_dense),
        p("hardgate.periodic_matches_thresholding", 200, periodic_matches_thresholding),
        p("hardgate.indicator_is_soft_majority", 30, hard_indicator_is_soft_majority),
        p("hardgate.positional_cache_consistent", 20, positional_cache_consistent),
        p("perfmodel.totals_and_bounds", 50, roofline_totals_and_bounds),
        p("perfmodel.projections_independent_of_pulses", 50, projections_independent_of_pulses),
        p("perfmodel.memory_ratio", 50, memory_ratio_is_frames_over_pulses),
        p("conversion.schedule_monotone", 20, schedule_monotone),
        p("conversion.elastic_net_consistent", 30, elastic_net_consistent),
        p("conversion.surviving_never_below_floor", 100, surviving_never_below_floor),
    ]
}

/// Runs every property. Trial `i` of a property uses seed `base_seed + i`.
/// With `fault`, a deliberate error is injected into one reference
/// computation so the harness itself can be checked.
pub fn run(base_seed: u64, fault: bool) -> VerifyReport {
    let results = properties()
        .into_iter()
        .map(|prop| {
            for i in 0..prop.trials {
                let seed = base_seed.wrapping_add(i as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                if let Err(detail) = (prop.check)(&mut rng, fault) {
                    return PropertyResult {
                        name: prop.name,
                        trials: i + 1,
                        passed: false,
                        seed: Some(seed),
                        detail: Some(detail),
                    };
                }
            }
            PropertyResult {
                name: prop.name,
                trials: prop.trials,
                passed: true,
                seed: None,
                detail: None,
            }
        })
        .collect();
    VerifyReport { results }
}
