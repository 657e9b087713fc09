mod common;

use std::f64::consts::PI;

use common::{periodic_threshold, random_layer, saturated_instances, segments_to_mask};
use lpa_core::gates::{logit, periodic_gate, positional_gate, rho_for_period, PeriodicParams, PositionalParams, PulseSplit};
use lpa_core::hardgate::{
    compile_layer, compile_periodic, compile_positional, hard_encoder_forward, hard_forward, hard_layer_forward,
    DeltaMode, HardOptions, PositionalCache, Strategy,
};
use lpa_core::mixer::{LpaConfig, LpaLayer};
use lpa_core::numerics::Tensor;
use lpa_core::reference::{EncoderConfig, ToyEncoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn periodic_params(period: f64, phase: f64, duty: f64) -> PeriodicParams<Tensor<f64>> {
    PeriodicParams {
        rho: Tensor::col_vector(vec![rho_for_period(period)]),
        phase: Tensor::col_vector(vec![phase]),
        duty: Tensor::col_vector(vec![logit(duty)]),
    }
}

#[test]
fn periodic_programs_match_integer_thresholding() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for draw in 0..1000 {
        let period = rng.gen_range(4.5..600.0);
        let phase = rng.gen_range(-PI..3.0 * PI);
        let duty = rng.gen_range(0.01..0.99);
        let n = rng.gen_range(1..400);
        let p = periodic_params(period, phase, duty);
        let prog = &compile_periodic(&p, n, None)[0];
        assert!(prog.is_well_formed(n));
        let got = segments_to_mask(&prog.segments, n);
        let (want, boundary) = periodic_threshold(period, phase, duty, n, 1e-9);
        let soft = periodic_gate(&p, n, 1e-6).unwrap();
        for t in (0..n).filter(|&t| !boundary[t]) {
            assert_eq!(got[t], want[t], "draw {draw}: T={period} phi={phase} d={duty} t={t}");
            assert_eq!(soft.values.at(t, 0) > 0.5, want[t], "draw {draw} t={t}");
        }
    }
}

#[test]
fn positional_programs_match_soft_majority_at_length_500() {
    let n = 500;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let pulses = rng.gen_range(1..5);
        let k = rng.gen_range(1..9);
        let p = PositionalParams {
            alpha: Tensor::from_fn(pulses, k, |_, _| rng.gen_range(-1.0..1.0)),
            beta: Tensor::from_fn(pulses, k, |_, _| rng.gen_range(-1.0..1.0)),
            bias: Tensor::from_fn(pulses, 1, |_, _| rng.gen_range(-0.5..0.5)),
        };
        let progs = compile_positional(&p, n, None);
        let soft = positional_gate(&p, n, 1e-6).unwrap();
        for (q, prog) in progs.iter().enumerate() {
            assert!(prog.is_well_formed(n));
            for t in 0..n {
                let g = soft.values.at(t, q);
                if (g - 0.5).abs() < 1e-3 {
                    continue;
                }
                assert_eq!(prog.contains(t), g > 0.5, "pulse {q} t={t} g={g}");
            }
        }
    }
}

#[test]
fn positional_cache_returns_identical_programs() {
    let cache = PositionalCache::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = PositionalParams::init(3, 4, &mut rng);
    let a = cache.get_or_compile(&p, 500, None);
    let b = cache.get_or_compile(&p, 500, None);
    assert_eq!(*a, compile_positional(&p, 500, None));
    assert_eq!(a, b);
    cache.get_or_compile(&p, 499, None);
    assert_eq!(cache.len(), 2);
}

fn prefix_vs_dense<T: lpa_core::numerics::Real>(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = random_layer(&mut rng, 16, 2, PulseSplit { aperiodic: 2, periodic: 2, positional: 2 }, 1.0, None);
    let x = Tensor::from_fn(200, 16, |_, _| rng.gen_range(-2.0..2.0));
    let progs = compile_layer(&x, &layer, None, DeltaMode::OneHot, None).unwrap();
    let xt: Tensor<T> = x.cast();
    let a = hard_forward(&xt, &layer, &progs, Strategy::PrefixSum).unwrap().y.cast::<f64>();
    let b = hard_forward(&xt, &layer, &progs, Strategy::Dense).unwrap().y.cast::<f64>();
    (a.max_abs_diff(&b), b.max_abs())
}

#[test]
fn prefix_sum_matches_dense_binary_matmul_f64() {
    for seed in 0..10 {
        let (diff, scale) = prefix_vs_dense::<f64>(seed);
        assert!(diff <= 1e-12 * scale.max(1.0), "seed {seed}: {diff}");
    }
}

#[test]
fn prefix_sum_matches_dense_binary_matmul_f32() {
    for seed in 0..10 {
        let (diff, _) = prefix_vs_dense::<f32>(seed);
        assert!(diff < 1e-5, "seed {seed}: {diff}");
    }
}

#[test]
fn saturated_layers_agree_with_sharp_soft_path() {
    let (instances, _) = saturated_instances(0.01, 0.2, 100, 200_000);
    assert_eq!(instances.len(), 100);
    for (i, (layer, x)) in instances.iter().enumerate() {
        let soft = layer.forward_with(x, 0.01, None).unwrap().y;
        let (hard, progs) = hard_layer_forward(x, layer, None, HardOptions::default()).unwrap();
        let rel = soft.max_abs_diff(&hard.y) / soft.max_abs().max(hard.y.max_abs()).max(1e-12);
        assert!(rel < 1e-4, "instance {i}: {rel}");
        for p in &progs {
            assert!(p.pulses.iter().all(|q| q.is_well_formed(x.rows())));
        }
    }
}

#[test]
fn soft_delta_mode_runs_and_stays_well_formed() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layer = random_layer(&mut rng, 8, 2, PulseSplit::uniform(1), 0.5, None);
    let x = Tensor::from_fn(30, 8, |_, _| rng.gen_range(-1.0..1.0));
    let progs = compile_layer(&x, &layer, None, DeltaMode::Soft { tau: 0.5 }, None).unwrap();
    for p in &progs {
        assert!(p.pulses.iter().all(|q| q.is_well_formed(30)));
    }
}

#[test]
fn hard_encoder_matches_soft_encoder_with_saturated_content_free_layer() {
    let mut enc = ToyEncoder::new(
        EncoderConfig {
            d_in: 3,
            d: 8,
            heads: 2,
            layers: 3,
            ffn_mult: 2,
        },
        5,
    )
    .unwrap();
    let split = PulseSplit {
        aperiodic: 0,
        periodic: 1,
        positional: 1,
    };
    let mut layer = LpaLayer::init(LpaConfig::new(8, 2, split), 8).unwrap();
    for (h, head) in layer.params.heads.iter_mut().enumerate() {
        head.periodic = periodic_params(8.0, PI / 8.0 + h as f64 * PI / 4.0, 0.5);
        head.positional.alpha = Tensor::zeros(1, head.positional.bases());
        head.positional.beta = Tensor::zeros(1, head.positional.bases());
        head.positional.bias = Tensor::col_vector(vec![-0.6]);
    }
    enc.set_lpa(1, layer).unwrap();
    let x = Tensor::from_fn(24, 3, |t, c| ((t + 3 * c) as f64 * 0.41).cos());
    let taus: Vec<f64> = enc.mixers.iter().map(|m| if m.is_lpa() { 0.01 } else { 1.0 }).collect();
    let soft = enc.forward_with_taus(&x, &taus).unwrap().hidden;
    let (hard, reports) = hard_encoder_forward(&enc, &x, HardOptions::default(), Some((0.01, 0.2))).unwrap();
    assert!(reports[0].programs.is_none() && reports[2].programs.is_none());
    assert!(reports[1].saturation.as_ref().unwrap().satisfied());
    assert!(soft.max_abs_diff(&hard) < 1e-9, "{}", soft.max_abs_diff(&hard));
    let active = reports[1].mean_active_pulses.unwrap();
    assert!(active > 0.0 && active < 4.0, "{active}");
}
