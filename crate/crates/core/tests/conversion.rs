use lpa_core::conversion::*;
use lpa_core::numerics::Tensor;
use lpa_core::reference::data::dataset;
use lpa_core::reference::{EncoderConfig, ToyEncoder};

fn two_layer_teacher(seed: u64) -> (ToyEncoder, Vec<Tensor<f64>>) {
    let spec = TeacherSpec {
        encoder: EncoderConfig {
            layers: 2,
            ..TeacherSpec::default().encoder
        },
        position_slopes: vec![],
        training: None,
        ..Default::default()
    };
    let mut t = toy_teacher(&spec, seed).unwrap();
    t.set_attention(0, local_averaging_attention(16, 2, 0.5, seed).unwrap()).unwrap();
    t.set_attention(1, sharp_attention(16, 2, 4.0, seed + 100).unwrap()).unwrap();
    let data = dataset(&spec.data, 12, seed).into_iter().map(|s| s.noisy).collect();
    (t, data)
}

#[test]
fn sweep_ranks_local_layer_first_and_restores_teacher() {
    let (mut teacher, data) = two_layer_teacher(11);
    let before = teacher.clone();
    let out_before = teacher.hidden(&data[0]).unwrap();
    let r = mse_sweep(&mut teacher, &data, &SweepHyperparams::default()).unwrap();
    assert_eq!(teacher, before);
    assert_eq!(teacher.hidden(&data[0]).unwrap(), out_before);
    assert!(r.layers[0].mse < r.layers[1].mse, "{:?}", r.layers);
    assert_eq!(r.order, vec![0, 1]);
}

#[test]
fn sweep_report_invariants() {
    let (mut teacher, data) = two_layer_teacher(3);
    let hp = SweepHyperparams {
        floor: 4,
        ..Default::default()
    };
    let r = mse_sweep(&mut teacher, &data, &hp).unwrap();
    let mut sorted = r.order.clone();
    sorted.sort();
    assert_eq!(sorted, vec![0, 1]);
    for l in &r.layers {
        assert!(l.surviving >= hp.floor && l.surviving <= l.total_pulses);
        assert_eq!(l.total_pulses, 2 * hp.sweep_split().total());
        assert_eq!(l.amplitude_histogram.iter().sum::<usize>(), l.total_pulses);
        assert!(l.mse.is_finite());
    }
    let again = mse_sweep(&mut teacher, &data, &hp).unwrap();
    assert_eq!(again, r);
}

#[test]
fn penalty_never_increases_survivors() {
    let (mut teacher, data) = two_layer_teacher(5);
    let hp = SweepHyperparams {
        lr: 2e-2,
        epochs: 4,
        lambda1: 0.5,
        lambda2: 0.05,
        ..Default::default()
    };
    let pen = mse_sweep(&mut teacher, &data, &hp).unwrap();
    let free = mse_sweep(
        &mut teacher,
        &data,
        &SweepHyperparams {
            lambda1: 0.0,
            lambda2: 0.0,
            ..hp.clone()
        },
    )
    .unwrap();
    for (a, b) in free.layers.iter().zip(&pen.layers) {
        assert!(a.surviving >= b.surviving);
    }
}

#[test]
fn identity_like_teacher_terminates_with_finite_mse() {
    let (mut teacher, data) = two_layer_teacher(2);
    let mut id = local_averaging_attention(16, 2, 60.0, 0).unwrap();
    id.params.w_v = Tensor::eye(16);
    id.params.w_o = Tensor::eye(16);
    teacher.set_attention(0, id).unwrap();
    let r = mse_sweep(&mut teacher, &data[..4], &SweepHyperparams::default()).unwrap();
    assert!(r.layers[0].mse.is_finite());
    assert!(r.layers[0].failure.is_none());
}

fn conversion_setup(seed: u64) -> (ToyEncoder, Vec<Tensor<f64>>, Vec<Tensor<f64>>) {
    let spec = TeacherSpec {
        training: None,
        ..Default::default()
    };
    let teacher = toy_teacher(&spec, seed).unwrap();
    let mut tokens: Vec<_> = dataset(&spec.data, 12, seed).into_iter().map(|s| s.noisy).collect();
    let val = tokens.split_off(8);
    (teacher, tokens, val)
}

fn quick() -> ConversionConfig {
    ConversionConfig {
        warm_start_epochs: 1,
        task_epochs: 1,
        alignment_epochs: 1,
        final_epochs: 1,
        ..Default::default()
    }
}

#[test]
fn empty_order_gives_baseline_only() {
    let (teacher, train, val) = conversion_setup(0);
    let r = progressive_replace(&teacher, &[], &train, &val, &quick()).unwrap();
    assert_eq!(r.trace.len(), 1);
    assert_eq!(r.trace[0].phase, Phase::Baseline);
    assert_eq!(r.trace[0].val_metric, Some(0.0));
    assert_eq!(r.model, teacher);
}

#[test]
fn replacement_trace_and_determinism() {
    let (teacher, train, val) = conversion_setup(1);
    let cfg = ConversionConfig {
        max_layers: Some(2),
        ..quick()
    };
    let a = progressive_replace(&teacher, &[2, 0, 1], &train, &val, &cfg).unwrap();
    assert_eq!(a.replaced, vec![2, 0]);
    assert_eq!(a.model.lpa_layers(), vec![0, 2]);
    let phases: Vec<Phase> = a.trace.iter().filter(|r| r.step.is_none()).map(|r| r.phase).collect();
    use Phase::*;
    assert_eq!(phases, vec![Baseline, WarmStart, Task, Alignment, WarmStart, Task, Alignment, Final]);
    let task_taus: Vec<f64> = a
        .trace
        .iter()
        .filter(|r| r.phase == Task && r.stage == 1 && r.step.is_some())
        .map(|r| r.tau.unwrap())
        .collect();
    assert_eq!(task_taus[0], 3.0);
    assert_eq!(*task_taus.last().unwrap(), 0.5);
    assert!(task_taus.windows(2).all(|w| w[1] <= w[0]));
    let b = progressive_replace(&teacher, &[2, 0, 1], &train, &val, &cfg).unwrap();
    assert_eq!(a, b);
    let csv = trace_csv_lines(&a.trace);
    assert_eq!(csv[0], "stage,layer,phase,step,tau,loss,val_metric,reverted");
}

fn trace_csv_lines(rows: &[TraceRow]) -> Vec<String> {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("trace.csv");
    write_trace_csv(rows, &p).unwrap();
    std::fs::read_to_string(p).unwrap().lines().map(String::from).collect()
}

#[test]
fn adversarial_alignment_is_reverted_bitwise() {
    let (teacher, train, val) = conversion_setup(4);
    let cfg = ConversionConfig {
        max_layers: Some(1),
        alignment_epochs: 0,
        final_epochs: 0,
        ..quick()
    };
    let mut model = progressive_replace(&teacher, &[1], &train, &val, &cfg).unwrap().model;
    let before = model.clone();
    let bad = ConversionConfig {
        alignment_epochs: 2,
        ratios: LrRatios {
            alignment: 2000.0,
            ..Default::default()
        },
        ..cfg
    };
    let out = alignment_phase(&mut model, &teacher, &train, &val, &bad).unwrap();
    assert!(out.reverted, "{out:?}");
    assert!(!(out.after <= out.before));
    assert_eq!(model, before);
}

#[test]
fn budget_stop_undoes_the_offending_stage() {
    let (teacher, train, val) = conversion_setup(2);
    let cfg = ConversionConfig {
        budget: 0.0,
        ..quick()
    };
    let r = progressive_replace(&teacher, &[3, 2], &train, &val, &cfg).unwrap();
    assert!(r.stopped_by_budget);
    assert!(r.replaced.is_empty());
    assert_eq!(r.model, teacher);
    assert_eq!(r.trace.last().unwrap().phase, Phase::BudgetStop);
}

#[test]
fn invalid_orders_are_rejected() {
    let (teacher, train, val) = conversion_setup(0);
    assert!(progressive_replace(&teacher, &[1, 1], &train, &val, &quick()).is_err());
    assert!(progressive_replace(&teacher, &[9], &train, &val, &quick()).is_err());
}
