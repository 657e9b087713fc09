use std::f64::consts::PI;
use std::path::Path;
use std::process::{Command, Output};

use lpa_core::gates::{rho_for_period, PulseSplit};
use lpa_core::mixer::{LpaConfig, LpaLayer};
use lpa_core::numerics::Tensor;
use lpa_core::reference::{EncoderConfig, ToyEncoder};
use tempfile::TempDir;

fn lpa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lpa"))
        .current_dir(dir)
        .env_remove("PULSE_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Small, untrained teacher and short schedules so conversion runs in seconds.
const SMALL: &str = r#"{
  "teacher": {
    "encoder": { "d_in": 4, "d": 8, "heads": 2, "layers": 4, "ffn_mult": 2 },
    "position_slopes": [1.0, 0.5, 0.0, 0.0],
    "data": { "length": 16, "channels": 4, "sinusoids": 2, "events": 1,
              "min_period": 4.0, "max_period": 16.0, "noise": 0.3 },
    "train_samples": 8,
    "training": null
  },
  "samples": { "train": 6, "val": 3 },
  "sweep": { "epochs": 1, "overprovision": 1 },
  "conversion": { "warm_start_epochs": 1, "task_epochs": 1, "alignment_epochs": 1, "final_epochs": 1 }
}"#;

fn small_config(dir: &Path) -> String {
    let p = dir.join("run.json");
    std::fs::write(&p, SMALL).unwrap();
    p.display().to_string()
}

#[test]
fn verify_passes_and_reports_enough_properties() {
    let dir = TempDir::new().unwrap();
    let o = lpa(dir.path(), &["verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let passed = stdout(&o).lines().filter(|l| l.starts_with("PASS ")).count();
    assert!(passed >= 20, "{passed}");
}

#[test]
fn injected_fault_fails_with_seed() {
    let dir = TempDir::new().unwrap();
    let o = lpa(dir.path(), &["verify", "--self-test-fault"]);
    assert_eq!(o.status.code(), Some(1));
    let fail = stdout(&o).lines().find(|l| l.starts_with("FAIL ")).map(str::to_string).unwrap();
    assert!(fail.contains("seed"), "{fail}");
}

#[test]
fn usage_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    assert_eq!(lpa(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(lpa(dir.path(), &["bench", "scaling", "--ns", "abc"]).status.code(), Some(2));
    assert_eq!(lpa(dir.path(), &["--config", "absent.json", "sweep"]).status.code(), Some(2));
}

#[test]
fn missing_checkpoint_names_the_path() {
    let dir = TempDir::new().unwrap();
    let o = lpa(dir.path(), &["infer", "--checkpoint", "no/such/model.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no/such/model.json"), "{}", stderr(&o));
}

#[test]
fn memory_table_golden() {
    let dir = TempDir::new().unwrap();
    let o = lpa(dir.path(), &["--out", "o", "bench", "memory", "--plot"]);
    assert!(o.status.success());
    let csv = read(dir.path(), "o/memory.csv");
    assert_eq!(
        csv,
        "seconds,frames,attention_mib,lpa_kib,ratio\n\
         10,500,0.95,23.4,42\n\
         30,1500,8.58,70.3,125\n\
         60,3000,34.33,140.6,250\n\
         120,6000,137.33,281.2,500\n"
    );
    assert_eq!(stdout(&o), csv);
    assert!(read(dir.path(), "o/memory.svg").starts_with("<svg"));
}

#[test]
fn roofline_csv_layout() {
    let dir = TempDir::new().unwrap();
    let o = lpa(dir.path(), &["--out", "o", "bench", "roofline", "--plot"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = read(dir.path(), "o/roofline.csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("model,pulses,component,flops,bytes,compute_us,memory_us,time_us,bound,passes"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 15);
    assert!(rows.iter().all(|r| r.len() == 10));
    let qk = rows.iter().find(|r| r[0] == "attention" && r[2] == "qk").unwrap();
    let us: f64 = qk[7].parse().unwrap();
    assert!((us - 3311.0).abs() < 5.0, "{us}");
    assert!(stderr(&o).contains("differs by"));
    assert!(dir.path().join("o/roofline.svg").exists());
}

#[test]
fn scaling_csv_header_and_plot() {
    let dir = TempDir::new().unwrap();
    let o = lpa(dir.path(), &["--out", "o", "bench", "scaling", "--ns", "16,32", "--plot"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = read(dir.path(), "o/scaling.csv");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "n,attn_ms,lpa_ms,speedup");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("16,") && lines[2].starts_with("32,"));
    assert!(read(dir.path(), "o/scaling.svg").contains("</svg>"));
}

#[test]
fn sweep_rows_order_and_determinism() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let a = lpa(dir.path(), &["--config", &cfg, "--out", "a", "--seed", "4", "sweep"]);
    assert!(a.status.success(), "{}", stderr(&a));
    let csv = read(dir.path(), "a/sweep.csv");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "layer,mse,surviving,order_rank");
    assert_eq!(lines.len(), 5);
    let mut ranks: Vec<usize> = lines[1..].iter().map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    ranks.sort();
    assert_eq!(ranks, vec![0, 1, 2, 3]);
    assert!(dir.path().join("a/teacher.json").exists());

    let b = Command::new(env!("CARGO_BIN_EXE_lpa"))
        .current_dir(dir.path())
        .env("PULSE_SEED", "4")
        .args(["--config", &cfg, "--out", "b", "sweep"])
        .output()
        .unwrap();
    assert!(b.status.success());
    assert_eq!(read(dir.path(), "b/sweep.csv"), csv);
}

#[test]
fn convert_both_orders_writes_comparison() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path());
    let o = lpa(
        dir.path(),
        &["--config", &cfg, "--out", "o", "convert", "--order", "both", "--seeds", "2", "--max-layers", "1"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let table = read(dir.path(), "o/order_comparison.csv");
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "seed,mse_order,mse_metric,reverse_order,reverse_metric");
    assert_eq!(lines.len(), 3);
    for seed in 0..2 {
        for kind in ["mse", "reverse"] {
            let trace = read(dir.path(), &format!("o/trace_{kind}_seed{seed}.csv"));
            assert!(trace.starts_with("stage,layer,phase,step,tau,loss,val_metric,reverted\n"));
            assert!(dir.path().join(format!("o/checkpoint_{kind}_seed{seed}.json")).exists());
        }
    }
    assert!(stdout(&o).contains("median final loss"));
}

/// Two-layer encoder whose second layer has only periodic and positional
/// pulses, placed so every pre-sigmoid logit is at least 0.38 away from 0.
fn saturated_model() -> ToyEncoder {
    let mut enc = ToyEncoder::new(
        EncoderConfig {
            d_in: 4,
            d: 8,
            heads: 2,
            layers: 2,
            ffn_mult: 2,
        },
        9,
    )
    .unwrap();
    let split = PulseSplit {
        aperiodic: 0,
        periodic: 1,
        positional: 1,
    };
    let mut layer = LpaLayer::init(LpaConfig::new(8, 2, split), 3).unwrap();
    for (h, head) in layer.params.heads.iter_mut().enumerate() {
        head.periodic.rho = Tensor::col_vector(vec![rho_for_period(8.0)]);
        head.periodic.phase = Tensor::col_vector(vec![PI / 8.0 + h as f64 * PI / 4.0]);
        head.periodic.duty = Tensor::zeros(1, 1);
        head.positional.alpha = Tensor::zeros(1, head.positional.bases());
        head.positional.beta = Tensor::zeros(1, head.positional.bases());
        head.positional.bias = Tensor::col_vector(vec![0.5]);
    }
    enc.set_lpa(1, layer).unwrap();
    enc
}

#[test]
fn compare_on_saturated_model_agrees() {
    let dir = TempDir::new().unwrap();
    let ck = dir.path().join("model.json");
    saturated_model().to_store().save(&ck).unwrap();
    let o = lpa(
        dir.path(),
        &["--out", "o", "infer", "--checkpoint", "model.json", "--compare", "--strict", "--margin", "0.2", "--dump-programs"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let dev: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("max abs deviation "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(dev < 1e-4, "{dev}");
    assert!(!stderr(&o).contains("warning"), "{}", stderr(&o));
    let programs: serde_json::Value = serde_json::from_str(&read(dir.path(), "o/programs.json")).unwrap();
    let first = &programs[0]["pulses"][0];
    assert_eq!(first["family"], "periodic");
    assert!(first["segments"].as_array().unwrap().len() >= 2);
}

#[test]
fn strict_warns_on_unsaturated_gates() {
    let dir = TempDir::new().unwrap();
    let mut enc = saturated_model();
    let mut layer = enc.lpa_layer(1).unwrap();
    layer.params.heads[0].positional.bias = Tensor::col_vector(vec![0.001]);
    enc.set_lpa(1, layer).unwrap();
    enc.to_store().save(&dir.path().join("model.json")).unwrap();
    let input = Tensor::from_fn(10, 4, |t, c| ((t * 4 + c) as f64 * 0.37).sin());
    std::fs::write(dir.path().join("x.json"), serde_json::to_string(&input).unwrap()).unwrap();
    let o = lpa(
        dir.path(),
        &["--out", "o", "infer", "--checkpoint", "model.json", "--input", "x.json", "--hard", "--strict"],
    );
    assert!(o.status.success());
    let err = stderr(&o);
    assert!(err.contains("warning: layer 1: 10 positions violate margin"), "{err}");
    assert!(err.contains("head 0 pulse 1 position 9"), "{err}");
    assert!(dir.path().join("o/infer_hard.json").exists());
}
