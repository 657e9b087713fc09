use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lpa_core::bench::{loglog_svg, scaling as run_scaling, ScalingConfig};
use lpa_core::conversion::{
    mse_sweep, progressive_replace, toy_teacher, write_trace_csv, ConversionResult, SweepReport,
};
use lpa_core::hardgate::{hard_encoder_forward, HardLayerReport, HardOptions};
use lpa_core::numerics::Tensor;
use lpa_core::params::ParamStore;
use lpa_core::perfmodel::{attention_cost, lpa_cost, memory_table, CostBreakdown, Dtype, HardwareProfile, Precision};
use lpa_core::reference::data::{dataset, SyntheticConfig};
use lpa_core::reference::ToyEncoder;
use lpa_core::verify;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{ConvertArgs, Failure, InferArgs, OrderKind};

pub const ROOFLINE_HEADER: &str = "model,pulses,component,flops,bytes,compute_us,memory_us,time_us,bound,passes";
pub const MEMORY_HEADER: &str = "seconds,frames,attention_mib,lpa_kib,ratio";
pub const COMPARISON_HEADER: &str = "seed,mse_order,mse_metric,reverse_order,reverse_metric";

pub struct Context {
    pub cfg: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
}

fn usage<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Usage(e.to_string())
}

impl Context {
    pub fn new(cfg: RunConfig, seed: u64) -> Result<Self, String> {
        let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("lpa-out"));
        Ok(Self { cfg, seed, out })
    }

    fn path(&self, name: &str) -> Result<PathBuf, Failure> {
        std::fs::create_dir_all(&self.out).map_err(|e| Failure::Usage(format!("{}: {e}", self.out.display())))?;
        Ok(self.out.join(name))
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf, Failure> {
        let p = self.path(name)?;
        std::fs::write(&p, contents).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
        Ok(p)
    }

    fn tokens(&self, data: &SyntheticConfig, count: usize, seed: u64) -> Vec<Tensor<f64>> {
        dataset(data, count, seed).into_iter().map(|s| s.noisy).collect()
    }
}

pub fn verify(ctx: &Context, fault: bool) -> Result<(), Failure> {
    let report = verify::run(ctx.seed, fault);
    for r in &report.results {
        match (&r.seed, &r.detail) {
            (Some(seed), Some(detail)) => println!("FAIL {} (seed {seed}): {detail}", r.name),
            _ => println!("PASS {} ({} trials)", r.name, r.trials),
        }
    }
    let n = report.results.len();
    if report.passed() {
        println!("{n} properties passed");
        Ok(())
    } else {
        Err(Failure::Property(format!("{} of {n} properties failed", report.failures())))
    }
}

pub fn scaling(ctx: &Context, ns: Option<Vec<usize>>, iterations: Option<usize>, plot: bool) -> Result<(), Failure> {
    let mut cfg: ScalingConfig = ctx.cfg.scaling.clone();
    if let Some(ns) = ns {
        cfg.ns = ns;
    }
    if let Some(it) = iterations {
        cfg.timing.iterations = it;
    }
    cfg.seed = ctx.seed;
    let report = run_scaling(&cfg).map_err(usage)?;
    let csv = report.to_csv();
    print!("{csv}");
    ctx.write("scaling.csv", &csv)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if report.rows.len() >= 2 {
        eprintln!(
            "log-log slope: attention {:.3}, lpa {:.3}; crossover n = {}",
            report.attention_slope(),
            report.lpa_slope(),
            report.crossover().map_or("none".to_string(), |n| n.to_string())
        );
    }
    if plot {
        let p = ctx.write("scaling.svg", &report.to_svg())?;
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn passes(profile: &HardwareProfile, component: &str) -> Option<f64> {
    let c = &profile.calibration;
    match component {
        "softmax" => Some(c.softmax_passes),
        "elementwise" => Some(c.elementwise_passes),
        "accumulation" => Some(c.accumulation_passes),
        _ => None,
    }
}

fn roofline_rows(out: &mut String, model: &str, pulses: Option<usize>, cost: &CostBreakdown, profile: &HardwareProfile) {
    let p = pulses.map_or(String::new(), |p| p.to_string());
    for c in &cost.components {
        let _ = writeln!(
            out,
            "{model},{p},{},{:.6e},{:.6e},{:.3},{:.3},{:.3},{},{}",
            c.name,
            c.flops,
            c.bytes,
            c.compute_s * 1e6,
            c.memory_s * 1e6,
            c.time_us(),
            if c.memory_bound() { "memory" } else { "compute" },
            passes(profile, &c.name).map_or(String::new(), |v| v.to_string()),
        );
    }
    let _ = writeln!(
        out,
        "{model},{p},total,{:.6e},{:.6e},,,{:.3},,",
        cost.total_flops(),
        cost.total_bytes(),
        cost.layer_time_us()
    );
}

pub fn roofline(
    ctx: &Context,
    profile: Option<PathBuf>,
    t: Option<usize>,
    d: Option<usize>,
    heads: Option<usize>,
    pulses: Option<Vec<usize>>,
    plot: bool,
) -> Result<(), Failure> {
    let mut rc = ctx.cfg.roofline.clone();
    if let Some(p) = profile {
        rc.profile = HardwareProfile::load(&p).map_err(usage)?;
    }
    rc.profile.validate().map_err(usage)?;
    rc.t = t.unwrap_or(rc.t);
    rc.d = d.unwrap_or(rc.d);
    rc.heads = heads.unwrap_or(rc.heads);
    if let Some(p) = pulses {
        rc.pulses = p;
    }
    let hw = &rc.profile;
    let attn = attention_cost(rc.t, rc.d, rc.heads, hw, Precision::uniform(Dtype::F16));
    let mut csv = format!("{ROOFLINE_HEADER}\n");
    roofline_rows(&mut csv, "attention", None, &attn, hw);
    let lpa: Vec<(usize, CostBreakdown)> = rc
        .pulses
        .iter()
        .map(|&p| (p, lpa_cost(rc.t, rc.d, p, hw, Precision::mixed())))
        .collect();
    for (p, c) in &lpa {
        roofline_rows(&mut csv, "lpa", Some(*p), c, hw);
    }
    print!("{csv}");
    ctx.write("roofline.csv", &csv)?;
    eprintln!(
        "{} at T={} d={}: attention {:.1} ms per layer, {:.1} ms for {} layers",
        hw.name,
        rc.t,
        rc.d,
        attn.layer_time_us() / 1e3,
        attn.model_time_s(rc.layers) * 1e3,
        rc.layers
    );
    for (p, c) in &lpa {
        eprintln!(
            "lpa P={p}: {:.1} ms per layer ({:.2}x faster than attention)",
            c.layer_time_us() / 1e3,
            attn.layer_time_s() / c.layer_time_s()
        );
    }
    if lpa.len() >= 2 {
        let (a, b) = (&lpa[0], &lpa[lpa.len() - 1]);
        eprintln!(
            "P={} vs P={}: per-layer total differs by {:.2}%",
            b.0,
            a.0,
            100.0 * (b.1.layer_time_s() / a.1.layer_time_s() - 1.0)
        );
    }
    if plot {
        let mut series = vec![(
            "attention".to_string(),
            "#c0392b",
            rc.sweep_t
                .iter()
                .map(|&t| (t as f64, attention_cost(t, rc.d, rc.heads, hw, Precision::uniform(Dtype::F16)).layer_time_us() / 1e3))
                .collect::<Vec<_>>(),
        )];
        let colors = ["#2471a3", "#1e8449", "#7d3c98", "#b9770e"];
        for (i, &p) in rc.pulses.iter().enumerate() {
            series.push((
                format!("LPA P={p}"),
                colors[i % colors.len()],
                rc.sweep_t
                    .iter()
                    .map(|&t| (t as f64, lpa_cost(t, rc.d, p, hw, Precision::mixed()).layer_time_us() / 1e3))
                    .collect(),
            ));
        }
        let refs: Vec<(&str, &str, Vec<(f64, f64)>)> = series.iter().map(|(n, c, v)| (n.as_str(), *c, v.clone())).collect();
        let svg = loglog_svg("modeled per-layer time", "T (frames)", "ms", &refs);
        let p = ctx.write("roofline.svg", &svg)?;
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

pub fn memory(ctx: &Context, durations: Option<Vec<f64>>, pulses: Option<usize>, plot: bool) -> Result<(), Failure> {
    let mc = &ctx.cfg.memory;
    let durations = durations.unwrap_or_else(|| mc.durations.clone());
    let pulses = pulses.unwrap_or(mc.pulses);
    let rows = memory_table(&durations, mc.frame_rate, pulses, Dtype::F32);
    let mut csv = format!("{MEMORY_HEADER}\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{:.2},{:.1},{:.0}",
            r.seconds,
            r.frames,
            r.attention_mib(),
            r.lpa_kib(),
            r.ratio()
        );
    }
    print!("{csv}");
    ctx.write("memory.csv", &csv)?;
    if plot {
        let series = [
            ("attention scores", "#c0392b", rows.iter().map(|r| (r.seconds, r.attention_bytes)).collect::<Vec<_>>()),
            ("LPA gates", "#2471a3", rows.iter().map(|r| (r.seconds, r.lpa_bytes)).collect()),
        ];
        let svg = loglog_svg("per-layer peak memory", "seconds", "bytes", &series);
        let p = ctx.write("memory.svg", &svg)?;
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn sweep_for(ctx: &Context, seed: u64) -> Result<(ToyEncoder, Vec<Tensor<f64>>, Vec<Tensor<f64>>, SweepReport), Failure> {
    let cfg = &ctx.cfg;
    let teacher = toy_teacher(&cfg.teacher, seed).map_err(usage)?;
    let mut tokens = ctx.tokens(cfg.data(), cfg.samples.train + cfg.samples.val, seed.wrapping_add(77));
    let val = tokens.split_off(cfg.samples.train);
    let hp = lpa_core::conversion::SweepHyperparams {
        seed,
        ..cfg.sweep.clone()
    };
    let mut probe = teacher.clone();
    let report = mse_sweep(&mut probe, &tokens, &hp).map_err(usage)?;
    Ok((teacher, tokens, val, report))
}

pub fn sweep(ctx: &Context) -> Result<(), Failure> {
    let (teacher, _, _, report) = sweep_for(ctx, ctx.seed)?;
    let csv = report.to_csv();
    print!("{csv}");
    ctx.write("sweep.csv", &csv)?;
    for l in report.layers.iter().filter(|l| l.failure.is_some()) {
        eprintln!("warning: layer {} failed: {}", l.layer, l.failure.as_deref().unwrap_or(""));
    }
    let p = ctx.path("teacher.json")?;
    teacher.to_store().save(&p).map_err(usage)?;
    eprintln!("order {:?}; teacher checkpoint {}", report.order, p.display());
    Ok(())
}

fn join_order(order: &[usize]) -> String {
    order.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("-")
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn convert(ctx: &Context, args: &ConvertArgs) -> Result<(), Failure> {
    if args.seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let kinds: &[&str] = match args.order {
        OrderKind::Mse => &["mse"],
        OrderKind::Reverse => &["reverse"],
        OrderKind::Both => &["mse", "reverse"],
    };
    let mut table = format!("{COMPARISON_HEADER}\n");
    let (mut fwd, mut rev) = (vec![], vec![]);
    for seed in ctx.seed..ctx.seed + args.seeds as u64 {
        let (teacher, train, val, report) = sweep_for(ctx, seed)?;
        ctx.write(&format!("sweep_seed{seed}.csv"), &report.to_csv())?;
        let mut cfg = ctx.cfg.conversion.clone();
        cfg.seed = seed;
        if args.max_layers.is_some() {
            cfg.max_layers = args.max_layers;
        }
        let mut runs: Vec<(Vec<usize>, ConversionResult)> = vec![];
        for &kind in kinds {
            let mut order = report.order.clone();
            if kind == "reverse" {
                order.reverse();
            }
            let r = progressive_replace(&teacher, &order, &train, &val, &cfg).map_err(usage)?;
            write_trace_csv(&r.trace, &ctx.path(&format!("trace_{kind}_seed{seed}.csv"))?).map_err(usage)?;
            let ck = ctx.path(&format!("checkpoint_{kind}_seed{seed}.json"))?;
            r.model.to_store().save(&ck).map_err(usage)?;
            println!(
                "seed {seed} order {kind} {:?}: replaced {:?}, final distillation loss {:.6e}{}",
                order,
                r.replaced,
                r.final_metric,
                if r.stopped_by_budget { " (stopped by budget)" } else { "" }
            );
            runs.push((order, r));
        }
        if let [(fo, f), (ro, r)] = runs.as_slice() {
            let _ = writeln!(
                table,
                "{seed},{},{:.6e},{},{:.6e}",
                join_order(fo),
                f.final_metric,
                join_order(ro),
                r.final_metric
            );
            fwd.push(f.final_metric);
            rev.push(r.final_metric);
        }
    }
    if args.order == OrderKind::Both {
        let p = ctx.write("order_comparison.csv", &table)?;
        let wins = fwd.iter().zip(&rev).filter(|(a, b)| a < b).count();
        println!(
            "median final loss: mse order {:.6e}, reverse {:.6e}; mse order lower on {wins}/{} seeds ({})",
            median(&mut fwd.clone()),
            median(&mut rev.clone()),
            fwd.len(),
            p.display()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct LayerPrograms<'a> {
    layer: usize,
    head: usize,
    n: usize,
    pulses: &'a [lpa_core::hardgate::PulseProgram],
}

fn load_input(path: &Path) -> Result<Tensor<f64>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let t: Tensor<f64> = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    Tensor::from_vec(t.shape().to_vec(), t.data().to_vec()).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

pub fn infer(ctx: &Context, args: &InferArgs) -> Result<(), Failure> {
    let store = ParamStore::load(&args.checkpoint).map_err(usage)?;
    let encoder = ToyEncoder::from_store(&store).map_err(|e| Failure::Usage(format!("{}: {e}", args.checkpoint.display())))?;
    let tokens = match &args.input {
        Some(p) => load_input(p)?,
        None => {
            let data = SyntheticConfig {
                channels: encoder.config.d_in,
                ..ctx.cfg.data().clone()
            };
            ctx.tokens(&data, 1, ctx.seed).remove(0)
        }
    };
    let tau = args.tau.or((args.compare || args.strict).then_some(0.01));
    let taus: Vec<f64> = match tau {
        Some(t) => encoder.mixers.iter().map(|m| if m.is_lpa() { t } else { 1.0 }).collect(),
        None => encoder.taus(),
    };
    let run_soft = !args.hard || args.compare;
    let run_hard = args.hard || args.compare || args.strict || args.dump_programs;
    let soft = if run_soft {
        let h = encoder.forward_with_taus(&tokens, &taus).map_err(usage)?.hidden;
        ctx.write("infer_soft.json", &serde_json::to_string(&h).map_err(usage)?)?;
        Some(h)
    } else {
        None
    };
    let check = args.strict.then_some((tau.unwrap_or(0.01), args.margin));
    let hard = if run_hard {
        let (h, reports) = hard_encoder_forward(&encoder, &tokens, HardOptions::default(), check).map_err(usage)?;
        if args.hard || args.compare {
            ctx.write("infer_hard.json", &serde_json::to_string(&h).map_err(usage)?)?;
        }
        Some((h, reports))
    } else {
        None
    };
    println!("input {:?}, {} layers, lpa layers {:?}", tokens.shape(), encoder.layers(), encoder.lpa_layers());
    if let Some((_, reports)) = &hard {
        for (i, r) in reports.iter().enumerate() {
            if let Some(m) = r.mean_active_pulses {
                println!("layer {i}: mean active pulses per frame {m:.3}");
            }
        }
        if args.strict {
            report_saturation(reports);
        }
        if args.dump_programs {
            let mut all = vec![];
            for (layer, r) in reports.iter().enumerate() {
                for (head, prog) in r.programs.iter().flatten().enumerate() {
                    all.push(LayerPrograms {
                        layer,
                        head,
                        n: prog.n,
                        pulses: &prog.pulses,
                    });
                }
            }
            let p = ctx.write("programs.json", &serde_json::to_string_pretty(&all).map_err(usage)?)?;
            println!("programs written to {}", p.display());
        }
    }
    if let (Some(s), Some((h, _))) = (&soft, &hard) {
        if args.compare {
            println!("max abs deviation {:.3e}", s.max_abs_diff(h));
        }
    }
    Ok(())
}

fn report_saturation(reports: &[HardLayerReport]) {
    for (layer, r) in reports.iter().enumerate() {
        let Some(sat) = &r.saturation else { continue };
        if sat.satisfied() {
            println!("layer {layer}: gates saturated (min |logit| {:.3e}, margin {})", sat.min_logit, sat.margin);
            continue;
        }
        eprintln!(
            "warning: layer {layer}: {} positions violate margin {} (min |logit| {:.3e})",
            sat.violations.len(),
            sat.margin,
            sat.min_logit
        );
        for v in &sat.violations {
            match v.position {
                Some(t) => eprintln!("  head {} pulse {} position {t}: {:.3e}", v.head, v.pulse, v.value),
                None => eprintln!("  head {} pulse {} argmax gap {:.3e}", v.head, v.pulse, v.value),
            }
        }
    }
}
