//! Wall-clock scaling of the soft LPA forward against softmax attention.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gates::PulseSplit;
use crate::mixer::{LpaConfig, LpaLayer};
use crate::numerics::Tensor;
use crate::perfmodel::loglog_slope;
use crate::reference::{attention_forward, AttentionConfig, AttentionLayer};

pub const SCALING_HEADER: &str = "n,attn_ms,lpa_ms,speedup";
pub const DEFAULT_NS: [usize; 5] = [256, 512, 1024, 2048, 4096];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingConfig {
    pub warmup: usize,
    pub iterations: usize,
    /// A median shorter than this many timer ticks triggers re-timing with
    /// more calls per sample.
    pub min_ticks: u32,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            warmup: 3,
            iterations: 10,
            min_ticks: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub median: Duration,
    pub samples: usize,
    pub calls_per_sample: usize,
    pub warnings: Vec<String>,
}

/// Smallest nonzero difference between consecutive `Instant` readings.
pub fn timer_tick() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    let n = v.len();
    if n == 0 {
        Duration::ZERO
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

/// Median per-call time after `warmup` untimed calls (at least 3) over at
/// least 10 samples.
pub fn time_median(cfg: &TimingConfig, mut f: impl FnMut()) -> Timing {
    let warmup = cfg.warmup.max(3);
    let iterations = cfg.iterations.max(10);
    let tick = timer_tick();
    for _ in 0..warmup {
        f();
    }
    let mut calls = 1usize;
    let mut warnings = Vec::new();
    loop {
        let samples: Vec<Duration> = (0..iterations)
            .map(|_| {
                let t = Instant::now();
                for _ in 0..calls {
                    f();
                }
                t.elapsed()
            })
            .collect();
        let m = median(samples);
        if m >= tick * cfg.min_ticks || calls >= 1 << 20 {
            return Timing {
                median: m / calls as u32,
                samples: iterations,
                calls_per_sample: calls,
                warnings,
            };
        }
        warnings.push(format!(
            "median {m:?} is under {} timer ticks of {tick:?}; timing {} calls per sample",
            cfg.min_ticks,
            calls * 4
        ));
        calls *= 4;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingConfig {
    pub ns: Vec<usize>,
    pub d: usize,
    pub heads: usize,
    pub split: PulseSplit,
    pub tau: f64,
    pub timing: TimingConfig,
    pub seed: u64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            ns: DEFAULT_NS.to_vec(),
            d: 32,
            heads: 2,
            split: PulseSplit::uniform(4),
            tau: 0.5,
            timing: TimingConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub n: usize,
    pub attn_ms: f64,
    pub lpa_ms: f64,
}

impl ScalingRow {
    pub fn speedup(&self) -> f64 {
        self.attn_ms / self.lpa_ms
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    pub warnings: Vec<String>,
}

fn input(n: usize, d: usize, seed: u64) -> Tensor<f32> {
    let s = seed as f32 * 0.37;
    Tensor::from_fn(n, d, |t, c| (t as f32 * 0.13 + c as f32 * 0.71 + s).sin())
}

/// Times f32 soft LPA and softmax attention forwards at each `n`.
pub fn scaling(cfg: &ScalingConfig) -> Result<ScalingReport> {
    let attn = AttentionLayer::init(AttentionConfig::new(cfg.d, cfg.heads), cfg.seed)?;
    let mut lcfg = LpaConfig::new(cfg.d, cfg.heads, cfg.split);
    lcfg.tau = cfg.tau;
    let lpa = LpaLayer::init(lcfg, cfg.seed)?;
    let mut rows = Vec::with_capacity(cfg.ns.len());
    let mut warnings = Vec::new();
    for &n in &cfg.ns {
        let x = input(n, cfg.d, cfg.seed);
        attention_forward(&x, &attn)?;
        lpa.forward(&x)?;
        let a = time_median(&cfg.timing, || {
            black_box(attention_forward(black_box(&x), &attn).expect("checked shape"));
        });
        let l = time_median(&cfg.timing, || {
            black_box(lpa.forward(black_box(&x)).expect("checked shape"));
        });
        warnings.extend(a.warnings.iter().chain(&l.warnings).map(|w| format!("n={n}: {w}")));
        rows.push(ScalingRow {
            n,
            attn_ms: a.median.as_secs_f64() * 1e3,
            lpa_ms: l.median.as_secs_f64() * 1e3,
        });
    }
    Ok(ScalingReport { rows, warnings })
}

impl ScalingReport {
    /// Rows with `lo <= n <= hi`.
    pub fn within(&self, lo: usize, hi: usize) -> ScalingReport {
        ScalingReport {
            rows: self.rows.iter().filter(|r| r.n >= lo && r.n <= hi).cloned().collect(),
            warnings: self.warnings.clone(),
        }
    }

    pub fn attention_slope(&self) -> f64 {
        let (x, y): (Vec<f64>, Vec<f64>) = self.rows.iter().map(|r| (r.n as f64, r.attn_ms)).unzip();
        loglog_slope(&x, &y)
    }

    pub fn lpa_slope(&self) -> f64 {
        let (x, y): (Vec<f64>, Vec<f64>) = self.rows.iter().map(|r| (r.n as f64, r.lpa_ms)).unzip();
        loglog_slope(&x, &y)
    }

    /// First `n` at which LPA is faster, if attention is faster (or tied) at
    /// the smallest measured `n`.
    pub fn crossover(&self) -> Option<usize> {
        let first = self.rows.first()?;
        if first.lpa_ms < first.attn_ms {
            return None;
        }
        self.rows.iter().find(|r| r.lpa_ms < r.attn_ms).map(|r| r.n)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{SCALING_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6},{:.6},{:.4}", r.n, r.attn_ms, r.lpa_ms, r.speedup());
        }
        s
    }

    pub fn to_svg(&self) -> String {
        let series = [
            ("attention", "#c0392b", self.rows.iter().map(|r| (r.n as f64, r.attn_ms)).collect::<Vec<_>>()),
            ("LPA", "#2471a3", self.rows.iter().map(|r| (r.n as f64, r.lpa_ms)).collect()),
        ];
        loglog_svg("forward time vs sequence length", "n", "ms", &series)
    }
}

/// Two-axis log-log line chart.
pub fn loglog_svg(title: &str, xlabel: &str, ylabel: &str, series: &[(&str, &str, Vec<(f64, f64)>)]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 420.0, 70.0, 20.0, 40.0, 50.0);
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.2.iter().copied())
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .collect();
    let bounds = |f: fn(&(f64, f64)) -> f64| {
        let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min).log10().floor();
        let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max).log10().ceil();
        if lo.is_finite() && hi.is_finite() {
            (lo, hi.max(lo + 1.0))
        } else {
            (0.0, 1.0)
        }
    };
    let (x0, x1) = bounds(|p| p.0);
    let (y0, y1) = bounds(|p| p.1);
    let px = |x: f64| left + (x.log10() - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y.log10() - y0) / (y1 - y0) * (h - top - bottom);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{title}</text>"#, w / 2.0);
    for e in x0 as i32..=x1 as i32 {
        let x = px(10f64.powi(e));
        let _ = writeln!(
            s,
            r##"<line x1="{x:.1}" y1="{top}" x2="{x:.1}" y2="{:.1}" stroke="#ddd"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">1e{e}</text>"##,
            h - bottom,
            h - bottom + 18.0
        );
    }
    for e in y0 as i32..=y1 as i32 {
        let y = py(10f64.powi(e));
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">1e{e}</text>"##,
            w - right,
            left - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xlabel}</text><text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">{ylabel}</text>"#,
        (left + w - right) / 2.0,
        h - 10.0,
        h / 2.0,
        h / 2.0
    );
    for (i, (name, color, data)) in series.iter().enumerate() {
        let path: Vec<String> = data
            .iter()
            .filter(|(x, y)| *x > 0.0 && *y > 0.0)
            .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        let ly = top + 16.0 * i as f64 + 8.0;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{name}</text>"#,
            left + 12.0,
            left + 36.0,
            left + 42.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}
