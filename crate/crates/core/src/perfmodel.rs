//! Roofline and memory models for one attention or LPA layer at batch size 1.
//!
//! Each component is costed as `max(flops / peak, bytes / bandwidth)`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LpaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F16,
    F32,
}

impl Dtype {
    pub fn bytes(self) -> f64 {
        match self {
            Dtype::F16 => 2.0,
            Dtype::F32 => 4.0,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::F16 => "f16",
            Dtype::F32 => "f32",
        })
    }
}

/// Arithmetic precision for GEMMs and storage precision for activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Precision {
    pub compute: Dtype,
    pub storage: Dtype,
}

impl Precision {
    pub fn uniform(d: Dtype) -> Self {
        Self {
            compute: d,
            storage: d,
        }
    }

    /// f16 GEMMs over f32 activations and gates.
    pub fn mixed() -> Self {
        Self {
            compute: Dtype::F16,
            storage: Dtype::F32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakFlops {
    pub f16: f64,
    pub f32: f64,
}

/// Memory passes per memory-bound component and the gate predictor's
/// convolution width. Not fixed by first principles; tuned per device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Calibration {
    pub softmax_passes: f64,
    pub elementwise_passes: f64,
    pub accumulation_passes: f64,
    pub conv_kernel: usize,
}

impl Default for Calibration {
    fn default() -> Self {
        Self {
            softmax_passes: 1.0,
            elementwise_passes: 3.0,
            accumulation_passes: 2.0,
            conv_kernel: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub name: String,
    pub bandwidth_bps: f64,
    pub flops: PeakFlops,
    #[serde(default)]
    pub calibration: Calibration,
}

impl HardwareProfile {
    /// 273 GB/s and 16.7 TFLOP/s at f16. The f32 peak is taken as half the f16 peak.
    pub fn m4_pro() -> Self {
        Self {
            name: "m4-pro".into(),
            bandwidth_bps: 273e9,
            flops: PeakFlops {
                f16: 16.7e12,
                f32: 8.35e12,
            },
            calibration: Calibration::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| LpaError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.bandwidth_bps) || !ok(self.flops.f16) || !ok(self.flops.f32) {
            return Err(LpaError::Config(format!(
                "profile `{}` needs positive bandwidth and peak flops",
                self.name
            )));
        }
        let c = &self.calibration;
        if [c.softmax_passes, c.elementwise_passes, c.accumulation_passes]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(LpaError::Config("pass counts must be non-negative".into()));
        }
        Ok(())
    }

    pub fn peak(&self, d: Dtype) -> f64 {
        match d {
            Dtype::F16 => self.flops.f16,
            Dtype::F32 => self.flops.f32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Component {
    pub name: &'static str,
    pub flops: f64,
    pub bytes: f64,
    pub compute_s: f64,
    pub memory_s: f64,
    pub time_s: f64,
}

impl Component {
    fn new(name: &'static str, flops: f64, bytes: f64, peak: f64, bandwidth: f64) -> Self {
        let compute_s = flops / peak;
        let memory_s = bytes / bandwidth;
        Self {
            name,
            flops,
            bytes,
            compute_s,
            memory_s,
            time_s: compute_s.max(memory_s),
        }
    }

    pub fn memory_bound(&self) -> bool {
        self.memory_s > self.compute_s
    }

    pub fn time_us(&self) -> f64 {
        self.time_s * 1e6
    }
}

/// Four components in the order: linear projections, QKᵀ or gate
/// prediction, softmax or element-wise, scores×V or accumulation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostBreakdown {
    pub model: &'static str,
    pub components: Vec<Component>,
}

impl CostBreakdown {
    pub fn layer_time_s(&self) -> f64 {
        self.components.iter().map(|c| c.time_s).sum()
    }

    pub fn layer_time_us(&self) -> f64 {
        self.layer_time_s() * 1e6
    }

    pub fn model_time_s(&self, layers: usize) -> f64 {
        self.layer_time_s() * layers as f64
    }

    pub fn total_flops(&self) -> f64 {
        self.components.iter().map(|c| c.flops).sum()
    }

    pub fn total_bytes(&self) -> f64 {
        self.components.iter().map(|c| c.bytes).sum()
    }

    pub fn component(&self, name: &str) -> Option<&Component> {
        self.components.iter().find(|c| c.name == name)
    }
}

pub fn attention_cost(
    t: usize,
    d: usize,
    heads: usize,
    profile: &HardwareProfile,
    precision: Precision,
) -> CostBreakdown {
    let (t, d, h) = (t as f64, d as f64, heads as f64);
    let peak = profile.peak(precision.compute);
    let bw = profile.bandwidth_bps;
    let e = precision.storage.bytes();
    let scores = h * t * t * e;
    let act = t * d * e;
    let weights = 4.0 * d * d * e;
    let components = vec![
        Component::new("linear_projections", 8.0 * t * d * d, 2.0 * act + weights, peak, bw),
        Component::new("qk", 2.0 * t * t * d, 2.0 * act + scores, peak, bw),
        Component::new(
            "softmax",
            5.0 * h * t * t,
            profile.calibration.softmax_passes * scores,
            peak,
            bw,
        ),
        Component::new("scores_v", 2.0 * t * t * d, scores + 2.0 * act, peak, bw),
    ];
    CostBreakdown {
        model: "attention",
        components,
    }
}

pub fn lpa_cost(
    t: usize,
    d: usize,
    pulses: usize,
    profile: &HardwareProfile,
    precision: Precision,
) -> CostBreakdown {
    let (t, d, p) = (t as f64, d as f64, pulses as f64);
    let k = profile.calibration.conv_kernel as f64;
    let peak = profile.peak(precision.compute);
    let bw = profile.bandwidth_bps;
    let e = precision.storage.bytes();
    let act = t * d * e;
    let gate = t * p * e;
    // depthwise conv, d -> d and d -> d/2 GEMMs, then per-pulse scores over the hidden features
    let predictor = 2.0 * k * t * d + 2.0 * t * d * d + 2.0 * t * d * (d / 2.0) + 2.0 * t * (d / 2.0) * p;
    let predictor_bytes = act + 1.5 * d * d * e + gate;
    let c = &profile.calibration;
    let components = vec![
        Component::new("linear_projections", 8.0 * t * d * d, 2.0 * act + 4.0 * d * d * e, peak, bw),
        Component::new("gate_prediction", predictor, predictor_bytes, peak, bw),
        Component::new("elementwise", 4.0 * t * d, c.elementwise_passes * act, peak, bw),
        Component::new(
            "accumulation",
            2.0 * t * d + 2.0 * p * d + t * p,
            c.accumulation_passes * (act + gate),
            peak,
            bw,
        ),
    ];
    CostBreakdown {
        model: "lpa",
        components,
    }
}

/// Pass count that would make a memory-bound component take `measured_us`.
pub fn implied_passes(measured_us: f64, bytes_per_pass: f64, profile: &HardwareProfile) -> f64 {
    if bytes_per_pass <= 0.0 {
        return 0.0;
    }
    measured_us * 1e-6 * profile.bandwidth_bps / bytes_per_pass
}

/// Smallest `t` in `candidates` from which LPA is modeled faster than attention,
/// provided attention is faster at the first candidate.
pub fn crossover(
    candidates: &[usize],
    d: usize,
    heads: usize,
    pulses: usize,
    profile: &HardwareProfile,
    precision: Precision,
) -> Option<usize> {
    let faster = |t: usize| {
        lpa_cost(t, d, pulses, profile, precision).layer_time_s()
            < attention_cost(t, d, heads, profile, precision).layer_time_s()
    };
    let first = *candidates.first()?;
    if faster(first) {
        return None;
    }
    candidates.iter().copied().find(|&t| faster(t))
}

pub const FRAME_RATE_HZ: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryRow {
    pub seconds: f64,
    pub frames: usize,
    pub attention_bytes: f64,
    pub lpa_bytes: f64,
}

impl MemoryRow {
    pub fn attention_mib(&self) -> f64 {
        self.attention_bytes / (1024.0 * 1024.0)
    }

    pub fn lpa_kib(&self) -> f64 {
        self.lpa_bytes / 1024.0
    }

    pub fn ratio(&self) -> f64 {
        if self.lpa_bytes == 0.0 {
            0.0
        } else {
            self.attention_bytes / self.lpa_bytes
        }
    }
}

/// Per-layer peak bytes for the attention score matrix and the LPA gate tensor.
pub fn memory_table(
    durations: &[f64],
    frame_rate: f64,
    pulses: usize,
    dtype: Dtype,
) -> Vec<MemoryRow> {
    durations
        .iter()
        .map(|&s| {
            let frames = (s * frame_rate).round().max(0.0) as usize;
            let t = frames as f64;
            MemoryRow {
                seconds: s,
                frames,
                attention_bytes: t * t * dtype.bytes(),
                lpa_bytes: t * pulses as f64 * dtype.bytes(),
            }
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let n = pts.len() as f64;
    if n < 2.0 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table9() -> (CostBreakdown, CostBreakdown, CostBreakdown) {
        let m4 = HardwareProfile::m4_pro();
        (
            attention_cost(6000, 768, 12, &m4, Precision::uniform(Dtype::F16)),
            lpa_cost(6000, 768, 12, &m4, Precision::mixed()),
            lpa_cost(6000, 768, 36, &m4, Precision::mixed()),
        )
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs()
    }

    #[test]
    fn attention_compute_bound_entries() {
        let (a, _, _) = table9();
        let us = |n: &str| a.component(n).unwrap().time_us();
        assert!(close(us("linear_projections"), 1696.0, 0.01));
        assert!(close(us("qk"), 3311.0, 0.01));
        assert!(close(us("scores_v"), 3311.0, 0.01));
        assert!(!a.component("qk").unwrap().memory_bound());
    }

    #[test]
    fn score_storage_is_864_mb() {
        let m4 = HardwareProfile::m4_pro();
        let a = attention_cost(6000, 768, 12, &m4, Precision::uniform(Dtype::F16));
        assert_eq!(a.component("softmax").unwrap().bytes, 864e6);
    }

    #[test]
    fn lpa_entries_and_pulse_independence() {
        let (_, l12, l36) = table9();
        assert_eq!(l12.components[0], l36.components[0]);
        let diff = (l36.layer_time_s() - l12.layer_time_s()) / l12.layer_time_s();
        assert!(diff > 0.0 && diff <= 0.01, "{diff}");
        let acc = l12.component("accumulation").unwrap();
        assert!(acc.memory_bound());
        assert!(close(acc.time_us(), 136.0, 0.05));
        assert!(close(l36.component("accumulation").unwrap().time_us(), 142.0, 0.05));
        assert!(close(l12.component("elementwise").unwrap().time_us(), 201.0, 0.02));
        assert!(close(l12.component("gate_prediction").unwrap().time_us(), 797.0, 0.25));
    }

    #[test]
    fn zero_pulses_reads_input_only() {
        let m4 = HardwareProfile::m4_pro();
        let mut m = m4.clone();
        m.calibration.accumulation_passes = 1.0;
        let l = lpa_cost(100, 16, 0, &m, Precision::uniform(Dtype::F32));
        assert_eq!(l.component("accumulation").unwrap().bytes, 100.0 * 16.0 * 4.0);
    }

    #[test]
    fn gate_tensor_is_small_next_to_input() {
        let gate = 6000.0 * 36.0 * 4.0;
        let input = 6000.0 * 768.0 * 4.0;
        assert_eq!(gate, 864_000.0);
        assert!(gate / input < 0.05);
    }

    #[test]
    fn memory_rows() {
        let rows = memory_table(&[10.0, 120.0, 0.0], FRAME_RATE_HZ, 12, Dtype::F32);
        assert_eq!(rows[0].frames, 500);
        assert!((rows[0].attention_mib() - 0.95).abs() < 0.005);
        assert!((rows[0].lpa_kib() - 23.4375).abs() < 1e-12);
        assert!((rows[1].attention_mib() - 137.33).abs() < 0.005);
        assert_eq!(rows[1].ratio(), 500.0);
        assert_eq!(rows[2].attention_bytes, 0.0);
        assert_eq!(rows[2].lpa_bytes, 0.0);
    }

    #[test]
    fn scaling_exponents_and_crossover() {
        let m4 = HardwareProfile::m4_pro();
        let ts: Vec<usize> = (1..=12).map(|i| i * 500).collect();
        let xs: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let p = Precision::uniform(Dtype::F16);
        let att: Vec<f64> = ts.iter().map(|&t| attention_cost(t, 768, 12, &m4, p).layer_time_s()).collect();
        let lpa: Vec<f64> = ts.iter().map(|&t| lpa_cost(t, 768, 12, &m4, p).layer_time_s()).collect();
        assert!(loglog_slope(&xs, &lpa) <= 1.1);
        assert!(loglog_slope(&xs, &att) > 1.0);
        let long: Vec<f64> = [1e5, 2e5, 4e5, 8e5].to_vec();
        let att_long: Vec<f64> = long
            .iter()
            .map(|&t| attention_cost(t as usize, 768, 12, &m4, p).layer_time_s())
            .collect();
        assert!(loglog_slope(&long, &att_long) >= 1.9);
        let cands: Vec<usize> = (1..=400).map(|i| i * 16).collect();
        assert!(crossover(&cands, 768, 12, 12, &m4, p).is_some());
    }

    #[test]
    fn profile_json() {
        let p = HardwareProfile::from_json(
            r#"{"name":"x","bandwidth_bps":1e11,"flops":{"f16":2e12,"f32":1e12}}"#,
        )
        .unwrap();
        assert_eq!(p.calibration, Calibration::default());
        assert!(HardwareProfile::from_json(r#"{"name":"x","bandwidth_bps":0,"flops":{"f16":1,"f32":1}}"#).is_err());
    }

    #[test]
    fn loglog_slope_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        assert!((loglog_slope(&xs, &ys) - 1.5).abs() < 1e-12);
    }
}
