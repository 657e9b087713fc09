//! Hard gates: the zero-temperature limit of every gate family compiled to
//! integer frame intervals, and accumulation over those intervals by prefix
//! sums or by a dense binary matmul.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{LpaError, Result};
use crate::gates::{
    eval_aperiodic, period_of, positional_logits, predict_hidden, AperiodicParams, GateFamily,
    PeriodicParams, PositionalParams,
};
use crate::mixer::{LpaLayer, DIVISION_GUARD};
use crate::numerics::{kernels, prefix_sum, sigmoid, softplus, Eager, Real, Tensor};
use crate::reference::ToyEncoder;

/// Duty cycles below this compile to an empty program.
pub const MIN_DUTY: f64 = 1e-6;

/// Compiled intervals of one pulse. Segments are inclusive `[s, e]`,
/// sorted and disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PulseProgram {
    pub pulse: usize,
    pub family: GateFamily,
    pub segments: Vec<(usize, usize)>,
}

impl PulseProgram {
    pub fn coverage(&self) -> usize {
        self.segments.iter().map(|&(s, e)| e - s + 1).sum()
    }

    pub fn is_active(&self) -> bool {
        !self.segments.is_empty()
    }

    pub fn contains(&self, t: usize) -> bool {
        self.segments.iter().any(|&(s, e)| s <= t && t <= e)
    }

    /// Checks ordering, disjointness and bounds for a length-`n` sequence.
    pub fn is_well_formed(&self, n: usize) -> bool {
        let mut next = 0usize;
        for (i, &(s, e)) in self.segments.iter().enumerate() {
            if s > e || e >= n || (i > 0 && s < next) {
                return false;
            }
            next = e + 1;
        }
        true
    }
}

/// Programs of every pulse of one head, for a sequence of length `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentProgram {
    pub n: usize,
    pub pulses: Vec<PulseProgram>,
}

impl SegmentProgram {
    /// `n x P` binary membership matrix.
    pub fn indicator<T: Real>(&self) -> Tensor<T> {
        let mut g = Tensor::zeros(self.n, self.pulses.len());
        for (p, prog) in self.pulses.iter().enumerate() {
            for &(s, e) in &prog.segments {
                for t in s..=e {
                    g.set(t, p, T::one());
                }
            }
        }
        g
    }

    pub fn segment_count(&self) -> usize {
        self.pulses.iter().map(|p| p.segments.len()).sum()
    }
}

/// How the aperiodic half-width is computed under hard gates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMode {
    /// Read-out weights collapsed to the argmax one-hot.
    #[default]
    OneHot,
    /// Keep the soft read-out at the given temperature for the width only.
    Soft { tau: f64 },
}

/// Execution strategy for the accumulate step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Materialize `G` (`n x P`) and compute `G^T V`.
    #[default]
    Dense,
    /// Range sums from one prefix pass, scattered back with difference arrays.
    PrefixSum,
}

/// Integer frames strictly inside `(lo, hi)`, clipped to `[0, n-1]`.
fn open_interval(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    if n == 0 || !(hi > lo) {
        return None;
    }
    let start = (lo.floor() + 1.0).max(0.0);
    let end = (hi.ceil() - 1.0).min((n - 1) as f64);
    if start > end {
        return None;
    }
    Some((start as usize, end as usize))
}

/// Lowest index of the maximum.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn merge(mut segs: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    segs.sort_unstable();
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(segs.len());
    for (s, e) in segs {
        match out.last_mut() {
            Some(last) if s <= last.1 + 1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

/// Maximal runs of `true`.
pub fn runs(mask: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (t, &on) in mask.iter().enumerate() {
        match (on, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push((s, t - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, mask.len() - 1));
    }
    out
}

fn bias_at(bias: Option<&[f64]>, p: usize) -> f64 {
    bias.and_then(|b| b.get(p).copied()).unwrap_or(0.0)
}

/// Centers and half-widths the hard aperiodic gates use.
pub fn hard_aperiodic_extent(
    x_head: &Tensor<f64>,
    p: &AperiodicParams<Tensor<f64>>,
    mode: DeltaMode,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let n = x_head.rows();
    if n == 0 {
        return Ok((vec![], vec![]));
    }
    let h = predict_hidden(x_head, p)?;
    let scores = kernels::matmul(&h, &p.query)?;
    let pulses = p.query.cols();
    let mut centers = Vec::with_capacity(pulses);
    let mut widths = Vec::with_capacity(pulses);
    let soft = match mode {
        DeltaMode::Soft { tau } => {
            Some(eval_aperiodic(&Eager::<f64>::new(), x_head, p, tau, None).half_widths)
        }
        DeltaMode::OneHot => None,
    };
    for q in 0..pulses {
        let col: Vec<f64> = (0..n).map(|t| scores.at(t, q)).collect();
        let c = argmax(&col);
        let delta = match &soft {
            Some(w) => w.at(q, 0),
            None => {
                let f: f64 = (0..p.width_w.rows()).map(|j| h.at(c, j) * p.width_w.at(j, 0)).sum::<f64>()
                    + p.width_b.at(0, 0);
                softplus(f)
            }
        };
        centers.push(c);
        widths.push(delta);
    }
    Ok((centers, widths))
}

/// One interval per aperiodic pulse: the integer frames strictly inside
/// `(c - delta, c + delta)` where `c` is the argmax position. `bias` adds to
/// `delta` per pulse.
pub fn compile_aperiodic(
    x_head: &Tensor<f64>,
    p: &AperiodicParams<Tensor<f64>>,
    bias: Option<&[f64]>,
    mode: DeltaMode,
) -> Result<Vec<PulseProgram>> {
    let n = x_head.rows();
    let (centers, widths) = hard_aperiodic_extent(x_head, p, mode)?;
    Ok((0..p.pulses())
        .map(|q| {
            let segments = if n == 0 {
                vec![]
            } else {
                let reach = widths[q] + bias_at(bias, q);
                let c = centers[q] as f64;
                open_interval(c - reach, c + reach, n).into_iter().collect()
            };
            PulseProgram {
                pulse: q,
                family: GateFamily::Aperiodic,
                segments,
            }
        })
        .collect())
}

/// Analytic on-regions of one periodic pulse: integer `t` in `[0, n)` with
/// `cos(2 pi t / T - phi) > cos(pi d) - bias`.
pub fn periodic_segments(period: f64, phase: f64, duty: f64, bias: f64, n: usize) -> Vec<(usize, usize)> {
    if n == 0 || duty < MIN_DUTY {
        return vec![];
    }
    let kappa = (PI * duty).cos() - bias;
    if kappa >= 1.0 {
        return vec![];
    }
    if kappa < -1.0 {
        return vec![(0, n - 1)];
    }
    let d_eff = kappa.acos() / PI;
    if d_eff < MIN_DUTY {
        return vec![];
    }
    // on for 2 pi t / T - phi in (-pi d + 2 pi k, pi d + 2 pi k)
    let to_t = |a: f64| period * a / (2.0 * PI);
    let k_lo = ((-(phase + PI * d_eff)) / (2.0 * PI)).floor() as i64 - 1;
    let k_hi = ((2.0 * PI * (n as f64) / period - phase + PI * d_eff) / (2.0 * PI)).ceil() as i64 + 1;
    let mut segs = Vec::new();
    for k in k_lo..=k_hi {
        let base = phase + 2.0 * PI * k as f64;
        let lo = to_t(base - PI * d_eff);
        let hi = to_t(base + PI * d_eff);
        if let Some(s) = open_interval(lo, hi, n) {
            segs.push(s);
        }
    }
    merge(segs)
}

pub fn compile_periodic(p: &PeriodicParams<Tensor<f64>>, n: usize, bias: Option<&[f64]>) -> Vec<PulseProgram> {
    let periods = p.periods();
    let duties = p.duties();
    (0..p.pulses())
        .map(|q| PulseProgram {
            pulse: q,
            family: GateFamily::Periodic,
            segments: periodic_segments(periods[q], p.phase.at(q, 0), duties[q], bias_at(bias, q), n),
        })
        .collect()
}

/// Runs of positive positional logit.
pub fn compile_positional(p: &PositionalParams<Tensor<f64>>, n: usize, bias: Option<&[f64]>) -> Vec<PulseProgram> {
    let z = if n == 0 {
        Tensor::zeros(p.pulses(), 0)
    } else {
        positional_logits(&Eager::<f64>::new(), p, n, None)
    };
    (0..p.pulses())
        .map(|q| {
            let b = bias_at(bias, q);
            let mask: Vec<bool> = (0..n).map(|t| z.at(q, t) + b > 0.0).collect();
            PulseProgram {
                pulse: q,
                family: GateFamily::Positional,
                segments: runs(&mask),
            }
        })
        .collect()
}

/// Compiled positional programs keyed by a hash of the parameters, the
/// bias and the sequence length. Reads take a shared lock.
#[derive(Debug, Default)]
pub struct PositionalCache {
    map: RwLock<HashMap<(u64, usize), Arc<Vec<PulseProgram>>>>,
}

fn hash_floats(h: &mut DefaultHasher, v: &[f64]) {
    for x in v {
        x.to_bits().hash(h);
    }
}

impl PositionalCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn key(p: &PositionalParams<Tensor<f64>>, bias: Option<&[f64]>) -> u64 {
        let mut h = DefaultHasher::new();
        p.alpha.shape().hash(&mut h);
        hash_floats(&mut h, p.alpha.data());
        hash_floats(&mut h, p.beta.data());
        hash_floats(&mut h, p.bias.data());
        hash_floats(&mut h, bias.unwrap_or(&[]));
        h.finish()
    }

    pub fn get_or_compile(
        &self,
        p: &PositionalParams<Tensor<f64>>,
        n: usize,
        bias: Option<&[f64]>,
    ) -> Arc<Vec<PulseProgram>> {
        let key = (Self::key(p, bias), n);
        if let Some(hit) = self.map.read().expect("cache lock").get(&key) {
            return hit.clone();
        }
        let compiled = Arc::new(compile_positional(p, n, bias));
        self.map
            .write()
            .expect("cache lock")
            .entry(key)
            .or_insert(compiled)
            .clone()
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct HardOptions {
    pub delta: DeltaMode,
    pub strategy: Strategy,
}

/// Per-pulse cross-layer bias for the whole layer (`H * P` values).
fn layer_bias(layer: &LpaLayer, prev: Option<&[f64]>) -> Result<Option<Vec<f64>>> {
    match (&layer.params.cross, prev) {
        (Some(proj), Some(prev)) => Ok(Some(crate::gates::cross_layer_bias(prev, proj)?)),
        _ => Ok(None),
    }
}

/// Compiles every head of a layer for input `x` (`n x d`). Aperiodic
/// programs depend on `x`; the others only on `n`.
pub fn compile_layer(
    x: &Tensor<f64>,
    layer: &LpaLayer,
    prev_gate_means: Option<&[f64]>,
    delta: DeltaMode,
    cache: Option<&PositionalCache>,
) -> Result<Vec<SegmentProgram>> {
    layer.validate()?;
    let cfg = &layer.config;
    if x.cols() != cfg.d {
        return Err(LpaError::Shape(format!("layer width {} got input {:?}", cfg.d, x.shape())));
    }
    let n = x.rows();
    let dh = cfg.head_width();
    let ph = cfg.pulses_per_head();
    let split = cfg.split;
    let bias = layer_bias(layer, prev_gate_means)?;
    let mut out = Vec::with_capacity(cfg.heads);
    for (h, head) in layer.params.heads.iter().enumerate() {
        let hb = bias.as_ref().map(|b| &b[h * ph..(h + 1) * ph]);
        let fam = |start: usize, len: usize| hb.map(|b| &b[start..start + len]);
        let mut pulses = Vec::with_capacity(ph);
        if split.aperiodic > 0 {
            let xs = x.slice_cols(h * dh, (h + 1) * dh);
            pulses.extend(compile_aperiodic(&xs, &head.aperiodic, fam(0, split.aperiodic), delta)?);
        }
        pulses.extend(compile_periodic(&head.periodic, n, fam(split.aperiodic, split.periodic)));
        let pb = fam(split.aperiodic + split.periodic, split.positional);
        match cache {
            Some(c) => pulses.extend(c.get_or_compile(&head.positional, n, pb).iter().cloned()),
            None => pulses.extend(compile_positional(&head.positional, n, pb)),
        }
        for (i, p) in pulses.iter_mut().enumerate() {
            p.pulse = i;
        }
        out.push(SegmentProgram { n, pulses });
    }
    Ok(out)
}

/// Mean of each pulse's segment rows of `values` (`n x w`) via one prefix
/// pass: `(1/|S_p|) sum_i (C[e_i + 1] - C[s_i])`. Inactive pulses get zeros.
pub fn prefix_accumulate<T: Real>(values: &Tensor<T>, program: &SegmentProgram) -> (Tensor<T>, Vec<bool>) {
    let prefix = prefix_sum(values);
    accumulate_from_prefix(&prefix, program)
}

fn accumulate_from_prefix<T: Real>(prefix: &Tensor<T>, program: &SegmentProgram) -> (Tensor<T>, Vec<bool>) {
    let w = prefix.cols();
    let mut out = Tensor::zeros(program.pulses.len(), w);
    let mut active = Vec::with_capacity(program.pulses.len());
    for (p, prog) in program.pulses.iter().enumerate() {
        let count = prog.coverage();
        active.push(count > 0);
        if count == 0 {
            continue;
        }
        let row = out.row_mut(p);
        for &(s, e) in &prog.segments {
            let hi = prefix.row(e + 1);
            let lo = prefix.row(s);
            for c in 0..w {
                row[c] = row[c] + (hi[c] - lo[c]);
            }
        }
        let inv = T::one() / T::from_f64(count as f64);
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
    (out, active)
}

/// Result of a hard forward pass.
#[derive(Clone)]
pub struct HardOutput<T> {
    pub y: Tensor<T>,
    /// `1 - exp(-covering pulses)` per position.
    pub mask: Vec<f64>,
    /// Number of covering pulses per position, summed over heads.
    pub active_per_frame: Vec<usize>,
}

impl<T> HardOutput<T> {
    pub fn mean_active_pulses(&self) -> f64 {
        if self.active_per_frame.is_empty() {
            return 0.0;
        }
        self.active_per_frame.iter().sum::<usize>() as f64 / self.active_per_frame.len() as f64
    }
}

/// Dense path: `S = G^T V / |S_p|`, then `(G diag(w a) S) / (G w)`.
fn head_dense<T: Real>(v: &Tensor<T>, prog: &SegmentProgram, wa: &[T], w: &[T]) -> Tensor<T> {
    let n = prog.n;
    let g: Tensor<T> = prog.indicator();
    let mut s = kernels::matmul(&kernels::transpose(&g), v).expect("dense accumulate shapes");
    for (p, pp) in prog.pulses.iter().enumerate() {
        let c = pp.coverage();
        let inv = if c > 0 { T::one() / T::from_f64(c as f64) } else { T::zero() };
        for x in s.row_mut(p) {
            *x = *x * inv;
        }
    }
    let gwa = Tensor::from_fn(n, prog.pulses.len(), |t, p| g.at(t, p) * wa[p]);
    let num = kernels::matmul(&gwa, &s).expect("broadcast shapes");
    let den = (0..n)
        .map(|t| g.row(t).iter().zip(w).map(|(&a, &b)| a * b).sum())
        .collect();
    finish_head(num, den)
}

/// Prefix path: range sums from one prefix pass, scattered back to
/// positions with difference arrays.
fn head_prefix<T: Real>(v: &Tensor<T>, prog: &SegmentProgram, wa: &[T], w: &[T]) -> Tensor<T> {
    let n = prog.n;
    let width = v.cols();
    let (vbar, _) = prefix_accumulate(v, prog);
    let mut num = Tensor::zeros(n + 1, width);
    let mut den = vec![T::zero(); n + 1];
    let mut live = vec![0i64; n + 1];
    for (p, pp) in prog.pulses.iter().enumerate() {
        for &(s, e) in &pp.segments {
            for c in 0..width {
                let add = wa[p] * vbar.at(p, c);
                num.set(s, c, num.at(s, c) + add);
                num.set(e + 1, c, num.at(e + 1, c) - add);
            }
            den[s] = den[s] + w[p];
            den[e + 1] = den[e + 1] - w[p];
            live[s] += 1;
            live[e + 1] -= 1;
        }
    }
    let mut out = Tensor::zeros(n, width);
    let mut run = vec![T::zero(); width];
    let mut run_den = T::zero();
    let mut run_live = 0i64;
    let mut dens = Vec::with_capacity(n);
    for t in 0..n {
        for c in 0..width {
            run[c] = run[c] + num.at(t, c);
            out.set(t, c, run[c]);
        }
        run_den = run_den + den[t];
        run_live += live[t];
        // exact zero where no pulse covers t
        dens.push(if run_live == 0 { T::zero() } else { run_den });
    }
    finish_head(out, dens)
}

/// `num / den` per row with the division guard.
fn finish_head<T: Real>(mut num: Tensor<T>, den: Vec<T>) -> Tensor<T> {
    let guard = T::from_f64(DIVISION_GUARD);
    for (t, d) in den.into_iter().enumerate() {
        let inv = if d >= guard { T::one() / d } else { T::zero() };
        for x in num.row_mut(t) {
            *x = *x * inv;
        }
    }
    num
}

/// Evaluates the layer with binary gates given compiled programs.
pub fn hard_forward<T: Real>(
    x: &Tensor<T>,
    layer: &LpaLayer,
    programs: &[SegmentProgram],
    strategy: Strategy,
) -> Result<HardOutput<T>> {
    let cfg = &layer.config;
    let (n, d) = x.dims();
    if d != cfg.d || programs.len() != cfg.heads {
        return Err(LpaError::Shape(format!(
            "hard forward: input {:?}, {} programs for {} heads",
            x.shape(),
            programs.len(),
            cfg.heads
        )));
    }
    let ph = cfg.pulses_per_head();
    for prog in programs {
        if prog.n != n || prog.pulses.len() != ph {
            return Err(LpaError::Shape("program does not match input length or pulse count".into()));
        }
    }
    let dh = cfg.head_width();
    let w_v: Tensor<T> = layer.params.w_v.cast();
    let w_o: Tensor<T> = layer.params.w_o.cast();
    let v = kernels::matmul(x, &w_v)?;
    let mut joined = Tensor::zeros(n, d);
    let mut covering = vec![0usize; n];
    for (h, (head, prog)) in layer.params.heads.iter().zip(programs).enumerate() {
        let wl = kernels::softmax(head.wlogit.data(), 1.0)?;
        let weights: Vec<T> = wl.iter().map(|&w| T::from_f64(w)).collect();
        let wa: Vec<T> = weights
            .iter()
            .zip(head.amp.data())
            .map(|(&w, &a)| w * T::from_f64(a))
            .collect();
        let vs = v.slice_cols(h * dh, (h + 1) * dh);
        let out = match strategy {
            Strategy::Dense => head_dense(&vs, prog, &wa, &weights),
            Strategy::PrefixSum => head_prefix(&vs, prog, &wa, &weights),
        };
        for t in 0..n {
            joined.row_mut(t)[h * dh..(h + 1) * dh].copy_from_slice(out.row(t));
        }
        for pp in &prog.pulses {
            for &(s, e) in &pp.segments {
                for c in covering.iter_mut().take(e + 1).skip(s) {
                    *c += 1;
                }
            }
        }
    }
    let mut y = kernels::matmul(&joined, &w_o)?;
    let mask: Vec<f64> = covering.iter().map(|&c| 1.0 - (-(c as f64)).exp()).collect();
    for (t, &m) in mask.iter().enumerate() {
        let m = T::from_f64(m);
        for v in y.row_mut(t) {
            *v = *v * m;
        }
    }
    Ok(HardOutput {
        y,
        mask,
        active_per_frame: covering,
    })
}

/// Compiles and runs in one call.
pub fn hard_layer_forward<T: Real>(
    x: &Tensor<T>,
    layer: &LpaLayer,
    prev_gate_means: Option<&[f64]>,
    opts: HardOptions,
) -> Result<(HardOutput<T>, Vec<SegmentProgram>)> {
    let programs = compile_layer(&x.cast(), layer, prev_gate_means, opts.delta, None)?;
    let out = hard_forward(x, layer, &programs, opts.strategy)?;
    Ok((out, programs))
}

/// Fraction-of-length gate means of hard programs (`H * P` values), the
/// hard analogue of the soft gate means fed to the next layer.
pub fn program_gate_means(programs: &[SegmentProgram]) -> Vec<f64> {
    programs
        .iter()
        .flat_map(|p| {
            let n = p.n.max(1) as f64;
            p.pulses.iter().map(move |q| q.coverage() as f64 / n)
        })
        .collect()
}

/// A pre-sigmoid logit that is too close to zero for the hard gate to be a
/// faithful stand-in for the soft one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginViolation {
    pub head: usize,
    pub pulse: usize,
    /// `None` for an aperiodic argmax-margin violation.
    pub position: Option<usize>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaturationReport {
    pub margin: f64,
    /// Smallest |logit| over all pulses and positions.
    pub min_logit: f64,
    /// Smallest gap between the best and second-best aperiodic score.
    pub min_argmax_gap: f64,
    pub violations: Vec<MarginViolation>,
}

impl SaturationReport {
    pub fn satisfied(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every pre-sigmoid numerator of the soft layer at temperature `tau`
/// (both edges of each aperiodic window) against `margin`, and the
/// aperiodic score gap between the top two positions.
pub fn saturation_report(
    x: &Tensor<f64>,
    layer: &LpaLayer,
    prev_gate_means: Option<&[f64]>,
    tau: f64,
    margin: f64,
) -> Result<SaturationReport> {
    layer.validate()?;
    let cfg = &layer.config;
    let n = x.rows();
    let dh = cfg.head_width();
    let ph = cfg.pulses_per_head();
    let split = cfg.split;
    let bias = layer_bias(layer, prev_gate_means)?;
    let b = Eager::<f64>::new();
    let mut rep = SaturationReport {
        margin,
        min_logit: f64::INFINITY,
        min_argmax_gap: f64::INFINITY,
        violations: vec![],
    };
    let note = |rep: &mut SaturationReport, head: usize, pulse: usize, t: usize, z: f64| {
        rep.min_logit = rep.min_logit.min(z.abs());
        if z.abs() < margin {
            rep.violations.push(MarginViolation {
                head,
                pulse,
                position: Some(t),
                value: z,
            });
        }
    };
    for (h, head) in layer.params.heads.iter().enumerate() {
        let hb = |p: usize| bias.as_ref().map_or(0.0, |v| v[h * ph + p]);
        if split.aperiodic > 0 && n > 0 {
            let xs = x.slice_cols(h * dh, (h + 1) * dh);
            let e = eval_aperiodic(&b, &xs, &head.aperiodic, tau, None);
            let scores = kernels::matmul(&e.hidden, &head.aperiodic.query)?;
            for q in 0..split.aperiodic {
                let reach = e.half_widths.at(q, 0) + hb(q);
                let c = e.centers.at(q, 0);
                for t in 0..n {
                    let tf = t as f64;
                    note(&mut rep, h, q, t, tf - c + reach);
                    note(&mut rep, h, q, t, c + reach - tf);
                }
                if n > 1 {
                    let mut col: Vec<f64> = (0..n).map(|t| scores.at(t, q)).collect();
                    col.sort_by(|a, b| b.total_cmp(a));
                    let gap = col[0] - col[1];
                    rep.min_argmax_gap = rep.min_argmax_gap.min(gap);
                    if gap < margin {
                        rep.violations.push(MarginViolation {
                            head: h,
                            pulse: q,
                            position: None,
                            value: gap,
                        });
                    }
                }
            }
        }
        if split.periodic > 0 && n > 0 {
            let periods = head.periodic.periods();
            let duties = head.periodic.duties();
            for q in 0..split.periodic {
                let pulse = split.aperiodic + q;
                let thr = (PI * duties[q]).cos();
                for t in 0..n {
                    let theta = 2.0 * PI * t as f64 / periods[q] - head.periodic.phase.at(q, 0);
                    note(&mut rep, h, pulse, t, theta.cos() - thr + hb(pulse));
                }
            }
        }
        if split.positional > 0 && n > 0 {
            let z = positional_logits(&b, &head.positional, n, None);
            for q in 0..split.positional {
                let pulse = split.aperiodic + split.periodic + q;
                for t in 0..n {
                    note(&mut rep, h, pulse, t, z.at(q, t) + hb(pulse));
                }
            }
        }
    }
    Ok(rep)
}

/// Per-layer artifacts of [`hard_encoder_forward`]; `None` for attention layers.
#[derive(Debug, Clone, Default)]
pub struct HardLayerReport {
    pub programs: Option<Vec<SegmentProgram>>,
    pub mean_active_pulses: Option<f64>,
    pub saturation: Option<SaturationReport>,
}

/// Whole-encoder forward pass with every LPA layer on the hard path and
/// attention layers unchanged. Gate means of an LPA layer feed the next
/// layer only when that layer is LPA too, as in the soft pass. With
/// `check = Some((tau, margin))` each LPA layer also gets a saturation report.
pub fn hard_encoder_forward(
    encoder: &ToyEncoder,
    tokens: &Tensor<f64>,
    opts: HardOptions,
    check: Option<(f64, f64)>,
) -> Result<(Tensor<f64>, Vec<HardLayerReport>)> {
    let mut reports: Vec<HardLayerReport> = vec![HardLayerReport::default(); encoder.layers()];
    let mut prev: Option<Vec<f64>> = None;
    let hidden = encoder.forward_with_mixer(tokens, |i, u| match encoder.lpa_layer(i) {
        Some(layer) => {
            let carried = prev.take();
            if let Some((tau, margin)) = check {
                reports[i].saturation = Some(saturation_report(u, &layer, carried.as_deref(), tau, margin)?);
            }
            let (out, programs) = hard_layer_forward(u, &layer, carried.as_deref(), opts)?;
            prev = Some(program_gate_means(&programs));
            reports[i].mean_active_pulses = Some(out.mean_active_pulses());
            reports[i].programs = Some(programs);
            Ok(out.y)
        }
        None => {
            prev = None;
            let attn = encoder
                .attention_layer(i)
                .ok_or_else(|| LpaError::Config(format!("layer {i} has no mixer")))?;
            attn.forward(u)
        }
    })?;
    Ok((hidden, reports))
}

/// Soft gate value at `tau` of a periodic pulse, for oracles and reports.
pub fn periodic_soft_value(period: f64, phase: f64, duty: f64, t: usize, tau: f64) -> f64 {
    let theta = 2.0 * PI * t as f64 / period - phase;
    sigmoid((theta.cos() - (PI * duty).cos()) / tau)
}

/// Period of a raw `rho` parameter (re-exported for callers compiling by hand).
pub fn period_for(rho: f64) -> f64 {
    period_of(rho)
}
