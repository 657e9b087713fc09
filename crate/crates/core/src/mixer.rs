//! The LPA layer: gated accumulation over pulses.
//!
//! For each head (a disjoint `d/H` channel slice with its own pulses):
//!
//! ```text
//! v_bar[p] = sum_t g[p,t] v[t] / sum_t g[p,t]                 (v = x W_V, head slice)
//! out[t]   = sum_p w_p g[p,t] a_p v_bar[p] / sum_p w_p g[p,t]
//! ```
//!
//! Heads are concatenated, projected by `W_O`, and scaled per position by the
//! active mask `m_t = 1 - exp(-sum_p g[p,t])` (summed over all heads' pulses).
//! Both denominators are guarded: below [`DIVISION_GUARD`] the quotient is 0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{LpaError, Result};
use crate::gates::{
    eval_aperiodic, eval_periodic, eval_positional, AperiodicParams, GateFamily, GateMatrix,
    PeriodicParams, PositionalParams, PulseSplit, POSITIONAL_BASES, PREDICTOR_KERNEL,
};
use crate::numerics::{Backend, Eager, Real, Tensor};
use crate::params::{join, Visit};

pub const DIVISION_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpaConfig {
    pub d: usize,
    pub heads: usize,
    pub split: PulseSplit,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_bases")]
    pub bases: usize,
    pub tau: f64,
    /// Total pulse count of the previous LPA layer when cross-layer
    /// coordination is enabled.
    #[serde(default)]
    pub cross_layer_inputs: Option<usize>,
}

fn default_kernel() -> usize {
    PREDICTOR_KERNEL
}

fn default_bases() -> usize {
    POSITIONAL_BASES
}

impl LpaConfig {
    pub fn new(d: usize, heads: usize, split: PulseSplit) -> Self {
        Self {
            d,
            heads,
            split,
            kernel: PREDICTOR_KERNEL,
            bases: POSITIONAL_BASES,
            tau: 1.0,
            cross_layer_inputs: None,
        }
    }

    pub fn head_width(&self) -> usize {
        self.d / self.heads
    }

    pub fn pulses_per_head(&self) -> usize {
        self.split.total()
    }

    pub fn total_pulses(&self) -> usize {
        self.heads * self.split.total()
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(LpaError::Config(format!(
                "d = {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.split.aperiodic > 0 && self.head_width() % 2 != 0 {
            return Err(LpaError::Config(format!(
                "aperiodic predictor needs an even head width, got {}",
                self.head_width()
            )));
        }
        if self.split.total() == 0 {
            return Err(LpaError::Config("a head needs at least one pulse".into()));
        }
        if self.kernel == 0 || self.bases == 0 {
            return Err(LpaError::Config("kernel and basis sizes must be >= 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(LpaError::Parameter(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Gate parameters plus pulse weights and amplitudes for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<P> {
    pub aperiodic: AperiodicParams<P>,
    pub periodic: PeriodicParams<P>,
    pub positional: PositionalParams<P>,
    /// `1 x P` pulse-weight logits.
    pub wlogit: P,
    /// `1 x P` amplitudes.
    pub amp: P,
}

impl<P> HeadParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> HeadParams<Q> {
        HeadParams {
            aperiodic: self.aperiodic.map(f),
            periodic: self.periodic.map(f),
            positional: self.positional.map(f),
            wlogit: f(&self.wlogit),
            amp: f(&self.amp),
        }
    }
}

impl<P> Visit<P> for HeadParams<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        self.aperiodic.visit(&join(prefix, "gates.aperiodic"), f);
        self.periodic.visit(&join(prefix, "gates.periodic"), f);
        self.positional.visit(&join(prefix, "gates.positional"), f);
        f(join(prefix, "wlogit"), &self.wlogit);
        f(join(prefix, "amp"), &self.amp);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        self.aperiodic.visit_mut(&join(prefix, "gates.aperiodic"), f);
        self.periodic.visit_mut(&join(prefix, "gates.periodic"), f);
        self.positional.visit_mut(&join(prefix, "gates.positional"), f);
        f(join(prefix, "wlogit"), &mut self.wlogit);
        f(join(prefix, "amp"), &mut self.amp);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpaParams<P> {
    pub heads: Vec<HeadParams<P>>,
    /// `d x d`, applied as `x W_V`.
    pub w_v: P,
    /// `d x d`, applied as `h W_O`.
    pub w_o: P,
    /// `P_prev x (H * P)` cross-layer projection.
    pub cross: Option<P>,
}

impl<P> LpaParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> LpaParams<Q> {
        LpaParams {
            heads: self.heads.iter().map(|h| h.map(f)).collect(),
            w_v: f(&self.w_v),
            w_o: f(&self.w_o),
            cross: self.cross.as_ref().map(|c| f(c)),
        }
    }
}

impl<P> Visit<P> for LpaParams<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        for (h, head) in self.heads.iter().enumerate() {
            head.visit(&join(prefix, &format!("head.{h}")), f);
        }
        f(join(prefix, "W_V"), &self.w_v);
        f(join(prefix, "W_O"), &self.w_o);
        if let Some(c) = &self.cross {
            f(join(prefix, "cross.proj"), c);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        for (h, head) in self.heads.iter_mut().enumerate() {
            head.visit_mut(&join(prefix, &format!("head.{h}")), f);
        }
        f(join(prefix, "W_V"), &mut self.w_v);
        f(join(prefix, "W_O"), &mut self.w_o);
        if let Some(c) = &mut self.cross {
            f(join(prefix, "cross.proj"), c);
        }
    }
}

/// Everything one forward pass produces. Gate matrices are pulse-major
/// (`P x n`) per head.
pub struct LpaTrace<M> {
    /// `n x d`
    pub y: M,
    /// `n x 1`
    pub mask: M,
    pub gates: Vec<M>,
    /// `P x d/H` per head.
    pub summaries: Vec<M>,
    /// `1 x (H * P)` mean over positions of every pulse; feeds the next
    /// layer's cross-layer bias.
    pub gate_means: M,
    /// Aperiodic centers and half-widths per head (`Pa x 1`), when present.
    pub centers: Vec<Option<M>>,
    pub half_widths: Vec<Option<M>>,
}

/// Evaluates the soft gates of one head, pulse-major.
pub fn eval_head_gates<B: Backend>(
    b: &B,
    x_head: &B::M,
    head: &HeadParams<B::M>,
    split: &PulseSplit,
    tau: f64,
    bias: Option<&B::M>,
) -> (B::M, Option<B::M>, Option<B::M>) {
    let (n, _) = b.dims(x_head);
    let family_bias = |start: usize, len: usize| {
        bias.map(|row| b.transpose(&b.slice_cols(row, start, start + len)))
    };
    let mut parts = Vec::with_capacity(3);
    let mut centers = None;
    let mut widths = None;
    if split.aperiodic > 0 {
        let beta = family_bias(0, split.aperiodic);
        let e = eval_aperiodic(b, x_head, &head.aperiodic, tau, beta.as_ref());
        parts.push(e.gates);
        centers = Some(e.centers);
        widths = Some(e.half_widths);
    }
    if split.periodic > 0 {
        let beta = family_bias(split.aperiodic, split.periodic);
        parts.push(eval_periodic(b, &head.periodic, n, tau, beta.as_ref()));
    }
    if split.positional > 0 {
        let beta = family_bias(split.aperiodic + split.periodic, split.positional);
        parts.push(eval_positional(b, &head.positional, n, tau, beta.as_ref()));
    }
    let g = if parts.len() == 1 {
        parts.pop().unwrap()
    } else {
        b.concat_rows(&parts)
    };
    (g, centers, widths)
}

/// Pulse summaries `v_bar` (`P x w`) from pulse-major gates and values `n x w`.
pub fn eval_summaries<B: Backend>(b: &B, gates: &B::M, values: &B::M) -> B::M {
    let mass = b.sum_cols(gates);
    let inv = b.guarded_recip(&mass, DIVISION_GUARD);
    b.mul(&b.matmul(gates, values), &inv)
}

/// Weighted broadcast of summaries back to positions for one head, `n x w`.
pub fn eval_broadcast<B: Backend>(
    b: &B,
    gates: &B::M,
    summaries: &B::M,
    weights: &B::M,
    amp: &B::M,
) -> B::M {
    let gt = b.transpose(gates);
    let num = b.matmul(&b.mul(&gt, &b.mul(weights, amp)), summaries);
    let den = b.matmul(&gt, &b.transpose(weights));
    b.mul(&num, &b.guarded_recip(&den, DIVISION_GUARD))
}

/// Full layer forward on any backend. `prev_gate_means` (`1 x P_prev`) is
/// only used when the layer has a cross-layer projection.
pub fn eval_lpa<B: Backend>(
    b: &B,
    x: &B::M,
    params: &LpaParams<B::M>,
    cfg: &LpaConfig,
    tau: f64,
    prev_gate_means: Option<&B::M>,
) -> LpaTrace<B::M> {
    let (n, _) = b.dims(x);
    let dh = cfg.head_width();
    let ph = cfg.pulses_per_head();
    let v = b.matmul(x, &params.w_v);
    let bias_row = match (&params.cross, prev_gate_means) {
        (Some(proj), Some(prev)) => Some(b.matmul(prev, proj)),
        _ => None,
    };

    let mut outs = Vec::with_capacity(cfg.heads);
    let mut gates = Vec::with_capacity(cfg.heads);
    let mut summaries = Vec::with_capacity(cfg.heads);
    let mut means = Vec::with_capacity(cfg.heads);
    let mut centers = Vec::with_capacity(cfg.heads);
    let mut half_widths = Vec::with_capacity(cfg.heads);
    let mut coverage: Option<B::M> = None;

    for (h, head) in params.heads.iter().enumerate() {
        let xs = b.slice_cols(x, h * dh, (h + 1) * dh);
        let vs = b.slice_cols(&v, h * dh, (h + 1) * dh);
        let head_bias = bias_row.as_ref().map(|row| b.slice_cols(row, h * ph, (h + 1) * ph));
        let (g, c, w) = eval_head_gates(b, &xs, head, &cfg.split, tau, head_bias.as_ref());
        let vbar = eval_summaries(b, &g, &vs);
        let weights = b.softmax_rows(&head.wlogit);
        outs.push(eval_broadcast(b, &g, &vbar, &weights, &head.amp));

        let cov = b.sum_rows(&g);
        coverage = Some(match coverage {
            Some(acc) => b.add(&acc, &cov),
            None => cov,
        });
        means.push(b.transpose(&b.scale(&b.sum_cols(&g), 1.0 / n.max(1) as f64)));
        gates.push(g);
        summaries.push(vbar);
        centers.push(c);
        half_widths.push(w);
    }

    let joined = if outs.len() == 1 {
        outs.pop().unwrap()
    } else {
        b.concat_cols(&outs)
    };
    let projected = b.matmul(&joined, &params.w_o);
    let cov = b.transpose(&coverage.expect("at least one head"));
    let mask = b.add_scalar(&b.scale(&b.exp(&b.scale(&cov, -1.0)), -1.0), 1.0);
    let y = b.mul(&projected, &mask);
    let gate_means = if means.len() == 1 {
        means.pop().unwrap()
    } else {
        b.concat_cols(&means)
    };
    LpaTrace {
        y,
        mask,
        gates,
        summaries,
        gate_means,
        centers,
        half_widths,
    }
}

/// A layer: configuration plus f64 master parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LpaLayer {
    pub config: LpaConfig,
    pub params: LpaParams<Tensor<f64>>,
}

/// Diagnostics-bearing output of [`LpaLayer::forward`].
#[derive(Clone)]
pub struct LpaOutput<T> {
    pub y: Tensor<T>,
    /// Active mask per position.
    pub mask: Vec<f64>,
    /// `n x P` soft gates per head.
    pub gates: Vec<GateMatrix>,
    /// `P x d/H` summaries per head.
    pub summaries: Vec<Tensor<f64>>,
    pub gate_means: Vec<f64>,
}

/// Gradients of `<upstream, y>` for every parameter and the input.
#[derive(Debug, Clone)]
pub struct LpaGradients {
    pub params: LpaParams<Tensor<f64>>,
    pub x: Tensor<f64>,
}

impl LpaLayer {
    /// Seeded default initialization: identity-free random projections,
    /// uniform pulse weights, unit amplitudes.
    pub fn init(config: LpaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d;
        let dh = config.head_width();
        let std = (1.0 / d as f64).sqrt();
        let heads = (0..config.heads)
            .map(|_| HeadParams::init(&config, dh, &mut rng))
            .collect();
        let rand_square = |rng: &mut ChaCha8Rng| {
            Tensor::from_fn(d, d, |_, _| rng.gen_range(-std..std) * 3f64.sqrt())
        };
        let w_v = rand_square(&mut rng);
        let w_o = rand_square(&mut rng);
        let cross = config
            .cross_layer_inputs
            .map(|prev| Tensor::zeros(prev, config.total_pulses()));
        Ok(Self {
            config,
            params: LpaParams { heads, w_v, w_o, cross },
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        if self.params.heads.len() != c.heads {
            return Err(LpaError::Shape(format!(
                "{} head parameter sets for {} heads",
                self.params.heads.len(),
                c.heads
            )));
        }
        if self.params.w_v.dims() != (c.d, c.d) || self.params.w_o.dims() != (c.d, c.d) {
            return Err(LpaError::Shape("W_V and W_O must be d x d".into()));
        }
        for head in &self.params.heads {
            if head.wlogit.dims() != (1, c.pulses_per_head()) || head.amp.dims() != (1, c.pulses_per_head()) {
                return Err(LpaError::Shape("pulse weight / amplitude length".into()));
            }
            if head.aperiodic.pulses() != c.split.aperiodic
                || head.periodic.pulses() != c.split.periodic
                || head.positional.pulses() != c.split.positional
            {
                return Err(LpaError::Shape("gate parameter counts disagree with split".into()));
            }
        }
        Ok(())
    }

    fn check_input<T: Real>(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.config.d {
            return Err(LpaError::Shape(format!(
                "LPA layer with d = {} got input {:?}",
                self.config.d,
                x.shape()
            )));
        }
        Ok(())
    }

    fn check_prev(&self, prev: Option<&[f64]>) -> Result<()> {
        if let (Some(proj), Some(prev)) = (&self.params.cross, prev) {
            if proj.rows() != prev.len() {
                return Err(LpaError::Shape(format!(
                    "cross-layer projection expects {} gate means, got {}",
                    proj.rows(),
                    prev.len()
                )));
            }
        }
        Ok(())
    }

    /// Soft forward pass in precision `T` at the configured temperature.
    pub fn forward<T: Real>(&self, x: &Tensor<T>) -> Result<LpaOutput<T>> {
        self.forward_with(x, self.config.tau, None)
    }

    pub fn forward_with<T: Real>(
        &self,
        x: &Tensor<T>,
        tau: f64,
        prev_gate_means: Option<&[f64]>,
    ) -> Result<LpaOutput<T>> {
        self.check_input(x)?;
        self.check_prev(prev_gate_means)?;
        if !(tau > 0.0) {
            return Err(LpaError::Parameter(format!("temperature must be positive, got {tau}")));
        }
        let n = x.rows();
        if n == 0 {
            return Ok(LpaOutput {
                y: Tensor::zeros(0, self.config.d),
                mask: vec![],
                gates: vec![],
                summaries: vec![],
                gate_means: vec![0.0; self.config.total_pulses()],
            });
        }
        let b = Eager::<T>::new();
        let params = self.params.map(&mut |t| t.cast::<T>());
        let prev = prev_gate_means.map(|p| Tensor::<T>::row_vector(p.iter().map(|&v| T::from_f64(v)).collect()));
        let tr = eval_lpa(&b, x, &params, &self.config, tau, prev.as_ref());
        let families = self.config.split.families();
        Ok(LpaOutput {
            y: tr.y,
            mask: tr.mask.data().iter().map(|v| v.as_f64()).collect(),
            gates: tr
                .gates
                .iter()
                .map(|g| GateMatrix::from_pulse_major(&g.cast(), families.clone(), tau))
                .collect(),
            summaries: tr.summaries.iter().map(|s| s.cast()).collect(),
            gate_means: tr.gate_means.data().iter().map(|v| v.as_f64()).collect(),
        })
    }

    /// Gradients of `sum(upstream * y)` with respect to every parameter and
    /// the input, by reverse-mode differentiation of the same forward code.
    pub fn gradients(
        &self,
        x: &Tensor<f64>,
        upstream: &Tensor<f64>,
        prev_gate_means: Option<&[f64]>,
    ) -> Result<LpaGradients> {
        self.check_input(x)?;
        self.check_prev(prev_gate_means)?;
        if upstream.dims() != x.dims() {
            return Err(LpaError::Shape("upstream gradient must match output shape".into()));
        }
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let pv = self.params.map(&mut |t| tape.leaf(t.clone()));
        let prev = prev_gate_means.map(|p| tape.constant(Tensor::row_vector(p.to_vec())));
        let tr = eval_lpa(&tape, &xv, &pv, &self.config, self.config.tau, prev.as_ref());
        let grads = tape.backward_with(tr.y, upstream.clone());
        Ok(LpaGradients {
            params: pv.map(&mut |v| grads.get(*v)),
            x: grads.get(xv),
        })
    }

    /// Families of the pulses in one head, in gate-row order.
    pub fn families(&self) -> Vec<GateFamily> {
        self.config.split.families()
    }
}

impl HeadParams<Tensor<f64>> {
    pub fn init(config: &LpaConfig, dh: usize, rng: &mut impl Rng) -> Self {
        let split = config.split;
        let p = split.total();
        Self {
            aperiodic: AperiodicParams::init(dh.max(2), split.aperiodic, config.kernel, rng),
            periodic: PeriodicParams::init(split.periodic, rng),
            positional: PositionalParams::init(split.positional, config.bases, rng),
            wlogit: Tensor::zeros(1, p),
            amp: Tensor::filled(1, p, 1.0),
        }
    }
}

/// Summaries for an explicit `n x P` gate matrix (one head, or H = 1).
/// Returns the `P x d` summaries and which pulses cleared the guard.
pub fn pulse_summary(
    x: &Tensor<f64>,
    gates: &GateMatrix,
    w_v: &Tensor<f64>,
) -> Result<(Tensor<f64>, Vec<bool>)> {
    if gates.positions() != x.rows() {
        return Err(LpaError::Shape(format!(
            "gate matrix has {} positions, input has {}",
            gates.positions(),
            x.rows()
        )));
    }
    if w_v.rows() != x.cols() {
        return Err(LpaError::Shape("W_V rows must equal input width".into()));
    }
    let b = Eager::<f64>::new();
    let v = b.matmul(x, w_v);
    let g = crate::numerics::transpose(&gates.values);
    let active = (0..gates.pulses())
        .map(|p| g.row(p).iter().sum::<f64>() >= DIVISION_GUARD)
        .collect();
    Ok((eval_summaries(&b, &g, &v), active))
}
