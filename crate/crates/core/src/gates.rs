//! Gate families.
//!
//! Every family produces a `pulses x n` matrix of memberships in `[0, 1]`.
//! The generic `eval_*` functions run on any [`Backend`]; the `*_gate`
//! functions are f64 conveniences with argument validation.
//!
//! * aperiodic: content-dependent window `sigma((t - c + w)/tau) * sigma((c + w - t)/tau)`
//!   whose center `c` and half-width `w` come from a query-attention read of
//!   the predictor features `h = MLP(DWConv(x))`.
//! * periodic: `sigma((cos(2 pi t / T - phi) - cos(pi d)) / tau)` with
//!   `T = 2^(softplus(rho) + 2)` and duty `d = sigmoid(raw)`.
//! * positional: `sigma((sum_k a_k sin(2 pi k s) + b_k cos(2 pi k s) + bias) / tau)`
//!   over normalized position `s = t / (n - 1)`.
//!
//! A cross-layer bias is one scalar per pulse added to the pre-sigmoid
//! numerator of every family (for aperiodic gates it widens both edges).

use std::f64::consts::{LN_2, PI};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LpaError, Result};
use crate::numerics::{Backend, Eager, Tensor};
use crate::params::leaf_params;

/// Default causal convolution width of the aperiodic predictor.
pub const PREDICTOR_KERNEL: usize = 5;
/// Default number of sin/cos basis pairs for positional gates.
pub const POSITIONAL_BASES: usize = 16;
/// Lower bound on periods: `2^(softplus + 2) >= 4`.
pub const MIN_PERIOD: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateFamily {
    Aperiodic,
    Periodic,
    Positional,
}

/// Pulse counts per family (per head).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PulseSplit {
    pub aperiodic: usize,
    pub periodic: usize,
    pub positional: usize,
}

impl Default for PulseSplit {
    fn default() -> Self {
        Self::uniform(4)
    }
}

impl PulseSplit {
    pub fn uniform(per_family: usize) -> Self {
        Self {
            aperiodic: per_family,
            periodic: per_family,
            positional: per_family,
        }
    }

    pub fn total(&self) -> usize {
        self.aperiodic + self.periodic + self.positional
    }

    /// Family of each pulse index, aperiodic first.
    pub fn families(&self) -> Vec<GateFamily> {
        std::iter::repeat(GateFamily::Aperiodic)
            .take(self.aperiodic)
            .chain(std::iter::repeat(GateFamily::Periodic).take(self.periodic))
            .chain(std::iter::repeat(GateFamily::Positional).take(self.positional))
            .collect()
    }
}

/// Aperiodic predictor and query parameters for one head of width `dh`.
///
/// Shapes: `conv` k x dh, `w1` dh x dh, `b1` 1 x dh, `w2` dh x dh/2,
/// `b2` 1 x dh/2, `query` dh/2 x pulses (column p is q_p), `width_w`
/// dh/2 x 1, `width_b` 1 x 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AperiodicParams<P> {
    pub conv: P,
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
    pub query: P,
    pub width_w: P,
    pub width_b: P,
}

leaf_params!(AperiodicParams {
    conv => "conv",
    w1 => "mlp.w1",
    b1 => "mlp.b1",
    w2 => "mlp.w2",
    b2 => "mlp.b2",
    query => "q",
    width_w => "width.w",
    width_b => "width.b",
});

/// Periodic parameters, each `pulses x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicParams<P> {
    pub rho: P,
    pub phase: P,
    pub duty: P,
}

leaf_params!(PeriodicParams {
    rho => "rho",
    phase => "phase",
    duty => "duty",
});

/// Positional parameters: `alpha`, `beta` are `pulses x K`, `bias` `pulses x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalParams<P> {
    pub alpha: P,
    pub beta: P,
    pub bias: P,
}

leaf_params!(PositionalParams {
    alpha => "alpha",
    beta => "beta",
    bias => "b",
});

/// Inverse of softplus for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Period for a raw period logit.
pub fn period_of(rho: f64) -> f64 {
    2f64.powf(crate::numerics::softplus(rho) + 2.0)
}

/// Raw period logit giving period `t` (`t > 4`).
pub fn rho_for_period(t: f64) -> f64 {
    softplus_inverse(t.log2() - 2.0)
}

fn normal_matrix(rng: &mut impl Rng, r: usize, c: usize, std: f64) -> Tensor<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(r, c, |_, _| dist.sample(rng))
}

impl AperiodicParams<Tensor<f64>> {
    /// Seeded default: near-identity convolution, scaled-normal MLP, initial
    /// half-width of 4 frames.
    pub fn init(width: usize, pulses: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let half = width / 2;
        let mut conv = normal_matrix(rng, kernel, width, 0.05);
        for c in 0..width {
            conv.set(kernel - 1, c, conv.at(kernel - 1, c) + 1.0);
        }
        Self {
            conv,
            w1: normal_matrix(rng, width, width, (1.0 / width as f64).sqrt()),
            b1: Tensor::zeros(1, width),
            w2: normal_matrix(rng, width, half, (1.0 / width as f64).sqrt()),
            b2: Tensor::zeros(1, half),
            query: normal_matrix(rng, half, pulses, 1.0),
            width_w: Tensor::zeros(half, 1),
            width_b: Tensor::scalar(softplus_inverse(4.0)),
        }
    }

    pub fn pulses(&self) -> usize {
        self.query.cols()
    }

    pub fn width(&self) -> usize {
        self.w1.rows()
    }
}

impl PeriodicParams<Tensor<f64>> {
    /// Periods spread log-uniformly over `[10, 512]` frames, random phase,
    /// duty 0.5.
    pub fn init(pulses: usize, rng: &mut impl Rng) -> Self {
        let periods = init_periods(pulses);
        Self {
            rho: Tensor::col_vector(periods.iter().map(|&t| rho_for_period(t)).collect()),
            phase: Tensor::from_fn(pulses, 1, |_, _| rng.gen_range(0.0..2.0 * PI)),
            duty: Tensor::zeros(pulses, 1),
        }
    }

    pub fn pulses(&self) -> usize {
        self.rho.rows()
    }

    pub fn periods(&self) -> Vec<f64> {
        self.rho.data().iter().map(|&r| period_of(r)).collect()
    }

    pub fn duties(&self) -> Vec<f64> {
        self.duty.data().iter().map(|&r| crate::numerics::sigmoid(r)).collect()
    }
}

/// Log-uniform periods between 10 and 512 frames.
pub fn init_periods(pulses: usize) -> Vec<f64> {
    let (lo, hi) = (10.0f64, 512.0f64);
    match pulses {
        0 => vec![],
        1 => vec![(lo * hi).sqrt()],
        p => (0..p)
            .map(|i| lo * (hi / lo).powf(i as f64 / (p - 1) as f64))
            .collect(),
    }
}

impl PositionalParams<Tensor<f64>> {
    pub fn init(pulses: usize, bases: usize, rng: &mut impl Rng) -> Self {
        Self {
            alpha: normal_matrix(rng, pulses, bases, 0.1),
            beta: normal_matrix(rng, pulses, bases, 0.1),
            bias: Tensor::zeros(pulses, 1),
        }
    }

    pub fn pulses(&self) -> usize {
        self.bias.rows()
    }

    pub fn bases(&self) -> usize {
        self.alpha.cols()
    }
}

/// `[0, 1, ..., n-1]` as a `1 x n` row.
pub fn positions(n: usize) -> Tensor<f64> {
    Tensor::row_vector((0..n).map(|t| t as f64).collect())
}

/// Normalized position `t / (n - 1)`; 0 when `n == 1`.
pub fn normalized_position(t: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        t as f64 / (n - 1) as f64
    }
}

/// Sin and cos basis rows (`K x n` each) for positional gates.
pub fn positional_basis(n: usize, bases: usize) -> (Tensor<f64>, Tensor<f64>) {
    let sin = Tensor::from_fn(bases, n, |k, t| {
        (2.0 * PI * (k + 1) as f64 * normalized_position(t, n)).sin()
    });
    let cos = Tensor::from_fn(bases, n, |k, t| {
        (2.0 * PI * (k + 1) as f64 * normalized_position(t, n)).cos()
    });
    (sin, cos)
}

/// `h = MLP(DWConv(x))`, `n x dh/2`.
pub fn eval_hidden<B: Backend>(b: &B, x: &B::M, p: &AperiodicParams<B::M>) -> B::M {
    let conv = b.causal_dwconv(x, &p.conv);
    let z1 = b.add(&b.matmul(&conv, &p.w1), &p.b1);
    let a1 = b.gelu(&z1);
    b.add(&b.matmul(&a1, &p.w2), &p.b2)
}

/// Aperiodic gate evaluation result, all `pulses`-major.
pub struct AperiodicEval<M> {
    /// `pulses x n`
    pub gates: M,
    /// `pulses x 1`
    pub centers: M,
    /// `pulses x 1`, before any cross-layer bias
    pub half_widths: M,
    /// `pulses x n` softmax read weights
    pub weights: M,
    /// `n x dh/2`
    pub hidden: M,
}

/// Column of per-pulse biases added to a family's pre-sigmoid numerator.
pub type PulseBias<'a, M> = Option<&'a M>;

pub fn eval_aperiodic<B: Backend>(
    b: &B,
    x: &B::M,
    p: &AperiodicParams<B::M>,
    tau: f64,
    bias: PulseBias<'_, B::M>,
) -> AperiodicEval<B::M> {
    let (n, _) = b.dims(x);
    let hidden = eval_hidden(b, x, p);
    let scores = b.transpose(&b.matmul(&hidden, &p.query));
    let weights = b.softmax_rows(&b.scale(&scores, 1.0 / tau));
    let t_col = b.constant(Tensor::col_vector((0..n).map(|t| t as f64).collect()));
    let centers = b.matmul(&weights, &t_col);
    let h_bar = b.matmul(&weights, &hidden);
    let half_widths = b.softplus(&b.add(&b.matmul(&h_bar, &p.width_w), &p.width_b));
    let reach = match bias {
        Some(beta) => b.add(&half_widths, beta),
        None => half_widths.clone(),
    };
    let t_row = b.constant(positions(n));
    let lower = b.add(&b.sub(&t_row, &centers), &reach);
    let upper = b.sub(&b.add(&centers, &reach), &t_row);
    let gates = b.mul(
        &b.sigmoid(&b.scale(&lower, 1.0 / tau)),
        &b.sigmoid(&b.scale(&upper, 1.0 / tau)),
    );
    AperiodicEval {
        gates,
        centers,
        half_widths,
        weights,
        hidden,
    }
}

/// Pre-sigmoid numerator `cos(2 pi t / T - phi) - cos(pi d) (+ bias)`, `pulses x n`.
pub fn periodic_logits<B: Backend>(
    b: &B,
    p: &PeriodicParams<B::M>,
    n: usize,
    bias: PulseBias<'_, B::M>,
) -> B::M {
    let period = b.exp(&b.scale(&b.add_scalar(&b.softplus(&p.rho), 2.0), LN_2));
    let t_row = b.constant(positions(n).scale(2.0 * PI));
    let theta = b.sub(&b.div(&t_row, &period), &p.phase);
    let threshold = b.cos(&b.scale(&b.sigmoid(&p.duty), PI));
    let z = b.sub(&b.cos(&theta), &threshold);
    match bias {
        Some(beta) => b.add(&z, beta),
        None => z,
    }
}

pub fn eval_periodic<B: Backend>(
    b: &B,
    p: &PeriodicParams<B::M>,
    n: usize,
    tau: f64,
    bias: PulseBias<'_, B::M>,
) -> B::M {
    let z = periodic_logits(b, p, n, bias);
    b.sigmoid(&b.scale(&z, 1.0 / tau))
}

/// Pre-sigmoid numerator of the positional family, `pulses x n`.
pub fn positional_logits<B: Backend>(
    b: &B,
    p: &PositionalParams<B::M>,
    n: usize,
    bias: PulseBias<'_, B::M>,
) -> B::M {
    let (_, k) = b.dims(&p.alpha);
    let (sin, cos) = positional_basis(n, k);
    let sin = b.constant(sin);
    let cos = b.constant(cos);
    let z = b.add(
        &b.add(&b.matmul(&p.alpha, &sin), &b.matmul(&p.beta, &cos)),
        &p.bias,
    );
    match bias {
        Some(beta) => b.add(&z, beta),
        None => z,
    }
}

pub fn eval_positional<B: Backend>(
    b: &B,
    p: &PositionalParams<B::M>,
    n: usize,
    tau: f64,
    bias: PulseBias<'_, B::M>,
) -> B::M {
    let z = positional_logits(b, p, n, bias);
    b.sigmoid(&b.scale(&z, 1.0 / tau))
}

/// `prev_mean (1 x P_prev) . proj (P_prev x P)`, one additive bias per pulse.
pub fn eval_cross_layer_bias<B: Backend>(b: &B, prev_mean: &B::M, proj: &B::M) -> B::M {
    b.matmul(prev_mean, proj)
}

/// Evaluated soft gates for one head, `n x P` (rows are positions).
#[derive(Debug, Clone, PartialEq)]
pub struct GateMatrix {
    pub values: Tensor<f64>,
    pub families: Vec<GateFamily>,
    pub tau: f64,
}

impl GateMatrix {
    /// Builds from a `pulses x n` evaluation.
    pub fn from_pulse_major(g: &Tensor<f64>, families: Vec<GateFamily>, tau: f64) -> Self {
        Self {
            values: crate::numerics::transpose(g),
            families,
            tau,
        }
    }

    pub fn positions(&self) -> usize {
        self.values.rows()
    }

    pub fn pulses(&self) -> usize {
        self.values.cols()
    }

    /// Mean over positions of each pulse.
    pub fn pulse_means(&self) -> Vec<f64> {
        let n = self.positions().max(1) as f64;
        (0..self.pulses())
            .map(|p| (0..self.positions()).map(|t| self.values.at(t, p)).sum::<f64>() / n)
            .collect()
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(LpaError::Parameter(format!("temperature must be positive, got {tau}")))
    }
}

fn check_aperiodic(x: &Tensor<f64>, p: &AperiodicParams<Tensor<f64>>) -> Result<()> {
    let d = x.cols();
    if d % 2 != 0 {
        return Err(LpaError::Config(format!("predictor width must be even, got {d}")));
    }
    if p.conv.cols() != d || p.w1.rows() != d || p.w2.cols() != d / 2 || p.query.rows() != d / 2 {
        return Err(LpaError::Shape(format!(
            "aperiodic parameters for width {} applied to input width {d}",
            p.w1.rows()
        )));
    }
    Ok(())
}

/// Predictor features for an `n x d` input.
pub fn predict_hidden(x: &Tensor<f64>, p: &AperiodicParams<Tensor<f64>>) -> Result<Tensor<f64>> {
    check_aperiodic(x, p)?;
    Ok(eval_hidden(&Eager::<f64>::new(), x, p))
}

/// Soft aperiodic gates with their centers and half-widths.
pub struct AperiodicGate {
    pub gates: GateMatrix,
    pub centers: Vec<f64>,
    pub half_widths: Vec<f64>,
}

pub fn aperiodic_gate(
    x: &Tensor<f64>,
    p: &AperiodicParams<Tensor<f64>>,
    tau: f64,
) -> Result<AperiodicGate> {
    check_tau(tau)?;
    check_aperiodic(x, p)?;
    if x.rows() == 0 {
        return Err(LpaError::Shape("aperiodic gate needs n >= 1".into()));
    }
    let e = eval_aperiodic(&Eager::<f64>::new(), x, p, tau, None);
    Ok(AperiodicGate {
        gates: GateMatrix::from_pulse_major(
            &e.gates,
            vec![GateFamily::Aperiodic; p.pulses()],
            tau,
        ),
        centers: e.centers.into_data(),
        half_widths: e.half_widths.into_data(),
    })
}

pub fn periodic_gate(p: &PeriodicParams<Tensor<f64>>, n: usize, tau: f64) -> Result<GateMatrix> {
    check_tau(tau)?;
    let g = eval_periodic(&Eager::<f64>::new(), p, n, tau, None);
    Ok(GateMatrix::from_pulse_major(&g, vec![GateFamily::Periodic; p.pulses()], tau))
}

pub fn positional_gate(
    p: &PositionalParams<Tensor<f64>>,
    n: usize,
    tau: f64,
) -> Result<GateMatrix> {
    check_tau(tau)?;
    let g = eval_positional(&Eager::<f64>::new(), p, n, tau, None);
    Ok(GateMatrix::from_pulse_major(&g, vec![GateFamily::Positional; p.pulses()], tau))
}

/// Per-pulse additive bias from the previous LPA layer's mean gate pattern.
pub fn cross_layer_bias(prev_gate_mean: &[f64], proj: &Tensor<f64>) -> Result<Vec<f64>> {
    if proj.rows() != prev_gate_mean.len() {
        return Err(LpaError::Shape(format!(
            "cross-layer projection expects {} inputs, got {}",
            proj.rows(),
            prev_gate_mean.len()
        )));
    }
    let mean = Tensor::row_vector(prev_gate_mean.to_vec());
    Ok(eval_cross_layer_bias(&Eager::<f64>::new(), &mean, proj).into_data())
}
