use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{LpaError, Result};
use crate::mixer::{eval_lpa, LpaConfig, LpaLayer, LpaParams};
use crate::numerics::{Backend, Eager, Real, Tensor};
use crate::params::{join, ParamStore, Visit};

use super::attention::{eval_attention, AttentionConfig, AttentionLayer, AttentionParams};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_in: usize,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_in: 8,
            d: 32,
            heads: 2,
            layers: 4,
            ffn_mult: 4,
        }
    }
}

/// What sits in a block's mixing slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MixerSpec {
    Attention(AttentionConfig),
    Lpa(LpaConfig),
}

impl MixerSpec {
    pub fn is_lpa(&self) -> bool {
        matches!(self, MixerSpec::Lpa(_))
    }

    fn tau(&self) -> f64 {
        match self {
            MixerSpec::Attention(_) => 1.0,
            MixerSpec::Lpa(c) => c.tau,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MixerParams<P> {
    Attention(AttentionParams<P>),
    Lpa(LpaParams<P>),
}

impl<P> MixerParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> MixerParams<Q> {
        match self {
            MixerParams::Attention(a) => MixerParams::Attention(a.map(f)),
            MixerParams::Lpa(l) => MixerParams::Lpa(l.map(f)),
        }
    }
}

impl<P> Visit<P> for MixerParams<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        match self {
            MixerParams::Attention(a) => a.visit(&join(prefix, "attn"), f),
            MixerParams::Lpa(l) => l.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        match self {
            MixerParams::Attention(a) => a.visit_mut(&join(prefix, "attn"), f),
            MixerParams::Lpa(l) => l.visit_mut(prefix, f),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<P> {
    pub ln1_g: P,
    pub ln1_b: P,
    pub mixer: MixerParams<P>,
    pub ln2_g: P,
    pub ln2_b: P,
    pub ffn_w1: P,
    pub ffn_b1: P,
    pub ffn_w2: P,
    pub ffn_b2: P,
}

impl<P> BlockParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> BlockParams<Q> {
        BlockParams {
            ln1_g: f(&self.ln1_g),
            ln1_b: f(&self.ln1_b),
            mixer: self.mixer.map(f),
            ln2_g: f(&self.ln2_g),
            ln2_b: f(&self.ln2_b),
            ffn_w1: f(&self.ffn_w1),
            ffn_b1: f(&self.ffn_b1),
            ffn_w2: f(&self.ffn_w2),
            ffn_b2: f(&self.ffn_b2),
        }
    }
}

impl<P> Visit<P> for BlockParams<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(join(prefix, "ln1.g"), &self.ln1_g);
        f(join(prefix, "ln1.b"), &self.ln1_b);
        self.mixer.visit(prefix, f);
        f(join(prefix, "ln2.g"), &self.ln2_g);
        f(join(prefix, "ln2.b"), &self.ln2_b);
        f(join(prefix, "ffn.w1"), &self.ffn_w1);
        f(join(prefix, "ffn.b1"), &self.ffn_b1);
        f(join(prefix, "ffn.w2"), &self.ffn_w2);
        f(join(prefix, "ffn.b2"), &self.ffn_b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        f(join(prefix, "ln1.g"), &mut self.ln1_g);
        f(join(prefix, "ln1.b"), &mut self.ln1_b);
        self.mixer.visit_mut(prefix, f);
        f(join(prefix, "ln2.g"), &mut self.ln2_g);
        f(join(prefix, "ln2.b"), &mut self.ln2_b);
        f(join(prefix, "ffn.w1"), &mut self.ffn_w1);
        f(join(prefix, "ffn.b1"), &mut self.ffn_b1);
        f(join(prefix, "ffn.w2"), &mut self.ffn_w2);
        f(join(prefix, "ffn.b2"), &mut self.ffn_b2);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<P> {
    pub embed_w: P,
    pub embed_b: P,
    pub blocks: Vec<BlockParams<P>>,
    pub out_w: P,
    pub out_b: P,
}

impl<P> EncoderParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> EncoderParams<Q> {
        EncoderParams {
            embed_w: f(&self.embed_w),
            embed_b: f(&self.embed_b),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            out_w: f(&self.out_w),
            out_b: f(&self.out_b),
        }
    }
}

impl<P> Visit<P> for EncoderParams<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(join(prefix, "embed.w"), &self.embed_w);
        f(join(prefix, "embed.b"), &self.embed_b);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("layer.{i}")), f);
        }
        f(join(prefix, "out.w"), &self.out_w);
        f(join(prefix, "out.b"), &self.out_b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        f(join(prefix, "embed.w"), &mut self.embed_w);
        f(join(prefix, "embed.b"), &mut self.embed_b);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("layer.{i}")), f);
        }
        f(join(prefix, "out.w"), &mut self.out_w);
        f(join(prefix, "out.b"), &mut self.out_b);
    }
}

/// Per-layer tap points.
#[derive(Debug, Clone)]
pub struct Taps<M> {
    pub block_input: M,
    /// Layer-normed input to the mixing slot (the sweep's `X`).
    pub mix_input: M,
    /// Mixing-slot output (the sweep's `Attn(X)`).
    pub mix_output: M,
    pub block_output: M,
}

pub struct EncoderTrace<M> {
    pub hidden: M,
    pub taps: Vec<Taps<M>>,
    /// `1 x (H * P)` gate means of LPA layers.
    pub gate_means: Vec<Option<M>>,
}

pub fn eval_layer_norm<B: Backend>(b: &B, x: &B::M, g: &B::M, beta: &B::M) -> B::M {
    let (_, d) = b.dims(x);
    let mean = b.scale(&b.sum_cols(x), 1.0 / d as f64);
    let c = b.sub(x, &mean);
    let var = b.scale(&b.sum_cols(&b.mul(&c, &c)), 1.0 / d as f64);
    let inv = b.powf(&b.add_scalar(&var, LAYER_NORM_EPS), -0.5);
    b.add(&b.mul(&b.mul(&c, &inv), g), beta)
}

pub fn eval_mixer<B: Backend>(
    b: &B,
    x: &B::M,
    params: &MixerParams<B::M>,
    spec: &MixerSpec,
    tau: f64,
    prev_gate_means: Option<&B::M>,
) -> (B::M, Option<B::M>) {
    match (params, spec) {
        (MixerParams::Attention(p), MixerSpec::Attention(c)) => (eval_attention(b, x, p, c), None),
        (MixerParams::Lpa(p), MixerSpec::Lpa(c)) => {
            let tr = eval_lpa(b, x, p, c, tau, prev_gate_means);
            (tr.y, Some(tr.gate_means))
        }
        _ => panic!("mixer parameters do not match mixer kind"),
    }
}

/// Second half of a block: `h + FFN(LN2(h))`.
pub fn eval_ffn_residual<B: Backend>(b: &B, h: &B::M, p: &BlockParams<B::M>) -> B::M {
    let z = eval_layer_norm(b, h, &p.ln2_g, &p.ln2_b);
    let f = b.gelu(&b.add(&b.matmul(&z, &p.ffn_w1), &p.ffn_b1));
    let f = b.add(&b.matmul(&f, &p.ffn_w2), &p.ffn_b2);
    b.add(h, &f)
}

/// Pre-LN block: `h = x + Mix(LN1(x))`, `out = h + FFN(LN2(h))`.
pub fn eval_block<B: Backend>(
    b: &B,
    x: &B::M,
    p: &BlockParams<B::M>,
    spec: &MixerSpec,
    tau: f64,
    prev_gate_means: Option<&B::M>,
) -> (Taps<B::M>, Option<B::M>) {
    let mix_input = eval_layer_norm(b, x, &p.ln1_g, &p.ln1_b);
    let (mix_output, means) = eval_mixer(b, &mix_input, &p.mixer, spec, tau, prev_gate_means);
    let block_output = eval_ffn_residual(b, &b.add(x, &mix_output), p);
    (
        Taps {
            block_input: x.clone(),
            mix_input,
            mix_output,
            block_output,
        },
        means,
    )
}

/// Embedding followed by every block. `taus[i]` is the temperature used by
/// LPA layer `i` (ignored for attention layers).
pub fn eval_encoder<B: Backend>(
    b: &B,
    tokens: &B::M,
    params: &EncoderParams<B::M>,
    mixers: &[MixerSpec],
    taus: &[f64],
) -> EncoderTrace<B::M> {
    let mut x = b.add(&b.matmul(tokens, &params.embed_w), &params.embed_b);
    let mut taps = Vec::with_capacity(params.blocks.len());
    let mut gate_means: Vec<Option<B::M>> = Vec::with_capacity(params.blocks.len());
    for (i, (block, spec)) in params.blocks.iter().zip(mixers).enumerate() {
        let prev = if i > 0 { gate_means[i - 1].as_ref() } else { None };
        let (t, means) = eval_block(b, &x, block, spec, taus[i], prev);
        x = t.block_output.clone();
        taps.push(t);
        gate_means.push(means);
    }
    EncoderTrace {
        hidden: x,
        taps,
        gate_means,
    }
}

/// Denoising read-out `hidden W_out + b_out` (`n x d_in`).
pub fn eval_readout<B: Backend>(b: &B, hidden: &B::M, params: &EncoderParams<B::M>) -> B::M {
    b.add(&b.matmul(hidden, &params.out_w), &params.out_b)
}

/// Mean squared error over all elements, as a `1 x 1` node.
pub fn eval_mse<B: Backend>(b: &B, a: &B::M, target: &B::M) -> B::M {
    let (r, c) = b.dims(a);
    let diff = b.sub(a, target);
    b.scale(&b.sum_all(&b.mul(&diff, &diff)), 1.0 / (r * c).max(1) as f64)
}

/// Forward result of [`ToyEncoder::forward`].
#[derive(Clone)]
pub struct EncoderOutput<T> {
    pub hidden: Tensor<T>,
    pub taps: Vec<Taps<Tensor<T>>>,
}

/// Embedding, `L` pre-LN blocks with one mixing mechanism each, and a
/// linear read-out used for the denoising objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    pub config: EncoderConfig,
    pub mixers: Vec<MixerSpec>,
    pub params: EncoderParams<Tensor<f64>>,
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    let a = (3.0 / r as f64).sqrt();
    Tensor::from_fn(r, c, |_, _| rng.gen_range(-a..a))
}

impl ToyEncoder {
    /// All-attention encoder without positional bias.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        let attn = vec![AttentionConfig::new(config.d, config.heads); config.layers];
        Self::with_attention(config, attn, seed)
    }

    /// All-attention encoder with per-layer attention configurations.
    pub fn with_attention(config: EncoderConfig, attn: Vec<AttentionConfig>, seed: u64) -> Result<Self> {
        if attn.len() != config.layers {
            return Err(LpaError::Config(format!(
                "{} attention configs for {} layers",
                attn.len(),
                config.layers
            )));
        }
        if config.d_in == 0 || config.d == 0 || config.ffn_mult == 0 {
            return Err(LpaError::Config("encoder widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, d_in, dff) = (config.d, config.d_in, config.d * config.ffn_mult);
        let embed_w = uniform(&mut rng, d_in, d);
        let mut blocks = Vec::with_capacity(config.layers);
        for a in &attn {
            if a.d != d {
                return Err(LpaError::Config("attention width differs from encoder width".into()));
            }
            a.validate()?;
            let mixer = MixerParams::Attention(AttentionParams::init(d, &mut rng));
            blocks.push(BlockParams {
                ln1_g: Tensor::filled(1, d, 1.0),
                ln1_b: Tensor::zeros(1, d),
                mixer,
                ln2_g: Tensor::filled(1, d, 1.0),
                ln2_b: Tensor::zeros(1, d),
                ffn_w1: uniform(&mut rng, d, dff),
                ffn_b1: Tensor::zeros(1, dff),
                ffn_w2: uniform(&mut rng, dff, d).scale(0.5),
                ffn_b2: Tensor::zeros(1, d),
            });
        }
        let out_w = uniform(&mut rng, d, d_in);
        Ok(Self {
            config,
            mixers: attn.into_iter().map(MixerSpec::Attention).collect(),
            params: EncoderParams {
                embed_w,
                embed_b: Tensor::zeros(1, d),
                blocks,
                out_w,
                out_b: Tensor::zeros(1, d_in),
            },
        })
    }

    pub fn layers(&self) -> usize {
        self.mixers.len()
    }

    /// Temperatures from each LPA layer's configuration.
    pub fn taus(&self) -> Vec<f64> {
        self.mixers.iter().map(|m| m.tau()).collect()
    }

    pub fn lpa_layers(&self) -> Vec<usize> {
        (0..self.layers()).filter(|&i| self.mixers[i].is_lpa()).collect()
    }

    fn check_tokens(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 || shape[1] != self.config.d_in {
            return Err(LpaError::Shape(format!(
                "encoder expects n x {} tokens, got {shape:?}",
                self.config.d_in
            )));
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, tokens: &Tensor<T>) -> Result<EncoderOutput<T>> {
        self.forward_with_taus(tokens, &self.taus())
    }

    pub fn forward_with_taus<T: Real>(&self, tokens: &Tensor<T>, taus: &[f64]) -> Result<EncoderOutput<T>> {
        self.check_tokens(tokens.shape())?;
        let b = Eager::<T>::new();
        let p = self.params.map(&mut |t| t.cast::<T>());
        let tr = eval_encoder(&b, tokens, &p, &self.mixers, taus);
        Ok(EncoderOutput {
            hidden: tr.hidden,
            taps: tr.taps,
        })
    }

    /// Forward pass with the mixing slot of every block supplied by `mix`,
    /// which gets the layer index and the layer-normed block input.
    pub fn forward_with_mixer(
        &self,
        tokens: &Tensor<f64>,
        mut mix: impl FnMut(usize, &Tensor<f64>) -> Result<Tensor<f64>>,
    ) -> Result<Tensor<f64>> {
        self.check_tokens(tokens.shape())?;
        let b = Eager::<f64>::new();
        let p = &self.params;
        let mut x = b.add(&b.matmul(tokens, &p.embed_w), &p.embed_b);
        for (i, block) in p.blocks.iter().enumerate() {
            let u = eval_layer_norm(&b, &x, &block.ln1_g, &block.ln1_b);
            let m = mix(i, &u)?;
            x = eval_ffn_residual(&b, &b.add(&x, &m), block);
        }
        Ok(x)
    }

    pub fn hidden(&self, tokens: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(self.forward(tokens)?.hidden)
    }

    pub fn reconstruct(&self, tokens: &Tensor<f64>) -> Result<Tensor<f64>> {
        let h = self.hidden(tokens)?;
        let b = Eager::<f64>::new();
        Ok(eval_readout(&b, &h, &self.params))
    }

    /// Leaf keys in visiting order.
    pub fn keys(&self) -> Vec<String> {
        let mut keys = Vec::new();
        self.params.visit("", &mut |k, _| keys.push(k));
        keys
    }

    /// Binds parameters on a tape: leaves where `trainable(key)`, constants
    /// elsewhere.
    pub fn bind(&self, tape: &Tape, trainable: &dyn Fn(&str) -> bool) -> EncoderParams<Var> {
        let keys = self.keys();
        let mut f = tape.binder(&keys, trainable);
        self.params.map(&mut f)
    }

    pub fn attention_layer(&self, i: usize) -> Option<AttentionLayer> {
        match (&self.mixers.get(i)?, &self.params.blocks[i].mixer) {
            (MixerSpec::Attention(c), MixerParams::Attention(p)) => Some(AttentionLayer {
                config: c.clone(),
                params: p.clone(),
            }),
            _ => None,
        }
    }

    pub fn lpa_layer(&self, i: usize) -> Option<LpaLayer> {
        match (&self.mixers.get(i)?, &self.params.blocks[i].mixer) {
            (MixerSpec::Lpa(c), MixerParams::Lpa(p)) => Some(LpaLayer {
                config: c.clone(),
                params: p.clone(),
            }),
            _ => None,
        }
    }

    pub fn set_lpa(&mut self, i: usize, layer: LpaLayer) -> Result<()> {
        if i >= self.layers() || layer.config.d != self.config.d {
            return Err(LpaError::Config(format!("cannot place LPA layer at {i}")));
        }
        layer.validate()?;
        self.mixers[i] = MixerSpec::Lpa(layer.config);
        self.params.blocks[i].mixer = MixerParams::Lpa(layer.params);
        Ok(())
    }

    pub fn set_attention(&mut self, i: usize, layer: AttentionLayer) -> Result<()> {
        if i >= self.layers() || layer.config.d != self.config.d {
            return Err(LpaError::Config(format!("cannot place attention layer at {i}")));
        }
        self.mixers[i] = MixerSpec::Attention(layer.config);
        self.params.blocks[i].mixer = MixerParams::Attention(layer.params);
        Ok(())
    }

    /// Zero-layer view: embedding and read-out only.
    pub fn truncated(&self, layers: usize) -> Self {
        let mut e = self.clone();
        e.mixers.truncate(layers);
        e.params.blocks.truncate(layers);
        e.config.layers = e.mixers.len();
        e
    }

    pub fn to_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        store.meta = serde_json::json!({
            "encoder": self.config,
            "mixers": self.mixers,
        });
        store.insert_tree("", &self.params);
        store
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let config: EncoderConfig = serde_json::from_value(store.meta["encoder"].clone())?;
        let mixers: Vec<MixerSpec> = serde_json::from_value(store.meta["mixers"].clone())?;
        let attn = vec![AttentionConfig::new(config.d, config.heads); mixers.len()];
        let mut enc = Self::with_attention(EncoderConfig { layers: mixers.len(), ..config }, attn, 0)?;
        for (i, m) in mixers.into_iter().enumerate() {
            match m {
                MixerSpec::Attention(c) => {
                    let layer = AttentionLayer::init(c, 0)?;
                    enc.set_attention(i, layer)?;
                }
                MixerSpec::Lpa(c) => {
                    let layer = LpaLayer::init(c, 0)?;
                    enc.set_lpa(i, layer)?;
                }
            }
        }
        store.fill_tree("", &mut enc.params)?;
        Ok(enc)
    }
}
