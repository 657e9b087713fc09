use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::Tensor;
use crate::reference::data::{dataset, SyntheticConfig};
use crate::reference::{train_teacher, AttentionConfig, AttentionLayer, EncoderConfig, TeacherTraining, ToyEncoder};

/// A toy attention teacher: per-layer distance-bias slopes (shared by all
/// heads; 0 disables) and optional denoising pre-training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherSpec {
    pub encoder: EncoderConfig,
    pub position_slopes: Vec<f64>,
    pub data: SyntheticConfig,
    pub train_samples: usize,
    pub training: Option<TeacherTraining>,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        let encoder = EncoderConfig {
            d_in: 4,
            d: 16,
            heads: 2,
            layers: 4,
            ffn_mult: 2,
        };
        Self {
            position_slopes: vec![1.0, 0.5, 0.0, 0.0],
            data: SyntheticConfig {
                length: 32,
                channels: encoder.d_in,
                ..Default::default()
            },
            encoder,
            train_samples: 32,
            training: Some(TeacherTraining {
                steps: 150,
                batch: 4,
                lr: 3e-3,
                seed: 0,
            }),
        }
    }
}

pub fn toy_teacher(spec: &TeacherSpec, seed: u64) -> Result<ToyEncoder> {
    let cfg = &spec.encoder;
    let attn = (0..cfg.layers)
        .map(|l| {
            let s = spec.position_slopes.get(l).copied().unwrap_or(0.0);
            AttentionConfig {
                position_slopes: if s != 0.0 { vec![s; cfg.heads] } else { vec![] },
                ..AttentionConfig::new(cfg.d, cfg.heads)
            }
        })
        .collect();
    let mut enc = ToyEncoder::with_attention(cfg.clone(), attn, seed)?;
    if let Some(tr) = &spec.training {
        let data = dataset(&spec.data, spec.train_samples, seed ^ 0x5eed);
        train_teacher(&mut enc, &data, &TeacherTraining { seed: tr.seed ^ seed, ..tr.clone() });
    }
    Ok(enc)
}

/// Content-independent attention: `W_Q = W_K = 0`, so each row of the
/// attention matrix is a fixed `exp(-slope |i - j|)` window.
pub fn local_averaging_attention(d: usize, heads: usize, slope: f64, seed: u64) -> Result<AttentionLayer> {
    let cfg = AttentionConfig {
        position_slopes: vec![slope; heads],
        ..AttentionConfig::new(d, heads)
    };
    let mut layer = AttentionLayer::init(cfg, seed)?;
    layer.params.w_q = Tensor::zeros(d, d);
    layer.params.w_k = Tensor::zeros(d, d);
    Ok(layer)
}

/// Content-dependent attention with query/key weights scaled by `gain`, so
/// each row concentrates on a few tokens chosen by content.
pub fn sharp_attention(d: usize, heads: usize, gain: f64, seed: u64) -> Result<AttentionLayer> {
    let mut layer = AttentionLayer::init(AttentionConfig::new(d, heads), seed)?;
    layer.params.w_q = layer.params.w_q.scale(gain);
    layer.params.w_k = layer.params.w_k.scale(gain);
    Ok(layer)
}
