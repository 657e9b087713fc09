//! Softmax attention, the toy encoder built around it, and the synthetic
//! denoising data the encoder is trained on.

mod attention;
pub mod data;
mod encoder;
mod train;

pub use attention::{
    attention_forward, eval_attention, eval_attention_probs, AttentionConfig, AttentionLayer,
    AttentionParams,
};
pub use encoder::{
    eval_block, eval_encoder, eval_layer_norm, eval_mixer, eval_mse, eval_readout, BlockParams,
    EncoderConfig, EncoderOutput, EncoderParams, EncoderTrace, MixerParams, MixerSpec, Taps,
    ToyEncoder, LAYER_NORM_EPS,
};
pub use train::{train_teacher, TeacherTraining};
