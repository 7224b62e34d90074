//! Desk-scale multimodal respiratory health screening: audio spectrogram
//! tokens and instruction-text tokens fused in one small decoder transformer
//! with LoRA adapters, instruction-tuned across synthetic sources, and
//! evaluated by AUROC on in-distribution and zero-shot tasks.

pub mod audio;
pub mod baselines;
pub mod error;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod text;
