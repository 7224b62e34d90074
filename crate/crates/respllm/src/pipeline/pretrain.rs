//! Stand-in for a pretrained audio encoder: train one from random init on a
//! synthetic audio-only pretext task (tone-burst presence, bands and noise
//! shapes drawn broadly), then hand the weights to downstream models.

use super::sample::{AudioFeatures, PreparedSample};
use super::train::{train_prepared, TrainHyper};
use crate::audio::encoder::{AudioEncoder, AudioEncoderConfig};
use crate::audio::frontend::{log_mel, patchify, standardize};
use crate::baselines::AudioOnlyModel;
use crate::error::Result;
use crate::nn::{ParamStore, RealMatrix};
use crate::synth::{gen_waveform, sample_rng, LabelOp, LabelRule, SourceSpec};
use crate::text::DmsRecord;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub enabled: bool,
    pub n_samples: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Range the per-sample burst band is drawn from (Hz).
    pub band_range: (f64, f64),
    pub snr_db: (f64, f64),
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            enabled: true,
            n_samples: 600,
            epochs: 3,
            learning_rate: 1e-3,
            batch_size: 16,
            band_range: (700.0, 4200.0),
            snr_db: (3.0, 9.0),
        }
    }
}

/// Derive an independent sub-seed for a named stage.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let d = hasher.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn pretext_spec(band: (f64, f64), snr: (f64, f64), shape_tag: usize) -> SourceSpec {
    SourceSpec {
        source_id: "pretext".into(),
        dataset_description: "pretext".into(),
        sound_type: format!("pretext-{shape_tag}"),
        condition: "pretext".into(),
        positive_phrase: "positive".into(),
        negative_phrase: "negative".into(),
        n_train: 0,
        n_test: 0,
        marker_band: band,
        marker_snr_db: snr,
        label_rule: LabelRule {
            op: LabelOp::Xor,
            symptom: "none".into(),
            noise: 0.0,
        },
        dms: Default::default(),
    }
}

/// Generate the pretext set: balanced burst-present labels, bands sampled
/// across the configured range, noise shaping varied per sample.
pub fn pretext_samples(cfg: &PretrainConfig, seed: u64) -> Result<Vec<PreparedSample>> {
    (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| {
            let sample_id = format!("pretext-{i:05}");
            let mut rng = sample_rng(seed, &format!("{sample_id}/meta"));
            let marker = i % 2 == 1;
            let width: f64 = rng.gen_range(300.0..600.0);
            let lo = rng.gen_range(cfg.band_range.0..cfg.band_range.1 - width);
            let spec = pretext_spec((lo, lo + width), cfg.snr_db, rng.gen_range(0..17));
            let w = gen_waveform(marker, &spec, seed, &sample_id);
            let grid = patchify(&log_mel(&standardize(&w)?))?;
            Ok(PreparedSample {
                task_id: "pretext".into(),
                prompt_text: String::new(),
                dms_text: String::new(),
                dms: DmsRecord::default(),
                label: marker as usize,
                audio: AudioFeatures::Patches(grid),
            })
        })
        .collect()
}

/// Train an encoder on the pretext task and return its named weights.
pub fn pretrain_encoder(
    enc_cfg: &AudioEncoderConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<Vec<(String, RealMatrix)>> {
    let mut model = AudioOnlyModel::build(enc_cfg.clone(), derive_seed(seed, "pretrain-init"))?;
    let samples = pretext_samples(cfg, derive_seed(seed, "pretrain-data"))?;
    let hyper = TrainHyper {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        ..Default::default()
    };
    train_prepared(&mut model, &samples, &hyper, derive_seed(seed, "pretrain-loop"))?;
    Ok(encoder_weights(&model.store, &model.encoder))
}

/// Snapshot an encoder's parameters by name.
pub fn encoder_weights(store: &ParamStore, encoder: &AudioEncoder) -> Vec<(String, RealMatrix)> {
    encoder
        .param_ids()
        .into_iter()
        .map(|id| {
            let p = store.get(id);
            (p.name.clone(), p.value.clone())
        })
        .collect()
}

/// Copy named weights into a store; names and shapes must match exactly.
pub fn load_weights(store: &mut ParamStore, weights: &[(String, RealMatrix)]) -> Result<()> {
    for (name, value) in weights {
        let id = store.find(name).ok_or_else(|| {
            crate::error::Error::Checkpoint(format!("no parameter named '{name}'"))
        })?;
        if store.value(id).shape() != value.shape() {
            return Err(crate::error::Error::Checkpoint(format!(
                "shape mismatch loading '{name}': {} vs {}",
                value.shape_str(),
                store.value(id).shape_str()
            )));
        }
        *store.value_mut(id) = value.clone();
    }
    Ok(())
}
