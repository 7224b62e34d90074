//! The common sample shape and the model interface the trainer drives.

use crate::audio::frontend::PatchGrid;
use crate::error::{Error, Result};
use crate::model::positive_probability;
use crate::nn::{ParamId, ParamStore, RealMatrix, Tape};
use crate::text::DmsRecord;
use serde::{Deserialize, Serialize};

/// Which audio representation a model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AudioNeed {
    /// No audio path at all (DMS-only baselines).
    None,
    /// Raw patch grids; the model runs (and may train) its own encoder.
    Patches,
    /// Pre-encoded audio tokens from the model's frozen encoder.
    Encoded,
}

/// Audio features attached to a prepared sample.
#[derive(Debug, Clone)]
pub enum AudioFeatures {
    None,
    Patches(PatchGrid),
    /// 64 x A token matrix from the frozen encoder.
    Encoded(RealMatrix),
}

impl AudioFeatures {
    pub fn patches(&self) -> Result<&PatchGrid> {
        match self {
            AudioFeatures::Patches(p) => Ok(p),
            _ => Err(Error::Contract("sample carries no patch grid".into())),
        }
    }

    pub fn encoded(&self) -> Result<&RealMatrix> {
        match self {
            AudioFeatures::Encoded(m) => Ok(m),
            _ => Err(Error::Contract("sample carries no encoded audio".into())),
        }
    }
}

/// One training/eval unit after feature preparation.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub task_id: String,
    pub prompt_text: String,
    pub dms_text: String,
    pub dms: DmsRecord,
    pub label: usize,
    pub audio: AudioFeatures,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Respllm,
    Audio,
    DmsHard,
    DmsSoft,
    FusionConcat,
    FusionAdd,
    FusionXattn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::Respllm,
        ModelKind::Audio,
        ModelKind::DmsHard,
        ModelKind::DmsSoft,
        ModelKind::FusionConcat,
        ModelKind::FusionAdd,
        ModelKind::FusionXattn,
    ];

    pub fn parse(s: &str) -> Result<ModelKind> {
        for kind in Self::ALL {
            if kind.as_str() == s {
                return Ok(kind);
            }
        }
        Err(Error::Config(format!(
            "unknown model kind '{s}' (expected one of respllm, audio, dms-hard, dms-soft, \
             fusion-concat, fusion-add, fusion-xattn)"
        )))
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Respllm => "respllm",
            ModelKind::Audio => "audio",
            ModelKind::DmsHard => "dms-hard",
            ModelKind::DmsSoft => "dms-soft",
            ModelKind::FusionConcat => "fusion-concat",
            ModelKind::FusionAdd => "fusion-add",
            ModelKind::FusionXattn => "fusion-xattn",
        }
    }
}

/// A binary classifier the shared training loop can drive. Implementations
/// put their two logits on the tape; loss, gradients, and scoring are
/// provided here so every model trains under the identical protocol.
pub trait ClassifierModel: Send + Sync {
    fn kind(&self) -> ModelKind;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn trainable_ids(&self) -> Vec<ParamId>;
    fn audio_need(&self) -> AudioNeed;

    /// Encode a patch grid with the model's own (frozen) encoder. Only
    /// called when `audio_need()` is `Encoded`.
    fn encode_grid(&self, grid: &PatchGrid) -> Result<RealMatrix> {
        let _ = grid;
        Err(Error::Contract(format!(
            "{} has no frozen audio encoder",
            self.kind().as_str()
        )))
    }

    fn forward_logits(&self, tape: &mut Tape, sample: &PreparedSample) -> Result<crate::nn::Var>;

    fn loss_and_grads(
        &self,
        sample: &PreparedSample,
    ) -> Result<(f64, Vec<(ParamId, RealMatrix)>)> {
        let mut tape = Tape::new();
        let logits = self.forward_logits(&mut tape, sample)?;
        let loss = tape.cross_entropy(logits, sample.label)?;
        let value = tape.value(loss).get(0, 0);
        tape.backward(loss);
        Ok((value, tape.take_param_grads()))
    }

    /// Probability of the positive ("1") class.
    fn predict(&self, sample: &PreparedSample) -> Result<f64> {
        let mut tape = Tape::new();
        let logits = self.forward_logits(&mut tape, sample)?;
        Ok(positive_probability(tape.value(logits)))
    }
}
