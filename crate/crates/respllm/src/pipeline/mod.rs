//! Instruction-dataset assembly, the training loop, evaluation, zero-shot
//! inference, checkpointing, and encoder pretraining — the operational spine
//! that drives every model through the identical protocol.

pub mod checkpoint;
pub mod dataset;
pub mod eval;
pub mod gradsuite;
pub mod pretrain;
pub mod config;
pub mod sample;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use dataset::{build_instruction_dataset, AudioSource, InstructionRecord};
pub use eval::{auroc, evaluate, zero_shot, EvalReport};
pub use sample::{AudioFeatures, AudioNeed, ClassifierModel, ModelKind, PreparedSample};
pub use train::{train, TrainHyper, TrainOutcome};

use crate::error::Result;
use crate::nn::{ParamId, ParamStore, RealMatrix, Tape, Var};

impl ClassifierModel for crate::model::RespLlmModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Respllm
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn trainable_ids(&self) -> Vec<ParamId> {
        self.trainable_parameters()
    }

    fn audio_need(&self) -> AudioNeed {
        AudioNeed::Encoded
    }

    fn encode_grid(&self, grid: &crate::audio::frontend::PatchGrid) -> Result<RealMatrix> {
        self.encode_audio(grid)
    }

    fn forward_logits(&self, tape: &mut Tape, sample: &PreparedSample) -> Result<Var> {
        let out = self.forward(
            tape,
            &sample.prompt_text,
            &sample.dms_text,
            sample.audio.encoded()?,
            true,
        )?;
        Ok(out.logits)
    }
}
