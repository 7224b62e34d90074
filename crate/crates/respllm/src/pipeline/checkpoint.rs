//! Versioned binary checkpoints and model reconstruction.
//!
//! Layout: magic, version, a JSON metadata blob (kind, config, vocabulary,
//! schema, RNG state, step counter), then every named parameter tensor with
//! its shape, trainable flag, and exact f64 bits. Loading a checkpoint and
//! saving it again reproduces the file byte for byte.

use super::sample::{ClassifierModel, ModelKind};
use crate::baselines::{
    AudioOnlyModel, DmsEncoding, DmsHardModel, DmsSchemaDict, DmsSoftModel, FusionModel,
    FusionVariant,
};
use crate::error::{Error, Result};
use crate::model::{RespLlmConfig, RespLlmModel};
use crate::nn::{ParamId, RealMatrix};
use crate::text::Vocabulary;
use serde::{Deserialize, Serialize};
use std::path::Path;

const MAGIC: &[u8; 8] = b"RESPCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte ChaCha seed.
    pub seed: String,
    /// Stream position (decimal u128).
    pub word_pos: String,
}

impl RngState {
    pub fn fresh(seed: u64) -> RngState {
        use rand::SeedableRng;
        let rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        RngState {
            seed: super::eval::hex(&rng.get_seed()),
            word_pos: "0".into(),
        }
    }

    pub fn from_rng(rng: &rand_chacha::ChaCha8Rng) -> RngState {
        RngState {
            seed: super::eval::hex(&rng.get_seed()),
            word_pos: rng.get_word_pos().to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub config: serde_json::Value,
    pub vocab: Vec<String>,
    pub dms_schema: Option<DmsSchemaDict>,
    pub step: u64,
    pub seed: u64,
    pub trained_task_ids: Vec<String>,
    pub rng: RngState,
}

#[derive(Debug, Clone)]
pub struct SavedParam {
    pub name: String,
    pub trainable: bool,
    pub value: RealMatrix,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<SavedParam>,
}

// Per-kind configuration payloads stored in the meta blob.

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SoftConfig {
    pub width: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionConfig {
    pub variant: FusionVariant,
    pub dms_encoding: DmsEncoding,
    pub encoder: crate::audio::encoder::AudioEncoderConfig,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u64).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.trainable as u8);
            out.extend_from_slice(&(p.value.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(p.value.cols() as u64).to_le_bytes());
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let n_params = r.u64()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name_len = r.u64()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?;
            let trainable = r.take(1)?[0] != 0;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
            let raw = r.take(n * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(SavedParam {
                name,
                trainable,
                value: RealMatrix::from_vec(rows, cols, data),
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

// ---------------------------------------------------------------------
// Model zoo
// ---------------------------------------------------------------------

/// Any trainable system in this crate, dispatched uniformly.
pub enum AnyModel {
    Respllm(RespLlmModel),
    Audio(AudioOnlyModel),
    DmsHard(DmsHardModel),
    DmsSoft(DmsSoftModel),
    Fusion(FusionModel),
}

macro_rules! delegate {
    ($self:ident, $m:ident, $body:expr) => {
        match $self {
            AnyModel::Respllm($m) => $body,
            AnyModel::Audio($m) => $body,
            AnyModel::DmsHard($m) => $body,
            AnyModel::DmsSoft($m) => $body,
            AnyModel::Fusion($m) => $body,
        }
    };
}

impl ClassifierModel for AnyModel {
    fn kind(&self) -> ModelKind {
        delegate!(self, m, m.kind())
    }

    fn store(&self) -> &crate::nn::ParamStore {
        delegate!(self, m, m.store())
    }

    fn store_mut(&mut self) -> &mut crate::nn::ParamStore {
        delegate!(self, m, m.store_mut())
    }

    fn trainable_ids(&self) -> Vec<ParamId> {
        delegate!(self, m, m.trainable_ids())
    }

    fn audio_need(&self) -> super::sample::AudioNeed {
        delegate!(self, m, m.audio_need())
    }

    fn encode_grid(&self, grid: &crate::audio::frontend::PatchGrid) -> Result<RealMatrix> {
        delegate!(self, m, m.encode_grid(grid))
    }

    fn forward_logits(
        &self,
        tape: &mut crate::nn::Tape,
        sample: &super::sample::PreparedSample,
    ) -> Result<crate::nn::Var> {
        delegate!(self, m, m.forward_logits(tape, sample))
    }
}

/// Metadata supplied by the caller at save time.
#[derive(Debug, Clone)]
pub struct SaveContext {
    pub step: u64,
    pub seed: u64,
    pub trained_task_ids: Vec<String>,
    pub rng: RngState,
}

pub fn checkpoint_model(model: &AnyModel, ctx: SaveContext) -> Result<Checkpoint> {
    let (config, vocab, dms_schema) = match model {
        AnyModel::Respllm(m) => (
            serde_json::to_value(&m.cfg)?,
            m.vocab.tokens().to_vec(),
            None,
        ),
        AnyModel::Audio(m) => (serde_json::to_value(&m.cfg)?, Vec::new(), None),
        AnyModel::DmsHard(m) => (
            serde_json::Value::Object(Default::default()),
            Vec::new(),
            Some(m.schema.clone()),
        ),
        AnyModel::DmsSoft(m) => (
            serde_json::to_value(SoftConfig {
                width: m.store.value(m.store.find("embed.table").unwrap()).cols(),
            })?,
            m.vocab.tokens().to_vec(),
            None,
        ),
        AnyModel::Fusion(m) => (
            serde_json::to_value(FusionConfig {
                variant: m.variant,
                dms_encoding: m.dms_encoding,
                encoder: m.cfg.clone(),
            })?,
            m.vocab.as_ref().map(|v| v.tokens().to_vec()).unwrap_or_default(),
            m.schema.clone(),
        ),
    };
    let params = model
        .store()
        .iter()
        .map(|(_, p)| SavedParam {
            name: p.name.clone(),
            trainable: p.trainable,
            value: p.value.clone(),
        })
        .collect();
    Ok(Checkpoint {
        meta: CheckpointMeta {
            kind: model.kind(),
            config,
            vocab,
            dms_schema,
            step: ctx.step,
            seed: ctx.seed,
            trained_task_ids: ctx.trained_task_ids,
            rng: ctx.rng,
        },
        params,
    })
}

/// Rebuild the model a checkpoint describes and restore every tensor.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<AnyModel> {
    let meta = &ck.meta;
    let mut model = match meta.kind {
        ModelKind::Respllm => {
            let cfg: RespLlmConfig = serde_json::from_value(meta.config.clone())?;
            let vocab = Vocabulary::from_tokens(meta.vocab.clone())?;
            AnyModel::Respllm(RespLlmModel::build(cfg, vocab, meta.seed)?)
        }
        ModelKind::Audio => {
            let cfg = serde_json::from_value(meta.config.clone())?;
            AnyModel::Audio(AudioOnlyModel::build(cfg, meta.seed)?)
        }
        ModelKind::DmsHard => {
            let schema = meta
                .dms_schema
                .clone()
                .ok_or_else(|| Error::Checkpoint("dms-hard checkpoint lacks schema".into()))?;
            AnyModel::DmsHard(DmsHardModel::build(schema, meta.seed))
        }
        ModelKind::DmsSoft => {
            let cfg: SoftConfig = serde_json::from_value(meta.config.clone())?;
            let vocab = Vocabulary::from_tokens(meta.vocab.clone())?;
            AnyModel::DmsSoft(DmsSoftModel::build(vocab, cfg.width, meta.seed))
        }
        ModelKind::FusionConcat | ModelKind::FusionAdd | ModelKind::FusionXattn => {
            let cfg: FusionConfig = serde_json::from_value(meta.config.clone())?;
            let vocab = if meta.vocab.is_empty() {
                None
            } else {
                Some(Vocabulary::from_tokens(meta.vocab.clone())?)
            };
            AnyModel::Fusion(FusionModel::build(
                cfg.variant,
                cfg.dms_encoding,
                cfg.encoder,
                meta.dms_schema.clone(),
                vocab,
                meta.seed,
            )?)
        }
    };
    restore_params(&mut model, &ck.params)?;
    Ok(model)
}

fn restore_params(model: &mut AnyModel, params: &[SavedParam]) -> Result<()> {
    let store = model.store_mut();
    if store.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            params.len(),
            store.len()
        )));
    }
    for (id, saved) in store.ids().collect::<Vec<_>>().into_iter().zip(params) {
        let current = store.get(id);
        if current.name != saved.name {
            return Err(Error::Checkpoint(format!(
                "tensor order mismatch: expected '{}', found '{}'",
                current.name, saved.name
            )));
        }
        if current.value.shape() != saved.value.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for '{}': checkpoint {} vs model {}",
                saved.name,
                saved.value.shape_str(),
                current.value.shape_str()
            )));
        }
        let p = store.get_mut(id);
        p.value = saved.value.clone();
        p.trainable = saved.trainable;
    }
    Ok(())
}
