//! Single-modal baselines and the non-LLM fusion variants.
//!
//! Every baseline exposes the same [`ClassifierModel`] surface as the fused
//! model, so the training loop, optimizer, and evaluation protocol are
//! byte-identical across systems; only the model differs.

use crate::audio::encoder::{AudioEncoder, AudioEncoderConfig};
use crate::audio::frontend::N_PATCHES;
use crate::error::{Error, Result};
use crate::model::block::WEIGHT_INIT_STD;
use crate::nn::{AttnMask, ParamId, ParamStore, RealMatrix, Tape, Var};
use crate::pipeline::sample::{AudioNeed, ClassifierModel, ModelKind, PreparedSample};
use crate::text::{tokenize_embed, DmsRecord, Vocabulary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Union dictionary across all training sources: fixed positions for every
/// category value seen in training. Unseen values at evaluation time fall
/// into zero blocks (or the trailing "other" location slot).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DmsSchemaDict {
    pub medical_history: Vec<String>,
    pub symptoms: Vec<String>,
    pub locations: Vec<String>,
}

impl DmsSchemaDict {
    pub fn from_records<'a>(records: impl Iterator<Item = &'a DmsRecord>) -> DmsSchemaDict {
        let mut medical = std::collections::BTreeSet::new();
        let mut symptoms = std::collections::BTreeSet::new();
        let mut locations = std::collections::BTreeSet::new();
        for r in records {
            medical.extend(r.medical_history.iter().cloned());
            symptoms.extend(r.symptoms.iter().cloned());
            locations.extend(r.location.iter().cloned());
        }
        DmsSchemaDict {
            medical_history: medical.into_iter().collect(),
            symptoms: symptoms.into_iter().collect(),
            locations: locations.into_iter().collect(),
        }
    }

    /// gender one-hot(3) + age/100 + history multi-hot + symptom multi-hot
    /// + location one-hot(K_l + 1).
    pub fn dim(&self) -> usize {
        3 + 1 + self.medical_history.len() + self.symptoms.len() + self.locations.len() + 1
    }

    pub fn encode(&self, r: &DmsRecord) -> RealMatrix {
        let mut v = vec![0.0; self.dim()];
        match r.gender.as_deref() {
            Some("male") => v[0] = 1.0,
            Some("female") => v[1] = 1.0,
            Some(_) => v[2] = 1.0,
            None => {}
        }
        if let Some(age) = r.age {
            v[3] = age as f64 / 100.0;
        }
        let mut off = 4;
        for m in &r.medical_history {
            if let Ok(i) = self.medical_history.binary_search(m) {
                v[off + i] = 1.0;
            }
        }
        off += self.medical_history.len();
        for s in &r.symptoms {
            if let Ok(i) = self.symptoms.binary_search(s) {
                v[off + i] = 1.0;
            }
        }
        off += self.symptoms.len();
        if let Some(l) = &r.location {
            match self.locations.binary_search(l) {
                Ok(i) => v[off + i] = 1.0,
                Err(_) => v[off + self.locations.len()] = 1.0,
            }
        }
        RealMatrix::row_vector(&v)
    }
}

/// Masked mean of frozen token embeddings of the rendered DMS text.
/// Empty text yields the zero vector.
pub fn soft_dms_vector(dms_text: &str, vocab: &Vocabulary, table: &RealMatrix) -> RealMatrix {
    let e = tokenize_embed(dms_text, vocab, table);
    let mut out = RealMatrix::zeros(1, table.cols());
    if e.is_empty() {
        return out;
    }
    for r in 0..e.z.rows() {
        for (acc, v) in out.row_mut(0).iter_mut().zip(e.z.row(r)) {
            *acc += v;
        }
    }
    out.scale_in_place(1.0 / e.z.rows() as f64);
    out
}

fn zero_bias(store: &mut ParamStore, name: &str, n: usize) -> ParamId {
    store.add(name.to_string(), RealMatrix::zeros(1, n), true)
}

// ---------------------------------------------------------------------
// Audio-only
// ---------------------------------------------------------------------

/// Fine-tunes the audio encoder alongside a linear classifier. The DMS
/// stream has no path into this model at all.
pub struct AudioOnlyModel {
    pub cfg: AudioEncoderConfig,
    pub store: ParamStore,
    pub encoder: AudioEncoder,
    head_w: ParamId,
    head_b: ParamId,
}

impl AudioOnlyModel {
    pub fn build(cfg: AudioEncoderConfig, seed: u64) -> Result<AudioOnlyModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = AudioEncoder::build(&mut store, "audio_encoder", &cfg, true, &mut rng)?;
        let head_w = store.add(
            "head.w",
            RealMatrix::randn(cfg.width, 2, WEIGHT_INIT_STD, &mut rng),
            true,
        );
        let head_b = zero_bias(&mut store, "head.b", 2);
        Ok(AudioOnlyModel {
            cfg,
            store,
            encoder,
            head_w,
            head_b,
        })
    }
}

impl ClassifierModel for AudioOnlyModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Audio
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn trainable_ids(&self) -> Vec<ParamId> {
        self.store.trainable_ids()
    }

    fn audio_need(&self) -> AudioNeed {
        AudioNeed::Patches
    }

    fn forward_logits(&self, tape: &mut Tape, sample: &PreparedSample) -> Result<Var> {
        let tokens = self
            .encoder
            .forward_grid(tape, &self.store, sample.audio.patches()?)?;
        let pooled = tape.masked_mean_rows(tokens, vec![true; N_PATCHES]);
        let w = tape.param(&self.store, self.head_w);
        let b = tape.param(&self.store, self.head_b);
        tape.linear(pooled, w, b)
    }
}

// ---------------------------------------------------------------------
// DMS-only
// ---------------------------------------------------------------------

/// Linear model on the hard-encoded DMS vector.
pub struct DmsHardModel {
    pub schema: DmsSchemaDict,
    pub store: ParamStore,
    head_w: ParamId,
    head_b: ParamId,
}

impl DmsHardModel {
    pub fn build(schema: DmsSchemaDict, seed: u64) -> DmsHardModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let head_w = store.add(
            "head.w",
            RealMatrix::randn(schema.dim(), 2, WEIGHT_INIT_STD, &mut rng),
            true,
        );
        let head_b = zero_bias(&mut store, "head.b", 2);
        DmsHardModel {
            schema,
            store,
            head_w,
            head_b,
        }
    }
}

impl ClassifierModel for DmsHardModel {
    fn kind(&self) -> ModelKind {
        ModelKind::DmsHard
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn trainable_ids(&self) -> Vec<ParamId> {
        self.store.trainable_ids()
    }

    fn audio_need(&self) -> AudioNeed {
        AudioNeed::None
    }

    fn forward_logits(&self, tape: &mut Tape, sample: &PreparedSample) -> Result<Var> {
        let x = tape.constant(self.schema.encode(&sample.dms));
        let w = tape.param(&self.store, self.head_w);
        let b = tape.param(&self.store, self.head_b);
        tape.linear(x, w, b)
    }
}

/// Linear model on the frozen-embedding sentence vector of the DMS text.
pub struct DmsSoftModel {
    pub vocab: Vocabulary,
    pub store: ParamStore,
    embed: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

impl DmsSoftModel {
    pub fn build(vocab: Vocabulary, width: usize, seed: u64) -> DmsSoftModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = store.add(
            "embed.table",
            RealMatrix::randn(vocab.len(), width, WEIGHT_INIT_STD, &mut rng),
            false,
        );
        let head_w = store.add(
            "head.w",
            RealMatrix::randn(width, 2, WEIGHT_INIT_STD, &mut rng),
            true,
        );
        let head_b = zero_bias(&mut store, "head.b", 2);
        DmsSoftModel {
            vocab,
            store,
            embed,
            head_w,
            head_b,
        }
    }

    pub fn dms_vector(&self, dms_text: &str) -> RealMatrix {
        soft_dms_vector(dms_text, &self.vocab, self.store.value(self.embed))
    }
}

impl ClassifierModel for DmsSoftModel {
    fn kind(&self) -> ModelKind {
        ModelKind::DmsSoft
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn trainable_ids(&self) -> Vec<ParamId> {
        self.store.trainable_ids()
    }

    fn audio_need(&self) -> AudioNeed {
        AudioNeed::None
    }

    fn forward_logits(&self, tape: &mut Tape, sample: &PreparedSample) -> Result<Var> {
        let x = tape.constant(self.dms_vector(&sample.dms_text));
        let w = tape.param(&self.store, self.head_w);
        let b = tape.param(&self.store, self.head_b);
        tape.linear(x, w, b)
    }
}

// ---------------------------------------------------------------------
// Fusion
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionVariant {
    Concat,
    Add,
    CrossAttn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DmsEncoding {
    Hard,
    Soft,
}

/// Frozen audio encoder plus one of three fusion strategies over the audio
/// tokens and the DMS vector. Only the fusion layers and head train.
pub struct FusionModel {
    pub variant: FusionVariant,
    pub dms_encoding: DmsEncoding,
    pub cfg: AudioEncoderConfig,
    pub store: ParamStore,
    pub encoder: AudioEncoder,
    pub schema: Option<DmsSchemaDict>,
    pub vocab: Option<Vocabulary>,
    embed: Option<ParamId>,
    xattn_heads: usize,
    // Per-variant parameters; unused ones stay None.
    proj_audio: Option<(ParamId, ParamId)>,
    proj_dms: Option<(ParamId, ParamId)>,
    wq: Option<ParamId>,
    wk: Option<ParamId>,
    wv: Option<ParamId>,
    wo: Option<ParamId>,
    head_w: ParamId,
    head_b: ParamId,
}

impl FusionModel {
    /// `schema` is required for hard DMS encoding; `vocab` for soft. The
    /// soft embedding table shares the audio width A.
    pub fn build(
        variant: FusionVariant,
        dms_encoding: DmsEncoding,
        cfg: AudioEncoderConfig,
        schema: Option<DmsSchemaDict>,
        vocab: Option<Vocabulary>,
        seed: u64,
    ) -> Result<FusionModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = AudioEncoder::build(&mut store, "audio_encoder", &cfg, false, &mut rng)?;
        let a = cfg.width;
        let (embed, dms_dim) = match dms_encoding {
            DmsEncoding::Hard => {
                let schema = schema
                    .as_ref()
                    .ok_or_else(|| Error::Config("hard fusion needs a DMS schema".into()))?;
                (None, schema.dim())
            }
            DmsEncoding::Soft => {
                let vocab = vocab
                    .as_ref()
                    .ok_or_else(|| Error::Config("soft fusion needs a vocabulary".into()))?;
                let embed = store.add(
                    "embed.table",
                    RealMatrix::randn(vocab.len(), a, WEIGHT_INIT_STD, &mut rng),
                    false,
                );
                (Some(embed), a)
            }
        };

        let mut proj_audio = None;
        let mut proj_dms = None;
        let (mut wq, mut wk, mut wv, mut wo) = (None, None, None, None);
        let head_in = match variant {
            FusionVariant::Concat => a + dms_dim,
            FusionVariant::Add => {
                proj_audio = Some((
                    store.add(
                        "fusion.proj_audio.w",
                        RealMatrix::randn(a, a, WEIGHT_INIT_STD, &mut rng),
                        true,
                    ),
                    zero_bias(&mut store, "fusion.proj_audio.b", a),
                ));
                proj_dms = Some((
                    store.add(
                        "fusion.proj_dms.w",
                        RealMatrix::randn(dms_dim, a, WEIGHT_INIT_STD, &mut rng),
                        true,
                    ),
                    zero_bias(&mut store, "fusion.proj_dms.b", a),
                ));
                a
            }
            FusionVariant::CrossAttn => {
                wq = Some(store.add(
                    "fusion.xattn.wq",
                    RealMatrix::randn(dms_dim, a, WEIGHT_INIT_STD, &mut rng),
                    true,
                ));
                wk = Some(store.add(
                    "fusion.xattn.wk",
                    RealMatrix::randn(a, a, WEIGHT_INIT_STD, &mut rng),
                    true,
                ));
                wv = Some(store.add(
                    "fusion.xattn.wv",
                    RealMatrix::randn(a, a, WEIGHT_INIT_STD, &mut rng),
                    true,
                ));
                wo = Some(store.add(
                    "fusion.xattn.wo",
                    RealMatrix::randn(a, a, WEIGHT_INIT_STD, &mut rng),
                    true,
                ));
                a + dms_dim
            }
        };
        let head_w = store.add(
            "head.w",
            RealMatrix::randn(head_in, 2, WEIGHT_INIT_STD, &mut rng),
            true,
        );
        let head_b = zero_bias(&mut store, "head.b", 2);
        Ok(FusionModel {
            variant,
            dms_encoding,
            cfg,
            store,
            encoder,
            schema,
            vocab,
            embed,
            xattn_heads: 2,
            proj_audio,
            proj_dms,
            wq,
            wk,
            wv,
            wo,
            head_w,
            head_b,
        })
    }

    pub fn dms_vector(&self, sample: &PreparedSample) -> RealMatrix {
        match self.dms_encoding {
            DmsEncoding::Hard => self.schema.as_ref().unwrap().encode(&sample.dms),
            DmsEncoding::Soft => soft_dms_vector(
                &sample.dms_text,
                self.vocab.as_ref().unwrap(),
                self.store.value(self.embed.unwrap()),
            ),
        }
    }

    pub fn kind_of(variant: FusionVariant) -> ModelKind {
        match variant {
            FusionVariant::Concat => ModelKind::FusionConcat,
            FusionVariant::Add => ModelKind::FusionAdd,
            FusionVariant::CrossAttn => ModelKind::FusionXattn,
        }
    }
}

impl ClassifierModel for FusionModel {
    fn kind(&self) -> ModelKind {
        Self::kind_of(self.variant)
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn trainable_ids(&self) -> Vec<ParamId> {
        self.store.trainable_ids()
    }

    fn audio_need(&self) -> AudioNeed {
        AudioNeed::Encoded
    }

    fn encode_grid(&self, grid: &crate::audio::frontend::PatchGrid) -> Result<RealMatrix> {
        self.encoder.encode(&self.store, grid)
    }

    fn forward_logits(&self, tape: &mut Tape, sample: &PreparedSample) -> Result<Var> {
        let tokens = tape.constant(sample.audio.encoded()?.clone());
        let dms = tape.constant(self.dms_vector(sample));
        let fused = match self.variant {
            FusionVariant::Concat => {
                let audio = tape.masked_mean_rows(tokens, vec![true; N_PATCHES]);
                tape.concat_cols(audio, dms)
            }
            FusionVariant::Add => {
                let audio = tape.masked_mean_rows(tokens, vec![true; N_PATCHES]);
                let (aw, ab) = self.proj_audio.unwrap();
                let (dw, db) = self.proj_dms.unwrap();
                let awv = tape.param(&self.store, aw);
                let abv = tape.param(&self.store, ab);
                let pa = tape.linear(audio, awv, abv)?;
                let dwv = tape.param(&self.store, dw);
                let dbv = tape.param(&self.store, db);
                let pd = tape.linear(dms, dwv, dbv)?;
                tape.add(pa, pd)
            }
            FusionVariant::CrossAttn => {
                // The DMS vector is the single query token; keys and values
                // come from the 64 audio tokens.
                let wq = tape.param(&self.store, self.wq.unwrap());
                let q = tape.matmul(dms, wq);
                let wk = tape.param(&self.store, self.wk.unwrap());
                let k = tape.matmul(tokens, wk);
                let wv = tape.param(&self.store, self.wv.unwrap());
                let v = tape.matmul(tokens, wv);
                let ctx = tape.attention_core(q, k, v, self.xattn_heads, &AttnMask::bidirectional());
                let wo = tape.param(&self.store, self.wo.unwrap());
                let out = tape.matmul(ctx, wo);
                tape.concat_cols(out, dms)
            }
        };
        let w = tape.param(&self.store, self.head_w);
        let b = tape.param(&self.store, self.head_b);
        tape.linear(fused, w, b)
    }
}
