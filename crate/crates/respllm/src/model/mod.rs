//! The fused model: prompt, DMS, and audio token streams assembled into one
//! sequence, run through a LoRA-adapted decoder stack, pooled, and classified
//! by a two-node head.

pub mod block;

use crate::audio::encoder::{AudioEncoder, AudioEncoderConfig};
use crate::audio::frontend::{PatchGrid, N_PATCHES};
use crate::error::{Error, Result};
use crate::nn::{AttnMask, ParamId, ParamStore, RealMatrix, Tape, Var};
use crate::text::{tokenize_embed, Vocabulary};
use block::{TransformerBlock, LN_EPS, WEIGHT_INIT_STD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Audio token count L_a; fixed by the 64-patch grid.
pub const AUDIO_TOKENS: usize = N_PATCHES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RespLlmConfig {
    /// Hidden width S of the fused transformer.
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub n_classes: usize,
    pub max_len: usize,
    pub encoder: AudioEncoderConfig,
}

impl Default for RespLlmConfig {
    fn default() -> Self {
        RespLlmConfig {
            hidden: 64,
            layers: 2,
            heads: 2,
            ffn_mult: 4,
            lora_rank: 16,
            lora_alpha: 32.0,
            n_classes: 2,
            max_len: 256,
            encoder: AudioEncoderConfig::default(),
        }
    }
}

impl RespLlmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.lora_rank < 1 {
            return Err(Error::Config("lora rank must be at least 1".into()));
        }
        if self.n_classes != 2 {
            return Err(Error::Config(
                "the classification head has exactly two output nodes".into(),
            ));
        }
        if self.max_len < AUDIO_TOKENS + 1 {
            return Err(Error::Config(format!(
                "max_len {} cannot even hold the {AUDIO_TOKENS} audio tokens",
                self.max_len
            )));
        }
        self.encoder.validate()
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }
}

/// Prompt, DMS, and audio embeddings concatenated (in that order) with
/// positional embeddings added, plus optional tail padding.
#[derive(Debug, Clone)]
pub struct AssembledSequence {
    pub z: RealMatrix,
    pub l_p: usize,
    pub l_d: usize,
    pub l_a: usize,
    /// True for real tokens, false for padding rows.
    pub pad_mask: Vec<bool>,
}

impl AssembledSequence {
    pub fn content_len(&self) -> usize {
        self.l_p + self.l_d + self.l_a
    }
}

/// Concatenate the three streams and add positional embeddings row-wise.
/// When `pad_to` exceeds the content length, zero rows are appended and
/// flagged in the pad mask.
pub fn assemble(
    z_p: &RealMatrix,
    z_d: &RealMatrix,
    z_a: &RealMatrix,
    pos: &RealMatrix,
    pad_to: Option<usize>,
) -> Result<AssembledSequence> {
    let mut z = RealMatrix::concat_rows(&[z_p, z_d, z_a])?;
    let content = z.rows();
    if content > pos.rows() {
        return Err(Error::Input(format!(
            "sequence length {content} exceeds max_len {}",
            pos.rows()
        )));
    }
    for r in 0..content {
        let prow = pos.row(r).to_vec();
        for (v, p) in z.row_mut(r).iter_mut().zip(&prow) {
            *v += p;
        }
    }
    let total = pad_to.unwrap_or(content).max(content);
    let mut pad_mask = vec![true; content];
    if total > content {
        let pad = RealMatrix::zeros(total - content, z.cols());
        z = RealMatrix::concat_rows(&[&z, &pad])?;
        pad_mask.extend(std::iter::repeat(false).take(total - content));
    }
    Ok(AssembledSequence {
        z,
        l_p: z_p.rows(),
        l_d: z_d.rows(),
        l_a: z_a.rows(),
        pad_mask,
    })
}

/// Linear map from the audio embedding space (width A) into the fused
/// hidden space (width S). Trainable even while the encoder is frozen.
#[derive(Debug, Clone)]
pub struct Projector {
    pub w: ParamId,
    pub b: ParamId,
}

impl Projector {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        a_width: usize,
        s_width: usize,
        rng: &mut impl rand::Rng,
    ) -> Projector {
        Projector {
            w: store.add(
                format!("{prefix}.w"),
                RealMatrix::randn(a_width, s_width, WEIGHT_INIT_STD, rng),
                true,
            ),
            b: store.add(format!("{prefix}.b"), RealMatrix::zeros(1, s_width), true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(z, w, b)
    }
}

/// Everything the forward pass produces, kept on the tape so gradients can
/// still be pulled through `logits`.
pub struct ForwardOut {
    pub logits: Var,
    pub hidden: Var,
    pub pooled: Var,
}

pub struct RespLlmModel {
    pub cfg: RespLlmConfig,
    pub store: ParamStore,
    pub vocab: Vocabulary,
    embed: ParamId,
    pos: ParamId,
    pub encoder: AudioEncoder,
    pub projector: Projector,
    blocks: Vec<TransformerBlock>,
    final_gamma: ParamId,
    final_beta: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

impl RespLlmModel {
    /// Fresh model. The word embeddings, positional embeddings, audio
    /// encoder, transformer base weights, and final norm are frozen; only
    /// the projector, LoRA pairs, and head are trainable.
    pub fn build(cfg: RespLlmConfig, vocab: Vocabulary, seed: u64) -> Result<RespLlmModel> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = cfg.hidden;
        let embed = store.add(
            "embed.table",
            RealMatrix::randn(vocab.len(), s, WEIGHT_INIT_STD, &mut rng),
            false,
        );
        let pos = store.add(
            "embed.pos",
            RealMatrix::randn(cfg.max_len, s, WEIGHT_INIT_STD, &mut rng),
            false,
        );
        let encoder = AudioEncoder::build(&mut store, "audio_encoder", &cfg.encoder, false, &mut rng)?;
        let projector = Projector::build(&mut store, "projector", cfg.encoder.width, s, &mut rng);
        let blocks = (0..cfg.layers)
            .map(|l| {
                TransformerBlock::build(
                    &mut store,
                    &format!("llm.block{l}"),
                    s,
                    cfg.heads,
                    cfg.ffn_mult,
                    Some((cfg.lora_rank, cfg.lora_alpha)),
                    false,
                    &mut rng,
                )
            })
            .collect();
        let final_gamma = store.add(
            "llm.final_ln.gamma",
            RealMatrix::from_vec(1, s, vec![1.0; s]),
            false,
        );
        let final_beta = store.add("llm.final_ln.beta", RealMatrix::zeros(1, s), false);
        let head_w = store.add(
            "head.w",
            RealMatrix::randn(s, cfg.n_classes, WEIGHT_INIT_STD, &mut rng),
            true,
        );
        let head_b = store.add("head.b", RealMatrix::zeros(1, cfg.n_classes), true);
        Ok(RespLlmModel {
            cfg,
            store,
            vocab,
            embed,
            pos,
            encoder,
            projector,
            blocks,
            final_gamma,
            final_beta,
            head_w,
            head_b,
        })
    }

    pub fn embedding_table(&self) -> &RealMatrix {
        self.store.value(self.embed)
    }

    pub fn pos_table(&self) -> &RealMatrix {
        self.store.value(self.pos)
    }

    /// Exactly the projector, every LoRA A/B pair, and the head.
    pub fn trainable_parameters(&self) -> Vec<ParamId> {
        let mut ids = vec![self.projector.w, self.projector.b];
        for b in &self.blocks {
            ids.extend(b.lora_ids());
        }
        ids.push(self.head_w);
        ids.push(self.head_b);
        ids
    }

    pub fn frozen_parameters(&self) -> Vec<ParamId> {
        let trainable = self.trainable_parameters();
        self.store
            .ids()
            .filter(|id| !trainable.contains(id))
            .collect()
    }

    /// Embed prompt and DMS text from the frozen table.
    pub fn embed_text(&self, text: &str) -> RealMatrix {
        tokenize_embed(text, &self.vocab, self.store.value(self.embed)).z
    }

    /// Run the encoder (frozen) over a patch grid outside any training tape.
    pub fn encode_audio(&self, grid: &PatchGrid) -> Result<RealMatrix> {
        self.encoder.encode(&self.store, grid)
    }

    /// Transformer trunk over an on-tape sequence: causal blocks, final norm,
    /// masked mean pool, linear head.
    fn trunk(
        &self,
        tape: &mut Tape,
        z: Var,
        pad_mask: &[bool],
        use_adapters: bool,
    ) -> Result<ForwardOut> {
        let mask = AttnMask::causal().with_padding(pad_mask.to_vec());
        let mut h = z;
        for block in &self.blocks {
            h = block.forward(tape, &self.store, h, &mask, use_adapters)?;
        }
        let g = tape.param(&self.store, self.final_gamma);
        let b = tape.param(&self.store, self.final_beta);
        let hidden = tape.layer_norm(h, g, b, LN_EPS);
        let pooled = tape.masked_mean_rows(hidden, pad_mask.to_vec());
        let hw = tape.param(&self.store, self.head_w);
        let hb = tape.param(&self.store, self.head_b);
        let logits = tape.linear(pooled, hw, hb)?;
        Ok(ForwardOut {
            logits,
            hidden,
            pooled,
        })
    }

    /// Full forward from rendered text plus pre-encoded audio tokens z_a
    /// (64 x A, as produced by the frozen encoder). The projector runs on
    /// the tape so its gradient flows.
    pub fn forward(
        &self,
        tape: &mut Tape,
        prompt_text: &str,
        dms_text: &str,
        z_a: &RealMatrix,
        use_adapters: bool,
    ) -> Result<ForwardOut> {
        if z_a.shape() != (AUDIO_TOKENS, self.cfg.encoder.width) {
            return Err(Error::Dimension {
                op: "forward",
                lhs: format!("{AUDIO_TOKENS}x{}", self.cfg.encoder.width),
                rhs: z_a.shape_str(),
            });
        }
        let z_p = self.embed_text(prompt_text);
        let z_d = self.embed_text(dms_text);
        let l_p = z_p.rows();
        let l_d = z_d.rows();
        let total = l_p + l_d + AUDIO_TOKENS;
        if total > self.cfg.max_len {
            return Err(Error::Input(format!(
                "sequence length {total} exceeds max_len {}",
                self.cfg.max_len
            )));
        }
        // Text rows and their positions are constants; audio positions are
        // added after the trainable projection.
        let pos = self.store.value(self.pos);
        let mut text = RealMatrix::concat_rows(&[&z_p, &z_d])?;
        for r in 0..text.rows() {
            let prow = pos.row(r).to_vec();
            for (v, p) in text.row_mut(r).iter_mut().zip(&prow) {
                *v += p;
            }
        }
        let za_var = tape.constant(z_a.clone());
        let projected = self.projector.forward(tape, &self.store, za_var)?;
        let audio_pos = tape.constant(pos.slice_rows(l_p + l_d, total));
        let audio = tape.add(projected, audio_pos);
        let seq = if text.rows() > 0 {
            let text_var = tape.constant(text);
            tape.concat_rows(&[text_var, audio])
        } else {
            audio
        };
        self.trunk(tape, seq, &vec![true; total], use_adapters)
    }

    /// Forward over an already-assembled (possibly padded) sequence.
    pub fn forward_assembled(
        &self,
        tape: &mut Tape,
        seq: &AssembledSequence,
        use_adapters: bool,
    ) -> Result<ForwardOut> {
        if seq.z.rows() > self.cfg.max_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_len {}",
                seq.z.rows(),
                self.cfg.max_len
            )));
        }
        let z = tape.constant(seq.z.clone());
        self.trunk(tape, z, &seq.pad_mask, use_adapters)
    }

    /// Probability of the positive ("1") class.
    pub fn predict_proba(&self, prompt_text: &str, dms_text: &str, z_a: &RealMatrix) -> Result<f64> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, prompt_text, dms_text, z_a, true)?;
        Ok(positive_probability(tape.value(out.logits)))
    }

    pub fn head_ids(&self) -> (ParamId, ParamId) {
        (self.head_w, self.head_b)
    }
}

/// softmax(logits)[1] for a single two-logit row.
pub fn positive_probability(logits: &RealMatrix) -> f64 {
    debug_assert_eq!(logits.rows(), 1);
    let mut row = logits.row(0).to_vec();
    crate::nn::softmax_in_place(&mut row);
    row[1]
}

#[cfg(test)]
mod tests;
