//! Patch-embedding transformer over spectrogram patches.
//!
//! Produces one embedding row per patch (L_a = 64 tokens). Attention is
//! bidirectional; blocks are pre-norm residual, so a zero-weight encoder
//! passes its positional embeddings straight through.

use super::frontend::{self, PatchGrid};
use crate::error::{Error, Result};
use crate::model::block::{TransformerBlock, WEIGHT_INIT_STD};
use crate::nn::{AttnMask, ParamId, ParamStore, RealMatrix, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Patch values are log energies in roughly [ln(1e-10), 0]; they are shifted
/// by the floor and scaled by this constant before the embedding layer. The
/// transform is a fixed affine reparameterization of the patch embedding.
const PATCH_SHIFT_SCALE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioEncoderConfig {
    pub patch_dim: usize,
    /// Embedding width A.
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for AudioEncoderConfig {
    fn default() -> Self {
        AudioEncoderConfig {
            patch_dim: frontend::PATCH_DIM,
            width: 128,
            layers: 2,
            heads: 4,
        }
    }
}

impl AudioEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::Config("audio encoder needs at least 1 layer".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "audio width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AudioEncoder {
    pub cfg: AudioEncoderConfig,
    embed_w: ParamId,
    embed_b: ParamId,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
}

impl AudioEncoder {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &AudioEncoderConfig,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Result<AudioEncoder> {
        cfg.validate()?;
        let embed_w = store.add(
            format!("{prefix}.embed.w"),
            RealMatrix::randn(cfg.patch_dim, cfg.width, WEIGHT_INIT_STD, rng),
            trainable,
        );
        let embed_b = store.add(
            format!("{prefix}.embed.b"),
            RealMatrix::zeros(1, cfg.width),
            trainable,
        );
        let pos = store.add(
            format!("{prefix}.pos"),
            RealMatrix::randn(frontend::N_PATCHES, cfg.width, WEIGHT_INIT_STD, rng),
            trainable,
        );
        let blocks = (0..cfg.layers)
            .map(|l| {
                TransformerBlock::build(
                    store,
                    &format!("{prefix}.block{l}"),
                    cfg.width,
                    cfg.heads,
                    4,
                    None,
                    trainable,
                    rng,
                )
            })
            .collect();
        Ok(AudioEncoder {
            cfg: cfg.clone(),
            embed_w,
            embed_b,
            pos,
            blocks,
        })
    }

    /// Shift/scale raw log-mel patches into the input range of the embedding.
    pub fn normalize_patches(grid: &PatchGrid) -> RealMatrix {
        let floor = frontend::log_floor();
        let mut m = grid.patches.clone();
        for v in m.data_mut() {
            *v = (*v - floor) / PATCH_SHIFT_SCALE;
        }
        m
    }

    /// Encode a patch grid already on the tape (one row per patch).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, patches: Var) -> Result<Var> {
        let w = tape.param(store, self.embed_w);
        let b = tape.param(store, self.embed_b);
        let e = tape.linear(patches, w, b)?;
        let pos = tape.param(store, self.pos);
        let mut h = tape.add(e, pos);
        let mask = AttnMask::bidirectional();
        for block in &self.blocks {
            h = block.forward(tape, store, h, &mask, false)?;
        }
        Ok(h)
    }

    /// Normalize, lease as a constant, and encode.
    pub fn forward_grid(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        grid: &PatchGrid,
    ) -> Result<Var> {
        let x = tape.constant(Self::normalize_patches(grid));
        self.forward(tape, store, x)
    }

    /// Inference-only encode: runs a throwaway tape and returns the values.
    pub fn encode(&self, store: &ParamStore, grid: &PatchGrid) -> Result<RealMatrix> {
        let mut tape = Tape::new();
        let out = self.forward_grid(&mut tape, store, grid)?;
        Ok(tape.value(out).clone())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embed_w, self.embed_b, self.pos];
        for b in &self.blocks {
            ids.extend(b.param_ids());
        }
        ids
    }

    pub fn set_trainable(&self, store: &mut ParamStore, trainable: bool) {
        for id in self.param_ids() {
            store.set_trainable(id, trainable);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::frontend::{log_mel, patchify, standardize, Waveform};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg() -> AudioEncoderConfig {
        AudioEncoderConfig {
            patch_dim: frontend::PATCH_DIM,
            width: 16,
            layers: 2,
            heads: 2,
        }
    }

    fn sample_grid(freq: f64) -> PatchGrid {
        let n = frontend::TARGET_SAMPLES;
        let w = Waveform {
            samples: (0..n)
                .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin() * 0.8)
                .collect(),
            sample_rate: 16000,
        };
        patchify(&log_mel(&standardize(&w).unwrap())).unwrap()
    }

    #[test]
    fn output_is_64_by_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = AudioEncoder::build(&mut store, "enc", &toy_cfg(), true, &mut rng).unwrap();
        let out = enc.encode(&store, &sample_grid(900.0)).unwrap();
        assert_eq!(out.shape(), (64, 16));
        assert!(out.is_finite());
    }

    #[test]
    fn zero_weights_pass_positional_embeddings_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = AudioEncoder::build(&mut store, "enc", &toy_cfg(), true, &mut rng).unwrap();
        let pos_values = store.value(enc.pos).clone();
        for id in enc.param_ids() {
            if id != enc.pos {
                store.value_mut(id).fill(0.0);
            }
        }
        let out = enc.encode(&store, &sample_grid(700.0)).unwrap();
        assert!(out.max_abs_diff(&pos_values) < 1e-12);
    }

    #[test]
    fn permuting_input_patches_changes_those_output_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = AudioEncoder::build(&mut store, "enc", &toy_cfg(), true, &mut rng).unwrap();
        let grid = sample_grid(1500.0);
        let mut swapped = grid.clone();
        // Swap two patches with distinct content.
        let (a, b) = (0usize, 37usize);
        let row_a = swapped.patches.row(a).to_vec();
        let row_b = swapped.patches.row(b).to_vec();
        swapped.patches.row_mut(a).copy_from_slice(&row_b);
        swapped.patches.row_mut(b).copy_from_slice(&row_a);
        assert_ne!(grid.patches.row(a), grid.patches.row(b));

        let out1 = enc.encode(&store, &grid).unwrap();
        let out2 = enc.encode(&store, &swapped).unwrap();
        let diff_a = out1.slice_rows(a, a + 1).max_abs_diff(&out2.slice_rows(a, a + 1));
        let diff_b = out1.slice_rows(b, b + 1).max_abs_diff(&out2.slice_rows(b, b + 1));
        assert!(diff_a > 1e-9 && diff_b > 1e-9);
        // Attention mixes globally: with generic weights other rows move too.
        let other = (0..64)
            .filter(|&r| r != a && r != b)
            .map(|r| out1.slice_rows(r, r + 1).max_abs_diff(&out2.slice_rows(r, r + 1)))
            .fold(0.0f64, f64::max);
        assert!(other > 1e-12);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let bad = AudioEncoderConfig {
            width: 10,
            heads: 3,
            ..toy_cfg()
        };
        assert!(AudioEncoder::build(&mut store, "enc", &bad, true, &mut rng).is_err());
    }
}
