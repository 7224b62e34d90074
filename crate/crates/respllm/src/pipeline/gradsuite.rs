//! The full finite-difference verification suite: every differentiable op
//! plus the end-to-end model loss. Shared by the `gradcheck` CLI subcommand
//! and the acceptance tests.

use crate::audio::encoder::AudioEncoderConfig;
use crate::model::{RespLlmConfig, RespLlmModel};
use crate::nn::gradcheck::{check_params, check_store, GradCheckReport};
use crate::nn::{AttnMask, ParamStore, RealMatrix, Tape, Var};
use crate::text::Vocabulary;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Reduce a matrix-valued output to a scalar with a fixed random probe so
/// every output coordinate influences the loss.
fn probe_loss(tape: &mut Tape, y: Var, probe: &RealMatrix) -> Var {
    let p = tape.constant(probe.clone());
    let col = tape.matmul(y, p);
    let rows = tape.value(col).rows();
    let mean = tape.masked_mean_rows(col, vec![true; rows]);
    tape.scale(mean, rows as f64)
}

fn run_op(
    name: &str,
    store: &mut ParamStore,
    coords: usize,
    seed: u64,
    forward: impl Fn(&ParamStore, &mut Tape) -> Var,
) -> (String, GradCheckReport) {
    let ids = store.trainable_ids();
    let loss = |s: &ParamStore| {
        let mut tape = Tape::new();
        let out = forward(s, &mut tape);
        tape.value(out).get(0, 0)
    };
    let grads = |s: &ParamStore| {
        let mut tape = Tape::new();
        let out = forward(s, &mut tape);
        tape.backward(out);
        tape.take_param_grads()
    };
    let report = check_store(store, &ids, coords, seed, loss, grads);
    (name.to_string(), report)
}

/// Run the whole suite; each entry checks at least `coords` coordinates.
pub fn run_gradient_suite(coords: usize, seed: u64) -> Vec<(String, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut out = Vec::new();

    // linear: gradients w.r.t. x, W, and b.
    {
        let mut store = ParamStore::new();
        let x = store.add("x", RealMatrix::randn(6, 10, 1.0, &mut rng), true);
        let w = store.add("w", RealMatrix::randn(10, 7, 0.5, &mut rng), true);
        let b = store.add("b", RealMatrix::randn(1, 7, 0.5, &mut rng), true);
        let probe = RealMatrix::randn(7, 1, 1.0, &mut rng);
        out.push(run_op("linear", &mut store, coords, seed, move |s, tape| {
            let xv = tape.param(s, x);
            let wv = tape.param(s, w);
            let bv = tape.param(s, b);
            let y = tape.linear(xv, wv, bv).unwrap();
            probe_loss(tape, y, &probe)
        }));
    }

    // softmax over rows.
    {
        let mut store = ParamStore::new();
        let x = store.add("x", RealMatrix::randn(8, 9, 2.0, &mut rng), true);
        let probe = RealMatrix::randn(9, 1, 1.0, &mut rng);
        out.push(run_op("softmax", &mut store, coords, seed, move |s, tape| {
            let xv = tape.param(s, x);
            let y = tape.softmax_rows(xv);
            probe_loss(tape, y, &probe)
        }));
    }

    // layer_norm: x, gamma, beta.
    {
        let mut store = ParamStore::new();
        let x = store.add("x", RealMatrix::randn(6, 12, 1.5, &mut rng), true);
        let g = store.add("gamma", RealMatrix::randn(1, 12, 0.5, &mut rng), true);
        let b = store.add("beta", RealMatrix::randn(1, 12, 0.5, &mut rng), true);
        let probe = RealMatrix::randn(12, 1, 1.0, &mut rng);
        out.push(run_op(
            "layer_norm",
            &mut store,
            coords,
            seed,
            move |s, tape| {
                let xv = tape.param(s, x);
                let gv = tape.param(s, g);
                let bv = tape.param(s, b);
                let y = tape.layer_norm(xv, gv, bv, 1e-5);
                probe_loss(tape, y, &probe)
            },
        ));
    }

    // gelu.
    {
        let mut store = ParamStore::new();
        let x = store.add("x", RealMatrix::randn(7, 11, 1.5, &mut rng), true);
        let probe = RealMatrix::randn(11, 1, 1.0, &mut rng);
        out.push(run_op("gelu", &mut store, coords, seed, move |s, tape| {
            let xv = tape.param(s, x);
            let y = tape.gelu(xv);
            probe_loss(tape, y, &probe)
        }));
    }

    // multi-head attention with a causal + padding mask.
    {
        let s_dim = 8;
        let len = 7;
        let mut store = ParamStore::new();
        let x = store.add("x", RealMatrix::randn(len, s_dim, 1.0, &mut rng), true);
        let wq = store.add("wq", RealMatrix::randn(s_dim, s_dim, 0.5, &mut rng), true);
        let wk = store.add("wk", RealMatrix::randn(s_dim, s_dim, 0.5, &mut rng), true);
        let wv = store.add("wv", RealMatrix::randn(s_dim, s_dim, 0.5, &mut rng), true);
        let wo = store.add("wo", RealMatrix::randn(s_dim, s_dim, 0.5, &mut rng), true);
        let probe = RealMatrix::randn(s_dim, 1, 1.0, &mut rng);
        let mut valid = vec![true; len];
        valid[len - 1] = false;
        let mask = AttnMask::causal().with_padding(valid);
        out.push(run_op(
            "multi_head_attention",
            &mut store,
            coords,
            seed,
            move |s, tape| {
                let xv = tape.param(s, x);
                let q = tape.param(s, wq);
                let k = tape.param(s, wk);
                let v = tape.param(s, wv);
                let o = tape.param(s, wo);
                let y = tape.multi_head_attention(xv, q, k, v, o, 2, &mask).unwrap();
                probe_loss(tape, y, &probe)
            },
        ));
    }

    // LoRA delta path: gradients reach A and B; the frozen base gets none.
    {
        let mut store = ParamStore::new();
        let x = store.add("x", RealMatrix::randn(5, 10, 1.0, &mut rng), true);
        let w = store.add("w", RealMatrix::randn(8, 10, 0.5, &mut rng), false);
        let a = store.add("lora.a", RealMatrix::randn(3, 10, 0.3, &mut rng), true);
        // Nonzero B so gradients w.r.t. A are exercised too.
        let b = store.add("lora.b", RealMatrix::randn(8, 3, 0.3, &mut rng), true);
        let probe = RealMatrix::randn(8, 1, 1.0, &mut rng);
        out.push(run_op(
            "lora_linear",
            &mut store,
            coords,
            seed,
            move |s, tape| {
                let xv = tape.param(s, x);
                let wv = tape.param(s, w);
                let av = tape.param(s, a);
                let bv = tape.param(s, b);
                let y = tape.lora_linear(xv, wv, av, bv, 2.0).unwrap();
                probe_loss(tape, y, &probe)
            },
        ));
    }

    // cross_entropy on a logit row.
    {
        let mut store = ParamStore::new();
        let x = store.add("logits", RealMatrix::randn(1, 2, 1.0, &mut rng), true);
        out.push(run_op(
            "cross_entropy",
            &mut store,
            coords.min(2),
            seed,
            move |s, tape| {
                let xv = tape.param(s, x);
                tape.cross_entropy(xv, 1).unwrap()
            },
        ));
    }

    // Full fused-model loss w.r.t. the trainable set.
    {
        let cfg = RespLlmConfig {
            hidden: 16,
            layers: 2,
            heads: 2,
            ffn_mult: 2,
            lora_rank: 4,
            lora_alpha: 8.0,
            max_len: 128,
            encoder: AudioEncoderConfig {
                width: 8,
                layers: 1,
                heads: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        let vocab = Vocabulary::build(
            &["the patient reports a dry cough and fever", "gender: female. age: 61."],
            200,
        );
        let mut model = RespLlmModel::build(cfg, vocab, seed ^ 7).unwrap();
        let za = RealMatrix::randn(64, model.cfg.encoder.width, 1.0, &mut rng);
        let prompt = "the patient reports a dry cough";
        let dms = "gender: female. age: 61.";
        let trainable = model.trainable_parameters();
        let report = check_params(
            &mut model,
            |m| &mut m.store,
            &trainable,
            coords,
            seed,
            |m| {
                let mut tape = Tape::new();
                let o = m.forward(&mut tape, prompt, dms, &za, true).unwrap();
                let l = tape.cross_entropy(o.logits, 1).unwrap();
                tape.value(l).get(0, 0)
            },
            |m| {
                let mut tape = Tape::new();
                let o = m.forward(&mut tape, prompt, dms, &za, true).unwrap();
                let l = tape.cross_entropy(o.logits, 1).unwrap();
                tape.backward(l);
                tape.take_param_grads()
            },
        );
        out.push(("full_model_loss".to_string(), report));
    }

    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_with_small_budget() {
        for (name, report) in run_gradient_suite(10, 3) {
            assert!(report.passed(), "{name} failed: {:?}", report.failures);
        }
    }
}
