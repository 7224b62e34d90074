//! Pre-norm transformer block shared by the audio encoder and the fused
//! model, with optional LoRA adapters on the query and key projections.

use crate::error::Result;
use crate::nn::{AttnMask, ParamId, ParamStore, RealMatrix, Tape, Var};
use rand::Rng;

pub const LN_EPS: f64 = 1e-5;
pub const WEIGHT_INIT_STD: f64 = 0.02;
pub const LORA_A_INIT_STD: f64 = 0.01;

/// Low-rank pair attached to one frozen weight matrix.
/// A is Gaussian-initialized, B starts at zero, so the delta is exactly
/// zero until training moves B.
#[derive(Debug, Clone)]
pub struct LoraPair {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f64,
}

impl LoraPair {
    pub fn build(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        rank: usize,
        alpha: f64,
        rng: &mut impl Rng,
    ) -> LoraPair {
        let a = store.add(
            format!("{name}.a"),
            RealMatrix::randn(rank, din, LORA_A_INIT_STD, rng),
            true,
        );
        let b = store.add(format!("{name}.b"), RealMatrix::zeros(dout, rank), true);
        LoraPair {
            a,
            b,
            scale: alpha / rank as f64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    heads: usize,
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    /// Query/key weights are stored out-features-first ([S x S], y = xWᵀ)
    /// so the LoRA delta composes as x Aᵀ Bᵀ.
    wq: ParamId,
    wk: ParamId,
    /// Value/output weights are stored in y = xW layout.
    wv: ParamId,
    wo: ParamId,
    pub lora_q: Option<LoraPair>,
    pub lora_k: Option<LoraPair>,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

impl TransformerBlock {
    /// `lora`: rank/alpha for adapters on Wq and Wk, or None for a plain
    /// block. `base_trainable` controls the flag on every non-LoRA weight.
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        heads: usize,
        ffn_mult: usize,
        lora: Option<(usize, f64)>,
        base_trainable: bool,
        rng: &mut impl Rng,
    ) -> TransformerBlock {
        let hidden = width * ffn_mult;
        let mut w = |store: &mut ParamStore, name: &str, r: usize, c: usize| {
            store.add(
                format!("{prefix}.{name}"),
                RealMatrix::randn(r, c, WEIGHT_INIT_STD, rng),
                base_trainable,
            )
        };
        let wq = w(store, "attn.wq", width, width);
        let wk = w(store, "attn.wk", width, width);
        let wv = w(store, "attn.wv", width, width);
        let wo = w(store, "attn.wo", width, width);
        let fc1_w = w(store, "ffn.fc1.w", width, hidden);
        let fc2_w = w(store, "ffn.fc2.w", hidden, width);
        let ones = |store: &mut ParamStore, name: &str| {
            store.add(
                format!("{prefix}.{name}"),
                RealMatrix::from_vec(1, width, vec![1.0; width]),
                base_trainable,
            )
        };
        let zeros = |store: &mut ParamStore, name: &str, n: usize| {
            store.add(
                format!("{prefix}.{name}"),
                RealMatrix::zeros(1, n),
                base_trainable,
            )
        };
        let ln1_gamma = ones(store, "ln1.gamma");
        let ln1_beta = zeros(store, "ln1.beta", width);
        let ln2_gamma = ones(store, "ln2.gamma");
        let ln2_beta = zeros(store, "ln2.beta", width);
        let fc1_b = zeros(store, "ffn.fc1.b", hidden);
        let fc2_b = zeros(store, "ffn.fc2.b", width);
        let (lora_q, lora_k) = match lora {
            Some((rank, alpha)) => (
                Some(LoraPair::build(
                    store,
                    &format!("{prefix}.attn.lora_q"),
                    width,
                    width,
                    rank,
                    alpha,
                    rng,
                )),
                Some(LoraPair::build(
                    store,
                    &format!("{prefix}.attn.lora_k"),
                    width,
                    width,
                    rank,
                    alpha,
                    rng,
                )),
            ),
            None => (None, None),
        };
        TransformerBlock {
            heads,
            ln1_gamma,
            ln1_beta,
            wq,
            wk,
            wv,
            wo,
            lora_q,
            lora_k,
            ln2_gamma,
            ln2_beta,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
        }
    }

    /// x + Attn(LN(x)), then + FFN(LN(·)). With `use_adapters` false, the
    /// LoRA paths are skipped entirely and the block is the frozen base.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mask: &AttnMask,
        use_adapters: bool,
    ) -> Result<Var> {
        let g1 = tape.param(store, self.ln1_gamma);
        let b1 = tape.param(store, self.ln1_beta);
        let xn = tape.layer_norm(x, g1, b1, LN_EPS);

        let wq = tape.param(store, self.wq);
        let q = match (&self.lora_q, use_adapters) {
            (Some(lora), true) => {
                let a = tape.param(store, lora.a);
                let b = tape.param(store, lora.b);
                tape.lora_linear(xn, wq, a, b, lora.scale)?
            }
            _ => tape.matmul_nt(xn, wq),
        };
        let wk = tape.param(store, self.wk);
        let k = match (&self.lora_k, use_adapters) {
            (Some(lora), true) => {
                let a = tape.param(store, lora.a);
                let b = tape.param(store, lora.b);
                tape.lora_linear(xn, wk, a, b, lora.scale)?
            }
            _ => tape.matmul_nt(xn, wk),
        };
        let wv = tape.param(store, self.wv);
        let v = tape.matmul(xn, wv);
        let ctx = tape.attention_core(q, k, v, self.heads, mask);
        let wo = tape.param(store, self.wo);
        let att = tape.matmul(ctx, wo);
        let h = tape.add(x, att);

        let g2 = tape.param(store, self.ln2_gamma);
        let b2 = tape.param(store, self.ln2_beta);
        let hn = tape.layer_norm(h, g2, b2, LN_EPS);
        let f1w = tape.param(store, self.fc1_w);
        let f1b = tape.param(store, self.fc1_b);
        let f1 = tape.linear(hn, f1w, f1b)?;
        let act = tape.gelu(f1);
        let f2w = tape.param(store, self.fc2_w);
        let f2b = tape.param(store, self.fc2_b);
        let f2 = tape.linear(act, f2w, f2b)?;
        Ok(tape.add(h, f2))
    }

    /// Every parameter id of the block, base weights first.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.ln1_gamma,
            self.ln1_beta,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.ln2_gamma,
            self.ln2_beta,
            self.fc1_w,
            self.fc1_b,
            self.fc2_w,
            self.fc2_b,
        ];
        for lora in [&self.lora_q, &self.lora_k].into_iter().flatten() {
            ids.push(lora.a);
            ids.push(lora.b);
        }
        ids
    }

    pub fn base_ids(&self) -> Vec<ParamId> {
        vec![
            self.ln1_gamma,
            self.ln1_beta,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.ln2_gamma,
            self.ln2_beta,
            self.fc1_w,
            self.fc1_b,
            self.fc2_w,
            self.fc2_b,
        ]
    }

    pub fn lora_ids(&self) -> Vec<ParamId> {
        [&self.lora_q, &self.lora_k]
            .into_iter()
            .flatten()
            .flat_map(|l| [l.a, l.b])
            .collect()
    }
}
