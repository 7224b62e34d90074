//! Reverse-mode automatic differentiation over matrices.
//!
//! A [`Tape`] records one forward computation as a sequence of matrix-valued
//! nodes. Calling [`Tape::backward`] walks the record in reverse and
//! accumulates gradients into every node that requires them. Model parameters
//! enter the tape through [`Tape::param`]; their gradients are collected with
//! [`Tape::take_param_grads`] and scattered back into the owning
//! [`ParamStore`] by the caller.
//!
//! Nodes are append-only and an op's output always has a larger index than
//! its parents, so the backward walk can split the node arrays and never
//! aliases a gradient buffer.

use super::matrix::{dot, RealMatrix};
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Which key positions each query may attend to.
///
/// Masked logits are treated as additive -inf: masked positions receive
/// exactly zero attention weight. A query row with no admissible key yields
/// a zero output row.
#[derive(Debug, Clone)]
pub struct AttnMask {
    pub causal: bool,
    /// Per-position key validity; `None` means every position is valid.
    pub valid: Option<Vec<bool>>,
}

impl AttnMask {
    pub fn bidirectional() -> Self {
        AttnMask {
            causal: false,
            valid: None,
        }
    }

    pub fn causal() -> Self {
        AttnMask {
            causal: true,
            valid: None,
        }
    }

    pub fn with_padding(mut self, valid: Vec<bool>) -> Self {
        self.valid = Some(valid);
        self
    }

    #[inline]
    fn allows(&self, query: usize, key: usize) -> bool {
        if self.causal && key > query {
            return false;
        }
        match &self.valid {
            Some(v) => v[key],
            None => true,
        }
    }
}

type BackFn = Box<
    dyn Fn(&RealMatrix, &[&RealMatrix], &RealMatrix, &[bool]) -> Vec<Option<RealMatrix>> + Send,
>;

struct OpRecord {
    out: usize,
    parents: Vec<usize>,
    back: BackFn,
}

#[derive(Default)]
pub struct Tape {
    values: Vec<RealMatrix>,
    requires: Vec<bool>,
    param_of: Vec<Option<ParamId>>,
    ops: Vec<OpRecord>,
    grads: Vec<Option<RealMatrix>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: RealMatrix, requires: bool, param: Option<ParamId>) -> Var {
        self.values.push(value);
        self.requires.push(requires);
        self.param_of.push(param);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    fn push_op(
        &mut self,
        value: RealMatrix,
        parents: Vec<usize>,
        back: BackFn,
    ) -> Var {
        let requires = parents.iter().any(|&p| self.requires[p]);
        let out = self.push(value, requires, None);
        if requires {
            self.ops.push(OpRecord {
                out: out.0,
                parents,
                back,
            });
        }
        out
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, m: RealMatrix) -> Var {
        self.push(m, false, None)
    }

    /// An input leaf whose gradient can be read back after `backward`.
    pub fn leaf(&mut self, m: RealMatrix) -> Var {
        self.push(m, true, None)
    }

    /// Lease a parameter onto the tape. Trainable parameters become gradient
    /// leaves; frozen ones enter as constants (their values still participate
    /// in backward products, but no gradient is ever produced for them).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        if p.trainable {
            self.push(p.value.clone(), true, Some(id))
        } else {
            self.push(p.value.clone(), false, None)
        }
    }

    pub fn value(&self, v: Var) -> &RealMatrix {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&RealMatrix> {
        self.grads[v.0].as_ref()
    }

    // ------------------------------------------------------------------
    // primitive ops
    // ------------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.values[a.0].shape(),
            self.values[b.0].shape(),
            "add shape mismatch"
        );
        let value = self.values[a.0].add(&self.values[b.0]);
        self.push_op(
            value,
            vec![a.0, b.0],
            Box::new(|d_out, _parents, _out, needs| {
                vec![
                    needs[0].then(|| d_out.clone()),
                    needs[1].then(|| d_out.clone()),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.values[a.0].scaled(c);
        self.push_op(
            value,
            vec![a.0],
            Box::new(move |d_out, _parents, _out, needs| {
                vec![needs[0].then(|| d_out.scaled(c))]
            }),
        )
    }

    /// x[L×n] + b[1×n] broadcast over rows.
    pub fn add_bias_row(&mut self, x: Var, b: Var) -> Var {
        let (rows, cols) = self.values[x.0].shape();
        assert_eq!(self.values[b.0].shape(), (1, cols), "bias shape mismatch");
        let mut value = self.values[x.0].clone();
        for r in 0..rows {
            let brow = self.values[b.0].row(0).to_vec();
            for (v, bv) in value.row_mut(r).iter_mut().zip(&brow) {
                *v += bv;
            }
        }
        self.push_op(
            value,
            vec![x.0, b.0],
            Box::new(move |d_out, _parents, _out, needs| {
                let dx = needs[0].then(|| d_out.clone());
                let db = needs[1].then(|| {
                    let mut db = RealMatrix::zeros(1, cols);
                    for r in 0..d_out.rows() {
                        for (acc, d) in db.row_mut(0).iter_mut().zip(d_out.row(r)) {
                            *acc += d;
                        }
                    }
                    db
                });
                vec![dx, db]
            }),
        )
    }

    /// C = A B.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.values[a.0].matmul(&self.values[b.0]);
        self.push_op(
            value,
            vec![a.0, b.0],
            Box::new(|d_out, parents, _out, needs| {
                let da = needs[0].then(|| d_out.matmul_nt(parents[1]));
                let db = needs[1].then(|| parents[0].matmul_tn(d_out));
                vec![da, db]
            }),
        )
    }

    /// C = A Bᵀ.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.values[a.0].matmul_nt(&self.values[b.0]);
        self.push_op(
            value,
            vec![a.0, b.0],
            Box::new(|d_out, parents, _out, needs| {
                let da = needs[0].then(|| d_out.matmul(parents[1]));
                let db = needs[1].then(|| d_out.matmul_tn(parents[0]));
                vec![da, db]
            }),
        )
    }

    /// Row-wise affine map y = xW + b with conformance checking.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.values[x.0].shape();
        let ws = self.values[w.0].shape();
        if xs.1 != ws.0 {
            return Err(Error::Dimension {
                op: "linear",
                lhs: format!("x {}x{}", xs.0, xs.1),
                rhs: format!("W {}x{}", ws.0, ws.1),
            });
        }
        let bs = self.values[b.0].shape();
        if bs != (1, ws.1) {
            return Err(Error::Dimension {
                op: "linear",
                lhs: format!("W {}x{}", ws.0, ws.1),
                rhs: format!("b {}x{}", bs.0, bs.1),
            });
        }
        let y = self.matmul(x, w);
        Ok(self.add_bias_row(y, b))
    }

    /// Frozen base weight plus trainable low-rank delta:
    /// y = x Wᵀ + (α/r) · x Aᵀ Bᵀ with A[r×din], B[dout×r].
    pub fn lora_linear(
        &mut self,
        x: Var,
        w: Var,
        a: Var,
        b: Var,
        scale: f64,
    ) -> Result<Var> {
        let (r, din) = self.values[a.0].shape();
        let (dout, rb) = self.values[b.0].shape();
        let ws = self.values[w.0].shape();
        if r != rb || ws != (dout, din) {
            return Err(Error::Dimension {
                op: "lora_linear",
                lhs: format!("W {}x{} A {}x{}", ws.0, ws.1, r, din),
                rhs: format!("B {}x{}", dout, rb),
            });
        }
        if r > din.min(dout) {
            return Err(Error::Config(format!(
                "lora rank {r} exceeds min(din={din}, dout={dout})"
            )));
        }
        let base = self.matmul_nt(x, w);
        let xa = self.matmul_nt(x, a);
        let xab = self.matmul_nt(xa, b);
        let delta = self.scale(xab, scale);
        Ok(self.add(base, delta))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = &self.values[x.0];
        let mut value = xv.clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        self.push_op(
            value,
            vec![x.0],
            Box::new(|d_out, _parents, out, needs| {
                if !needs[0] {
                    return vec![None];
                }
                let mut dx = RealMatrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let dy = d_out.row(r);
                    let s = dot(dy, y);
                    for (d, (yi, dyi)) in dx.row_mut(r).iter_mut().zip(y.iter().zip(dy)) {
                        *d = yi * (dyi - s);
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Per-row normalization followed by the affine gamma/beta map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        assert!(eps > 0.0, "layer_norm eps must be positive");
        let xv = &self.values[x.0];
        let (rows, cols) = xv.shape();
        assert_eq!(self.values[gamma.0].shape(), (1, cols));
        assert_eq!(self.values[beta.0].shape(), (1, cols));
        let mut xhat = RealMatrix::zeros(rows, cols);
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for (h, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
        }
        let g = self.values[gamma.0].row(0).to_vec();
        let be = self.values[beta.0].row(0).to_vec();
        let mut value = RealMatrix::zeros(rows, cols);
        for r in 0..rows {
            for (i, v) in value.row_mut(r).iter_mut().enumerate() {
                *v = g[i] * xhat.get(r, i) + be[i];
            }
        }
        self.push_op(
            value,
            vec![x.0, gamma.0, beta.0],
            Box::new(move |d_out, _parents, _out, needs| {
                let n = cols as f64;
                let dgamma = needs[1].then(|| {
                    let mut dg = RealMatrix::zeros(1, cols);
                    for r in 0..rows {
                        for (i, acc) in dg.row_mut(0).iter_mut().enumerate() {
                            *acc += d_out.get(r, i) * xhat.get(r, i);
                        }
                    }
                    dg
                });
                let dbeta = needs[2].then(|| {
                    let mut db = RealMatrix::zeros(1, cols);
                    for r in 0..rows {
                        for (i, acc) in db.row_mut(0).iter_mut().enumerate() {
                            *acc += d_out.get(r, i);
                        }
                    }
                    db
                });
                let dx = needs[0].then(|| {
                    let mut dx = RealMatrix::zeros(rows, cols);
                    for r in 0..rows {
                        let dxhat: Vec<f64> = (0..cols)
                            .map(|i| d_out.get(r, i) * g[i])
                            .collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / n;
                        let mean_dxhat_xhat = dxhat
                            .iter()
                            .enumerate()
                            .map(|(i, d)| d * xhat.get(r, i))
                            .sum::<f64>()
                            / n;
                        for (i, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = inv_std[r]
                                * (dxhat[i] - mean_dxhat - xhat.get(r, i) * mean_dxhat_xhat);
                        }
                    }
                    dx
                });
                vec![dx, dgamma, dbeta]
            }),
        )
    }

    /// GELU activation (tanh approximation), elementwise.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = {
            let xv = &self.values[x.0];
            let data = xv.data().iter().map(|&v| gelu_scalar(v)).collect();
            RealMatrix::from_vec(xv.rows(), xv.cols(), data)
        };
        self.push_op(
            value,
            vec![x.0],
            Box::new(|d_out, parents, _out, needs| {
                if !needs[0] {
                    return vec![None];
                }
                let x = parents[0];
                let data = x
                    .data()
                    .iter()
                    .zip(d_out.data())
                    .map(|(&v, &d)| d * gelu_grad_scalar(v))
                    .collect();
                vec![Some(RealMatrix::from_vec(x.rows(), x.cols(), data))]
            }),
        )
    }

    /// Scaled dot-product attention over pre-projected Q, K, V, per head.
    /// Output is the head-concatenated context, not yet passed through Wo.
    /// Q may have fewer rows than K/V (cross-attention); self-attention is
    /// the square case.
    pub fn attention_core(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &AttnMask) -> Var {
        let (len_q, width) = self.values[q.0].shape();
        let (len_k, kw) = self.values[k.0].shape();
        assert_eq!(kw, width, "key width mismatch");
        assert_eq!(self.values[v.0].shape(), (len_k, width));
        assert!(width % heads == 0, "width not divisible by heads");
        let d = width / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mask = mask.clone();

        let mut out = RealMatrix::zeros(len_q, width);
        // Per-head attention weights, saved for backward.
        let mut weights: Vec<RealMatrix> = Vec::with_capacity(heads);
        {
            let qv = &self.values[q.0];
            let kv = &self.values[k.0];
            let vv = &self.values[v.0];
            for h in 0..heads {
                let c0 = h * d;
                let mut a = RealMatrix::zeros(len_q, len_k);
                for i in 0..len_q {
                    let qi = &qv.row(i)[c0..c0 + d];
                    let row = a.row_mut(i);
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..len_k {
                        if mask.allows(i, j) {
                            let l = scale * dot(qi, &kv.row(j)[c0..c0 + d]);
                            row[j] = l;
                            if l > max {
                                max = l;
                            }
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        // No admissible key: zero attention row.
                        row.iter_mut().for_each(|w| *w = 0.0);
                        continue;
                    }
                    let mut sum = 0.0;
                    for j in 0..len_k {
                        if mask.allows(i, j) {
                            row[j] = (row[j] - max).exp();
                            sum += row[j];
                        } else {
                            row[j] = 0.0;
                        }
                    }
                    row.iter_mut().for_each(|w| *w /= sum);
                }
                for i in 0..len_q {
                    let arow = a.row(i);
                    let orow = &mut out.row_mut(i)[c0..c0 + d];
                    for (j, &w) in arow.iter().enumerate() {
                        if w != 0.0 {
                            let vrow = &vv.row(j)[c0..c0 + d];
                            for (o, &vx) in orow.iter_mut().zip(vrow) {
                                *o += w * vx;
                            }
                        }
                    }
                }
                weights.push(a);
            }
        }

        self.push_op(
            out,
            vec![q.0, k.0, v.0],
            Box::new(move |d_out, parents, _out, needs| {
                let (qv, kv, vv) = (parents[0], parents[1], parents[2]);
                let mut dq = needs[0].then(|| RealMatrix::zeros(len_q, width));
                let mut dk = needs[1].then(|| RealMatrix::zeros(len_k, width));
                let mut dv = needs[2].then(|| RealMatrix::zeros(len_k, width));
                for h in 0..heads {
                    let c0 = h * d;
                    let a = &weights[h];
                    // dV_h = A_hᵀ dY_h
                    if let Some(dv) = dv.as_mut() {
                        for i in 0..len_q {
                            let arow = a.row(i);
                            let dyrow = &d_out.row(i)[c0..c0 + d];
                            for (j, &w) in arow.iter().enumerate() {
                                if w != 0.0 {
                                    let dvrow = &mut dv.row_mut(j)[c0..c0 + d];
                                    for (o, &dy) in dvrow.iter_mut().zip(dyrow) {
                                        *o += w * dy;
                                    }
                                }
                            }
                        }
                    }
                    if dq.is_none() && dk.is_none() {
                        continue;
                    }
                    // dA_h = dY_h V_hᵀ, then masked softmax backward.
                    let mut ds = RealMatrix::zeros(len_q, len_k);
                    for i in 0..len_q {
                        let dyrow = &d_out.row(i)[c0..c0 + d];
                        let arow = a.row(i);
                        let dsrow = ds.row_mut(i);
                        let mut inner = 0.0;
                        for (j, s) in dsrow.iter_mut().enumerate() {
                            if arow[j] != 0.0 {
                                *s = dot(dyrow, &vv.row(j)[c0..c0 + d]);
                                inner += *s * arow[j];
                            }
                        }
                        for (s, &w) in dsrow.iter_mut().zip(arow) {
                            *s = w * (*s - inner);
                        }
                    }
                    // dQ_h = dS K_h·scale ; dK_h = dSᵀ Q_h·scale
                    if let Some(dq) = dq.as_mut() {
                        for i in 0..len_q {
                            let dsrow = ds.row(i);
                            let dqrow = &mut dq.row_mut(i)[c0..c0 + d];
                            for (j, &s) in dsrow.iter().enumerate() {
                                if s != 0.0 {
                                    let krow = &kv.row(j)[c0..c0 + d];
                                    for (o, &kx) in dqrow.iter_mut().zip(krow) {
                                        *o += scale * s * kx;
                                    }
                                }
                            }
                        }
                    }
                    if let Some(dk) = dk.as_mut() {
                        for i in 0..len_q {
                            let dsrow = ds.row(i);
                            let qrow = &qv.row(i)[c0..c0 + d];
                            for (j, &s) in dsrow.iter().enumerate() {
                                if s != 0.0 {
                                    let dkrow = &mut dk.row_mut(j)[c0..c0 + d];
                                    for (o, &qx) in dkrow.iter_mut().zip(qrow) {
                                        *o += scale * s * qx;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![dq, dk, dv]
            }),
        )
    }

    /// Join two matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (rows, ca) = self.values[a.0].shape();
        let (rb, cb) = self.values[b.0].shape();
        assert_eq!(rows, rb, "concat_cols row mismatch");
        let mut value = RealMatrix::zeros(rows, ca + cb);
        for r in 0..rows {
            value.row_mut(r)[..ca].copy_from_slice(self.values[a.0].row(r));
            value.row_mut(r)[ca..].copy_from_slice(self.values[b.0].row(r));
        }
        self.push_op(
            value,
            vec![a.0, b.0],
            Box::new(move |d_out, _parents, _out, needs| {
                let da = needs[0].then(|| {
                    let mut m = RealMatrix::zeros(rows, ca);
                    for r in 0..rows {
                        m.row_mut(r).copy_from_slice(&d_out.row(r)[..ca]);
                    }
                    m
                });
                let db = needs[1].then(|| {
                    let mut m = RealMatrix::zeros(rows, cb);
                    for r in 0..rows {
                        m.row_mut(r).copy_from_slice(&d_out.row(r)[ca..]);
                    }
                    m
                });
                vec![da, db]
            }),
        )
    }

    /// Full multi-head self-attention: project, attend, re-project.
    /// Weight matrices are in y = xW layout ([S×S]).
    pub fn multi_head_attention(
        &mut self,
        x: Var,
        wq: Var,
        wk: Var,
        wv: Var,
        wo: Var,
        heads: usize,
        mask: &AttnMask,
    ) -> Result<Var> {
        let width = self.values[x.0].cols();
        if width % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {width} not divisible by {heads} heads"
            )));
        }
        let q = self.matmul(x, wq);
        let k = self.matmul(x, wk);
        let v = self.matmul(x, wv);
        let ctx = self.attention_core(q, k, v, heads, mask);
        Ok(self.matmul(ctx, wo))
    }

    /// Stack sequences vertically. Empty parts are skipped.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&RealMatrix> = parts.iter().map(|v| &self.values[v.0]).collect();
        let value = RealMatrix::concat_rows(&refs).expect("concat width mismatch");
        let row_counts: Vec<usize> = refs.iter().map(|m| m.rows()).collect();
        let cols = value.cols();
        self.push_op(
            value,
            parts.iter().map(|v| v.0).collect(),
            Box::new(move |d_out, _parents, _out, needs| {
                let mut grads = Vec::with_capacity(row_counts.len());
                let mut start = 0;
                for (idx, &rc) in row_counts.iter().enumerate() {
                    if needs[idx] && rc > 0 {
                        grads.push(Some(d_out.slice_rows(start, start + rc)));
                    } else if needs[idx] {
                        grads.push(Some(RealMatrix::zeros(0, cols)));
                    } else {
                        grads.push(None);
                    }
                    start += rc;
                }
                grads
            }),
        )
    }

    /// Mean over the rows where `keep` is true, yielding a 1×S row.
    pub fn masked_mean_rows(&mut self, x: Var, keep: Vec<bool>) -> Var {
        let xv = &self.values[x.0];
        let (rows, cols) = xv.shape();
        assert_eq!(keep.len(), rows);
        let count = keep.iter().filter(|&&k| k).count();
        assert!(count > 0, "masked mean over zero rows");
        let mut value = RealMatrix::zeros(1, cols);
        for (r, &k) in keep.iter().enumerate() {
            if k {
                for (acc, v) in value.row_mut(0).iter_mut().zip(xv.row(r)) {
                    *acc += v;
                }
            }
        }
        value.scale_in_place(1.0 / count as f64);
        self.push_op(
            value,
            vec![x.0],
            Box::new(move |d_out, _parents, _out, needs| {
                if !needs[0] {
                    return vec![None];
                }
                let mut dx = RealMatrix::zeros(rows, cols);
                let inv = 1.0 / count as f64;
                for (r, &k) in keep.iter().enumerate() {
                    if k {
                        for (d, g) in dx.row_mut(r).iter_mut().zip(d_out.row(0)) {
                            *d = g * inv;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Negative log-likelihood of `label` under softmax(logits). Logits are a
    /// single row; the output is a 1×1 loss.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = &self.values[logits.0];
        if lv.rows() != 1 {
            return Err(Error::Input(format!(
                "cross_entropy expects a single logit row, got {}",
                lv.shape_str()
            )));
        }
        if label >= lv.cols() {
            return Err(Error::Input(format!(
                "label {label} out of range for {} classes",
                lv.cols()
            )));
        }
        let mut probs = lv.row(0).to_vec();
        softmax_in_place(&mut probs);
        let loss = -probs[label].max(f64::MIN_POSITIVE).ln();
        let value = RealMatrix::from_vec(1, 1, vec![loss]);
        Ok(self.push_op(
            value,
            vec![logits.0],
            Box::new(move |d_out, _parents, _out, needs| {
                if !needs[0] {
                    return vec![None];
                }
                let g = d_out.get(0, 0);
                let mut dl = probs.clone();
                dl[label] -= 1.0;
                dl.iter_mut().for_each(|v| *v *= g);
                vec![Some(RealMatrix::row_vector(&dl))]
            }),
        ))
    }

    // ------------------------------------------------------------------
    // backward
    // ------------------------------------------------------------------

    /// Propagate d(loss)/d(node) from a scalar loss node to every leaf that
    /// requires a gradient.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.values[loss.0].shape(),
            (1, 1),
            "backward expects a scalar loss"
        );
        self.grads[loss.0] = Some(RealMatrix::from_vec(1, 1, vec![1.0]));
        for oi in (0..self.ops.len()).rev() {
            let op = &self.ops[oi];
            let out = op.out;
            if self.grads[out].is_none() {
                continue;
            }
            let (ghead, gtail) = self.grads.split_at_mut(out);
            let d_out = gtail[0].as_ref().unwrap();
            let (vhead, vtail) = self.values.split_at(out);
            let out_value = &vtail[0];
            let parent_values: Vec<&RealMatrix> =
                op.parents.iter().map(|&p| &vhead[p]).collect();
            let needs: Vec<bool> = op.parents.iter().map(|&p| self.requires[p]).collect();
            let parent_grads = (op.back)(d_out, &parent_values, out_value, &needs);
            debug_assert_eq!(parent_grads.len(), op.parents.len());
            for (&p, g) in op.parents.iter().zip(parent_grads) {
                if let Some(g) = g {
                    if g.is_empty() {
                        continue;
                    }
                    match &mut ghead[p] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            }
        }
    }

    /// Gradients of every trainable parameter leaf touched by this tape,
    /// in lease order. A parameter leased twice appears twice.
    pub fn take_param_grads(&mut self) -> Vec<(ParamId, RealMatrix)> {
        let mut out = Vec::new();
        for i in 0..self.values.len() {
            if let Some(id) = self.param_of[i] {
                if let Some(g) = self.grads[i].take() {
                    out.push((id, g));
                }
            }
        }
        out
    }
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x.powi(3))).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x.powi(3));
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}
