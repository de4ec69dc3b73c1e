//! Cross-attention heads and the two-guide multi-head block built from them.

use crate::error::Result;
use crate::model::params::{HeadWeights, McaWeights};
use crate::numerics::{Tape, Tensor, Var};

/// Single attention head applied to one key/value stream.
#[derive(Debug, Clone)]
pub struct AttentionHead {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

/// Output of one head together with its attention matrix.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub out: Var,
    pub weights: Var,
}

/// `softmax((q·W_q)(kv·W_k)ᵀ / √d_head) · (kv·W_v)` with masked key
/// positions excluded from the softmax.
pub fn cross_attention_on(
    tape: &mut Tape,
    query: Var,
    kv: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    kv_mask: Option<&[bool]>,
) -> Result<HeadOutput> {
    let q = tape.matmul(query, w_q)?;
    let k = tape.matmul(kv, w_k)?;
    let v = tape.matmul(kv, w_v)?;
    let d_head = tape.value(w_q).cols() as f64;
    let logits = tape.matmul_nt(q, k)?;
    let logits = tape.scale(logits, 1.0 / d_head.sqrt());
    let weights = tape.softmax_rows(logits, kv_mask)?;
    let out = tape.matmul(weights, v)?;
    Ok(HeadOutput { out, weights })
}

/// Key/value masks of the two guide streams.
#[derive(Debug, Clone, Copy, Default)]
pub struct GuideMasks<'a> {
    pub a: Option<&'a [bool]>,
    pub b: Option<&'a [bool]>,
}

/// Intermediates of a guiding block.
#[derive(Debug, Clone)]
pub struct McaOutput {
    pub out: Var,
    /// Sum of the two concatenated head outputs, before LayerNorm.
    pub pre_norm: Var,
    /// Head outputs towards guide A, concatenated.
    pub stream_a: Var,
    /// Head outputs towards guide B, concatenated.
    pub stream_b: Var,
    pub weights_a: Vec<Var>,
    pub weights_b: Vec<Var>,
}

/// `LayerNorm(concat_h(q→a) + concat_h(q→b))`: `query` attends to both
/// guides in every head, heads are concatenated per guide, the two guide
/// streams are summed and normalised.
pub fn mca_on(
    tape: &mut Tape,
    guide_a: Var,
    query: Var,
    guide_b: Var,
    w: &McaWeights<Var>,
    masks: GuideMasks<'_>,
    eps: f64,
) -> Result<McaOutput> {
    let mut heads_a = Vec::with_capacity(w.heads.len());
    let mut heads_b = Vec::with_capacity(w.heads.len());
    let mut weights_a = Vec::with_capacity(w.heads.len());
    let mut weights_b = Vec::with_capacity(w.heads.len());
    for h in &w.heads {
        let a = cross_attention_on(tape, query, guide_a, h.w_q, h.w_k_a, h.w_v_a, masks.a)?;
        let b = cross_attention_on(tape, query, guide_b, h.w_q, h.w_k_b, h.w_v_b, masks.b)?;
        heads_a.push(a.out);
        heads_b.push(b.out);
        weights_a.push(a.weights);
        weights_b.push(b.weights);
    }
    let stream_a = tape.concat_cols(&heads_a)?;
    let stream_b = tape.concat_cols(&heads_b)?;
    let pre_norm = tape.add(stream_a, stream_b)?;
    let out = tape.layer_norm(pre_norm, w.gamma, w.beta, eps)?;
    Ok(McaOutput {
        out,
        pre_norm,
        stream_a,
        stream_b,
        weights_a,
        weights_b,
    })
}

/// Plain-tensor single head; see [`cross_attention_on`].
pub fn cross_attention(
    query: &Tensor,
    kv: &Tensor,
    head: &AttentionHead,
    kv_mask: Option<&[bool]>,
) -> Result<Tensor> {
    cross_attention_with_weights(query, kv, head, kv_mask).map(|(o, _)| o)
}

/// Like [`cross_attention`] but also returns the attention matrix.
pub fn cross_attention_with_weights(
    query: &Tensor,
    kv: &Tensor,
    head: &AttentionHead,
    kv_mask: Option<&[bool]>,
) -> Result<(Tensor, Tensor)> {
    let mut t = Tape::new();
    let q = t.constant(query.clone());
    let kv = t.constant(kv.clone());
    let wq = t.constant(head.w_q.clone());
    let wk = t.constant(head.w_k.clone());
    let wv = t.constant(head.w_v.clone());
    let h = cross_attention_on(&mut t, q, kv, wq, wk, wv, kv_mask)?;
    Ok((t.value(h.out).clone(), t.value(h.weights).clone()))
}

/// Plain-tensor guiding block weights.
#[derive(Debug, Clone)]
pub struct McaParams {
    pub weights: McaWeights<Tensor>,
    pub eps: f64,
}

/// Values of every [`McaOutput`] intermediate.
#[derive(Debug, Clone)]
pub struct McaTrace {
    pub out: Tensor,
    pub pre_norm: Tensor,
    pub stream_a: Tensor,
    pub stream_b: Tensor,
    pub weights_a: Vec<Tensor>,
    pub weights_b: Vec<Tensor>,
}

pub fn mca(
    guide_a: &Tensor,
    query: &Tensor,
    guide_b: &Tensor,
    params: &McaParams,
    masks: GuideMasks<'_>,
) -> Result<Tensor> {
    mca_trace(guide_a, query, guide_b, params, masks).map(|t| t.out)
}

pub fn mca_trace(
    guide_a: &Tensor,
    query: &Tensor,
    guide_b: &Tensor,
    params: &McaParams,
    masks: GuideMasks<'_>,
) -> Result<McaTrace> {
    let mut t = Tape::new();
    let a = t.constant(guide_a.clone());
    let q = t.constant(query.clone());
    let b = t.constant(guide_b.clone());
    let w = params.weights.map(|x| t.constant(x.clone()));
    let o = mca_on(&mut t, a, q, b, &w, masks, params.eps)?;
    Ok(McaTrace {
        out: t.value(o.out).clone(),
        pre_norm: t.value(o.pre_norm).clone(),
        stream_a: t.value(o.stream_a).clone(),
        stream_b: t.value(o.stream_b).clone(),
        weights_a: o.weights_a.iter().map(|v| t.value(*v).clone()).collect(),
        weights_b: o.weights_b.iter().map(|v| t.value(*v).clone()).collect(),
    })
}

impl<T: Clone> McaWeights<T> {
    /// The head `h` as seen from guide A.
    pub fn head_a(&self, h: usize) -> (T, T, T) {
        let w: &HeadWeights<T> = &self.heads[h];
        (w.w_q.clone(), w.w_k_a.clone(), w.w_v_a.clone())
    }
}

impl McaWeights<Tensor> {
    pub fn attention_head_a(&self, h: usize) -> AttentionHead {
        let (w_q, w_k, w_v) = self.head_a(h);
        AttentionHead { w_q, w_k, w_v }
    }

    pub fn attention_head_b(&self, h: usize) -> AttentionHead {
        let w = &self.heads[h];
        AttentionHead {
            w_q: w.w_q.clone(),
            w_k: w.w_k_b.clone(),
            w_v: w.w_v_b.clone(),
        }
    }
}
