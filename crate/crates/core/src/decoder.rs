//! Coverage-attention decoder: two stacked unidirectional GRUs around an
//! attention read, followed by a maxout output layer.
//!
//! One step, given the previous token `y` and state `s`:
//!
//! ```text
//! ŝ  = GRU₁(E[y], s)
//! F  = Q * Σ_{past} α                       (coverage conv, no bias)
//! e_i = νᵀ tanh(W_att ŝ + U_att a_i + U_f f_i)
//! α  = softmax(e) over valid frames          c = Σ α_i a_i
//! s' = GRU₂(c, ŝ)
//! p  = softmax(W_o maxout(E[y] + W_s s' + W_c c))
//! ```

use rand::Rng;

use crate::encoder::{Annotations, GruParams};
use crate::numcore::{Graph, NodeId, ParamId, ParamStore, ShapeError, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    /// `[n, n']`
    pub w_att: ParamId,
    /// `[D, n']`
    pub u_att: ParamId,
    /// `[F, n']`
    pub u_f: ParamId,
    /// `[n', 1]`
    pub nu: ParamId,
    /// Coverage kernel `[F, k]`.
    pub q: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderParams {
    /// Shared token embedding `[K, m]`, used for the GRU input and the
    /// output layer.
    pub embed: ParamId,
    pub gru_pred: GruParams,
    pub gru_ctx: GruParams,
    pub w_init: ParamId,
    pub b_init: ParamId,
    pub attention: AttentionParams,
    pub w_s: ParamId,
    pub b_s: ParamId,
    pub w_c: ParamId,
    pub b_c: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub vocab: usize,
    pub embed_dim: usize,
    pub state_dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderDims {
    pub vocab: usize,
    pub annotation: usize,
    pub embed: usize,
    pub state: usize,
    pub attention: usize,
    pub filters: usize,
    pub kernel: usize,
}

impl DecoderParams {
    /// Embedding and GRU weights are uniform in `±scale`; the attention,
    /// initial-state and output projections use Glorot-uniform limits.
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        d: DecoderDims,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        assert!(
            d.embed.is_multiple_of(2),
            "maxout needs an even embedding width"
        );
        assert!(d.kernel % 2 == 1, "coverage kernel width must be odd");
        let embed = store.add_uniform("dec.embed", &[d.vocab, d.embed], scale, rng);
        let gru_pred = GruParams::register(store, "dec.gru_pred", d.embed, d.state, scale, rng);
        let gru_ctx = GruParams::register(store, "dec.gru_ctx", d.annotation, d.state, scale, rng);
        let w_init = store.add_glorot("dec.w_init", &[d.annotation, d.state], rng);
        let b_init = store.add_zeros("dec.b_init", &[d.state]);
        let attention = AttentionParams {
            w_att: store.add_glorot("att.w", &[d.state, d.attention], rng),
            u_att: store.add_glorot("att.u", &[d.annotation, d.attention], rng),
            u_f: store.add_glorot("att.u_f", &[d.filters, d.attention], rng),
            nu: store.add_glorot("att.nu", &[d.attention, 1], rng),
            q: store.add_glorot("att.q", &[d.filters, d.kernel], rng),
        };
        DecoderParams {
            embed,
            gru_pred,
            gru_ctx,
            w_init,
            b_init,
            attention,
            w_s: store.add_glorot("out.w_s", &[d.state, d.embed], rng),
            b_s: store.add_zeros("out.b_s", &[d.embed]),
            w_c: store.add_glorot("out.w_c", &[d.annotation, d.embed], rng),
            b_c: store.add_zeros("out.b_c", &[d.embed]),
            w_o: store.add_glorot("out.w_o", &[d.embed / 2, d.vocab], rng),
            b_o: store.add_zeros("out.b_o", &[d.vocab]),
            vocab: d.vocab,
            embed_dim: d.embed,
            state_dim: d.state,
        }
    }
}

/// Per-sequence tensors the attention reads at every step.
#[derive(Debug, Clone)]
pub struct AttentionContext {
    /// `[B * L, D]`
    pub annotations: NodeId,
    /// `U_att a_i` for every frame, `[B * L, n']`.
    pub projected: NodeId,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub frames: usize,
    pub lengths: Vec<usize>,
}

impl AttentionContext {
    pub fn new<T: Scalar>(
        g: &mut Graph<T>,
        p: &DecoderParams,
        ann: &Annotations,
    ) -> Result<Self, ShapeError> {
        let u = g.param(p.attention.u_att);
        let projected = g.matmul(ann.values, u)?;
        Ok(AttentionContext {
            annotations: ann.values,
            projected,
            mask: ann.mask(),
            batch: ann.batch,
            frames: ann.frames,
            lengths: ann.lengths.clone(),
        })
    }

    /// Coverage before the first step: all zeros.
    pub fn empty_coverage<T: Scalar>(&self, g: &mut Graph<T>) -> NodeId {
        g.input(Tensor::zeros(&[self.batch, self.frames]))
    }
}

/// `s₀ = tanh(W_init · mean of valid annotations + b_init)`.
pub fn init_state<T: Scalar>(
    g: &mut Graph<T>,
    p: &DecoderParams,
    ctx: &AttentionContext,
) -> Result<NodeId, ShapeError> {
    if ctx.lengths.contains(&0) {
        return Err(ShapeError::invalid(
            "init_state",
            "empty annotation sequence",
        ));
    }
    let mut w = vec![T::zero(); ctx.batch * ctx.frames];
    for (b, &len) in ctx.lengths.iter().enumerate() {
        let share = T::one() / T::of(len as f64);
        w[b * ctx.frames..b * ctx.frames + len].fill(share);
    }
    let weights = g.input(Tensor::matrix(ctx.batch, ctx.frames, w)?);
    let mean = g.weighted_sum(weights, ctx.annotations)?;
    let (wi, bi) = (g.param(p.w_init), g.param(p.b_init));
    let pre = g.affine(mean, wi, bi)?;
    Ok(g.tanh(pre))
}

/// Attention probabilities `[B, L]` and context vectors `[B, D]` for one
/// step. Padded frames receive exactly zero weight.
pub fn attend<T: Scalar>(
    g: &mut Graph<T>,
    p: &AttentionParams,
    ctx: &AttentionContext,
    s_hat: NodeId,
    coverage: NodeId,
) -> Result<(NodeId, NodeId), ShapeError> {
    if ctx.mask.iter().all(|&m| !m) {
        return Err(ShapeError::invalid("attend", "all positions masked"));
    }
    let w = g.param(p.w_att);
    let ws = g.matmul(s_hat, w)?;
    let ws = g.repeat_rows(ws, ctx.frames);
    let q = g.param(p.q);
    let feats = g.conv1d(coverage, q)?;
    let uf = g.param(p.u_f);
    let cov = g.matmul(feats, uf)?;
    let sum = g.add(ctx.projected, ws)?;
    let sum = g.add(sum, cov)?;
    let act = g.tanh(sum);
    let nu = g.param(p.nu);
    let energy = g.matmul(act, nu)?;
    let energy = g.reshape(energy, &[ctx.batch, ctx.frames])?;
    let alpha = g.softmax(energy, Some(&ctx.mask))?;
    let context = g.weighted_sum(alpha, ctx.annotations)?;
    Ok((alpha, context))
}

/// Graph nodes produced by one decoder step.
#[derive(Debug, Clone, Copy)]
pub struct StepNodes {
    pub s_hat: NodeId,
    pub state: NodeId,
    pub alpha: NodeId,
    pub context: NodeId,
    /// Pre-softmax output scores `[B, K]`.
    pub logits: NodeId,
    /// Coverage to feed the next step (`coverage + alpha`).
    pub coverage: NodeId,
}

pub fn decode_step<T: Scalar>(
    g: &mut Graph<T>,
    p: &DecoderParams,
    ctx: &AttentionContext,
    prev_tokens: &[usize],
    state: NodeId,
    coverage: NodeId,
) -> Result<StepNodes, ShapeError> {
    if prev_tokens.len() != ctx.batch {
        return Err(ShapeError::mismatch(
            "decode_step",
            &[prev_tokens.len()],
            &[ctx.batch],
        ));
    }
    let table = g.param(p.embed);
    let emb = g.embed(table, prev_tokens)?;
    let s_hat = p.gru_pred.step(g, emb, state)?;
    let (alpha, context) = attend(g, &p.attention, ctx, s_hat, coverage)?;
    let new_state = p.gru_ctx.step(g, context, s_hat)?;

    let (ws, bs) = (g.param(p.w_s), g.param(p.b_s));
    let from_state = g.affine(new_state, ws, bs)?;
    let (wc, bc) = (g.param(p.w_c), g.param(p.b_c));
    let from_ctx = g.affine(context, wc, bc)?;
    let pre = g.add(emb, from_state)?;
    let pre = g.add(pre, from_ctx)?;
    let hidden = g.maxout(pre)?;
    let (wo, bo) = (g.param(p.w_o), g.param(p.b_o));
    let logits = g.affine(hidden, wo, bo)?;
    let coverage = g.add(coverage, alpha)?;
    Ok(StepNodes {
        s_hat,
        state: new_state,
        alpha,
        context,
        logits,
        coverage,
    })
}
