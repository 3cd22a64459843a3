//! Score-attenuated pre-LN transformer blocks.
//!
//! Cumulative log-scores enter attention twice: added (unscaled) to every
//! logit column so a stream with score p receives exactly p times the
//! attention weight, and multiplied into the value rows. Both sublayer
//! outputs are scaled by the scores before the residual add, so a zero-score
//! stream neither influences others nor updates itself. With all scores at 1
//! the block is exactly a standard pre-LN GPT block.

use crate::error::Result;
use crate::matrix::Matrix;
use crate::tape::{Node, Tape};

/// Boolean attention mask over the assembled left-to-right stream order.
/// Forks sit left of their parents, so causal masking in assembled order
/// lets parents see children while children never see their parent.
pub struct AttentionMask {
    pub n: usize,
    /// Row-major n x n; entry (i, j) says whether query i may attend key j.
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    /// Query i attends keys j <= i; the diagonal is always allowed.
    pub fn causal(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                allowed[i * n + j] = true;
            }
        }
        AttentionMask { n, allowed }
    }

    /// Additive logit mask: 0 where allowed, -inf elsewhere.
    pub fn additive(&self, tape: &Tape) -> Node {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        tape.leaf(Matrix::from_vec(self.n, self.n, data))
    }
}

/// Layernorm gain/bias pair (each 1 x d).
pub struct LnNodes {
    pub gain: Node,
    pub bias: Node,
}

/// Bound parameters of one transformer block.
pub struct BlockNodes {
    pub ln1: LnNodes,
    pub wq: Node,
    pub bq: Node,
    pub wk: Node,
    pub bk: Node,
    pub wv: Node,
    pub bv: Node,
    pub wo: Node,
    pub bo: Node,
    pub ln2: LnNodes,
    pub w_up: Node,
    pub b_up: Node,
    pub w_down: Node,
    pub b_down: Node,
}

/// Everything the attention pass needs besides q/k/v.
pub struct AttnContext<'a> {
    /// Cumulative log-scores, n x 1. None disables attenuation entirely
    /// (plain baseline path).
    pub log_p: Option<&'a Node>,
    /// Rotary position per row (fractional for forked sets).
    pub positions: &'a [f64],
    pub theta_base: f64,
    pub n_heads: usize,
}

/// Single-head attenuated attention core over already-split q/k/v.
///
/// logits = q k^T / sqrt(d_head) + mask, plus the log-score column broadcast
/// added unscaled; values are scaled by p_cum row-wise before aggregation.
pub fn attn_head(
    q: &Node,
    k: &Node,
    v: &Node,
    log_p: Option<&Node>,
    p: Option<&Node>,
    mask: &Node,
    probe: Option<&mut Vec<Matrix>>,
) -> Result<Node> {
    let (_, dh) = q.shape();
    let mut logits = q.matmul(&k.t())?.scale(1.0 / (dh as f64).sqrt()).add(mask);
    if let Some(lp) = log_p {
        logits = logits.add_row(&lp.t());
    }
    let weights = logits.softmax_rows()?;
    if let Some(out) = probe {
        out.push(weights.value());
    }
    let values = match p {
        Some(p) => v.scale_rows_by(p),
        None => v.clone(),
    };
    weights.matmul(&values)
}

/// Multi-head attenuated attention: project, rotate, attend per head, concat,
/// output-project.
pub fn attenuated_attention(
    x: &Node,
    params: &BlockNodes,
    ctx: &AttnContext,
    mask: &Node,
    mut probe: Option<&mut Vec<Matrix>>,
) -> Result<Node> {
    let tape = x.tape().clone();
    let (_, d) = x.shape();
    assert_eq!(d % ctx.n_heads, 0, "d_model must divide into heads");
    let dh = d / ctx.n_heads;
    let q = x.matmul(&params.wq)?.add_row(&params.bq);
    let k = x.matmul(&params.wk)?.add_row(&params.bk);
    let v = x.matmul(&params.wv)?.add_row(&params.bv);
    let p = ctx.log_p.map(|lp| lp.exp());
    let mut heads = Vec::with_capacity(ctx.n_heads);
    for h in 0..ctx.n_heads {
        let qh = q
            .slice_cols(h * dh, dh)
            .rotate_pairs(ctx.positions, ctx.theta_base);
        let kh = k
            .slice_cols(h * dh, dh)
            .rotate_pairs(ctx.positions, ctx.theta_base);
        let vh = v.slice_cols(h * dh, dh);
        heads.push(attn_head(
            &qh,
            &kh,
            &vh,
            ctx.log_p,
            p.as_ref(),
            mask,
            probe.as_deref_mut(),
        )?);
    }
    let cat = tape.concat_cols(&heads);
    Ok(cat.matmul(&params.wo)?.add_row(&params.bo))
}

/// One pre-LN block with score-attenuated residual writes:
/// x' = Attn(LN(x)) * p + x, then x'' = MLP(LN(x')) * p + x'.
pub fn block_forward(
    x: &Node,
    params: &BlockNodes,
    ctx: &AttnContext,
    mask: &Node,
    probe: Option<&mut Vec<Matrix>>,
) -> Result<Node> {
    let p = ctx.log_p.map(|lp| lp.exp());
    let xn = x.layernorm(&params.ln1.gain, &params.ln1.bias);
    let attn = attenuated_attention(&xn, params, ctx, mask, probe)?;
    let write1 = match &p {
        Some(p) => attn.scale_rows_by(p),
        None => attn,
    };
    let x1 = write1.add(x);
    let xn2 = x1.layernorm(&params.ln2.gain, &params.ln2.bias);
    let hidden = xn2.matmul(&params.w_up)?.add_row(&params.b_up).gelu();
    let mlp = hidden.matmul(&params.w_down)?.add_row(&params.b_down);
    let write2 = match &p {
        Some(p) => mlp.scale_rows_by(p),
        None => mlp,
    };
    Ok(write2.add(&x1))
}
