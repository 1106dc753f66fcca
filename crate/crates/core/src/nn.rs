//! Parameterized layers: multi-head attention, feed-forward network,
//! residual + layer-norm sublayer, convolution.
//!
//! Layers only hold [`ParamId`]s; values live in a [`ParamStore`] and are
//! bound into a [`Graph`] on every forward pass.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Result, TensorError};

/// Default epsilon for layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
}

/// Result of [`AttentionParams::forward`].
pub struct AttentionOutput {
    /// `[B, nq, d]` (or `[nq, d]` for unbatched input).
    pub output: Var,
    /// Softmax weights `[B, heads, nq, nk]` (or `[heads, nq, nk]`).
    pub weights: Var,
}

impl AttentionParams {
    /// Projections `W_Q, W_K: [d, heads * d_k]`, `W_V: [d, heads * d_v]`,
    /// `W_O: [heads * d_v, d]`; no biases.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        heads: usize,
        d_k: usize,
        d_v: usize,
        rng: &mut R,
    ) -> Self {
        AttentionParams {
            w_q: store.add_uniform(format!("{prefix}.w_q"), &[d, heads * d_k], d, rng),
            w_k: store.add_uniform(format!("{prefix}.w_k"), &[d, heads * d_k], d, rng),
            w_v: store.add_uniform(format!("{prefix}.w_v"), &[d, heads * d_v], d, rng),
            w_o: store.add_uniform(format!("{prefix}.w_o"), &[heads * d_v, d], heads * d_v, rng),
            heads,
            d_k,
            d_v,
        }
    }

    /// `[B, n, heads * w] -> [B * heads, n, w]`
    fn split_heads<T: Real>(&self, g: &mut Graph<T>, x: Var, b: usize, n: usize, w: usize) -> Result<Var> {
        if self.heads == 1 {
            return g.reshape(x, &[b, n, w]);
        }
        let x = g.reshape(x, &[b, n, self.heads, w])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * self.heads, n, w])
    }

    /// Scaled dot-product attention per head, heads concatenated and
    /// projected by `W_O`. Accepts `[n, d]` or `[B, n, d]` inputs.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        queries: Var,
        keys: Var,
        values: Var,
    ) -> Result<AttentionOutput> {
        let unbatched = g.shape(queries).len() == 2;
        let lift = |g: &mut Graph<T>, v: Var| -> Result<Var> {
            if g.shape(v).len() == 2 {
                let s = g.shape(v).to_vec();
                g.reshape(v, &[1, s[0], s[1]])
            } else {
                Ok(v)
            }
        };
        let (q_in, k_in, v_in) = (lift(g, queries)?, lift(g, keys)?, lift(g, values)?);
        let sq = g.shape(q_in).to_vec();
        let sk = g.shape(k_in).to_vec();
        let sv = g.shape(v_in).to_vec();
        if sq.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(TensorError::Shape {
                op: "multi_head_attention",
                lhs: sq,
                rhs: sk,
            });
        }
        let d_model = store.get(self.w_q).shape()[0];
        if sq[2] != d_model {
            return Err(TensorError::Shape {
                op: "multi_head_attention",
                lhs: sq,
                rhs: vec![d_model, self.heads * self.d_k],
            });
        }
        let (b, nq, nk) = (sq[0], sq[1], sk[1]);
        let (wq, wk, wv, wo) = (
            g.param(store, self.w_q),
            g.param(store, self.w_k),
            g.param(store, self.w_v),
            g.param(store, self.w_o),
        );
        let q = g.matmul(q_in, wq)?;
        let k = g.matmul(k_in, wk)?;
        let v = g.matmul(v_in, wv)?;
        let q = self.split_heads(g, q, b, nq, self.d_k)?;
        let k = self.split_heads(g, k, b, nk, self.d_k)?;
        let v = self.split_heads(g, v, b, nk, self.d_v)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.mul_scalar(scores, T::one() / T::lit(self.d_k as f64).sqrt());
        let weights = g.softmax_rows(scores)?;
        let ctx = g.bmm(weights, v, false)?;
        let ctx = if self.heads == 1 {
            ctx
        } else {
            let c = g.reshape(ctx, &[b, self.heads, nq, self.d_v])?;
            g.permute(c, &[0, 2, 1, 3])?
        };
        let ctx = g.reshape(ctx, &[b, nq, self.heads * self.d_v])?;
        let out = g.matmul(ctx, wo)?;
        let (output, weights) = if unbatched {
            (
                g.reshape(out, &[nq, d_model])?,
                g.reshape(weights, &[self.heads, nq, nk])?,
            )
        } else {
            (out, g.reshape(weights, &[b, self.heads, nq, nk])?)
        };
        Ok(AttentionOutput { output, weights })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, prefix: &str, d: usize, d_ff: usize, rng: &mut R) -> Self {
        FfnParams {
            w1: store.add_uniform(format!("{prefix}.w1"), &[d, d_ff], d, rng),
            b1: store.add_uniform(format!("{prefix}.b1"), &[d_ff], d, rng),
            w2: store.add_uniform(format!("{prefix}.w2"), &[d_ff, d], d_ff, rng),
            b2: store.add_uniform(format!("{prefix}.b2"), &[d], d_ff, rng),
        }
    }

    /// `relu(x W1 + b1) W2 + b2`, row-wise.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w1 = g.param(store, self.w1);
        let b1 = g.param(store, self.b1);
        let w2 = g.param(store, self.w2);
        let b2 = g.param(store, self.b2);
        let h = g.matmul(x, w1)?;
        let h = g.add_broadcast(h, b1)?;
        let h = g.relu(h);
        let o = g.matmul(h, w2)?;
        g.add_broadcast(o, b2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Self {
        LayerNormParams {
            gamma: store.add_const(format!("{prefix}.gamma"), &[d], 1.0),
            beta: store.add_const(format!("{prefix}.beta"), &[d], 0.0),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, T::lit(LAYER_NORM_EPS))
    }
}

/// Residual connection followed by layer normalization:
/// `layer_norm(x + sublayer_output)`.
pub fn transformer_sublayer<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    norm: &LayerNormParams,
    x: Var,
    sublayer_output: Var,
) -> Result<Var> {
    let s = g.add(x, sublayer_output)?;
    norm.forward(g, store, s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dParams {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        kernel: usize,
        in_c: usize,
        out_c: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * kernel * in_c;
        Conv2dParams {
            kernel: store.add_uniform(format!("{prefix}.kernel"), &[kernel, kernel, in_c, out_c], fan_in, rng),
            bias: store.add_uniform(format!("{prefix}.bias"), &[out_c], fan_in, rng),
            stride,
            pad: kernel / 2,
        }
    }

    /// `x: [B, H, W, Cin]` or `[H, W, Cin]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let k = g.param(store, self.kernel);
        let b = g.param(store, self.bias);
        if g.shape(x).len() == 3 {
            let s = g.shape(x).to_vec();
            let x4 = g.reshape(x, &[1, s[0], s[1], s[2]])?;
            let y = g.conv2d(x4, k, Some(b), self.stride, self.pad)?;
            let sy = g.shape(y).to_vec();
            g.reshape(y, &sy[1..])
        } else {
            g.conv2d(x, k, Some(b), self.stride, self.pad)
        }
    }
}
