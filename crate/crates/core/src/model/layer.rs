//! One pre-norm decoder layer: `x + Attn(LN(x))` followed by
//! `x + MLP(LN(x))`, with a hand-written backward pass.

use super::ops::{
    add_assign, add_row_bias, col_sum_acc, gelu, gelu_grad, layer_norm, layer_norm_backward,
    matmul, matmul_at_acc, matmul_bt, LayerNormCache,
};
use super::params::LayerParams;

/// Which key positions a query may attend to.
#[derive(Debug, Clone, Copy)]
pub enum AttnMask<'a> {
    Causal,
    /// Causal and restricted to the query's own document segment.
    Segmented(&'a [u32]),
}

impl AttnMask<'_> {
    #[inline]
    fn allowed(&self, query: usize, key: usize) -> bool {
        key <= query
            && match self {
                AttnMask::Causal => true,
                AttnMask::Segmented(seg) => seg[query] == seg[key],
            }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerShape {
    pub seq: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_dim: usize,
}

impl LayerShape {
    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Activations saved by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct LayerCache {
    ln1: LayerNormCache,
    h1: Vec<f64>,
    q: Vec<f64>,
    pub(crate) k: Vec<f64>,
    pub(crate) v: Vec<f64>,
    /// True when `k`/`v` were borrowed from an earlier call of the same layer.
    pub(crate) kv_shared: bool,
    /// `[head][query][key]`.
    probs: Vec<f64>,
    attn: Vec<f64>,
    ln2: LayerNormCache,
    h2: Vec<f64>,
    pre_act: Vec<f64>,
    act: Vec<f64>,
}

pub fn forward(
    p: &LayerParams,
    x: &[f64],
    shape: LayerShape,
    mask: AttnMask<'_>,
    shared_kv: Option<(&[f64], &[f64])>,
) -> (Vec<f64>, LayerCache) {
    let LayerShape {
        seq: t,
        d_model: d,
        n_heads,
        mlp_dim: m,
    } = shape;
    let dh = shape.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let (h1, ln1) = layer_norm(x, &p.ln1_gain, &p.ln1_bias);
    let q = matmul(&h1, &p.wq, t, d, d);
    let (k, v, kv_shared) = match shared_kv {
        Some((k, v)) => (k.to_vec(), v.to_vec(), true),
        None => (matmul(&h1, &p.wk, t, d, d), matmul(&h1, &p.wv, t, d, d), false),
    };

    let mut probs = vec![0.0; n_heads * t * t];
    let mut attn = vec![0.0; t * d];
    for h in 0..n_heads {
        let off = h * dh;
        for i in 0..t {
            let row = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
            let qi = &q[i * d + off..i * d + off + dh];
            let mut max = f64::NEG_INFINITY;
            for j in 0..t {
                if mask.allowed(i, j) {
                    let kj = &k[j * d + off..j * d + off + dh];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    row[j] = s;
                    max = max.max(s);
                }
            }
            let mut total = 0.0;
            for j in 0..t {
                if mask.allowed(i, j) {
                    row[j] = (row[j] - max).exp();
                    total += row[j];
                } else {
                    row[j] = 0.0;
                }
            }
            let out = &mut attn[i * d + off..i * d + off + dh];
            for j in 0..t {
                if row[j] != 0.0 {
                    row[j] /= total;
                    let vj = &v[j * d + off..j * d + off + dh];
                    for (o, vv) in out.iter_mut().zip(vj) {
                        *o += row[j] * vv;
                    }
                }
            }
        }
    }

    let mut x1 = matmul(&attn, &p.wo, t, d, d);
    add_assign(&mut x1, x);

    let (h2, ln2) = layer_norm(&x1, &p.ln2_gain, &p.ln2_bias);
    let mut pre_act = matmul(&h2, &p.w1, t, d, m);
    add_row_bias(&mut pre_act, &p.b1);
    let act: Vec<f64> = pre_act.iter().map(|&u| gelu(u)).collect();
    let mut out = matmul(&act, &p.w2, t, m, d);
    add_row_bias(&mut out, &p.b2);
    add_assign(&mut out, &x1);

    let cache = LayerCache {
        ln1,
        h1,
        q,
        k,
        v,
        kv_shared,
        probs,
        attn,
        ln2,
        h2,
        pre_act,
        act,
    };
    (out, cache)
}

/// Gradient of a shared key/value pair, routed back to the call that
/// produced it.
pub type KvGrad = (Vec<f64>, Vec<f64>);

/// Back-propagates `dout` through one layer, accumulating parameter
/// gradients into `g`. `extra_kv` carries key/value gradients from later
/// calls that reused this call's keys and values. When this call itself
/// borrowed its keys and values, their gradient is returned instead of
/// being propagated.
pub fn backward(
    p: &LayerParams,
    c: &LayerCache,
    dout: &[f64],
    shape: LayerShape,
    g: &mut LayerParams,
    extra_kv: Option<KvGrad>,
) -> (Vec<f64>, Option<KvGrad>) {
    let LayerShape {
        seq: t,
        d_model: d,
        n_heads,
        mlp_dim: m,
    } = shape;
    let dh = shape.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    // MLP branch.
    col_sum_acc(dout, &mut g.b2);
    matmul_at_acc(&c.act, dout, t, m, d, &mut g.w2);
    let mut dpre = matmul_bt(dout, &p.w2, t, d, m);
    for (dv, &u) in dpre.iter_mut().zip(&c.pre_act) {
        *dv *= gelu_grad(u);
    }
    col_sum_acc(&dpre, &mut g.b1);
    matmul_at_acc(&c.h2, &dpre, t, d, m, &mut g.w1);
    let dh2 = matmul_bt(&dpre, &p.w1, t, m, d);
    let mut dx1 = layer_norm_backward(&dh2, &c.ln2, &p.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);
    add_assign(&mut dx1, dout);

    // Attention branch.
    matmul_at_acc(&c.attn, &dx1, t, d, d, &mut g.wo);
    let dattn = matmul_bt(&dx1, &p.wo, t, d, d);
    let mut dq = vec![0.0; t * d];
    let mut dk = vec![0.0; t * d];
    let mut dv = vec![0.0; t * d];
    let mut dp = vec![0.0; t];
    for h in 0..n_heads {
        let off = h * dh;
        for i in 0..t {
            let row = &c.probs[(h * t + i) * t..(h * t + i + 1) * t];
            let doi = &dattn[i * d + off..i * d + off + dh];
            let mut dot = 0.0;
            for j in 0..t {
                if row[j] != 0.0 {
                    let vj = &c.v[j * d + off..j * d + off + dh];
                    dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dot += row[j] * dp[j];
                    let dvj = &mut dv[j * d + off..j * d + off + dh];
                    for (o, &x) in dvj.iter_mut().zip(doi) {
                        *o += row[j] * x;
                    }
                }
            }
            for j in 0..t {
                if row[j] != 0.0 {
                    let ds = row[j] * (dp[j] - dot) * scale;
                    for cc in 0..dh {
                        dq[i * d + off + cc] += ds * c.k[j * d + off + cc];
                        dk[j * d + off + cc] += ds * c.q[i * d + off + cc];
                    }
                }
            }
        }
    }

    matmul_at_acc(&c.h1, &dq, t, d, d, &mut g.wq);
    let mut dh1 = matmul_bt(&dq, &p.wq, t, d, d);
    let routed = if c.kv_shared {
        Some((dk, dv))
    } else {
        if let Some((ek, ev)) = extra_kv {
            add_assign(&mut dk, &ek);
            add_assign(&mut dv, &ev);
        }
        matmul_at_acc(&c.h1, &dk, t, d, d, &mut g.wk);
        matmul_at_acc(&c.h1, &dv, t, d, d, &mut g.wv);
        add_assign(&mut dh1, &matmul_bt(&dk, &p.wk, t, d, d));
        add_assign(&mut dh1, &matmul_bt(&dv, &p.wv, t, d, d));
        None
    };
    let mut dx = layer_norm_backward(&dh1, &c.ln1, &p.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
    add_assign(&mut dx, &dx1);
    (dx, routed)
}
