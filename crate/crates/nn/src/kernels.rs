//! Forward/backward kernels for the fused graph operations.

use crate::tensor::Tensor;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn layer_norm_forward(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (rows, cols) = (x.rows(), x.cols());
    assert!(cols > 0, "layer norm over an empty axis");
    assert_eq!(gain.len(), cols, "layer norm gain width");
    assert_eq!(bias.len(), cols, "layer norm bias width");
    let n = cols as f64;
    let mut y = vec![0.0; rows * cols];
    let mut xhat = vec![0.0; rows * cols];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = x.row_slice(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[r] = inv;
        for c in 0..cols {
            let h = (row[c] - mean) * inv;
            xhat[r * cols + c] = h;
            y[r * cols + c] = gain.data()[c] * h + bias.data()[c];
        }
    }
    (Tensor::matrix(rows, cols, y), xhat, inv_std)
}

pub(crate) fn layer_norm_backward(
    dy: &Tensor,
    gain: &Tensor,
    xhat: &[f64],
    inv_std: &[f64],
) -> (Tensor, Tensor, Tensor) {
    let (rows, cols) = (dy.rows(), dy.cols());
    let n = cols as f64;
    let mut dx = vec![0.0; rows * cols];
    let mut dgain = vec![0.0; cols];
    let mut dbias = vec![0.0; cols];
    let mut dxhat = vec![0.0; cols];
    for r in 0..rows {
        let g = dy.row_slice(r);
        let h = &xhat[r * cols..(r + 1) * cols];
        let mut sum_d = 0.0;
        let mut sum_dh = 0.0;
        for c in 0..cols {
            dgain[c] += g[c] * h[c];
            dbias[c] += g[c];
            dxhat[c] = g[c] * gain.data()[c];
            sum_d += dxhat[c];
            sum_dh += dxhat[c] * h[c];
        }
        for c in 0..cols {
            dx[r * cols + c] = inv_std[r] / n * (n * dxhat[c] - sum_d - h[c] * sum_dh);
        }
    }
    (
        Tensor::matrix(rows, cols, dx),
        Tensor::row(&dgain),
        Tensor::row(&dbias),
    )
}

struct AttnDims {
    batch: usize,
    tokens: usize,
    heads: usize,
    dk: usize,
    dv: usize,
    qk_cols: usize,
    v_cols: usize,
}

fn attn_dims(q: &Tensor, k: &Tensor, v: &Tensor, tokens: usize, heads: usize) -> AttnDims {
    assert!(tokens > 0 && heads > 0, "attention needs tokens and heads");
    assert_eq!(q.rows(), k.rows(), "attention q/k rows");
    assert_eq!(q.rows(), v.rows(), "attention q/v rows");
    assert_eq!(q.cols(), k.cols(), "attention q/k width");
    assert_eq!(q.rows() % tokens, 0, "rows not a multiple of token count");
    assert_eq!(q.cols() % heads, 0, "q width not divisible by heads");
    assert_eq!(v.cols() % heads, 0, "v width not divisible by heads");
    AttnDims {
        batch: q.rows() / tokens,
        tokens,
        heads,
        dk: q.cols() / heads,
        dv: v.cols() / heads,
        qk_cols: q.cols(),
        v_cols: v.cols(),
    }
}

/// Returns the attended values and the softmax probabilities laid out as
/// `[batch, heads, tokens, tokens]`.
pub(crate) fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    tokens: usize,
    heads: usize,
) -> (Tensor, Vec<f64>) {
    let d = attn_dims(q, k, v, tokens, heads);
    let scale = 1.0 / (d.dk as f64).sqrt();
    let t = d.tokens;
    let mut probs = vec![0.0; d.batch * d.heads * t * t];
    let mut out = vec![0.0; q.rows() * d.v_cols];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut logits = vec![0.0; t];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let qo = h * d.dk;
            let vo = h * d.dv;
            for i in 0..t {
                let qi = (b * t + i) * d.qk_cols + qo;
                let mut max = f64::NEG_INFINITY;
                for (j, l) in logits.iter_mut().enumerate() {
                    let kj = (b * t + j) * d.qk_cols + qo;
                    let dot: f64 = (0..d.dk).map(|c| qd[qi + c] * kd[kj + c]).sum();
                    *l = dot * scale;
                    max = max.max(*l);
                }
                let mut z = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - max).exp();
                    z += *l;
                }
                let p_base = ((b * d.heads + h) * t + i) * t;
                let oi = (b * t + i) * d.v_cols + vo;
                for j in 0..t {
                    let p = logits[j] / z;
                    probs[p_base + j] = p;
                    let vj = (b * t + j) * d.v_cols + vo;
                    for c in 0..d.dv {
                        out[oi + c] += p * vd[vj + c];
                    }
                }
            }
        }
    }
    (Tensor::matrix(q.rows(), d.v_cols, out), probs)
}

pub(crate) fn attention_backward(
    dout: &Tensor,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &[f64],
    tokens: usize,
    heads: usize,
) -> (Tensor, Tensor, Tensor) {
    let d = attn_dims(q, k, v, tokens, heads);
    let scale = 1.0 / (d.dk as f64).sqrt();
    let t = d.tokens;
    let (qd, kd, vd, od) = (q.data(), k.data(), v.data(), dout.data());
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; t];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let qo = h * d.dk;
            let vo = h * d.dv;
            for i in 0..t {
                let p_base = ((b * d.heads + h) * t + i) * t;
                let oi = (b * t + i) * d.v_cols + vo;
                let mut weighted = 0.0;
                for j in 0..t {
                    let vj = (b * t + j) * d.v_cols + vo;
                    let p = probs[p_base + j];
                    let mut acc = 0.0;
                    for c in 0..d.dv {
                        acc += od[oi + c] * vd[vj + c];
                        dv[vj + c] += p * od[oi + c];
                    }
                    dp[j] = acc;
                    weighted += p * acc;
                }
                let qi = (b * t + i) * d.qk_cols + qo;
                for j in 0..t {
                    let ds = probs[p_base + j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = (b * t + j) * d.qk_cols + qo;
                    for c in 0..d.dk {
                        dq[qi + c] += ds * kd[kj + c];
                        dk[kj + c] += ds * qd[qi + c];
                    }
                }
            }
        }
    }
    (
        Tensor::matrix(q.rows(), q.cols(), dq),
        Tensor::matrix(k.rows(), k.cols(), dk),
        Tensor::matrix(v.rows(), v.cols(), dv),
    )
}

pub(crate) fn average_heads(probs: &[f64], tokens: usize, heads: usize) -> Vec<Tensor> {
    let per_head = tokens * tokens;
    let batch = probs.len() / (per_head * heads);
    (0..batch)
        .map(|b| {
            let mut m = vec![0.0; per_head];
            for h in 0..heads {
                let base = (b * heads + h) * per_head;
                for (acc, p) in m.iter_mut().zip(&probs[base..base + per_head]) {
                    *acc += p;
                }
            }
            for x in &mut m {
                *x /= heads as f64;
            }
            Tensor::matrix(tokens, tokens, m)
        })
        .collect()
}
