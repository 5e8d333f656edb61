//! Dense row-major `f64` kernels and their adjoints.

pub const LN_EPS: f64 = 1e-5;

/// `out[n×o] = x[n×i] · w[i×o] + b[o]`.
pub fn linear(x: &[f64], n: usize, d_in: usize, w: &[f64], b: &[f64], out: &mut [f64]) {
    let d_out = b.len();
    debug_assert_eq!(x.len(), n * d_in);
    debug_assert_eq!(w.len(), d_in * d_out);
    debug_assert_eq!(out.len(), n * d_out);
    for i in 0..n {
        let row = &mut out[i * d_out..(i + 1) * d_out];
        row.copy_from_slice(b);
        for k in 0..d_in {
            let xik = x[i * d_in + k];
            if xik == 0.0 {
                continue;
            }
            let wk = &w[k * d_out..(k + 1) * d_out];
            for (r, &wv) in row.iter_mut().zip(wk) {
                *r += xik * wv;
            }
        }
    }
}

/// Adjoint of [`linear`]: accumulates into `dw`, `db` and (if given) `dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    dy: &[f64],
    n: usize,
    d_in: usize,
    w: &[f64],
    dx: Option<&mut [f64]>,
    dw: &mut [f64],
    db: &mut [f64],
) {
    let d_out = db.len();
    for i in 0..n {
        let dyi = &dy[i * d_out..(i + 1) * d_out];
        for (g, &v) in db.iter_mut().zip(dyi) {
            *g += v;
        }
        for k in 0..d_in {
            let xik = x[i * d_in + k];
            if xik == 0.0 {
                continue;
            }
            let dwk = &mut dw[k * d_out..(k + 1) * d_out];
            for (g, &v) in dwk.iter_mut().zip(dyi) {
                *g += xik * v;
            }
        }
    }
    if let Some(dx) = dx {
        for i in 0..n {
            let dyi = &dy[i * d_out..(i + 1) * d_out];
            for k in 0..d_in {
                let wk = &w[k * d_out..(k + 1) * d_out];
                dx[i * d_in + k] += dot(dyi, wk);
            }
        }
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Saved statistics of a layer-norm forward pass.
#[derive(Debug, Clone, Default)]
pub struct NormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, NormCache) {
    let n = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            out[i * d + j] = h * gain[j] + bias[j];
        }
    }
    (out, NormCache { xhat, rstd })
}

/// Adjoint of [`layer_norm`]; adds the input gradient into `dx`.
pub fn layer_norm_backward(
    dy: &[f64],
    d: usize,
    gain: &[f64],
    cache: &NormCache,
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) {
    let n = dy.len() / d;
    let mut g = vec![0.0; d];
    for i in 0..n {
        let dyi = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        for j in 0..d {
            dgain[j] += dyi[j] * xh[j];
            dbias[j] += dyi[j];
            g[j] = dyi[j] * gain[j];
        }
        let mean_g = g.iter().sum::<f64>() / d as f64;
        let mean_gx = dot(&g, xh) / d as f64;
        let r = cache.rstd[i];
        for j in 0..d {
            dx[i * d + j] += r * (g[j] - mean_g - xh[j] * mean_gx);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Multi-head scaled dot-product attention.
///
/// `q` is `nq×d`, `k`/`v` are `nk×d`; heads split the feature axis. With
/// `causal`, query `i` sees keys `0..=i`. Returns the concatenated
/// head outputs and the attention probabilities laid out `[head][i][j]`.
pub fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    heads: usize,
    causal: bool,
) -> (Vec<f64>, Vec<f64>) {
    let nq = q.len() / d;
    let nk = k.len() / d;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; nq * d];
    let mut probs = vec![0.0; heads * nq * nk];
    for h in 0..heads {
        let c0 = h * dh;
        for i in 0..nq {
            let qi = &q[i * d + c0..i * d + c0 + dh];
            let visible = if causal { (i + 1).min(nk) } else { nk };
            let p = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            let mut max = f64::NEG_INFINITY;
            for j in 0..visible {
                let s = dot(qi, &k[j * d + c0..j * d + c0 + dh]) * scale;
                p[j] = s;
                max = max.max(s);
            }
            let mut z = 0.0;
            for pj in p.iter_mut().take(visible) {
                *pj = (*pj - max).exp();
                z += *pj;
            }
            for pj in p.iter_mut().take(visible) {
                *pj /= z;
            }
            let oi = &mut out[i * d + c0..i * d + c0 + dh];
            for j in 0..visible {
                let pj = p[j];
                let vj = &v[j * d + c0..j * d + c0 + dh];
                for (o, &vv) in oi.iter_mut().zip(vj) {
                    *o += pj * vv;
                }
            }
        }
    }
    (out, probs)
}

/// Adjoint of [`attention`]; accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    d: usize,
    heads: usize,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let nq = q.len() / d;
    let nk = k.len() / d;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0; nk];
    for h in 0..heads {
        let c0 = h * dh;
        for i in 0..nq {
            let p = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            let doi = &dout[i * d + c0..i * d + c0 + dh];
            let mut weighted = 0.0;
            for j in 0..nk {
                if p[j] == 0.0 {
                    dp[j] = 0.0;
                    continue;
                }
                dp[j] = dot(doi, &v[j * d + c0..j * d + c0 + dh]);
                weighted += p[j] * dp[j];
                let dvj = &mut dv[j * d + c0..j * d + c0 + dh];
                for (g, &o) in dvj.iter_mut().zip(doi) {
                    *g += p[j] * o;
                }
            }
            for j in 0..nk {
                if p[j] == 0.0 {
                    continue;
                }
                let ds = p[j] * (dp[j] - weighted) * scale;
                for c in 0..dh {
                    dq[i * d + c0 + c] += ds * k[j * d + c0 + c];
                    dk[j * d + c0 + c] += ds * q[i * d + c0 + c];
                }
            }
        }
    }
}

/// Log-softmax of one logit row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let mut logp = vec![0.0; logits.len()];
    let mut probs = vec![0.0; logits.len()];
    softmax_into(logits, &mut logp, &mut probs);
    logp
}

/// Writes log-probabilities and probabilities of one logit row.
pub fn softmax_into(logits: &[f64], logp: &mut [f64], probs: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (p, l) in probs.iter_mut().zip(logits) {
        *p = (l - max).exp();
        z += *p;
    }
    let lse = max + z.ln();
    for ((lp, p), l) in logp.iter_mut().zip(probs.iter_mut()).zip(logits) {
        *lp = l - lse;
        *p /= z;
    }
}
