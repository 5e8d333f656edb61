//! Forward pass, reverse-mode gradients and incremental decoding.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{
    attention, attention_backward, dot, gelu, gelu_grad, layer_norm, layer_norm_backward, linear,
    linear_backward, log_softmax, softmax_into, NormCache,
};
use super::tokenizer::{ByteTokenizer, VOCAB_SIZE};
use super::{
    AttnSpan, DecLayerSpan, EncLayerSpan, FfnSpan, LinearSpan, ModelConfig, ModelError, NormSpan,
    ParamLayout, Span,
};
use crate::corpus::{Frame, FRAME_DIM};
use crate::tasks::TaskExample;

/// Token ids and frames ready for the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub tokens: Vec<u32>,
    pub frames: Vec<Frame>,
}

impl EncoderInput {
    pub fn new(tokens: Vec<u32>, frames: Vec<Frame>, cfg: &ModelConfig) -> Result<Self, ModelError> {
        if tokens.len() > cfg.max_text_in {
            return Err(ModelError::LengthExceeded {
                what: "prompt",
                len: tokens.len(),
                cap: cfg.max_text_in,
            });
        }
        if frames.len() > cfg.max_frames_in {
            return Err(ModelError::LengthExceeded {
                what: "frames",
                len: frames.len(),
                cap: cfg.max_frames_in,
            });
        }
        Ok(Self { tokens, frames })
    }

    pub fn from_example(
        ex: &TaskExample,
        tok: &ByteTokenizer,
        cfg: &ModelConfig,
    ) -> Result<Self, ModelError> {
        let frames = ex.frames.clone().unwrap_or_default();
        Self::new(tok.encode(&ex.prompt_text), frames, cfg)
    }

    pub fn len(&self) -> usize {
        self.tokens.len() + self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Embedded encoder sequence (`len × d_model`, row-major) with its padding mask.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInput {
    pub vectors: Vec<f64>,
    pub mask: Vec<bool>,
    pub len: usize,
}

#[derive(Debug, Clone, Default)]
struct AttnCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct FfnCache {
    pre: Vec<f64>,
    act: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct EncLayerCache {
    n_attn: NormCache,
    a: Vec<f64>,
    attn: AttnCache,
    drop_attn: Option<Vec<f64>>,
    n_ffn: NormCache,
    c: Vec<f64>,
    ffn: FfnCache,
    drop_ffn: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
struct DecLayerCache {
    n_self: NormCache,
    a: Vec<f64>,
    self_attn: AttnCache,
    drop_self: Option<Vec<f64>>,
    n_cross: NormCache,
    b: Vec<f64>,
    cross: AttnCache,
    drop_cross: Option<Vec<f64>>,
    n_ffn: NormCache,
    c: Vec<f64>,
    ffn: FfnCache,
    drop_ffn: Option<Vec<f64>>,
}

/// Everything the backward pass needs from one teacher-forced forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Forward {
    n_enc: usize,
    n_dec: usize,
    drop_enc_emb: Option<Vec<f64>>,
    enc_layers: Vec<EncLayerCache>,
    n_enc_final: NormCache,
    enc_out: Vec<f64>,
    drop_dec_emb: Option<Vec<f64>>,
    dec_layers: Vec<DecLayerCache>,
    n_dec_final: NormCache,
    z: Vec<f64>,
    /// Log-probabilities, `n_dec × VOCAB_SIZE`.
    pub logp: Vec<f64>,
    probs: Vec<f64>,
}

/// Splits two disjoint spans (`a` before `b`) out of one gradient buffer.
fn two_mut(g: &mut [f64], a: Span, b: Span) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.offset + a.len() <= b.offset);
    let (lo, hi) = g.split_at_mut(b.offset);
    (&mut lo[a.range()], &mut hi[..b.len()])
}

fn dropout(x: &mut [f64], p: f64, rng: Option<&mut ChaCha8Rng>) -> Option<Vec<f64>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> =
        (0..x.len()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
    for (v, m) in x.iter_mut().zip(&mask) {
        *v *= m;
    }
    Some(mask)
}

fn apply_mask(dy: &[f64], mask: &Option<Vec<f64>>) -> Vec<f64> {
    match mask {
        Some(m) => dy.iter().zip(m).map(|(a, b)| a * b).collect(),
        None => dy.to_vec(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Borrowed compute view: configuration, layout and `f64` parameters.
#[derive(Debug, Clone, Copy)]
pub struct Net<'a> {
    pub cfg: &'a ModelConfig,
    pub lay: &'a ParamLayout,
    pub w: &'a [f64],
}

impl<'a> Net<'a> {
    fn p(&self, s: Span) -> &'a [f64] {
        &self.w[s.range()]
    }

    fn d(&self) -> usize {
        self.cfg.d_model
    }

    fn lin(&self, sp: LinearSpan, x: &[f64]) -> Vec<f64> {
        let n = x.len() / sp.w.rows;
        let mut out = vec![0.0; n * sp.w.cols];
        linear(x, n, sp.w.rows, self.p(sp.w), self.p(sp.b), &mut out);
        out
    }

    fn lin_back(&self, sp: LinearSpan, x: &[f64], dy: &[f64], dx: Option<&mut [f64]>, g: &mut [f64]) {
        let n = x.len() / sp.w.rows;
        let (dw, db) = two_mut(g, sp.w, sp.b);
        linear_backward(x, dy, n, sp.w.rows, self.p(sp.w), dx, dw, db);
    }

    fn norm(&self, sp: NormSpan, x: &[f64]) -> (Vec<f64>, NormCache) {
        layer_norm(x, self.d(), self.p(sp.gain), self.p(sp.bias))
    }

    fn norm_back(&self, sp: NormSpan, cache: &NormCache, dy: &[f64], dx: &mut [f64], g: &mut [f64]) {
        let (dg, db) = two_mut(g, sp.gain, sp.bias);
        layer_norm_backward(dy, self.d(), self.p(sp.gain), cache, dx, dg, db);
    }

    fn attn(&self, sp: &AttnSpan, xq: &[f64], xkv: &[f64], causal: bool) -> (Vec<f64>, AttnCache) {
        let q = self.lin(sp.q, xq);
        let k = self.lin(sp.k, xkv);
        let v = self.lin(sp.v, xkv);
        let (ctx, probs) = attention(&q, &k, &v, self.d(), self.cfg.n_heads, causal);
        let out = self.lin(sp.o, &ctx);
        (out, AttnCache { q, k, v, probs, ctx })
    }

    /// Returns the gradients with respect to the query-side and key/value-side inputs.
    fn attn_back(
        &self,
        sp: &AttnSpan,
        xq: &[f64],
        xkv: &[f64],
        c: &AttnCache,
        dout: &[f64],
        g: &mut [f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let d = self.d();
        let mut dctx = vec![0.0; c.ctx.len()];
        self.lin_back(sp.o, &c.ctx, dout, Some(&mut dctx), g);
        let mut dq = vec![0.0; c.q.len()];
        let mut dk = vec![0.0; c.k.len()];
        let mut dv = vec![0.0; c.v.len()];
        attention_backward(
            &c.q, &c.k, &c.v, &c.probs, &dctx, d, self.cfg.n_heads, &mut dq, &mut dk, &mut dv,
        );
        let mut dxq = vec![0.0; xq.len()];
        let mut dxkv = vec![0.0; xkv.len()];
        self.lin_back(sp.q, xq, &dq, Some(&mut dxq), g);
        self.lin_back(sp.k, xkv, &dk, Some(&mut dxkv), g);
        self.lin_back(sp.v, xkv, &dv, Some(&mut dxkv), g);
        (dxq, dxkv)
    }

    fn ffn(&self, sp: &FfnSpan, x: &[f64]) -> (Vec<f64>, FfnCache) {
        let pre = self.lin(sp.up, x);
        let act: Vec<f64> = pre.iter().map(|&u| gelu(u)).collect();
        let out = self.lin(sp.down, &act);
        (out, FfnCache { pre, act })
    }

    fn ffn_back(&self, sp: &FfnSpan, x: &[f64], c: &FfnCache, dy: &[f64], g: &mut [f64]) -> Vec<f64> {
        let mut dact = vec![0.0; c.act.len()];
        self.lin_back(sp.down, &c.act, dy, Some(&mut dact), g);
        let dpre: Vec<f64> = dact.iter().zip(&c.pre).map(|(da, &u)| da * gelu_grad(u)).collect();
        let mut dx = vec![0.0; x.len()];
        self.lin_back(sp.up, x, &dpre, Some(&mut dx), g);
        dx
    }

    /// Token embeddings followed by projected frames, each plus the positional
    /// embedding at its absolute position.
    pub fn embed_encoder(&self, input: &EncoderInput) -> Vec<f64> {
        let d = self.d();
        let n = input.len();
        let mut x = vec![0.0; n * d];
        let emb = self.p(self.lay.tok_emb);
        for (i, &t) in input.tokens.iter().enumerate() {
            x[i * d..(i + 1) * d].copy_from_slice(&emb[t as usize * d..(t as usize + 1) * d]);
        }
        if !input.frames.is_empty() {
            let flat: Vec<f64> =
                input.frames.iter().flat_map(|f| f.iter().map(|&v| v as f64)).collect();
            let off = input.tokens.len() * d;
            let fp = self.lay.frame_proj;
            linear(&flat, input.frames.len(), FRAME_DIM, self.p(fp.w), self.p(fp.b), &mut x[off..]);
        }
        let pos = self.p(self.lay.enc_pos);
        add_into(&mut x, &pos[..n * d]);
        x
    }

    pub fn encode_inputs(&self, input: &EncoderInput) -> EncodedInput {
        let len = input.len();
        EncodedInput { vectors: self.embed_encoder(input), mask: vec![true; len], len }
    }

    fn enc_layer(
        &self,
        sp: &EncLayerSpan,
        x: &mut [f64],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> EncLayerCache {
        let p = self.cfg.dropout;
        let (a, n_attn) = self.norm(sp.ln_attn, x);
        let (mut o, attn) = self.attn(&sp.attn, &a, &a, false);
        let drop_attn = dropout(&mut o, p, rng.as_deref_mut());
        add_into(x, &o);
        let (c, n_ffn) = self.norm(sp.ln_ffn, x);
        let (mut f, ffn) = self.ffn(&sp.ffn, &c);
        let drop_ffn = dropout(&mut f, p, rng.as_deref_mut());
        add_into(x, &f);
        EncLayerCache { n_attn, a, attn, drop_attn, n_ffn, c, ffn, drop_ffn }
    }

    fn dec_layer(
        &self,
        sp: &DecLayerSpan,
        x: &mut [f64],
        enc_out: &[f64],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> DecLayerCache {
        let p = self.cfg.dropout;
        let (a, n_self) = self.norm(sp.ln_self, x);
        let (mut o, self_attn) = self.attn(&sp.self_attn, &a, &a, true);
        let drop_self = dropout(&mut o, p, rng.as_deref_mut());
        add_into(x, &o);
        let (b, n_cross) = self.norm(sp.ln_cross, x);
        let (mut o2, cross) = self.attn(&sp.cross_attn, &b, enc_out, false);
        let drop_cross = dropout(&mut o2, p, rng.as_deref_mut());
        add_into(x, &o2);
        let (c, n_ffn) = self.norm(sp.ln_ffn, x);
        let (mut f, ffn) = self.ffn(&sp.ffn, &c);
        let drop_ffn = dropout(&mut f, p, rng.as_deref_mut());
        add_into(x, &f);
        DecLayerCache {
            n_self,
            a,
            self_attn,
            drop_self,
            n_cross,
            b,
            cross,
            drop_cross,
            n_ffn,
            c,
            ffn,
            drop_ffn,
        }
    }

    /// Runs the encoder without dropout and returns its final hidden states.
    pub fn encode(&self, input: &EncoderInput) -> Vec<f64> {
        let mut x = self.embed_encoder(input);
        for sp in &self.lay.enc {
            self.enc_layer(sp, &mut x, None);
        }
        self.norm(self.lay.enc_norm, &x).0
    }

    /// Teacher-forced forward pass. `dec_in` starts with BOS. Dropout is
    /// active only when `rng` is given.
    pub(crate) fn forward(
        &self,
        input: &EncoderInput,
        dec_in: &[u32],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Forward {
        let d = self.d();
        let p = self.cfg.dropout;
        let mut x = self.embed_encoder(input);
        let drop_enc_emb = dropout(&mut x, p, rng.as_deref_mut());
        let enc_layers: Vec<EncLayerCache> =
            self.lay.enc.iter().map(|sp| self.enc_layer(sp, &mut x, rng.as_deref_mut())).collect();
        let (enc_out, n_enc_final) = self.norm(self.lay.enc_norm, &x);

        let t = dec_in.len();
        let emb = self.p(self.lay.tok_emb);
        let pos = self.p(self.lay.dec_pos);
        let mut y = vec![0.0; t * d];
        for (i, &tok) in dec_in.iter().enumerate() {
            let e = &emb[tok as usize * d..(tok as usize + 1) * d];
            for j in 0..d {
                y[i * d + j] = e[j] + pos[i * d + j];
            }
        }
        let drop_dec_emb = dropout(&mut y, p, rng.as_deref_mut());
        let dec_layers: Vec<DecLayerCache> = self
            .lay
            .dec
            .iter()
            .map(|sp| self.dec_layer(sp, &mut y, &enc_out, rng.as_deref_mut()))
            .collect();
        let (z, n_dec_final) = self.norm(self.lay.dec_norm, &y);
        let mut logp = vec![0.0; t * VOCAB_SIZE];
        let mut probs = vec![0.0; t * VOCAB_SIZE];
        let mut logits = vec![0.0; VOCAB_SIZE];
        for i in 0..t {
            let zi = &z[i * d..(i + 1) * d];
            for (v, l) in logits.iter_mut().enumerate() {
                *l = dot(zi, &emb[v * d..(v + 1) * d]);
            }
            let row = i * VOCAB_SIZE..(i + 1) * VOCAB_SIZE;
            softmax_into(&logits, &mut logp[row.clone()], &mut probs[row]);
        }
        Forward {
            n_enc: input.len(),
            n_dec: t,
            drop_enc_emb,
            enc_layers,
            n_enc_final,
            enc_out,
            drop_dec_emb,
            dec_layers,
            n_dec_final,
            z,
            logp,
            probs,
        }
    }

    /// Sum of target negative log-likelihoods under a forward pass.
    pub(crate) fn nll(fwd: &Forward, targets: &[u32]) -> f64 {
        targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -fwd.logp[i * VOCAB_SIZE + t as usize])
            .sum()
    }

    /// Backpropagates `scale · Σ nll(targets)` into `g`.
    pub(crate) fn backward(
        &self,
        input: &EncoderInput,
        dec_in: &[u32],
        targets: &[u32],
        fwd: &Forward,
        scale: f64,
        g: &mut [f64],
    ) {
        let d = self.d();
        let t = fwd.n_dec;
        let emb_span = self.lay.tok_emb;
        let emb = self.p(emb_span);

        // tied output projection
        let mut dz = vec![0.0; t * d];
        for i in 0..t {
            let zi = &fwd.z[i * d..(i + 1) * d];
            let row = &fwd.probs[i * VOCAB_SIZE..(i + 1) * VOCAB_SIZE];
            let gemb = &mut g[emb_span.range()];
            for v in 0..VOCAB_SIZE {
                let mut dl = row[v];
                if v == targets[i] as usize {
                    dl -= 1.0;
                }
                dl *= scale;
                if dl == 0.0 {
                    continue;
                }
                let ev = &emb[v * d..(v + 1) * d];
                for j in 0..d {
                    dz[i * d + j] += dl * ev[j];
                    gemb[v * d + j] += dl * zi[j];
                }
            }
        }

        // decoder stack
        let mut dy = vec![0.0; t * d];
        self.norm_back(self.lay.dec_norm, &fwd.n_dec_final, &dz, &mut dy, g);
        let mut denc = vec![0.0; fwd.n_enc * d];
        for (sp, c) in self.lay.dec.iter().zip(&fwd.dec_layers).rev() {
            let df = apply_mask(&dy, &c.drop_ffn);
            let dc = self.ffn_back(&sp.ffn, &c.c, &c.ffn, &df, g);
            self.norm_back(sp.ln_ffn, &c.n_ffn, &dc, &mut dy, g);

            let do2 = apply_mask(&dy, &c.drop_cross);
            let (db, dkv) = self.attn_back(&sp.cross_attn, &c.b, &fwd.enc_out, &c.cross, &do2, g);
            add_into(&mut denc, &dkv);
            self.norm_back(sp.ln_cross, &c.n_cross, &db, &mut dy, g);

            let do1 = apply_mask(&dy, &c.drop_self);
            let (da_q, da_kv) = self.attn_back(&sp.self_attn, &c.a, &c.a, &c.self_attn, &do1, g);
            let mut da = da_q;
            add_into(&mut da, &da_kv);
            self.norm_back(sp.ln_self, &c.n_self, &da, &mut dy, g);
        }
        let dy = apply_mask(&dy, &fwd.drop_dec_emb);
        let dpos = self.lay.dec_pos;
        add_into(&mut g[dpos.offset..dpos.offset + t * d], &dy);
        for (i, &tok) in dec_in.iter().enumerate() {
            let o = emb_span.offset + tok as usize * d;
            add_into(&mut g[o..o + d], &dy[i * d..(i + 1) * d]);
        }

        // encoder stack
        let mut dx = vec![0.0; fwd.n_enc * d];
        self.norm_back(self.lay.enc_norm, &fwd.n_enc_final, &denc, &mut dx, g);
        for (sp, c) in self.lay.enc.iter().zip(&fwd.enc_layers).rev() {
            let df = apply_mask(&dx, &c.drop_ffn);
            let dc = self.ffn_back(&sp.ffn, &c.c, &c.ffn, &df, g);
            self.norm_back(sp.ln_ffn, &c.n_ffn, &dc, &mut dx, g);

            let do1 = apply_mask(&dx, &c.drop_attn);
            let (da_q, da_kv) = self.attn_back(&sp.attn, &c.a, &c.a, &c.attn, &do1, g);
            let mut da = da_q;
            add_into(&mut da, &da_kv);
            self.norm_back(sp.ln_attn, &c.n_attn, &da, &mut dx, g);
        }
        let dx = apply_mask(&dx, &fwd.drop_enc_emb);
        let n = fwd.n_enc;
        let epos = self.lay.enc_pos;
        add_into(&mut g[epos.offset..epos.offset + n * d], &dx);
        for (i, &tok) in input.tokens.iter().enumerate() {
            let o = emb_span.offset + tok as usize * d;
            add_into(&mut g[o..o + d], &dx[i * d..(i + 1) * d]);
        }
        if !input.frames.is_empty() {
            let flat: Vec<f64> =
                input.frames.iter().flat_map(|f| f.iter().map(|&v| v as f64)).collect();
            let off = input.tokens.len() * d;
            let fp = self.lay.frame_proj;
            let (dw, db) = two_mut(g, fp.w, fp.b);
            linear_backward(&flat, &dx[off..], input.frames.len(), FRAME_DIM, self.p(fp.w), None, dw, db);
        }
    }

    /// Per-position log-probabilities under teacher forcing, without dropout.
    pub fn teacher_forced_logprobs(&self, input: &EncoderInput, dec_in: &[u32]) -> Vec<Vec<f64>> {
        let fwd = self.forward(input, dec_in, None);
        fwd.logp.chunks(VOCAB_SIZE).map(|c| c.to_vec()).collect()
    }

    /// Starts incremental decoding from encoder states.
    pub fn start_decoder(&self, enc_out: &[f64]) -> DecoderState {
        let cross = self
            .lay
            .dec
            .iter()
            .map(|sp| (self.lin(sp.cross_attn.k, enc_out), self.lin(sp.cross_attn.v, enc_out)))
            .collect();
        DecoderState {
            cross: Arc::new(cross),
            keys: vec![Vec::new(); self.lay.dec.len()],
            values: vec![Vec::new(); self.lay.dec.len()],
            pos: 0,
        }
    }
}

/// Key/value caches for one partial hypothesis.
#[derive(Debug, Clone)]
pub struct DecoderState {
    cross: Arc<Vec<(Vec<f64>, Vec<f64>)>>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pos: usize,
}

impl DecoderState {
    /// Number of tokens consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds one token and returns log-probabilities for the next one.
    pub fn step(&mut self, net: &Net<'_>, token: u32) -> Result<Vec<f64>, ModelError> {
        let cap = net.cfg.max_text_out;
        if self.pos >= cap {
            return Err(ModelError::LengthExceeded { what: "decoder", len: self.pos + 1, cap });
        }
        let d = net.d();
        let heads = net.cfg.n_heads;
        let emb = net.p(net.lay.tok_emb);
        let pos = net.p(net.lay.dec_pos);
        let mut x: Vec<f64> = (0..d)
            .map(|j| emb[token as usize * d + j] + pos[self.pos * d + j])
            .collect();
        for (l, sp) in net.lay.dec.iter().enumerate() {
            let (a, _) = net.norm(sp.ln_self, &x);
            let q = net.lin(sp.self_attn.q, &a);
            self.keys[l].extend(net.lin(sp.self_attn.k, &a));
            self.values[l].extend(net.lin(sp.self_attn.v, &a));
            let (ctx, _) = attention(&q, &self.keys[l], &self.values[l], d, heads, false);
            add_into(&mut x, &net.lin(sp.self_attn.o, &ctx));

            let (b, _) = net.norm(sp.ln_cross, &x);
            let q2 = net.lin(sp.cross_attn.q, &b);
            let (ck, cv) = &self.cross[l];
            let (ctx2, _) = attention(&q2, ck, cv, d, heads, false);
            add_into(&mut x, &net.lin(sp.cross_attn.o, &ctx2));

            let (c, _) = net.norm(sp.ln_ffn, &x);
            let (f, _) = net.ffn(&sp.ffn, &c);
            add_into(&mut x, &f);
        }
        self.pos += 1;
        let (z, _) = net.norm(net.lay.dec_norm, &x);
        let logits: Vec<f64> = (0..VOCAB_SIZE).map(|v| dot(&z, &emb[v * d..(v + 1) * d])).collect();
        Ok(log_softmax(&logits))
    }
}
