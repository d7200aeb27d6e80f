//! Bidirectional pre-LN transformer over vocabulary plus MASK.
//!
//! Parameters live in one flat `f64` buffer split into named segments, which
//! keeps the optimizer, the finite-difference checker and the checkpoint
//! format trivial. Gradients are computed by hand.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{add_bias, col_sum_acc, logsumexp, mm, mm_at_acc, mm_bt, softmax_inplace};
use maskpress_core::TokenId;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Arch {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub mask_id: TokenId,
}

impl Default for Arch {
    fn default() -> Self {
        Self::toy()
    }
}

impl Arch {
    /// Two layers of width 64 over the 512-id word vocabulary.
    pub fn toy() -> Self {
        Self { vocab_size: 512, n_layers: 2, d_model: 64, n_heads: 4, d_ff: 128, max_seq_len: 512, mask_id: 511 }
    }

    /// A few thousand parameters; for gradient checks.
    pub fn tiny() -> Self {
        Self { vocab_size: 12, n_layers: 2, d_model: 12, n_heads: 2, d_ff: 24, max_seq_len: 10, mask_id: 11 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.vocab_size >= 2
            && self.n_layers >= 1
            && self.n_heads >= 1
            && self.d_model % self.n_heads == 0
            && self.d_model >= 1
            && self.d_ff >= 1
            && self.max_seq_len >= 1
            && (self.mask_id as usize) < self.vocab_size;
        if !ok {
            return Err(Error::Config(format!("invalid architecture {self:?}")));
        }
        Ok(())
    }

    /// Segment names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ff);
        let mut out = vec![("tok_emb".to_string(), vec![v, d]), ("pos_emb".to_string(), vec![self.max_seq_len, d])];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            out.extend([
                (p("ln1.g"), vec![d]),
                (p("ln1.b"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.bq"), vec![d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.bk"), vec![d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.bv"), vec![d]),
                (p("attn.wo"), vec![d, d]),
                (p("attn.bo"), vec![d]),
                (p("ln2.g"), vec![d]),
                (p("ln2.b"), vec![d]),
                (p("ff.w1"), vec![d, f]),
                (p("ff.b1"), vec![f]),
                (p("ff.w2"), vec![f, d]),
                (p("ff.b2"), vec![d]),
            ]);
        }
        out.extend([
            ("lnf.g".to_string(), vec![d]),
            ("lnf.b".to_string(), vec![d]),
            ("head.w".to_string(), vec![d, v]),
            ("head.b".to_string(), vec![v]),
        ]);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Copy)]
struct LayerOff {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone)]
struct Offsets {
    tok: usize,
    pos: usize,
    layers: Vec<LayerOff>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
}

/// Model parameters plus architecture.
#[derive(Clone, PartialEq)]
pub struct MaskModel {
    arch: Arch,
    params: Vec<f64>,
    segments: Vec<Segment>,
}

impl fmt::Debug for MaskModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MaskModel").field("arch", &self.arch).field("n_params", &self.params.len()).finish()
    }
}

fn segments_for(arch: &Arch) -> Vec<Segment> {
    let mut offset = 0;
    arch.layout()
        .into_iter()
        .map(|(name, shape)| {
            let len = shape.iter().product();
            let s = Segment { name, shape, offset, len };
            offset += len;
            s
        })
        .collect()
}

impl MaskModel {
    /// Fresh model: weights and embeddings ~ N(0, `init_std`), layer-norm
    /// gains 1, biases 0.
    pub fn new(arch: Arch, seed: u64, init_std: f64) -> Result<Self> {
        arch.validate()?;
        let segments = segments_for(&arch);
        let total = segments.last().map_or(0, |s| s.offset + s.len);
        let mut params = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, init_std).map_err(|e| Error::Config(format!("init_std: {e}")))?;
        for s in &segments {
            let leaf = s.name.rsplit('.').next().unwrap_or(&s.name);
            let slot = &mut params[s.offset..s.offset + s.len];
            if leaf == "g" {
                slot.fill(1.0);
            } else if s.shape.len() == 2 {
                slot.iter_mut().for_each(|p| *p = normal.sample(&mut rng));
            }
        }
        Ok(Self { arch, params, segments })
    }

    /// Builds a model from a flat parameter vector in layout order.
    pub fn from_params(arch: Arch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let segments = segments_for(&arch);
        let total = segments.last().map_or(0, |s| s.offset + s.len);
        if params.len() != total {
            return Err(Error::Shape { expected: total, actual: params.len() });
        }
        Ok(Self { arch, params, segments })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Rounds every parameter to the nearest `f32`, so a checkpoint stores
    /// the model exactly.
    pub fn snap_to_f32(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
    }

    fn offsets(&self) -> Offsets {
        let at = |name: &str| self.segment(name).expect("layout segment").offset;
        Offsets {
            tok: at("tok_emb"),
            pos: at("pos_emb"),
            layers: (0..self.arch.n_layers)
                .map(|l| {
                    let o = |s: &str| at(&format!("layer{l}.{s}"));
                    LayerOff {
                        ln1_g: o("ln1.g"),
                        ln1_b: o("ln1.b"),
                        wq: o("attn.wq"),
                        bq: o("attn.bq"),
                        wk: o("attn.wk"),
                        bk: o("attn.bk"),
                        wv: o("attn.wv"),
                        bv: o("attn.bv"),
                        wo: o("attn.wo"),
                        bo: o("attn.bo"),
                        ln2_g: o("ln2.g"),
                        ln2_b: o("ln2.b"),
                        w1: o("ff.w1"),
                        b1: o("ff.b1"),
                        w2: o("ff.w2"),
                        b2: o("ff.b2"),
                    }
                })
                .collect(),
            lnf_g: at("lnf.g"),
            lnf_b: at("lnf.b"),
            head_w: at("head.w"),
            head_b: at("head.b"),
        }
    }

    fn p(&self, off: usize, len: usize) -> &[f64] {
        &self.params[off..off + len]
    }

    fn check_input(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Shape { expected: 1, actual: 0 });
        }
        if tokens.len() > self.arch.max_seq_len {
            return Err(Error::Shape { expected: self.arch.max_seq_len, actual: tokens.len() });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.arch.vocab_size) {
            return Err(Error::Config(format!("token id {t} outside vocabulary of {}", self.arch.vocab_size)));
        }
        Ok(())
    }

    /// Output logits, `L × vocab_size`.
    pub fn logits(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(tokens)?.0)
    }

    /// Per-position probability distributions, `L × vocab_size`.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        let mut z = self.logits(tokens)?;
        for row in z.chunks_mut(self.arch.vocab_size) {
            softmax_inplace(row);
        }
        Ok(z)
    }

    /// Retention probability `1 - p(MASK)` per position.
    pub fn retention(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        let z = self.logits(tokens)?;
        let m = self.arch.mask_id as usize;
        Ok(z.chunks(self.arch.vocab_size).map(|row| 1.0 - (row[m] - logsumexp(row)).exp()).collect())
    }

    pub(crate) fn forward_cached(&self, tokens: &[TokenId]) -> Result<(Vec<f64>, Cache)> {
        self.check_input(tokens)?;
        let a = &self.arch;
        let (l, d, f, v, h) = (tokens.len(), a.d_model, a.d_ff, a.vocab_size, a.n_heads);
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let off = self.offsets();

        let mut x = vec![0.0; l * d];
        for (i, &t) in tokens.iter().enumerate() {
            let te = self.p(off.tok + t as usize * d, d);
            let pe = self.p(off.pos + i * d, d);
            for j in 0..d {
                x[i * d + j] = te[j] + pe[j];
            }
        }
        let mut layers = Vec::with_capacity(a.n_layers);
        for lo in &off.layers {
            let (ln1_out, ln1) = layer_norm(&x, self.p(lo.ln1_g, d), self.p(lo.ln1_b, d), d);
            let mut q = mm(&ln1_out, self.p(lo.wq, d * d), l, d, d);
            add_bias(&mut q, self.p(lo.bq, d));
            let mut k = mm(&ln1_out, self.p(lo.wk, d * d), l, d, d);
            add_bias(&mut k, self.p(lo.bk, d));
            let mut vv = mm(&ln1_out, self.p(lo.wv, d * d), l, d, d);
            add_bias(&mut vv, self.p(lo.bv, d));

            let mut att = vec![0.0; h * l * l];
            let mut o = vec![0.0; l * d];
            for hd in 0..h {
                let c0 = hd * dh;
                let qh = columns(&q, l, d, c0, dh);
                let kh = columns(&k, l, d, c0, dh);
                let vh = columns(&vv, l, d, c0, dh);
                let mut s = mm_bt(&qh, &kh, l, dh, l);
                for row in s.chunks_mut(l) {
                    row.iter_mut().for_each(|x| *x *= scale);
                    softmax_inplace(row);
                }
                let oh = mm(&s, &vh, l, l, dh);
                for i in 0..l {
                    o[i * d + c0..i * d + c0 + dh].copy_from_slice(&oh[i * dh..(i + 1) * dh]);
                }
                att[hd * l * l..(hd + 1) * l * l].copy_from_slice(&s);
            }
            let mut proj = mm(&o, self.p(lo.wo, d * d), l, d, d);
            add_bias(&mut proj, self.p(lo.bo, d));
            for (xi, pi) in x.iter_mut().zip(&proj) {
                *xi += pi;
            }
            let (ln2_out, ln2) = layer_norm(&x, self.p(lo.ln2_g, d), self.p(lo.ln2_b, d), d);
            let mut u = mm(&ln2_out, self.p(lo.w1, d * f), l, d, f);
            add_bias(&mut u, self.p(lo.b1, f));
            let g: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
            let mut ff = mm(&g, self.p(lo.w2, f * d), l, f, d);
            add_bias(&mut ff, self.p(lo.b2, d));
            for (xi, fi) in x.iter_mut().zip(&ff) {
                *xi += fi;
            }
            layers.push(LayerCache { ln1, ln1_out, q, k, v: vv, att, o, ln2, ln2_out, u, g });
        }
        let (hf, lnf) = layer_norm(&x, self.p(off.lnf_g, d), self.p(off.lnf_b, d), d);
        let mut z = mm(&hf, self.p(off.head_w, d * v), l, d, v);
        add_bias(&mut z, self.p(off.head_b, v));
        Ok((z, Cache { tokens: tokens.to_vec(), layers, lnf, hf }))
    }

    /// Gradient of a scalar loss w.r.t. all parameters, given `d loss / d logits`.
    pub(crate) fn backward(&self, cache: &Cache, dz: &[f64]) -> Vec<f64> {
        let a = &self.arch;
        let (l, d, f, v, h) = (cache.tokens.len(), a.d_model, a.d_ff, a.vocab_size, a.n_heads);
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let off = self.offsets();
        let mut grad = vec![0.0; self.params.len()];

        mm_at_acc(&cache.hf, dz, l, d, v, &mut grad[off.head_w..off.head_w + d * v]);
        col_sum_acc(dz, &mut grad[off.head_b..off.head_b + v]);
        let dhf = mm_bt(dz, self.p(off.head_w, d * v), l, v, d);
        let mut dx = layer_norm_back(&dhf, &cache.lnf, self.p(off.lnf_g, d), d, &mut grad, off.lnf_g, off.lnf_b);

        for (lo, c) in off.layers.iter().zip(&cache.layers).rev() {
            // Feed-forward block: x = x_mid + W2 gelu(W1 ln2(x_mid)).
            mm_at_acc(&c.g, &dx, l, f, d, &mut grad[lo.w2..lo.w2 + f * d]);
            col_sum_acc(&dx, &mut grad[lo.b2..lo.b2 + d]);
            let dg = mm_bt(&dx, self.p(lo.w2, f * d), l, d, f);
            let du: Vec<f64> = dg.iter().zip(&c.u).map(|(g, &u)| g * gelu_grad(u)).collect();
            mm_at_acc(&c.ln2_out, &du, l, d, f, &mut grad[lo.w1..lo.w1 + d * f]);
            col_sum_acc(&du, &mut grad[lo.b1..lo.b1 + f]);
            let dln2 = mm_bt(&du, self.p(lo.w1, d * f), l, f, d);
            let dmid = layer_norm_back(&dln2, &c.ln2, self.p(lo.ln2_g, d), d, &mut grad, lo.ln2_g, lo.ln2_b);
            for (a, b) in dx.iter_mut().zip(&dmid) {
                *a += b;
            }

            // Attention block: x_mid = x_in + Wo attn(ln1(x_in)).
            mm_at_acc(&c.o, &dx, l, d, d, &mut grad[lo.wo..lo.wo + d * d]);
            col_sum_acc(&dx, &mut grad[lo.bo..lo.bo + d]);
            let do_ = mm_bt(&dx, self.p(lo.wo, d * d), l, d, d);
            let mut dq = vec![0.0; l * d];
            let mut dk = vec![0.0; l * d];
            let mut dv = vec![0.0; l * d];
            for hd in 0..h {
                let c0 = hd * dh;
                let s = &c.att[hd * l * l..(hd + 1) * l * l];
                let qh = columns(&c.q, l, d, c0, dh);
                let kh = columns(&c.k, l, d, c0, dh);
                let vh = columns(&c.v, l, d, c0, dh);
                let doh = columns(&do_, l, d, c0, dh);
                // dA = dO Vᵀ, dV = Aᵀ dO.
                let da = mm_bt(&doh, &vh, l, dh, l);
                let mut dvh = vec![0.0; l * dh];
                mm_at_acc(s, &doh, l, l, dh, &mut dvh);
                // Softmax backward, then the 1/sqrt(dh) scale.
                let mut ds = vec![0.0; l * l];
                for i in 0..l {
                    let ar = &s[i * l..(i + 1) * l];
                    let dr = &da[i * l..(i + 1) * l];
                    let inner: f64 = ar.iter().zip(dr).map(|(x, y)| x * y).sum();
                    for j in 0..l {
                        ds[i * l + j] = ar[j] * (dr[j] - inner) * scale;
                    }
                }
                let dqh = mm(&ds, &kh, l, l, dh);
                let mut dkh = vec![0.0; l * dh];
                mm_at_acc(&ds, &qh, l, l, dh, &mut dkh);
                for i in 0..l {
                    for j in 0..dh {
                        dq[i * d + c0 + j] = dqh[i * dh + j];
                        dk[i * d + c0 + j] = dkh[i * dh + j];
                        dv[i * d + c0 + j] = dvh[i * dh + j];
                    }
                }
            }
            let mut dln1 = vec![0.0; l * d];
            for (w, b, dy) in [(lo.wq, lo.bq, &dq), (lo.wk, lo.bk, &dk), (lo.wv, lo.bv, &dv)] {
                mm_at_acc(&c.ln1_out, dy, l, d, d, &mut grad[w..w + d * d]);
                col_sum_acc(dy, &mut grad[b..b + d]);
                let back = mm_bt(dy, self.p(w, d * d), l, d, d);
                for (a, b) in dln1.iter_mut().zip(&back) {
                    *a += b;
                }
            }
            let din = layer_norm_back(&dln1, &c.ln1, self.p(lo.ln1_g, d), d, &mut grad, lo.ln1_g, lo.ln1_b);
            for (a, b) in dx.iter_mut().zip(&din) {
                *a += b;
            }
        }

        for (i, &t) in cache.tokens.iter().enumerate() {
            let row = &dx[i * d..(i + 1) * d];
            let te = off.tok + t as usize * d;
            let pe = off.pos + i * d;
            for j in 0..d {
                grad[te + j] += row[j];
                grad[pe + j] += row[j];
            }
        }
        grad
    }
}

pub(crate) struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

pub(crate) struct LayerCache {
    ln1: LnCache,
    ln1_out: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    att: Vec<f64>,
    o: Vec<f64>,
    ln2: LnCache,
    ln2_out: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

pub(crate) struct Cache {
    tokens: Vec<TokenId>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    hf: Vec<f64>,
}

fn columns(x: &[f64], rows: usize, width: usize, c0: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * n);
    for r in 0..rows {
        out.extend_from_slice(&x[r * width + c0..r * width + c0 + n]);
    }
    out
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], d: usize) -> (Vec<f64>, LnCache) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let xh = (row[j] - mean) * is;
            xhat[r * d + j] = xh;
            y[r * d + j] = g[j] * xh + b[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_back(dy: &[f64], c: &LnCache, g: &[f64], d: usize, grad: &mut [f64], g_off: usize, b_off: usize) -> Vec<f64> {
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &c.xhat[r * d..(r + 1) * d];
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for j in 0..d {
            grad[g_off + j] += dyr[j] * xh[j];
            grad[b_off + j] += dyr[j];
            let dxh = dyr[j] * g[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            dx[r * d + j] = c.inv_std[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
