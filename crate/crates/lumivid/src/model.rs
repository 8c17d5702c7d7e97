//! The denoiser: input projection of fused tokens, pre-norm transformer
//! blocks with 3-axis rotary self-attention, cross-attention to context
//! tokens, adaptive (scale/shift/gate) modulation from the noise level, and
//! a zero-initialized output head, wrapped in EDM preconditioning.
//!
//! Forward and backward are written by hand over the tensor kernels; the
//! backward pass is validated against central finite differences (see the
//! gradient-check suite).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::conditioning::{fused_width, positional_codes, Chunk, FusedLatent, PositionalCodes};
use crate::rng::{streams, Rng};
use crate::tensor::{gemm, softmax_rows, Scalar, Tensor};
use crate::tokenizer::ShapeConfig;
use crate::{Error, Result};

const LN_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 1e4;
const FOURIER_BASE: f64 = 1e4;
const INIT_STD: f64 = 0.02;

/// Architecture hyperparameters. The backbone is a toy stand-in for a large
/// pretrained video DiT, sized for CPU training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub mlp_ratio: f64,
    pub context_dim: usize,
    pub vocab_size: usize,
    /// EDM preconditioning data scale.
    pub sigma_data: f64,
    /// Frequency count of the noise-level Fourier embedding.
    pub fourier_freqs: usize,
    pub shape: ShapeConfig,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.d_model as f64 * self.mlp_ratio).round() as usize
    }

    pub fn fourier_dim(&self) -> usize {
        2 * self.fourier_freqs
    }

    /// Rotary pairs per axis; `6 * rope_pairs` leading head dims rotate,
    /// the remainder passes through unrotated.
    pub fn rope_pairs(&self) -> usize {
        self.head_dim() / 6
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate_shape()?;
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must divide into {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() < 6 {
            return Err(Error::Config(format!(
                "head dim {} < 6: no room for 3-axis rotary pairs",
                self.head_dim()
            )));
        }
        if self.n_blocks == 0 || self.mlp_hidden() == 0 {
            return Err(Error::Config("model needs at least one block and MLP unit".into()));
        }
        if self.context_dim == 0 || self.vocab_size < 2 {
            return Err(Error::Config("context table needs vocab >= 2 and dim >= 1".into()));
        }
        if self.fourier_freqs == 0 {
            return Err(Error::Config("fourier_freqs must be >= 1".into()));
        }
        if !(self.sigma_data > 0.0) {
            return Err(Error::Config("sigma_data must be positive".into()));
        }
        Ok(())
    }

    pub fn latent_dims(&self) -> (usize, usize, usize, usize) {
        (
            self.shape.latent_frames(),
            self.shape.latent_height(),
            self.shape.latent_width(),
            self.shape.channels,
        )
    }

    pub fn token_width(&self) -> usize {
        fused_width(self.shape.channels, self.shape.temporal)
    }

    /// Closed-form trainable parameter count for this configuration.
    pub fn param_count(&self) -> usize {
        let (l, h, w, c) = self.latent_dims();
        let d = self.d_model;
        let f_in = self.token_width();
        let hid = self.mlp_hidden();
        let fdim = self.fourier_dim();
        let per_block = 4 * d * d + 4 * d              // self-attention qkvo
            + d * 6 * d + 6 * d                        // modulation head
            + 2 * d * d + 2 * self.context_dim * d + 4 * d // cross-attention
            + d * hid + hid + hid * d + d; // mlp
        f_in * d + d                                   // input projection
            + l * h * w * d                            // learned positions
            + fdim * d + d + d * d + d                 // noise MLP
            + self.n_blocks * per_block
            + self.vocab_size * self.context_dim       // context table
            + d * c + c // output head
    }
}

/// Ordered map of named parameter tensors with deterministic iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = ParameterStore::new();
        for (n, t) in self.iter() {
            out.insert(n, Tensor::zeros(t.shape()));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        let mut out = ParameterStore::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast());
        }
        out
    }
}

impl<T: Scalar> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gaussian_tensor<T: Scalar>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gaussian() * std)).collect();
    Tensor::from_vec(shape, data).expect("shape/product agree")
}

/// Seeded parameter initialization: scaled-Gaussian attention/MLP weights,
/// Gaussian embedding tables, zero-initialized modulation heads and output
/// head so a fresh network is exactly the zero function.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore<T>> {
    cfg.validate()?;
    let mut rng = Rng::new(seed, streams::PARAM_INIT);
    let (l, h, w, c) = cfg.latent_dims();
    let d = cfg.d_model;
    let f_in = cfg.token_width();
    let hid = cfg.mlp_hidden();
    let mut p = ParameterStore::new();

    p.insert("input_proj.w", gaussian_tensor(&mut rng, &[f_in, d], INIT_STD));
    p.insert("input_proj.b", Tensor::zeros(&[d]));
    p.insert("p_learn", gaussian_tensor(&mut rng, &[l * h * w, d], INIT_STD));
    p.insert("noise_mlp.w1", gaussian_tensor(&mut rng, &[cfg.fourier_dim(), d], INIT_STD));
    p.insert("noise_mlp.b1", Tensor::zeros(&[d]));
    p.insert("noise_mlp.w2", gaussian_tensor(&mut rng, &[d, d], INIT_STD));
    p.insert("noise_mlp.b2", Tensor::zeros(&[d]));
    for b in 0..cfg.n_blocks {
        let pre = format!("block{b}.");
        for name in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            p.insert(&format!("{pre}{name}"), gaussian_tensor(&mut rng, &[d, d], INIT_STD));
        }
        for name in ["attn.bq", "attn.bk", "attn.bv", "attn.bo"] {
            p.insert(&format!("{pre}{name}"), Tensor::zeros(&[d]));
        }
        p.insert(&format!("{pre}mod.w"), Tensor::zeros(&[d, 6 * d]));
        p.insert(&format!("{pre}mod.b"), Tensor::zeros(&[6 * d]));
        p.insert(&format!("{pre}cross.wq"), gaussian_tensor(&mut rng, &[d, d], INIT_STD));
        p.insert(&format!("{pre}cross.bq"), Tensor::zeros(&[d]));
        p.insert(
            &format!("{pre}cross.wk"),
            gaussian_tensor(&mut rng, &[cfg.context_dim, d], INIT_STD),
        );
        p.insert(&format!("{pre}cross.bk"), Tensor::zeros(&[d]));
        p.insert(
            &format!("{pre}cross.wv"),
            gaussian_tensor(&mut rng, &[cfg.context_dim, d], INIT_STD),
        );
        p.insert(&format!("{pre}cross.bv"), Tensor::zeros(&[d]));
        p.insert(&format!("{pre}cross.wo"), gaussian_tensor(&mut rng, &[d, d], INIT_STD));
        p.insert(&format!("{pre}cross.bo"), Tensor::zeros(&[d]));
        p.insert(&format!("{pre}mlp.w1"), gaussian_tensor(&mut rng, &[d, hid], INIT_STD));
        p.insert(&format!("{pre}mlp.b1"), Tensor::zeros(&[hid]));
        p.insert(&format!("{pre}mlp.w2"), gaussian_tensor(&mut rng, &[hid, d], INIT_STD));
        p.insert(&format!("{pre}mlp.b2"), Tensor::zeros(&[d]));
    }
    p.insert("ctx_embed", gaussian_tensor(&mut rng, &[cfg.vocab_size, cfg.context_dim], 1.0));
    p.insert("head.w", Tensor::zeros(&[d, c]));
    p.insert("head.b", Tensor::zeros(&[c]));

    debug_assert_eq!(p.total_params(), cfg.param_count());
    Ok(p)
}

// ---------------------------------------------------------------------------
// layer kernels
// ---------------------------------------------------------------------------

struct LnCache<T> {
    xhat: Tensor<T>,
    rstd: Vec<T>,
}

fn layernorm_fwd<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, LnCache<T>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut xhat = Tensor::zeros(&[n, d]);
    let mut rstd = vec![T::ZERO; n];
    let inv_d = T::from_f64(1.0 / d as f64);
    for r in 0..n {
        let row = &x.data()[r * d..(r + 1) * d];
        let mut mean = T::ZERO;
        for &v in row {
            mean = mean.add(v);
        }
        mean = mean.mul(inv_d);
        let mut var = T::ZERO;
        for &v in row {
            let c = v.sub(mean);
            var = var.add(c.mul(c));
        }
        var = var.mul(inv_d);
        let rs = T::ONE.div(var.add(T::from_f64(LN_EPS)).sqrt());
        rstd[r] = rs;
        let out = &mut xhat.data_mut()[r * d..(r + 1) * d];
        for (o, &v) in out.iter_mut().zip(row) {
            *o = v.sub(mean).mul(rs);
        }
    }
    let cache = LnCache { xhat: xhat.clone(), rstd };
    (xhat, cache)
}

fn layernorm_bwd<T: Scalar>(cache: &LnCache<T>, d_xhat: &Tensor<T>) -> Tensor<T> {
    let (n, d) = (d_xhat.shape()[0], d_xhat.shape()[1]);
    let mut dx = Tensor::zeros(&[n, d]);
    let inv_d = T::from_f64(1.0 / d as f64);
    for r in 0..n {
        let g = &d_xhat.data()[r * d..(r + 1) * d];
        let xh = &cache.xhat.data()[r * d..(r + 1) * d];
        let mut mean_g = T::ZERO;
        let mut mean_gx = T::ZERO;
        for (gv, xv) in g.iter().zip(xh) {
            mean_g = mean_g.add(*gv);
            mean_gx = mean_gx.add(gv.mul(*xv));
        }
        mean_g = mean_g.mul(inv_d);
        mean_gx = mean_gx.mul(inv_d);
        let rs = cache.rstd[r];
        let out = &mut dx.data_mut()[r * d..(r + 1) * d];
        for i in 0..d {
            out[i] = rs.mul(g[i].sub(mean_g).sub(xh[i].mul(mean_gx)));
        }
    }
    dx
}

fn linear_fwd<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[1];
    debug_assert_eq!(w.shape()[0], din);
    let mut y = Tensor::zeros(&[n, dout]);
    gemm(n, din, dout, T::ONE, x.data(), false, w.data(), false, T::ZERO, y.data_mut());
    for r in 0..n {
        let row = &mut y.data_mut()[r * dout..(r + 1) * dout];
        for (v, bv) in row.iter_mut().zip(b.data()) {
            *v = v.add(*bv);
        }
    }
    y
}

/// Backward of `y = x @ w + b`; accumulates weight/bias grads into the
/// gradient store, returns dx.
fn linear_bwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    grads: &mut ParameterStore<T>,
    w_name: &str,
    b_name: &str,
) -> Tensor<T> {
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[1];
    let mut dx = Tensor::zeros(&[n, din]);
    gemm(n, dout, din, T::ONE, dy.data(), false, w.data(), true, T::ZERO, dx.data_mut());
    {
        let dw = grads.get_mut(w_name);
        gemm(din, n, dout, T::ONE, x.data(), true, dy.data(), false, T::ONE, dw.data_mut());
    }
    let db = grads.get_mut(b_name);
    for r in 0..n {
        let row = &dy.data()[r * dout..(r + 1) * dout];
        for (g, &v) in db.data_mut().iter_mut().zip(row) {
            *g = g.add(v);
        }
    }
    dx
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::ONE.div(T::ONE.add(T::ZERO.sub(x).exp()))
}

#[inline]
fn silu<T: Scalar>(x: T) -> T {
    x.mul(sigmoid(x))
}

#[inline]
fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s.mul(T::ONE.add(x.mul(T::ONE.sub(s))))
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let x3 = x.mul(x).mul(x);
    let inner = T::from_f64(GELU_K).mul(x.add(T::from_f64(GELU_C).mul(x3)));
    T::from_f64(0.5).mul(x).mul(T::ONE.add(inner.tanh()))
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let x2 = x.mul(x);
    let inner = T::from_f64(GELU_K).mul(x.add(T::from_f64(GELU_C).mul(x2).mul(x)));
    let th = inner.tanh();
    let sech2 = T::ONE.sub(th.mul(th));
    let d_inner = T::from_f64(GELU_K).mul(T::ONE.add(T::from_f64(3.0 * GELU_C).mul(x2)));
    T::from_f64(0.5)
        .mul(T::ONE.add(th))
        .add(T::from_f64(0.5).mul(x).mul(sech2).mul(d_inner))
}

/// Per-position rotary phase tables: `[l*h*w, 3 axes, pairs, (cos, sin)]`.
struct RopeTables<T> {
    pairs: usize,
    /// cos/sin interleaved per (position, axis, pair)
    table: Vec<T>,
}

impl<T: Scalar> RopeTables<T> {
    fn build(codes: &PositionalCodes<T>, pairs: usize) -> Self {
        let npos = codes.rope_axes.len();
        let mut table = vec![T::ZERO; npos * 3 * pairs * 2];
        for (p, axes) in codes.rope_axes.iter().enumerate() {
            for a in 0..3 {
                for j in 0..pairs {
                    let omega = ROPE_BASE.powf(-(j as f64) / pairs as f64);
                    let angle = axes[a] as f64 * omega;
                    let o = ((p * 3 + a) * pairs + j) * 2;
                    table[o] = T::from_f64(angle.cos());
                    table[o + 1] = T::from_f64(angle.sin());
                }
            }
        }
        RopeTables { pairs, table }
    }

    /// Rotate the leading `6 * pairs` dims of every head slice in place.
    /// `invert` applies the transpose rotation (used in backward).
    fn apply(&self, x: &mut Tensor<T>, n_heads: usize, head_dim: usize, npos: usize, invert: bool) {
        let n = x.shape()[0];
        let d = x.shape()[1];
        debug_assert_eq!(d, n_heads * head_dim);
        let pairs = self.pairs;
        for tok in 0..n {
            let pos = tok % npos;
            let row = &mut x.data_mut()[tok * d..(tok + 1) * d];
            for hd in 0..n_heads {
                let base = hd * head_dim;
                for a in 0..3 {
                    for j in 0..pairs {
                        let o = ((pos * 3 + a) * pairs + j) * 2;
                        let c = self.table[o];
                        let s = if invert { T::ZERO.sub(self.table[o + 1]) } else { self.table[o + 1] };
                        let i0 = base + a * 2 * pairs + 2 * j;
                        let (x0, x1) = (row[i0], row[i0 + 1]);
                        row[i0] = x0.mul(c).sub(x1.mul(s));
                        row[i0 + 1] = x0.mul(s).add(x1.mul(c));
                    }
                }
            }
        }
    }
}

/// Multi-head attention core. Computes softmax(q kᵀ / sqrt(dh)) v per head
/// over contiguous per-head copies; `kv_n` may differ from `q_n` (cross).
struct AttnCache<T> {
    /// softmax probabilities per head, kept only when `kv_n` is small (cross
    /// attention); self-attention recomputes them in backward.
    probs: Option<Vec<Tensor<T>>>,
}

#[allow(clippy::too_many_arguments)]
fn attention_fwd<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    n_heads: usize,
    keep_probs: bool,
    out: &mut Tensor<T>,
) -> AttnCache<T> {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let m = k.shape()[0];
    let dh = d / n_heads;
    let alpha = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut qh = vec![T::ZERO; n * dh];
    let mut kh = vec![T::ZERO; m * dh];
    let mut vh = vec![T::ZERO; m * dh];
    let mut scores = vec![T::ZERO; n * m];
    let mut oh = vec![T::ZERO; n * dh];
    let mut probs_all = if keep_probs { Some(Vec::with_capacity(n_heads)) } else { None };
    for hd in 0..n_heads {
        copy_head(q.data(), &mut qh, n, d, hd, dh);
        copy_head(k.data(), &mut kh, m, d, hd, dh);
        copy_head(v.data(), &mut vh, m, d, hd, dh);
        gemm(n, dh, m, alpha, &qh, false, &kh, true, T::ZERO, &mut scores);
        softmax_rows(&mut scores, n, m);
        if let Some(ps) = probs_all.as_mut() {
            ps.push(Tensor::from_vec(&[n, m], scores.clone()).expect("probs shape"));
        }
        gemm(n, m, dh, T::ONE, &scores, false, &vh, false, T::ZERO, &mut oh);
        write_head(&oh, out.data_mut(), n, d, hd, dh);
    }
    AttnCache { probs: probs_all }
}

/// Backward of the attention core. Accumulates into dq, dk, dv.
#[allow(clippy::too_many_arguments)]
fn attention_bwd<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    n_heads: usize,
    cache: &AttnCache<T>,
    d_out: &Tensor<T>,
    dq: &mut Tensor<T>,
    dk: &mut Tensor<T>,
    dv: &mut Tensor<T>,
) {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let m = k.shape()[0];
    let dh = d / n_heads;
    let alpha = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut qh = vec![T::ZERO; n * dh];
    let mut kh = vec![T::ZERO; m * dh];
    let mut vh = vec![T::ZERO; m * dh];
    let mut doh = vec![T::ZERO; n * dh];
    let mut probs = vec![T::ZERO; n * m];
    let mut dscores = vec![T::ZERO; n * m];
    let mut scratch = vec![T::ZERO; n.max(m) * dh];
    for hd in 0..n_heads {
        copy_head(q.data(), &mut qh, n, d, hd, dh);
        copy_head(k.data(), &mut kh, m, d, hd, dh);
        copy_head(v.data(), &mut vh, m, d, hd, dh);
        copy_head(d_out.data(), &mut doh, n, d, hd, dh);
        match cache.probs.as_ref() {
            Some(ps) => probs.copy_from_slice(ps[hd].data()),
            None => {
                gemm(n, dh, m, alpha, &qh, false, &kh, true, T::ZERO, &mut probs);
                softmax_rows(&mut probs, n, m);
            }
        }
        // dV += Pᵀ dO
        gemm(m, n, dh, T::ONE, &probs, true, &doh, false, T::ZERO, &mut scratch[..m * dh]);
        accumulate_head(&scratch[..m * dh], dv.data_mut(), m, d, hd, dh);
        // dP = dO Vᵀ
        gemm(n, dh, m, T::ONE, &doh, false, &vh, true, T::ZERO, &mut dscores);
        // dS = P ⊙ (dP − rowsum(dP ⊙ P))
        for r in 0..n {
            let p_row = &probs[r * m..(r + 1) * m];
            let ds_row = &mut dscores[r * m..(r + 1) * m];
            let mut dot = T::ZERO;
            for (pv, dv_) in p_row.iter().zip(ds_row.iter()) {
                dot = dot.add(pv.mul(*dv_));
            }
            for (pv, dv_) in p_row.iter().zip(ds_row.iter_mut()) {
                *dv_ = pv.mul(dv_.sub(dot));
            }
        }
        // dQ += α dS K ; dK += α dSᵀ Q
        gemm(n, m, dh, alpha, &dscores, false, &kh, false, T::ZERO, &mut scratch[..n * dh]);
        accumulate_head(&scratch[..n * dh], dq.data_mut(), n, d, hd, dh);
        gemm(m, n, dh, alpha, &dscores, true, &qh, false, T::ZERO, &mut scratch[..m * dh]);
        accumulate_head(&scratch[..m * dh], dk.data_mut(), m, d, hd, dh);
    }
}

#[inline]
fn copy_head<T: Scalar>(src: &[T], dst: &mut [T], rows: usize, d: usize, head: usize, dh: usize) {
    for r in 0..rows {
        dst[r * dh..(r + 1) * dh].copy_from_slice(&src[r * d + head * dh..r * d + (head + 1) * dh]);
    }
}

#[inline]
fn write_head<T: Scalar>(src: &[T], dst: &mut [T], rows: usize, d: usize, head: usize, dh: usize) {
    for r in 0..rows {
        dst[r * d + head * dh..r * d + (head + 1) * dh].copy_from_slice(&src[r * dh..(r + 1) * dh]);
    }
}

#[inline]
fn accumulate_head<T: Scalar>(
    src: &[T],
    dst: &mut [T],
    rows: usize,
    d: usize,
    head: usize,
    dh: usize,
) {
    for r in 0..rows {
        let drow = &mut dst[r * d + head * dh..r * d + (head + 1) * dh];
        for (o, &v) in drow.iter_mut().zip(&src[r * dh..(r + 1) * dh]) {
            *o = o.add(v);
        }
    }
}

/// Broadcast a per-feature vector over rows: `y = x .* (1 + scale) + shift`.
fn modulate_fwd<T: Scalar>(x: &Tensor<T>, scale: &[T], shift: &[T]) -> Tensor<T> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut y = Tensor::zeros(&[n, d]);
    for r in 0..n {
        let src = &x.data()[r * d..(r + 1) * d];
        let dst = &mut y.data_mut()[r * d..(r + 1) * d];
        for i in 0..d {
            dst[i] = src[i].mul(T::ONE.add(scale[i])).add(shift[i]);
        }
    }
    y
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

struct BlockCache<T> {
    ln1: LnCache<T>,
    u_sa: Tensor<T>,
    q_r: Tensor<T>,
    k_r: Tensor<T>,
    v: Tensor<T>,
    att_cat: Tensor<T>,
    o_sa: Tensor<T>,
    ln2: LnCache<T>,
    q_c: Tensor<T>,
    k_c: Tensor<T>,
    v_c: Tensor<T>,
    cross_cache: AttnCache<T>,
    cat_c: Tensor<T>,
    ln3: LnCache<T>,
    u_mlp: Tensor<T>,
    h_pre: Tensor<T>,
    h_act: Tensor<T>,
    y_mlp: Tensor<T>,
    m6: Vec<T>,
}

pub(crate) struct ForwardCache<T> {
    x0: Tensor<T>,
    ctx_tokens: Tensor<T>,
    ctx_ids: Vec<i64>,
    femb: Vec<T>,
    e1: Vec<T>,
    a1: Vec<T>,
    e: Vec<T>,
    silu_e: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    lnf: LnCache<T>,
    x_final: Tensor<T>,
    xf: Tensor<T>,
    npos: usize,
    rope: RopeTables<T>,
}

/// Context token matrix looked up from descriptor ids.
pub fn embed_context<T: Scalar>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    ids: &[i64],
) -> Result<Tensor<T>> {
    if ids.is_empty() {
        return Err(Error::Invalid("context needs at least one id".into()));
    }
    let table = params.get("ctx_embed");
    let dim = cfg.context_dim;
    let mut out = Tensor::zeros(&[ids.len(), dim]);
    for (r, &id) in ids.iter().enumerate() {
        if id < 0 || id as usize >= cfg.vocab_size {
            return Err(Error::Invalid(format!(
                "context id {id} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let src = &table.data()[id as usize * dim..(id as usize + 1) * dim];
        out.data_mut()[r * dim..(r + 1) * dim].copy_from_slice(src);
    }
    Ok(out)
}

fn check_forward_inputs<T: Scalar>(
    cfg: &ModelConfig,
    fused: &FusedLatent<T>,
    sigma: f64,
) -> Result<()> {
    let (l, h, w, c) = cfg.latent_dims();
    if (fused.l, fused.h, fused.w, fused.channels, fused.temporal)
        != (l, h, w, c, cfg.shape.temporal)
    {
        return Err(Error::Shape(format!(
            "fused latent dims ({}, {}, {}, C={}, t={}) disagree with config ({l}, {h}, {w}, C={c}, t={})",
            fused.l, fused.h, fused.w, fused.channels, fused.temporal, cfg.shape.temporal
        )));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Invalid(format!("forward needs finite sigma > 0, got {sigma}")));
    }
    if !fused.data.all_finite() {
        return Err(Error::NonFinite("fused latent input".into()));
    }
    Ok(())
}

fn fourier_embed<T: Scalar>(cfg: &ModelConfig, sigma: f64) -> Vec<T> {
    // EDM noise conditioning: embed c_noise = ln(sigma) / 4.
    let u = sigma.ln() / 4.0;
    let freqs = cfg.fourier_freqs;
    let mut out = vec![T::ZERO; 2 * freqs];
    for j in 0..freqs {
        let omega = if freqs == 1 {
            1.0
        } else {
            FOURIER_BASE.powf(-(j as f64) / (freqs - 1) as f64)
        };
        out[2 * j] = T::from_f64((omega * u).cos());
        out[2 * j + 1] = T::from_f64((omega * u).sin());
    }
    out
}

fn vec_linear_fwd<T: Scalar>(x: &[T], w: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(x.len(), din);
    let mut y = vec![T::ZERO; dout];
    gemm(1, din, dout, T::ONE, x, false, w.data(), false, T::ZERO, &mut y);
    for (v, bv) in y.iter_mut().zip(b.data()) {
        *v = v.add(*bv);
    }
    y
}

pub(crate) fn forward_cached<T: Scalar>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    fused: &FusedLatent<T>,
    ctx_ids: &[i64],
    sigma: f64,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    check_forward_inputs(cfg, fused, sigma)?;
    let (l, h, w, _c) = cfg.latent_dims();
    let npos = l * h * w;
    let n = 3 * npos;
    let d = cfg.d_model;
    let f_in = cfg.token_width();

    let x0 = Tensor::from_vec(&[n, f_in], fused.data.data().to_vec())?;
    let ctx_tokens = embed_context(params, cfg, ctx_ids)?;

    // input projection plus learned positions shared across chunks
    let mut x = linear_fwd(&x0, params.get("input_proj.w"), params.get("input_proj.b"));
    let p_learn = params.get("p_learn");
    for tok in 0..n {
        let pos = tok % npos;
        let row = &mut x.data_mut()[tok * d..(tok + 1) * d];
        for (v, &pv) in row.iter_mut().zip(&p_learn.data()[pos * d..(pos + 1) * d]) {
            *v = v.add(pv);
        }
    }

    // noise embedding: Fourier features of ln(sigma)/4 through a 2-layer MLP
    let femb = fourier_embed::<T>(cfg, sigma);
    let e1 = vec_linear_fwd(&femb, params.get("noise_mlp.w1"), params.get("noise_mlp.b1"));
    let a1: Vec<T> = e1.iter().map(|&v| silu(v)).collect();
    let e = vec_linear_fwd(&a1, params.get("noise_mlp.w2"), params.get("noise_mlp.b2"));
    let silu_e: Vec<T> = e.iter().map(|&v| silu(v)).collect();

    let codes = positional_codes(
        l,
        h,
        w,
        d,
        cfg.n_heads,
        params.get("p_learn").clone(),
    )?;
    let rope = RopeTables::build(&codes, cfg.rope_pairs());

    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for b in 0..cfg.n_blocks {
        let pre = format!("block{b}.");
        let x_in = x.clone();

        let m6 = vec_linear_fwd(
            &silu_e,
            params.get(&format!("{pre}mod.w")),
            params.get(&format!("{pre}mod.b")),
        );
        let (shift_sa, rest) = m6.split_at(d);
        let (scale_sa, rest) = rest.split_at(d);
        let (gate_sa, rest) = rest.split_at(d);
        let (shift_mlp, rest) = rest.split_at(d);
        let (scale_mlp, gate_mlp) = rest.split_at(d);

        // modulated self-attention with rotary position codes
        let (xhat1, ln1) = layernorm_fwd(&x_in);
        let u_sa = modulate_fwd(&xhat1, scale_sa, shift_sa);
        let mut q = linear_fwd(&u_sa, params.get(&format!("{pre}attn.wq")), params.get(&format!("{pre}attn.bq")));
        let mut k = linear_fwd(&u_sa, params.get(&format!("{pre}attn.wk")), params.get(&format!("{pre}attn.bk")));
        let v = linear_fwd(&u_sa, params.get(&format!("{pre}attn.wv")), params.get(&format!("{pre}attn.bv")));
        rope.apply(&mut q, cfg.n_heads, cfg.head_dim(), npos, false);
        rope.apply(&mut k, cfg.n_heads, cfg.head_dim(), npos, false);
        let mut att_cat = Tensor::zeros(&[n, d]);
        attention_fwd(&q, &k, &v, cfg.n_heads, false, &mut att_cat);
        let o_sa = linear_fwd(&att_cat, params.get(&format!("{pre}attn.wo")), params.get(&format!("{pre}attn.bo")));
        let mut x_mid = x_in.clone();
        for tok in 0..n {
            let row = &mut x_mid.data_mut()[tok * d..(tok + 1) * d];
            let orow = &o_sa.data()[tok * d..(tok + 1) * d];
            for i in 0..d {
                row[i] = row[i].add(gate_sa[i].mul(orow[i]));
            }
        }

        // cross-attention over context tokens (unmodulated)
        let (xhat2, ln2) = layernorm_fwd(&x_mid);
        let q_c = linear_fwd(&xhat2, params.get(&format!("{pre}cross.wq")), params.get(&format!("{pre}cross.bq")));
        let k_c = linear_fwd(&ctx_tokens, params.get(&format!("{pre}cross.wk")), params.get(&format!("{pre}cross.bk")));
        let v_c = linear_fwd(&ctx_tokens, params.get(&format!("{pre}cross.wv")), params.get(&format!("{pre}cross.bv")));
        let mut cat_c = Tensor::zeros(&[n, d]);
        let cross_cache = attention_fwd(&q_c, &k_c, &v_c, cfg.n_heads, true, &mut cat_c);
        let o_c = linear_fwd(&cat_c, params.get(&format!("{pre}cross.wo")), params.get(&format!("{pre}cross.bo")));
        let mut x_mid2 = x_mid.clone();
        x_mid2.add_assign(&o_c);

        // modulated MLP
        let (xhat3, ln3) = layernorm_fwd(&x_mid2);
        let u_mlp = modulate_fwd(&xhat3, scale_mlp, shift_mlp);
        let h_pre = linear_fwd(&u_mlp, params.get(&format!("{pre}mlp.w1")), params.get(&format!("{pre}mlp.b1")));
        let h_act = h_pre.map(gelu);
        let y_mlp = linear_fwd(&h_act, params.get(&format!("{pre}mlp.w2")), params.get(&format!("{pre}mlp.b2")));
        let mut x_out = x_mid2.clone();
        for tok in 0..n {
            let row = &mut x_out.data_mut()[tok * d..(tok + 1) * d];
            let yrow = &y_mlp.data()[tok * d..(tok + 1) * d];
            for i in 0..d {
                row[i] = row[i].add(gate_mlp[i].mul(yrow[i]));
            }
        }

        blocks.push(BlockCache {
            ln1,
            u_sa,
            q_r: q,
            k_r: k,
            v,
            att_cat,
            o_sa,
            ln2,
            q_c,
            k_c,
            v_c,
            cross_cache,
            cat_c,
            ln3,
            u_mlp,
            h_pre,
            h_act,
            y_mlp,
            m6,
        });
        x = x_out;
    }

    let x_final = x;
    let (xf, lnf) = layernorm_fwd(&x_final);
    let out = linear_fwd(&xf, params.get("head.w"), params.get("head.b"));

    let cache = ForwardCache {
        x0,
        ctx_tokens,
        ctx_ids: ctx_ids.to_vec(),
        femb,
        e1,
        a1,
        e,
        silu_e,
        blocks,
        lnf,
        x_final,
        xf,
        npos,
        rope,
    };
    Ok((out, cache))
}

/// Split flat output tokens `[3*l*h*w, C]` into per-chunk latents.
pub fn split_chunks<T: Scalar>(
    out_tokens: &Tensor<T>,
    l: usize,
    h: usize,
    w: usize,
    c: usize,
) -> [Tensor<T>; 3] {
    let npos = l * h * w;
    Chunk::ALL.map(|k| {
        let base = (k as usize) * npos * c;
        Tensor::from_vec(&[l, h, w, c], out_tokens.data()[base..base + npos * c].to_vec())
            .expect("chunk slice")
    })
}

/// Raw denoiser evaluation: three chunk predictions of shape `[l, h, w, C]`.
pub fn forward<T: Scalar>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    fused: &FusedLatent<T>,
    ctx_ids: &[i64],
    sigma: f64,
) -> Result<[Tensor<T>; 3]> {
    let (out, _cache) = forward_cached(params, cfg, fused, ctx_ids, sigma)?;
    let (l, h, w, c) = cfg.latent_dims();
    Ok(split_chunks(&out, l, h, w, c))
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

pub(crate) fn backward<T: Scalar>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    cache: &ForwardCache<T>,
    d_out: &Tensor<T>,
    grads: &mut ParameterStore<T>,
) {
    let n = cache.x_final.shape()[0];
    let d = cfg.d_model;
    let npos = cache.npos;

    // output head + final norm
    let d_xf = linear_bwd(
            &cache.xf,
            params.get("head.w"),
            d_out,
            grads,
            "head.w",
            "head.b",
        );
    let mut dx = layernorm_bwd(&cache.lnf, &d_xf);

    // accumulated gradient into the shared noise embedding e
    let mut d_silu_e = vec![T::ZERO; d];

    for (b, blk) in cache.blocks.iter().enumerate().rev() {
        let pre = format!("block{b}.");
        let (shift_sa, rest) = blk.m6.split_at(d);
        let (scale_sa, rest) = rest.split_at(d);
        let (gate_sa, rest) = rest.split_at(d);
        let (shift_mlp, rest) = rest.split_at(d);
        let (scale_mlp, gate_mlp) = rest.split_at(d);
        let _ = (shift_sa, shift_mlp);
        let mut dm6 = vec![T::ZERO; 6 * d];

        // ---- MLP sublayer: x_out = x_mid2 + gate ⊙ y ----
        let mut dy = Tensor::zeros(&[n, d]);
        {
            let (dgate, dyd) = (&mut dm6[5 * d..6 * d], dy.data_mut());
            for tok in 0..n {
                let dxr = &dx.data()[tok * d..(tok + 1) * d];
                let yr = &blk.y_mlp.data()[tok * d..(tok + 1) * d];
                for i in 0..d {
                    dgate[i] = dgate[i].add(dxr[i].mul(yr[i]));
                    dyd[tok * d + i] = dxr[i].mul(gate_mlp[i]);
                }
            }
        }
        let d_hact = linear_bwd(
            &blk.h_act,
            params.get(&format!("{pre}mlp.w2")),
            &dy,
            grads,
            &format!("{pre}mlp.w2"),
            &format!("{pre}mlp.b2"),
        );
        let mut d_hpre = d_hact;
        for (g, &x) in d_hpre.data_mut().iter_mut().zip(blk.h_pre.data()) {
            *g = g.mul(gelu_grad(x));
        }
        let d_umlp = linear_bwd(
            &blk.u_mlp,
            params.get(&format!("{pre}mlp.w1")),
            &d_hpre,
            grads,
            &format!("{pre}mlp.w1"),
            &format!("{pre}mlp.b1"),
        );
        // u = xhat (1 + scale) + shift
        let mut d_xhat3 = Tensor::zeros(&[n, d]);
        {
            let (dshift, dscale) = {
                let (a, b2) = dm6.split_at_mut(4 * d);
                (&mut a[3 * d..4 * d], &mut b2[..d])
            };
            for tok in 0..n {
                let du = &d_umlp.data()[tok * d..(tok + 1) * d];
                let xh = &blk.ln3.xhat.data()[tok * d..(tok + 1) * d];
                let out = &mut d_xhat3.data_mut()[tok * d..(tok + 1) * d];
                for i in 0..d {
                    dshift[i] = dshift[i].add(du[i]);
                    dscale[i] = dscale[i].add(du[i].mul(xh[i]));
                    out[i] = du[i].mul(T::ONE.add(scale_mlp[i]));
                }
            }
        }
        let d_from_ln3 = layernorm_bwd(&blk.ln3, &d_xhat3);
        dx.add_assign(&d_from_ln3); // residual: dx flows to x_mid2 both ways

        // ---- cross-attention sublayer: x_mid2 = x_mid + o_c ----
        let d_catc = linear_bwd(
            &blk.cat_c,
            params.get(&format!("{pre}cross.wo")),
            &dx,
            grads,
            &format!("{pre}cross.wo"),
            &format!("{pre}cross.bo"),
        );
        let n_ctx = blk.k_c.shape()[0];
        let mut d_qc = Tensor::zeros(&[n, d]);
        let mut d_kc = Tensor::zeros(&[n_ctx, d]);
        let mut d_vc = Tensor::zeros(&[n_ctx, d]);
        attention_bwd(
            &blk.q_c,
            &blk.k_c,
            &blk.v_c,
            cfg.n_heads,
            &blk.cross_cache,
            &d_catc,
            &mut d_qc,
            &mut d_kc,
            &mut d_vc,
        );
        let d_xhat2 = linear_bwd(
            &blk.ln2.xhat,
            params.get(&format!("{pre}cross.wq")),
            &d_qc,
            grads,
            &format!("{pre}cross.wq"),
            &format!("{pre}cross.bq"),
        );
        let mut d_ctx = linear_bwd(
            &cache.ctx_tokens,
            params.get(&format!("{pre}cross.wk")),
            &d_kc,
            grads,
            &format!("{pre}cross.wk"),
            &format!("{pre}cross.bk"),
        );
        let d_ctx_v = linear_bwd(
            &cache.ctx_tokens,
            params.get(&format!("{pre}cross.wv")),
            &d_vc,
            grads,
            &format!("{pre}cross.wv"),
            &format!("{pre}cross.bv"),
        );
        d_ctx.add_assign(&d_ctx_v);
        scatter_ctx_grad(grads, &cache.ctx_ids, &d_ctx, cfg.context_dim);
        let d_from_ln2 = layernorm_bwd(&blk.ln2, &d_xhat2);
        dx.add_assign(&d_from_ln2);

        // ---- self-attention sublayer: x_mid = x_in + gate ⊙ o_sa ----
        let mut d_osa = Tensor::zeros(&[n, d]);
        {
            let dgate = &mut dm6[2 * d..3 * d];
            for tok in 0..n {
                let dxr = &dx.data()[tok * d..(tok + 1) * d];
                let orow = &blk.o_sa.data()[tok * d..(tok + 1) * d];
                let out = &mut d_osa.data_mut()[tok * d..(tok + 1) * d];
                for i in 0..d {
                    dgate[i] = dgate[i].add(dxr[i].mul(orow[i]));
                    out[i] = dxr[i].mul(gate_sa[i]);
                }
            }
        }
        let d_attcat = linear_bwd(
            &blk.att_cat,
            params.get(&format!("{pre}attn.wo")),
            &d_osa,
            grads,
            &format!("{pre}attn.wo"),
            &format!("{pre}attn.bo"),
        );
        let mut d_qr = Tensor::zeros(&[n, d]);
        let mut d_kr = Tensor::zeros(&[n, d]);
        let mut d_v = Tensor::zeros(&[n, d]);
        attention_bwd(
            &blk.q_r,
            &blk.k_r,
            &blk.v,
            cfg.n_heads,
            &AttnCache { probs: None },
            &d_attcat,
            &mut d_qr,
            &mut d_kr,
            &mut d_v,
        );
        // invert the rotary rotation on the query/key grads
        cache.rope.apply(&mut d_qr, cfg.n_heads, cfg.head_dim(), npos, true);
        cache.rope.apply(&mut d_kr, cfg.n_heads, cfg.head_dim(), npos, true);
        let mut d_usa = linear_bwd(
            &blk.u_sa,
            params.get(&format!("{pre}attn.wq")),
            &d_qr,
            grads,
            &format!("{pre}attn.wq"),
            &format!("{pre}attn.bq"),
        );
        let d_usa_k = linear_bwd(
            &blk.u_sa,
            params.get(&format!("{pre}attn.wk")),
            &d_kr,
            grads,
            &format!("{pre}attn.wk"),
            &format!("{pre}attn.bk"),
        );
        let d_usa_v = linear_bwd(
            &blk.u_sa,
            params.get(&format!("{pre}attn.wv")),
            &d_v,
            grads,
            &format!("{pre}attn.wv"),
            &format!("{pre}attn.bv"),
        );
        d_usa.add_assign(&d_usa_k);
        d_usa.add_assign(&d_usa_v);
        let mut d_xhat1 = Tensor::zeros(&[n, d]);
        {
            let (dshift, dscale) = {
                let (a, b2) = dm6.split_at_mut(d);
                (&mut a[..d], &mut b2[..d])
            };
            for tok in 0..n {
                let du = &d_usa.data()[tok * d..(tok + 1) * d];
                let xh = &blk.ln1.xhat.data()[tok * d..(tok + 1) * d];
                let out = &mut d_xhat1.data_mut()[tok * d..(tok + 1) * d];
                for i in 0..d {
                    dshift[i] = dshift[i].add(du[i]);
                    dscale[i] = dscale[i].add(du[i].mul(xh[i]));
                    out[i] = du[i].mul(T::ONE.add(scale_sa[i]));
                }
            }
        }
        let d_from_ln1 = layernorm_bwd(&blk.ln1, &d_xhat1);
        dx.add_assign(&d_from_ln1);

        // ---- modulation head: m6 = silu(e) @ mod.w + mod.b ----
        {
            let dw = grads.get_mut(&format!("{pre}mod.w"));
            for i in 0..d {
                let row = &mut dw.data_mut()[i * 6 * d..(i + 1) * 6 * d];
                let se = cache.silu_e[i];
                for (g, &dm) in row.iter_mut().zip(&dm6) {
                    *g = g.add(se.mul(dm));
                }
            }
            let db = grads.get_mut(&format!("{pre}mod.b"));
            for (g, &dm) in db.data_mut().iter_mut().zip(&dm6) {
                *g = g.add(dm);
            }
            let w = params.get(&format!("{pre}mod.w"));
            for i in 0..d {
                let row = &w.data()[i * 6 * d..(i + 1) * 6 * d];
                let mut s = T::ZERO;
                for (wv, &dm) in row.iter().zip(&dm6) {
                    s = s.add(wv.mul(dm));
                }
                d_silu_e[i] = d_silu_e[i].add(s);
            }
        }
    }

    // input projection and learned positions
    {
        let dp = grads.get_mut("p_learn");
        for tok in 0..n {
            let pos = tok % npos;
            let row = &mut dp.data_mut()[pos * d..(pos + 1) * d];
            let g = &dx.data()[tok * d..(tok + 1) * d];
            for i in 0..d {
                row[i] = row[i].add(g[i]);
            }
        }
    }
    let _d_x0 = linear_bwd(
            &cache.x0,
            params.get("input_proj.w"),
            &dx,
            grads,
            "input_proj.w",
            "input_proj.b",
        );

    // noise MLP: e = w2 silu(w1 femb + b1) + b2, then silu applied per block
    let mut de = vec![T::ZERO; d];
    for i in 0..d {
        de[i] = d_silu_e[i].mul(silu_grad(cache.e[i]));
    }
    {
        let de_t = Tensor::from_vec(&[1, d], de.clone()).expect("de shape");
        let a1_t = Tensor::from_vec(&[1, d], cache.a1.clone()).expect("a1 shape");
        let d_a1 = linear_bwd(
            &a1_t,
            params.get("noise_mlp.w2"),
            &de_t,
            grads,
            "noise_mlp.w2",
            "noise_mlp.b2",
        );
        let mut d_e1 = d_a1;
        for (g, &x) in d_e1.data_mut().iter_mut().zip(&cache.e1) {
            *g = g.mul(silu_grad(x));
        }
        let femb_t =
            Tensor::from_vec(&[1, cache.femb.len()], cache.femb.clone()).expect("femb shape");
        let _ = linear_bwd(
            &femb_t,
            params.get("noise_mlp.w1"),
            &d_e1,
            grads,
            "noise_mlp.w1",
            "noise_mlp.b1",
        );
    }
}

fn scatter_ctx_grad<T: Scalar>(
    grads: &mut ParameterStore<T>,
    ids: &[i64],
    d_ctx: &Tensor<T>,
    dim: usize,
) {
    let table = grads.get_mut("ctx_embed");
    for (r, &id) in ids.iter().enumerate() {
        let dst = &mut table.data_mut()[id as usize * dim..(id as usize + 1) * dim];
        let src = &d_ctx.data()[r * dim..(r + 1) * dim];
        for (g, &v) in dst.iter_mut().zip(src) {
            *g = g.add(v);
        }
    }
}

// ---------------------------------------------------------------------------
// EDM preconditioning and the training loss
// ---------------------------------------------------------------------------

/// EDM preconditioning coefficients at noise level `sigma`.
pub fn edm_coeffs(sigma: f64, sigma_data: f64) -> (f64, f64, f64) {
    let s2 = sigma * sigma;
    let d2 = sigma_data * sigma_data;
    let c_skip = d2 / (s2 + d2);
    let c_out = sigma * sigma_data / (s2 + d2).sqrt();
    let c_in = 1.0 / (s2 + d2).sqrt();
    (c_skip, c_out, c_in)
}

fn precondition_impl<T: Scalar>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    x: &FusedLatent<T>,
    ctx_ids: &[i64],
    sigma: f64,
    want_cache: bool,
) -> Result<([Tensor<T>; 3], Option<(ForwardCache<T>, f64)>)> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    let chunks = [
        x.latent_chunk(Chunk::Video),
        x.latent_chunk(Chunk::Albedo),
        x.latent_chunk(Chunk::Relit),
    ];
    if sigma == 0.0 {
        // c_skip = 1, c_out = 0: the preconditioned denoiser is the identity.
        return Ok((chunks, None));
    }
    let (c_skip, c_out, c_in) = edm_coeffs(sigma, cfg.sigma_data);
    let mut net_in = x.clone();
    net_in.scale_latent_channels(T::from_f64(c_in));
    let (out_tokens, cache) = forward_cached(params, cfg, &net_in, ctx_ids, sigma)?;
    let (l, h, w, c) = cfg.latent_dims();
    let f_chunks = split_chunks(&out_tokens, l, h, w, c);
    let mut denoised = chunks;
    for (dk, fk) in denoised.iter_mut().zip(&f_chunks) {
        dk.scale(T::from_f64(c_skip));
        dk.axpy(T::from_f64(c_out), fk);
    }
    Ok((denoised, if want_cache { Some((cache, c_out)) } else { None }))
}

/// Denoised chunk predictions `D(x; sigma) = c_skip x + c_out F(c_in x)`,
/// applied to the latent channels only; conditioning channels pass through
/// to the network unscaled. `sigma = 0` returns the latents unchanged.
pub fn precondition<T: Scalar>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    x: &FusedLatent<T>,
    ctx_ids: &[i64],
    sigma: f64,
) -> Result<[Tensor<T>; 3]> {
    let (denoised, _) = precondition_impl(params, cfg, x, ctx_ids, sigma, false)?;
    Ok(denoised)
}

/// One fully prepared training example: the noisy fused latent (condition
/// token already substituted), the clean per-chunk targets, context ids,
/// and the drawn noise level.
#[derive(Debug, Clone)]
pub struct PreparedExample<T> {
    pub fused: FusedLatent<T>,
    pub targets: [Tensor<T>; 3],
    pub ctx_ids: Vec<i64>,
    pub sigma: f64,
}

/// Mean-per-element squared error per chunk, summed over the three chunks.
pub fn triplet_loss<T: Scalar>(denoised: &[Tensor<T>; 3], targets: &[Tensor<T>; 3]) -> f64 {
    let mut loss = 0.0;
    for (d, t) in denoised.iter().zip(targets) {
        let n = d.len() as f64;
        let mut acc = 0.0;
        for (a, b) in d.data().iter().zip(t.data()) {
            let diff = a.to_f64() - b.to_f64();
            acc += diff * diff;
        }
        loss += acc / n;
    }
    loss
}

/// Exact gradients of the joint denoising objective over a prepared batch:
/// per chunk mean-per-element squared error between the denoised prediction
/// and the clean latent, summed over chunks, averaged over the batch.
pub fn loss_and_grads<T: Scalar>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    batch: &[PreparedExample<T>],
) -> Result<(f64, ParameterStore<T>)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty training batch".into()));
    }
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    let inv_batch = 1.0 / batch.len() as f64;
    let (l, h, w, c) = cfg.latent_dims();
    let npos = l * h * w;
    for ex in batch {
        let (denoised, cache_out) =
            precondition_impl(params, cfg, &ex.fused, &ex.ctx_ids, ex.sigma, true)?;
        let loss = triplet_loss(&denoised, &ex.targets);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at sigma {}", ex.sigma)));
        }
        total += loss * inv_batch;
        let Some((cache, c_out)) = cache_out else {
            continue; // sigma == 0: no parameter dependence
        };
        // dL/dF = 2 (D - z0) * c_out / (l h w C) / batch, per chunk
        let mut d_out = Tensor::zeros(&[3 * npos, c]);
        let elems = (npos * c) as f64;
        for (k, (dk, tk)) in denoised.iter().zip(&ex.targets).enumerate() {
            let scale = 2.0 * c_out * inv_batch / elems;
            for i in 0..npos * c {
                let diff = dk.data()[i].to_f64() - tk.data()[i].to_f64();
                d_out.data_mut()[k * npos * c + i] = T::from_f64(diff * scale);
            }
        }
        backward(params, cfg, &cache, &d_out, &mut grads);
    }
    Ok((total, grads))
}
