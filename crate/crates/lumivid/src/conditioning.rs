//! Assembly of everything the denoiser consumes: condition/modality masks,
//! the per-chunk conditioning field, the environment-map latent, the fused
//! three-chunk latent tensor, shared positional codes, and the first-frame
//! condition token.
//!
//! Fused token layout, per chunk and per token (width 4C + 6t + 4):
//!   [0, C)            noisy latent channels
//!   [C, 4C)           env latent for the relit chunk, zeros elsewhere
//!   [4C, 4C+6t)       grouped Plücker embedding
//!   [4C+6t]           condition mask (1 only on chunk V, temporal slice 0)
//!   [4C+6t+1, +4)     one-hot modality mask (V, a, E)

use crate::lighting::EnvBuffers;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::{self, ShapeConfig};
use crate::{Error, Result};

/// The three generated modalities, in fixed chunk order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Chunk {
    Video = 0,
    Albedo = 1,
    Relit = 2,
}

impl Chunk {
    pub const ALL: [Chunk; 3] = [Chunk::Video, Chunk::Albedo, Chunk::Relit];
}

/// Width of the conditioning field c = [r; M_cond; M_mod].
pub fn conditioning_width(t: usize) -> usize {
    6 * t + 4
}

/// Width of one fused token: latent (C) + env padding (3C) + conditioning.
pub fn fused_width(c: usize, t: usize) -> usize {
    4 * c + conditioning_width(t)
}

/// Binary condition mask and one-hot modality mask for one chunk.
/// M_cond is 1 only on temporal slice 0 of the video chunk.
pub fn build_masks<T: Scalar>(
    l: usize,
    h: usize,
    w: usize,
    chunk: Chunk,
) -> (Tensor<T>, Tensor<T>) {
    let mut cond = Tensor::zeros(&[l, h, w]);
    if chunk == Chunk::Video {
        for v in cond.data_mut()[..h * w].iter_mut() {
            *v = T::ONE;
        }
    }
    let mut modal = Tensor::zeros(&[l, h, w, 3]);
    let slot = chunk as usize;
    for tok in 0..l * h * w {
        modal.data_mut()[tok * 3 + slot] = T::ONE;
    }
    (cond, modal)
}

/// Concatenate [grouped Plücker; M_cond; M_mod] into the conditioning field.
pub fn assemble_conditioning<T: Scalar>(
    r_grouped: &Tensor<T>,
    chunk: Chunk,
) -> Result<Tensor<T>> {
    let shape = r_grouped.shape();
    if shape.len() != 4 || shape[3] % 6 != 0 {
        return Err(Error::Shape(format!(
            "grouped Plücker field must be [l,h,w,6t], got {shape:?}"
        )));
    }
    let (l, h, w, rw) = (shape[0], shape[1], shape[2], shape[3]);
    let width = rw + 4;
    let (cond, modal) = build_masks::<T>(l, h, w, chunk);
    let mut out = Tensor::zeros(&[l, h, w, width]);
    let data = out.data_mut();
    for tok in 0..l * h * w {
        let dst = tok * width;
        data[dst..dst + rw].copy_from_slice(&r_grouped.data()[tok * rw..(tok + 1) * rw]);
        data[dst + rw] = cond.data()[tok];
        data[dst + rw + 1..dst + rw + 4].copy_from_slice(&modal.data()[tok * 3..tok * 3 + 3]);
    }
    Ok(out)
}

/// Encode the three env buffers as static videos (tiled to L frames) and
/// concatenate their latents on the feature axis: `[l, h, w, 3C]`.
pub fn encode_env_latent<T: Scalar>(
    buffers: &EnvBuffers,
    cfg: &ShapeConfig,
) -> Result<Tensor<T>> {
    if buffers.height != cfg.height || buffers.width != cfg.width {
        return Err(Error::Shape(format!(
            "env buffers are {}x{}, video resolution is {}x{}",
            buffers.width, buffers.height, cfg.width, cfg.height
        )));
    }
    let (l, h, w, c) = tokenizer::latent_shape(cfg)?;
    let frame = cfg.height * cfg.width * 3;
    let mut out = Tensor::zeros(&[l, h, w, 3 * c]);
    for (slot, buffer) in [&buffers.ldr, &buffers.log, &buffers.dir].into_iter().enumerate() {
        let mut video = Tensor::zeros(&[cfg.frames, cfg.height, cfg.width, 3]);
        for f in 0..cfg.frames {
            video.data_mut()[f * frame..(f + 1) * frame].copy_from_slice(buffer);
        }
        let z = tokenizer::encode(&video, cfg)?;
        for tok in 0..l * h * w {
            for ch in 0..c {
                out.data_mut()[tok * 3 * c + slot * c + ch] =
                    T::from_f64(z.data()[tok * c + ch]);
            }
        }
    }
    Ok(out)
}

/// The fully assembled denoiser input: three temporally concatenated chunks
/// with latent, env-or-zero, and conditioning channels per token.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedLatent<T> {
    /// Shape `[3l, h, w, 4C + 6t + 4]`.
    pub data: Tensor<T>,
    pub l: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub temporal: usize,
}

impl<T: Scalar> FusedLatent<T> {
    pub fn token_width(&self) -> usize {
        fused_width(self.channels, self.temporal)
    }

    pub fn tokens(&self) -> usize {
        3 * self.l * self.h * self.w
    }

    /// Extract the noisy latent channels of one chunk as `[l, h, w, C]`.
    pub fn latent_chunk(&self, chunk: Chunk) -> Tensor<T> {
        let (l, hw, c, width) = (self.l, self.h * self.w, self.channels, self.token_width());
        let mut out = Tensor::zeros(&[l, self.h, self.w, c]);
        let base = chunk as usize * l * hw;
        for tok in 0..l * hw {
            let src = (base + tok) * width;
            out.data_mut()[tok * c..(tok + 1) * c]
                .copy_from_slice(&self.data.data()[src..src + c]);
        }
        out
    }

    /// Overwrite the latent channels of one chunk.
    pub fn set_latent_chunk(&mut self, chunk: Chunk, z: &Tensor<T>) {
        let (l, hw, c, width) = (self.l, self.h * self.w, self.channels, self.token_width());
        assert_eq!(z.shape(), &[l, self.h, self.w, c], "latent chunk shape");
        let base = chunk as usize * l * hw;
        for tok in 0..l * hw {
            let dst = (base + tok) * width;
            self.data.data_mut()[dst..dst + c].copy_from_slice(&z.data()[tok * c..(tok + 1) * c]);
        }
    }

    /// Scale the latent channels of every chunk by `s`, leaving env and
    /// conditioning channels untouched.
    pub fn scale_latent_channels(&mut self, s: T) {
        let (c, width) = (self.channels, self.token_width());
        for tok in 0..self.tokens() {
            for v in self.data.data_mut()[tok * width..tok * width + c].iter_mut() {
                *v = v.mul(s);
            }
        }
    }

    /// Extract the env latent slice of the relit chunk, `[l, h, w, 3C]`.
    pub fn env_latent(&self) -> Tensor<T> {
        let (l, hw, c, width) = (self.l, self.h * self.w, self.channels, self.token_width());
        let mut out = Tensor::zeros(&[l, self.h, self.w, 3 * c]);
        let base = (Chunk::Relit as usize) * l * hw;
        for tok in 0..l * hw {
            let src = (base + tok) * width + c;
            out.data_mut()[tok * 3 * c..(tok + 1) * 3 * c]
                .copy_from_slice(&self.data.data()[src..src + 3 * c]);
        }
        out
    }
}

/// Fuse the three noisy chunk latents, the env latent, and the per-chunk
/// conditioning fields into the denoiser input tensor.
pub fn fuse<T: Scalar>(
    z_video: &Tensor<T>,
    z_albedo: &Tensor<T>,
    z_relit: &Tensor<T>,
    env_latent: &Tensor<T>,
    fields: &[Tensor<T>; 3],
) -> Result<FusedLatent<T>> {
    let shape = z_video.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape("chunk latents must be [l,h,w,C]".into()));
    }
    let (l, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    for z in [z_albedo, z_relit] {
        if z.shape() != shape.as_slice() {
            return Err(Error::Shape(format!(
                "chunk latent shapes disagree: {:?} vs {:?}",
                shape,
                z.shape()
            )));
        }
    }
    if env_latent.shape() != [l, h, w, 3 * c] {
        return Err(Error::Shape(format!(
            "env latent must be [l,h,w,3C] = [{l},{h},{w},{}], got {:?}",
            3 * c,
            env_latent.shape()
        )));
    }
    let fw = fields[0].shape();
    if fw.len() != 4 || fw[0] != l || fw[1] != h || fw[2] != w || (fw[3] < 4) {
        return Err(Error::Shape(format!("conditioning field shape {fw:?} invalid")));
    }
    let cond_w = fw[3];
    let t = (cond_w - 4) / 6;
    if conditioning_width(t) != cond_w {
        return Err(Error::Shape(format!("conditioning width {cond_w} is not 6t+4")));
    }
    for f in fields {
        if f.shape() != fw {
            return Err(Error::Shape("conditioning field shapes disagree".into()));
        }
    }

    let width = fused_width(c, t);
    let hw = h * w;
    let mut data = Tensor::zeros(&[3 * l, h, w, width]);
    let out = data.data_mut();
    for (k, z) in [z_video, z_albedo, z_relit].into_iter().enumerate() {
        for tok in 0..l * hw {
            let dst = ((k * l * hw) + tok) * width;
            out[dst..dst + c].copy_from_slice(&z.data()[tok * c..(tok + 1) * c]);
            if k == Chunk::Relit as usize {
                out[dst + c..dst + 4 * c]
                    .copy_from_slice(&env_latent.data()[tok * 3 * c..(tok + 1) * 3 * c]);
            }
            out[dst + 4 * c..dst + 4 * c + cond_w]
                .copy_from_slice(&fields[k].data()[tok * cond_w..(tok + 1) * cond_w]);
        }
    }
    Ok(FusedLatent { data, l, h, w, channels: c, temporal: t })
}

/// Replace temporal slice 0 of the video-chunk latent with the first-frame
/// latent plus a small seeded Gaussian perturbation.
pub fn substitute_condition_token<T: Scalar>(
    z_video: &Tensor<T>,
    z_image: &Tensor<T>,
    sigma_cond: f64,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    let shape = z_video.shape();
    if shape.len() != 4 {
        return Err(Error::Shape("video latent must be [l,h,w,C]".into()));
    }
    let slice = shape[1] * shape[2] * shape[3];
    if z_image.shape() != [1, shape[1], shape[2], shape[3]] {
        return Err(Error::Shape(format!(
            "first-frame latent must be [1,{},{},{}], got {:?}",
            shape[1],
            shape[2],
            shape[3],
            z_image.shape()
        )));
    }
    let mut out = z_video.clone();
    for i in 0..slice {
        let eps = rng.gaussian();
        out.data_mut()[i] = z_image.data()[i].add(T::from_f64(sigma_cond * eps));
    }
    Ok(out)
}

/// Positional information shared across the three chunks: integer rotary
/// axes per within-chunk token and the learned positional table.
#[derive(Debug, Clone)]
pub struct PositionalCodes<T> {
    /// `(frame-in-chunk, y, x)` per token of one chunk, length `l*h*w`.
    pub rope_axes: Vec<[u32; 3]>,
    /// `[l*h*w, d_model]`, added identically to each chunk after projection.
    pub p_learn: Tensor<T>,
}

/// Build positional codes. The rotary triple of token `(chunk, i, y, x)`
/// depends only on `(i, y, x)`, so corresponding tokens across modalities
/// share their codes.
pub fn positional_codes<T: Scalar>(
    l: usize,
    h: usize,
    w: usize,
    d_model: usize,
    n_heads: usize,
    p_learn: Tensor<T>,
) -> Result<PositionalCodes<T>> {
    if n_heads == 0 || d_model % n_heads != 0 {
        return Err(Error::Config(format!(
            "d_model {d_model} must divide evenly into {n_heads} heads"
        )));
    }
    let head_dim = d_model / n_heads;
    if head_dim < 6 {
        return Err(Error::Config(format!(
            "head dim {head_dim} too small for 3-axis rotary pairs (need >= 6)"
        )));
    }
    if p_learn.shape() != [l * h * w, d_model] {
        return Err(Error::Shape(format!(
            "p_learn must be [{}, {}], got {:?}",
            l * h * w,
            d_model,
            p_learn.shape()
        )));
    }
    let mut rope_axes = Vec::with_capacity(l * h * w);
    for i in 0..l {
        for y in 0..h {
            for x in 0..w {
                rope_axes.push([i as u32, y as u32, x as u32]);
            }
        }
    }
    Ok(PositionalCodes { rope_axes, p_learn })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lighting::{build_env_buffers, procedural_env, EnvMap};
    use crate::rng::Rng;

    fn toy_cfg() -> ShapeConfig {
        ShapeConfig { frames: 9, height: 32, width: 32, temporal: 2, spatial: 2, channels: 12 }
    }

    fn rand_latent(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed, 50);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gaussian()).collect()).unwrap()
    }

    #[test]
    fn masks_follow_definitions() {
        let (cond, modal) = build_masks::<f64>(7, 4, 5, Chunk::Video);
        let hw = 4 * 5;
        let total: f64 = cond.data().iter().sum();
        assert_eq!(total, hw as f64);
        assert!(cond.data()[hw..].iter().all(|&v| v == 0.0));
        for tok in 0..7 * hw {
            assert_eq!(modal.data()[tok * 3], 1.0);
            let s: f64 = modal.data()[tok * 3..tok * 3 + 3].iter().sum();
            assert_eq!(s, 1.0);
        }

        let (cond_a, modal_a) = build_masks::<f64>(7, 4, 5, Chunk::Albedo);
        assert!(cond_a.data().iter().all(|&v| v == 0.0));
        for tok in 0..7 * hw {
            assert_eq!(&modal_a.data()[tok * 3..tok * 3 + 3], &[0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn conditioning_widths() {
        let r8 = Tensor::<f64>::zeros(&[7, 44, 80, 48]);
        let c = assemble_conditioning(&r8, Chunk::Video).unwrap();
        assert_eq!(c.shape(), &[7, 44, 80, 52]);

        let r2 = Tensor::<f64>::zeros(&[5, 16, 16, 12]);
        let c2 = assemble_conditioning(&r2, Chunk::Albedo).unwrap();
        assert_eq!(c2.shape(), &[5, 16, 16, 16]);
        // only the second modality slot is nonzero for a zero Plücker field
        for tok in 0..5 * 16 * 16 {
            let row = &c2.data()[tok * 16..(tok + 1) * 16];
            for (i, &v) in row.iter().enumerate() {
                if i == 12 + 1 + Chunk::Albedo as usize {
                    assert_eq!(v, 1.0);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn env_latent_shape_and_constant_dc() {
        let cfg = toy_cfg();
        let env = EnvMap::constant(16, 8, 3.0).unwrap();
        let buffers = build_env_buffers(&env, 32, 32).unwrap();
        let z: Tensor<f64> = encode_env_latent(&buffers, &cfg).unwrap();
        assert_eq!(z.shape(), &[5, 16, 16, 36]);
        // constant ldr/log buffers put all energy in the DC channels
        // (channels 3k+c with k=0); the dir buffer varies spatially.
        for tok in 0..5 * 16 * 16 {
            let row = &z.data()[tok * 36..(tok + 1) * 36];
            for k in 1..4 {
                for c in 0..3 {
                    assert!(row[3 * k + c].abs() < 1e-12, "ldr AC leak");
                    assert!(row[12 + 3 * k + c].abs() < 1e-12, "log AC leak");
                }
            }
        }
    }

    #[test]
    fn env_latent_distinguishes_hdr_scale() {
        // a scaled HDR pair: tone-mapped buffers compress the difference,
        // the log buffer preserves it; the latents must differ
        let cfg = toy_cfg();
        let base = procedural_env(42, 2, 0.5, 16, 8).unwrap();
        let scaled =
            EnvMap::new(16, 8, base.data.iter().map(|&v| v * 40.0).collect()).unwrap();
        let za: Tensor<f64> =
            encode_env_latent(&build_env_buffers(&base, 32, 32).unwrap(), &cfg).unwrap();
        let zb: Tensor<f64> =
            encode_env_latent(&build_env_buffers(&scaled, 32, 32).unwrap(), &cfg).unwrap();
        let log_slice_differs = (0..5 * 16 * 16).any(|tok| {
            (12..24).any(|ch| (za.data()[tok * 36 + ch] - zb.data()[tok * 36 + ch]).abs() > 1e-9)
        });
        assert!(log_slice_differs);
    }

    #[test]
    fn fuse_layout_and_round_trip() {
        let (l, h, w, c, t) = (2usize, 3usize, 4usize, 6usize, 2usize);
        let zv = rand_latent(&[l, h, w, c], 1);
        let za = rand_latent(&[l, h, w, c], 2);
        let ze = rand_latent(&[l, h, w, c], 3);
        let env = rand_latent(&[l, h, w, 3 * c], 4);
        let r = rand_latent(&[l, h, w, 6 * t], 5);
        let fields = [
            assemble_conditioning(&r, Chunk::Video).unwrap(),
            assemble_conditioning(&r, Chunk::Albedo).unwrap(),
            assemble_conditioning(&r, Chunk::Relit).unwrap(),
        ];
        let fused = fuse(&zv, &za, &ze, &env, &fields).unwrap();
        assert_eq!(fused.data.shape(), &[3 * l, h, w, fused_width(c, t)]);
        assert_eq!(fused.token_width(), 4 * 6 + 16);

        // injectivity: recover the inputs exactly by slicing
        assert_eq!(fused.latent_chunk(Chunk::Video).data(), zv.data());
        assert_eq!(fused.latent_chunk(Chunk::Albedo).data(), za.data());
        assert_eq!(fused.latent_chunk(Chunk::Relit).data(), ze.data());
        assert_eq!(fused.env_latent().data(), env.data());

        // padding channels of chunks V and a are exactly zero
        let width = fused.token_width();
        for k in [0usize, 1] {
            for tok in 0..l * h * w {
                let o = (k * l * h * w + tok) * width;
                assert!(fused.data.data()[o + c..o + 4 * c].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn fuse_paper_shape_widths() {
        let (l, h, w, c, t) = (7usize, 4usize, 5usize, 16usize, 8usize);
        let zero = Tensor::<f64>::zeros(&[l, h, w, c]);
        let env = Tensor::<f64>::zeros(&[l, h, w, 3 * c]);
        let r = Tensor::<f64>::zeros(&[l, h, w, 6 * t]);
        let fields = [
            assemble_conditioning(&r, Chunk::Video).unwrap(),
            assemble_conditioning(&r, Chunk::Albedo).unwrap(),
            assemble_conditioning(&r, Chunk::Relit).unwrap(),
        ];
        let fused = fuse(&zero, &zero, &zero, &env, &fields).unwrap();
        assert_eq!(fused.token_width(), 116);
        assert_eq!(fused.data.shape()[0], 21);
        // all-zero inputs: everything zero except modality one-hots and M_cond
        let width = fused.token_width();
        for (tok, row) in fused.data.data().chunks(width).enumerate() {
            let chunk = tok / (l * h * w);
            let within = tok % (l * h * w);
            for (i, &v) in row.iter().enumerate() {
                let is_mod = i == 4 * c + 6 * t + 1 + chunk;
                let is_cond = i == 4 * c + 6 * t && chunk == 0 && within < h * w;
                if is_mod || is_cond {
                    assert_eq!(v, 1.0);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn condition_token_substitution() {
        let (l, h, w, c) = (3usize, 2usize, 2usize, 6usize);
        let zv = rand_latent(&[l, h, w, c], 7);
        let zi = rand_latent(&[1, h, w, c], 8);
        let slice = h * w * c;

        let mut rng = Rng::new(5, 0);
        let out = substitute_condition_token(&zv, &zi, 0.0, &mut rng).unwrap();
        assert_eq!(&out.data()[..slice], zi.data());
        assert_eq!(&out.data()[slice..], &zv.data()[slice..]);

        let mut r1 = Rng::new(5, 0);
        let mut r2 = Rng::new(5, 0);
        let a = substitute_condition_token(&zv, &zi, 0.02, &mut r1).unwrap();
        let b = substitute_condition_token(&zv, &zi, 0.02, &mut r2).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(&a.data()[..slice], zi.data());
    }

    #[test]
    fn positional_codes_chunk_independent() {
        let (l, h, w, d) = (2usize, 3usize, 2usize, 12usize);
        let p_learn = rand_latent(&[l * h * w, d], 9);
        let codes = positional_codes(l, h, w, d, 2, p_learn).unwrap();
        assert_eq!(codes.rope_axes.len(), l * h * w);
        assert_eq!(codes.rope_axes[0], [0, 0, 0]);
        assert_eq!(codes.rope_axes[(1 * h + 2) * w + 1], [1, 2, 1]);
        // injectivity over frames
        assert_ne!(codes.rope_axes[0], codes.rope_axes[h * w]);
        // divisibility errors
        assert!(positional_codes(l, h, w, 13, 2, Tensor::<f64>::zeros(&[l * h * w, 13]))
            .is_err());
        assert!(positional_codes(l, h, w, 8, 2, Tensor::<f64>::zeros(&[l * h * w, 8])).is_err());
    }
}
