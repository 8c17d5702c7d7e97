//! Deterministic, approximately invertible video <-> latent codec with the
//! same shape contract as a causal video tokenizer: a lone first frame coded
//! per-frame, then groups of `t` frames coded jointly, spatial factor `s`,
//! `C` latent channels.
//!
//! Content coding is a truncated orthonormal block DCT. Frame 0 uses 2-D
//! `s x s` blocks, later groups use 3-D `t x s x s` blocks; the `C/3`
//! lowest-frequency coefficients per color channel are kept in a fixed
//! zigzag order and interleaved across channels. Coefficients are divided by
//! sqrt(block size) at encode (and the scale inverted at decode) so latent
//! magnitudes stay at input pixel scale.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Video and latent dimensions plus the compression factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeConfig {
    /// Video frame count L; must satisfy (L - 1) mod t == 0.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Temporal compression factor t.
    pub temporal: usize,
    /// Spatial compression factor s.
    pub spatial: usize,
    /// Latent channel count C.
    pub channels: usize,
}

impl ShapeConfig {
    /// Shape-level invariants: divisibility of video dims by the factors.
    /// Any channel count is accepted here; content coding adds C mod 3 == 0.
    pub fn validate_shape(&self) -> Result<()> {
        if self.frames == 0 || self.temporal == 0 || self.spatial == 0 || self.channels == 0 {
            return Err(Error::Config("shape dims must be positive".into()));
        }
        if (self.frames - 1) % self.temporal != 0 {
            return Err(Error::Config(format!(
                "frames {} must be 1 mod temporal factor {}",
                self.frames, self.temporal
            )));
        }
        if self.height % self.spatial != 0 || self.width % self.spatial != 0 {
            return Err(Error::Config(format!(
                "resolution {}x{} must divide by spatial factor {}",
                self.height, self.width, self.spatial
            )));
        }
        Ok(())
    }

    /// Additional invariants required to actually encode pixel content.
    pub fn validate_content(&self) -> Result<()> {
        self.validate_shape()?;
        if self.channels % 3 != 0 {
            return Err(Error::Config(format!(
                "content coding needs channels divisible by 3, got {}",
                self.channels
            )));
        }
        let kept = self.channels / 3;
        if kept > self.spatial * self.spatial {
            return Err(Error::Config(format!(
                "{kept} coefficients per channel exceed the {}-sample first-frame block",
                self.spatial * self.spatial
            )));
        }
        Ok(())
    }

    pub fn latent_frames(&self) -> usize {
        (self.frames - 1) / self.temporal + 1
    }

    pub fn latent_height(&self) -> usize {
        self.height / self.spatial
    }

    pub fn latent_width(&self) -> usize {
        self.width / self.spatial
    }
}

/// Closed-form latent dimensions (l, h, w, C).
pub fn latent_shape(cfg: &ShapeConfig) -> Result<(usize, usize, usize, usize)> {
    cfg.validate_shape()?;
    Ok((cfg.latent_frames(), cfg.latent_height(), cfg.latent_width(), cfg.channels))
}

/// Orthonormal DCT-II matrix for length `n`: row k holds
/// c_k * cos(pi * (2i + 1) * k / (2n)). The inverse is the transpose.
fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let ck = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            m[k * n + i] =
                ck * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    m
}

/// Apply the length-`n` transform along one axis of a packed block.
fn transform_axis(
    block: &mut [f64],
    dims: [usize; 3],
    axis: usize,
    matrix: &[f64],
    inverse: bool,
) {
    let n = dims[axis];
    let mut line = vec![0.0; n];
    let mut out = vec![0.0; n];
    let (d0, d1, d2) = (dims[0], dims[1], dims[2]);
    let idx = |a: usize, b: usize, c: usize| (a * d1 + b) * d2 + c;
    let outer: Vec<(usize, usize)> = match axis {
        0 => (0..d1).flat_map(|b| (0..d2).map(move |c| (b, c))).collect(),
        1 => (0..d0).flat_map(|a| (0..d2).map(move |c| (a, c))).collect(),
        _ => (0..d0).flat_map(|a| (0..d1).map(move |b| (a, b))).collect(),
    };
    for (p, q) in outer {
        for i in 0..n {
            line[i] = match axis {
                0 => block[idx(i, p, q)],
                1 => block[idx(p, i, q)],
                _ => block[idx(p, q, i)],
            };
        }
        for (k, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for i in 0..n {
                // inverse uses the transpose of the orthonormal matrix
                let w = if inverse { matrix[i * n + k] } else { matrix[k * n + i] };
                s += w * line[i];
            }
            *o = s;
        }
        for i in 0..n {
            match axis {
                0 => block[idx(i, p, q)] = out[i],
                1 => block[idx(p, i, q)] = out[i],
                _ => block[idx(p, q, i)] = out[i],
            }
        }
    }
}

/// Zigzag order over block frequencies: ascending ft + fy + fx, ties broken
/// lexicographically by (ft, fy, fx).
pub fn zigzag_order(dims: [usize; 3]) -> Vec<[usize; 3]> {
    let mut order: Vec<[usize; 3]> = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for ft in 0..dims[0] {
        for fy in 0..dims[1] {
            for fx in 0..dims[2] {
                order.push([ft, fy, fx]);
            }
        }
    }
    order.sort_by_key(|f| (f[0] + f[1] + f[2], f[0], f[1], f[2]));
    order
}

/// Forward orthonormal 3-D DCT of a packed `dims` block (in place).
pub fn dct3(block: &mut [f64], dims: [usize; 3]) {
    debug_assert_eq!(block.len(), dims[0] * dims[1] * dims[2]);
    for axis in 0..3 {
        if dims[axis] > 1 {
            let m = dct_matrix(dims[axis]);
            transform_axis(block, dims, axis, &m, false);
        }
    }
}

fn idct3(block: &mut [f64], dims: [usize; 3]) {
    for axis in 0..3 {
        if dims[axis] > 1 {
            let m = dct_matrix(dims[axis]);
            transform_axis(block, dims, axis, &m, true);
        }
    }
}

struct BlockLayout {
    dims: [usize; 3],
    order: Vec<[usize; 3]>,
    scale: f64,
}

impl BlockLayout {
    fn new(bt: usize, s: usize) -> Self {
        let dims = [bt, s, s];
        let n = (bt * s * s) as f64;
        BlockLayout { dims, order: zigzag_order(dims), scale: n.sqrt() }
    }

    fn coeff_index(&self, k: usize) -> usize {
        let [ft, fy, fx] = self.order[k];
        (ft * self.dims[1] + fy) * self.dims[2] + fx
    }
}

/// Source frame indices feeding latent frame `g`.
fn group_frames(g: usize, t: usize) -> (usize, usize) {
    if g == 0 {
        (0, 1)
    } else {
        ((g - 1) * t + 1, t)
    }
}

/// Encode a `[L, H, W, 3]` video into a `[l, h, w, C]` latent tensor.
pub fn encode(video: &Tensor<f64>, cfg: &ShapeConfig) -> Result<Tensor<f64>> {
    cfg.validate_content()?;
    let want = [cfg.frames, cfg.height, cfg.width, 3];
    if video.shape() != want {
        return Err(Error::Shape(format!(
            "encode expects video shape {:?}, got {:?}",
            want,
            video.shape()
        )));
    }
    let (l, h, w, ch) = (cfg.latent_frames(), cfg.latent_height(), cfg.latent_width(), cfg.channels);
    let (s, t) = (cfg.spatial, cfg.temporal);
    let kept = ch / 3;
    let first = BlockLayout::new(1, s);
    let group = BlockLayout::new(t, s);
    let mut latent = Tensor::zeros(&[l, h, w, ch]);
    let vdata = video.data();
    let ldata = latent.data_mut();
    let mut block = vec![0.0; t * s * s];
    for g in 0..l {
        let layout = if g == 0 { &first } else { &group };
        let (f0, bt) = group_frames(g, t);
        for by in 0..h {
            for bx in 0..w {
                for c in 0..3 {
                    for fi in 0..bt {
                        for y in 0..s {
                            for x in 0..s {
                                let src = (((f0 + fi) * cfg.height + by * s + y) * cfg.width
                                    + bx * s
                                    + x)
                                    * 3
                                    + c;
                                block[(fi * s + y) * s + x] = vdata[src];
                            }
                        }
                    }
                    dct3(&mut block[..bt * s * s], layout.dims);
                    let dst = ((g * h + by) * w + bx) * ch;
                    for k in 0..kept {
                        ldata[dst + 3 * k + c] = block[layout.coeff_index(k)] / layout.scale;
                    }
                }
            }
        }
    }
    Ok(latent)
}

/// Decode a `[l, h, w, C]` latent tensor back to a `[L, H, W, 3]` video.
/// Discarded coefficients are zero-filled; no clamping is applied.
pub fn decode(latent: &Tensor<f64>, cfg: &ShapeConfig) -> Result<Tensor<f64>> {
    cfg.validate_content()?;
    let (l, h, w, ch) = (cfg.latent_frames(), cfg.latent_height(), cfg.latent_width(), cfg.channels);
    let want = [l, h, w, ch];
    if latent.shape() != want {
        return Err(Error::Shape(format!(
            "decode expects latent shape {:?}, got {:?}",
            want,
            latent.shape()
        )));
    }
    let (s, t) = (cfg.spatial, cfg.temporal);
    let kept = ch / 3;
    let first = BlockLayout::new(1, s);
    let group = BlockLayout::new(t, s);
    let mut video = Tensor::zeros(&[cfg.frames, cfg.height, cfg.width, 3]);
    let vdata = video.data_mut();
    let ldata = latent.data();
    let mut block = vec![0.0; t * s * s];
    for g in 0..l {
        let layout = if g == 0 { &first } else { &group };
        let (f0, bt) = group_frames(g, t);
        for by in 0..h {
            for bx in 0..w {
                for c in 0..3 {
                    block[..bt * s * s].fill(0.0);
                    let src = ((g * h + by) * w + bx) * ch;
                    for k in 0..kept {
                        block[layout.coeff_index(k)] = ldata[src + 3 * k + c] * layout.scale;
                    }
                    idct3(&mut block[..bt * s * s], layout.dims);
                    for fi in 0..bt {
                        for y in 0..s {
                            for x in 0..s {
                                let dst = (((f0 + fi) * cfg.height + by * s + y) * cfg.width
                                    + bx * s
                                    + x)
                                    * 3
                                    + c;
                                vdata[dst] = block[(fi * s + y) * s + x];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(video)
}

/// Encode a single `[H, W, 3]` image through the first-frame (2-D) path,
/// yielding a `[1, h, w, C]` latent.
pub fn encode_image(image: &Tensor<f64>, cfg: &ShapeConfig) -> Result<Tensor<f64>> {
    let mut single = *cfg;
    single.frames = 1;
    let video = Tensor::from_vec(
        &[1, cfg.height, cfg.width, 3],
        image.data().to_vec(),
    )
    .map_err(|_| {
        Error::Shape(format!(
            "encode_image expects shape [{}, {}, 3], got {:?}",
            cfg.height,
            cfg.width,
            image.shape()
        ))
    })?;
    encode(&video, &single)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn toy_cfg() -> ShapeConfig {
        ShapeConfig { frames: 9, height: 32, width: 32, temporal: 2, spatial: 2, channels: 12 }
    }

    fn random_video(cfg: &ShapeConfig, seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed, 77);
        let n = cfg.frames * cfg.height * cfg.width * 3;
        Tensor::from_vec(
            &[cfg.frames, cfg.height, cfg.width, 3],
            (0..n).map(|_| rng.uniform()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn latent_shapes() {
        let paper = ShapeConfig {
            frames: 49,
            height: 352,
            width: 640,
            temporal: 8,
            spatial: 8,
            channels: 16,
        };
        assert_eq!(latent_shape(&paper).unwrap(), (7, 44, 80, 16));

        let single = ShapeConfig {
            frames: 1,
            height: 4,
            width: 4,
            temporal: 8,
            spatial: 4,
            channels: 16,
        };
        assert_eq!(latent_shape(&single).unwrap(), (1, 1, 1, 16));

        let derived = ShapeConfig {
            frames: 9,
            height: 32,
            width: 32,
            temporal: 2,
            spatial: 2,
            channels: 12,
        };
        assert_eq!(latent_shape(&derived).unwrap(), (5, 16, 16, 12));

        let bad = ShapeConfig { frames: 10, ..derived };
        assert!(latent_shape(&bad).is_err());
        // paper channel count is fine for shapes but not for content coding
        assert!(paper.validate_content().is_err());
    }

    #[test]
    fn dct_of_constant_block_concentrates_in_dc() {
        // orthonormal DCT of a constant: DC = v * sqrt(n), AC = 0
        let v = 0.7;
        let mut block = vec![v; 8];
        dct3(&mut block, [2, 2, 2]);
        assert!((block[0] - v * 8f64.sqrt()).abs() < 1e-12);
        for &ac in &block[1..] {
            assert!(ac.abs() < 1e-12);
        }
    }

    #[test]
    fn encode_constant_video() {
        let cfg = toy_cfg();
        let v = 0.4;
        let video = Tensor::full(&[9, 32, 32, 3], v);
        let z = encode(&video, &cfg).unwrap();
        // after the 1/sqrt(n) scale the stored DC equals the pixel value
        let (l, h, w, ch) = latent_shape(&cfg).unwrap();
        for g in 0..l {
            for p in 0..h * w {
                let o = (g * h * w + p) * ch;
                for c in 0..3 {
                    assert!((z.data()[o + c] - v).abs() < 1e-12);
                }
                for k in 3..ch {
                    assert!(z.data()[o + k].abs() < 1e-12);
                }
            }
        }
        // exact round trip for constants
        let back = decode(&z, &cfg).unwrap();
        for (a, b) in back.data().iter().zip(video.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_video_zero_latent_and_linearity() {
        let cfg = toy_cfg();
        let zero = Tensor::zeros(&[9, 32, 32, 3]);
        assert!(encode(&zero, &cfg).unwrap().data().iter().all(|&v| v == 0.0));

        let x = random_video(&cfg, 1);
        let y = random_video(&cfg, 2);
        let (a, b) = (1.7, -0.6);
        let mut combo = x.clone();
        combo.scale(a);
        combo.axpy(b, &y);
        let zc = encode(&combo, &cfg).unwrap();
        let mut zx = encode(&x, &cfg).unwrap();
        zx.scale(a);
        zx.axpy(b, &encode(&y, &cfg).unwrap());
        for (u, v) in zc.data().iter().zip(zx.data()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn first_frame_round_trip_is_exact() {
        // at (t=2, s=2, C=12) the 4 kept coefficients span the 4-sample block
        let cfg = toy_cfg();
        let video = random_video(&cfg, 3);
        let back = decode(&encode(&video, &cfg).unwrap(), &cfg).unwrap();
        let frame = 32 * 32 * 3;
        for i in 0..frame {
            assert!((back.data()[i] - video.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_decode_is_projection() {
        let cfg = toy_cfg();
        let video = random_video(&cfg, 4);
        let z = encode(&video, &cfg).unwrap();
        let z2 = encode(&decode(&z, &cfg).unwrap(), &cfg).unwrap();
        for (a, b) in z.data().iter().zip(z2.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn retained_basis_function_round_trips() {
        // a video built from a retained frequency (ft=0, fy=0, fx=1) survives
        let cfg = toy_cfg();
        let mut video = Tensor::zeros(&[9, 32, 32, 3]);
        let m = dct_matrix(2);
        // basis value for fx=1 at position x: m[1*2 + x]
        for f in 0..9 {
            for y in 0..32 {
                for x in 0..32 {
                    for c in 0..3 {
                        video.data_mut()[((f * 32 + y) * 32 + x) * 3 + c] = m[2 + (x % 2)];
                    }
                }
            }
        }
        let back = decode(&encode(&video, &cfg).unwrap(), &cfg).unwrap();
        for (a, b) in back.data().iter().zip(video.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn truncation_shrinks_norm() {
        let cfg = toy_cfg();
        let video = random_video(&cfg, 5);
        let z = encode(&video, &cfg).unwrap();
        // Parseval with truncation and the 1/sqrt(n) scale: the latent norm
        // is bounded by the (scaled) full-transform norm
        let bound = video.sq_norm() / (cfg.spatial * cfg.spatial) as f64;
        assert!(z.sq_norm() <= bound + 1e-9);
    }

    #[test]
    fn encode_image_matches_first_frame_path() {
        let cfg = toy_cfg();
        let video = random_video(&cfg, 6);
        let img = Tensor::from_vec(&[32, 32, 3], video.data()[..32 * 32 * 3].to_vec()).unwrap();
        let zi = encode_image(&img, &cfg).unwrap();
        let zv = encode(&video, &cfg).unwrap();
        let (_, h, w, ch) = latent_shape(&cfg).unwrap();
        for i in 0..h * w * ch {
            assert!((zi.data()[i] - zv.data()[i]).abs() < 1e-12);
        }
        assert_eq!(zi.shape(), &[1, h, w, ch]);
    }

    #[test]
    fn zigzag_order_is_frequency_sorted() {
        let order = zigzag_order([2, 2, 2]);
        assert_eq!(order[0], [0, 0, 0]);
        assert_eq!(order[1], [0, 0, 1]);
        assert_eq!(order[2], [0, 1, 0]);
        assert_eq!(order[3], [1, 0, 0]);
        let sums: Vec<usize> = order.iter().map(|f| f.iter().sum()).collect();
        assert!(sums.windows(2).all(|w| w[0] <= w[1]));
    }
}
