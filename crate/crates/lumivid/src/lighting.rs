//! Equirectangular HDR environment maps, the three conditioning buffers
//! derived from them (Reinhard LDR, normalized log-intensity, direction map),
//! and the cosine-weighted irradiance integral used by the oracle renderer.
//!
//! Equirectangular convention: pixel (i, j) maps to polar angle
//! theta = pi*(i+0.5)/H measured from +Y and azimuth phi = 2*pi*(j+0.5)/W
//! with phi = 0 at -Z, increasing toward +X.

use std::f64::consts::PI;

use crate::geometry::Vec3;
use crate::rng::{streams, Rng};
use crate::{Error, Result};

/// Equirectangular radiance grid, linear HDR, layout `[h, w, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl EnvMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if height < 2 || width < 4 {
            return Err(Error::Invalid(format!("env map too small: {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "env map {width}x{height} needs {} floats, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid("env map entries must be finite and >= 0".into()));
        }
        Ok(EnvMap { width, height, data })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        EnvMap::new(width, height, vec![value; width * height * 3])
    }

    #[inline]
    pub fn pixel(&self, i: usize, j: usize) -> [f64; 3] {
        let o = (i * self.width + j) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }
}

/// The three conditioning buffers plus the log-space normalizer.
#[derive(Debug, Clone)]
pub struct EnvBuffers {
    pub width: usize,
    pub height: usize,
    /// Reinhard-tone-mapped radiance in [0, 1).
    pub ldr: Vec<f64>,
    /// Normalized log intensity in [0, 1].
    pub log: Vec<f64>,
    /// Unit light-direction vectors.
    pub dir: Vec<f64>,
    /// Global max of log(1 + E); zero for an all-black map.
    pub e_max: f64,
}

/// Global Reinhard operator x / (1 + x) for a single channel value.
#[inline]
pub fn tone_map_reinhard_scalar(x: f64) -> f64 {
    x / (1.0 + x)
}

/// Global Reinhard operator x / (1 + x), applied per channel.
pub fn tone_map_reinhard(env: &EnvMap) -> Vec<f64> {
    env.data.iter().map(|&x| tone_map_reinhard_scalar(x)).collect()
}

/// log(1 + E) normalized by its global maximum. Returns the buffer and the
/// normalizer; an all-black map yields all zeros and e_max = 0.
pub fn log_intensity(env: &EnvMap) -> (Vec<f64>, f64) {
    let mut log: Vec<f64> = env.data.iter().map(|&x| x.ln_1p()).collect();
    let e_max = log.iter().cloned().fold(0.0, f64::max);
    if e_max < 1e-12 {
        return (vec![0.0; log.len()], 0.0);
    }
    for v in &mut log {
        *v /= e_max;
    }
    (log, e_max)
}

/// Unit direction for spherical angles; see the module convention.
#[inline]
pub fn direction_for_angles(theta: f64, phi: f64) -> Vec3 {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    [st * sp, ct, -st * cp]
}

#[inline]
fn pixel_angles(height: usize, width: usize, i: usize, j: usize) -> (f64, f64) {
    (PI * (i as f64 + 0.5) / height as f64, 2.0 * PI * (j as f64 + 0.5) / width as f64)
}

/// Per-pixel unit light directions for an `height x width` grid.
pub fn direction_map(height: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; height * width * 3];
    for i in 0..height {
        for j in 0..width {
            let (theta, phi) = pixel_angles(height, width, i, j);
            let d = direction_for_angles(theta, phi);
            out[(i * width + j) * 3..(i * width + j) * 3 + 3].copy_from_slice(&d);
        }
    }
    out
}

/// Solid angle of every pixel in row `i`: the exact spherical band area
/// (2*pi/W) * (cos(theta_top) - cos(theta_bottom)), which sums to 4*pi over
/// the grid. Equals the differential form (2*pi/W)(pi/H) sin(theta) up to
/// O(1/H^2).
#[inline]
pub fn row_solid_angle(height: usize, width: usize, i: usize) -> f64 {
    let t0 = PI * i as f64 / height as f64;
    let t1 = PI * (i + 1) as f64 / height as f64;
    (2.0 * PI / width as f64) * (t0.cos() - t1.cos())
}

/// Bilinear resize with half-pixel centers. Horizontal coordinates wrap
/// (equirectangular seam), vertical coordinates clamp at the poles.
pub fn bilinear_resize(
    src: &[f64],
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
) -> Vec<f64> {
    assert_eq!(src.len(), h_in * w_in * 3);
    let mut out = vec![0.0; h_out * w_out * 3];
    for i in 0..h_out {
        let yf = (i as f64 + 0.5) * h_in as f64 / h_out as f64 - 0.5;
        let y0 = yf.floor();
        let fy = yf - y0;
        let i0 = (y0 as isize).clamp(0, h_in as isize - 1) as usize;
        let i1 = (y0 as isize + 1).clamp(0, h_in as isize - 1) as usize;
        for j in 0..w_out {
            let xf = (j as f64 + 0.5) * w_in as f64 / w_out as f64 - 0.5;
            let x0 = xf.floor();
            let fx = xf - x0;
            let j0 = (x0 as isize).rem_euclid(w_in as isize) as usize;
            let j1 = (x0 as isize + 1).rem_euclid(w_in as isize) as usize;
            for c in 0..3 {
                let p00 = src[(i0 * w_in + j0) * 3 + c];
                let p01 = src[(i0 * w_in + j1) * 3 + c];
                let p10 = src[(i1 * w_in + j0) * 3 + c];
                let p11 = src[(i1 * w_in + j1) * 3 + c];
                let top = p00 + (p01 - p00) * fx;
                let bot = p10 + (p11 - p10) * fx;
                out[(i * w_out + j) * 3 + c] = top + (bot - top) * fy;
            }
        }
    }
    out
}

/// Compute the three buffers at native resolution, resize each to
/// `height x width`, and re-normalize direction vectors after interpolation.
pub fn build_env_buffers(env: &EnvMap, height: usize, width: usize) -> Result<EnvBuffers> {
    if height == 0 || width == 0 {
        return Err(Error::Invalid("target buffer dims must be >= 1".into()));
    }
    let ldr_native = tone_map_reinhard(env);
    let (log_native, e_max) = log_intensity(env);
    let dir_native = direction_map(env.height, env.width);

    let ldr = bilinear_resize(&ldr_native, env.height, env.width, height, width);
    let log = bilinear_resize(&log_native, env.height, env.width, height, width);
    let mut dir = bilinear_resize(&dir_native, env.height, env.width, height, width);
    for p in 0..height * width {
        let v = [dir[p * 3], dir[p * 3 + 1], dir[p * 3 + 2]];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        // Interpolated opposing directions can nearly cancel; fall back to +Y.
        if n < 1e-12 {
            dir[p * 3..p * 3 + 3].copy_from_slice(&[0.0, 1.0, 0.0]);
        } else {
            for c in 0..3 {
                dir[p * 3 + c] = v[c] / n;
            }
        }
    }
    Ok(EnvBuffers { width, height, ldr, log, dir, e_max })
}

/// Cosine-weighted irradiance around unit normal `n`:
/// sum over pixels of E(p) * max(0, n . d(p)) * dOmega(p).
pub fn irradiance(env: &EnvMap, n: Vec3) -> Result<[f64; 3]> {
    let nn = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if (nn - 1.0).abs() > 1e-6 {
        return Err(Error::Invalid(format!("irradiance normal must be unit length, got {nn}")));
    }
    let (h, w) = (env.height, env.width);
    let mut acc = [0.0f64; 3];
    for i in 0..h {
        let d_omega = row_solid_angle(h, w, i);
        for j in 0..w {
            let (theta, phi) = pixel_angles(h, w, i, j);
            let d = direction_for_angles(theta, phi);
            let cosine = n[0] * d[0] + n[1] * d[1] + n[2] * d[2];
            if cosine <= 0.0 {
                continue;
            }
            let wgt = cosine * d_omega;
            let o = (i * w + j) * 3;
            acc[0] += env.data[o] * wgt;
            acc[1] += env.data[o + 1] * wgt;
            acc[2] += env.data[o + 2] * wgt;
        }
    }
    Ok(acc)
}

/// Bilinear radiance lookup along unit direction `d`: inverse of the
/// direction-map parameterization with horizontal wrap and vertical clamp.
pub fn sample_env(env: &EnvMap, d: Vec3) -> [f64; 3] {
    let (h, w) = (env.height as f64, env.width as f64);
    let theta = d[1].clamp(-1.0, 1.0).acos();
    let mut phi = d[0].atan2(-d[2]);
    if phi < 0.0 {
        phi += 2.0 * PI;
    }
    let yf = theta * h / PI - 0.5;
    let xf = phi * w / (2.0 * PI) - 0.5;
    let y0 = yf.floor();
    let x0 = xf.floor();
    let fy = yf - y0;
    let fx = xf - x0;
    let i0 = (y0 as isize).clamp(0, env.height as isize - 1) as usize;
    let i1 = (y0 as isize + 1).clamp(0, env.height as isize - 1) as usize;
    let j0 = (x0 as isize).rem_euclid(env.width as isize) as usize;
    let j1 = (x0 as isize + 1).rem_euclid(env.width as isize) as usize;
    let mut out = [0.0; 3];
    for (c, v) in out.iter_mut().enumerate() {
        let p00 = env.data[(i0 * env.width + j0) * 3 + c];
        let p01 = env.data[(i0 * env.width + j1) * 3 + c];
        let p10 = env.data[(i1 * env.width + j0) * 3 + c];
        let p11 = env.data[(i1 * env.width + j1) * 3 + c];
        let top = p00 + (p01 - p00) * fx;
        let bot = p10 + (p11 - p10) * fx;
        *v = top + (bot - top) * fy;
    }
    out
}

/// Deterministic procedural HDR environment: an ambient floor plus `lobes`
/// spherical Gaussian lobes with seeded axes, sharpness, and per-channel
/// intensities. Stands in for downloaded HDR panoramas.
pub fn procedural_env(
    seed: u64,
    lobes: usize,
    ambient: f64,
    width: usize,
    height: usize,
) -> Result<EnvMap> {
    if ambient < 0.0 {
        return Err(Error::Invalid("ambient must be >= 0".into()));
    }
    let mut rng = Rng::new(seed, streams::ENV_MAPS);
    struct Lobe {
        axis: Vec3,
        sharpness: f64,
        intensity: [f64; 3],
    }
    let lobe_params: Vec<Lobe> = (0..lobes)
        .map(|_| Lobe {
            axis: rng.unit_vector(),
            sharpness: rng.uniform_in(8.0, 64.0),
            intensity: [
                rng.uniform_in(0.5, 5.0),
                rng.uniform_in(0.5, 5.0),
                rng.uniform_in(0.5, 5.0),
            ],
        })
        .collect();

    let mut data = vec![0.0; width * height * 3];
    for i in 0..height {
        for j in 0..width {
            let (theta, phi) = pixel_angles(height, width, i, j);
            let d = direction_for_angles(theta, phi);
            let mut px = [ambient; 3];
            for lobe in &lobe_params {
                let cosine = d[0] * lobe.axis[0] + d[1] * lobe.axis[1] + d[2] * lobe.axis[2];
                let g = (lobe.sharpness * (cosine - 1.0)).exp();
                for c in 0..3 {
                    px[c] += lobe.intensity[c] * g;
                }
            }
            data[(i * width + j) * 3..(i * width + j) * 3 + 3].copy_from_slice(&px);
        }
    }
    EnvMap::new(width, height, data)
}
