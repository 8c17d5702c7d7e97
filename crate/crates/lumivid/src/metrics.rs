//! PSNR and SSIM over [0,1] images and videos.

/// PSNR in dB between two equal-length [0,1] signals, capped at 99 dB for
/// exact matches.
pub const PSNR_CAP: f64 = 99.0;

pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "psnr length mismatch");
    assert!(!a.is_empty());
    let mse: f64 =
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    taps
}

/// Mean SSIM over all pixels and channels of an `h x w x 3` image pair.
/// Local statistics use an 11-tap Gaussian window clamped at the borders
/// with weight renormalization.
pub fn ssim(a: &[f64], b: &[f64], height: usize, width: usize) -> f64 {
    assert_eq!(a.len(), height * width * 3, "ssim image shape");
    assert_eq!(a.len(), b.len());
    let taps = gaussian_taps();
    let half = SSIM_WINDOW as isize / 2;
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for ch in 0..3 {
        for y in 0..height as isize {
            for x in 0..width as isize {
                let (mut w_sum, mut ma, mut mb) = (0.0, 0.0, 0.0);
                let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
                for dy in -half..=half {
                    let yy = y + dy;
                    if yy < 0 || yy >= height as isize {
                        continue;
                    }
                    for dx in -half..=half {
                        let xx = x + dx;
                        if xx < 0 || xx >= width as isize {
                            continue;
                        }
                        let wgt = taps[(dy + half) as usize] * taps[(dx + half) as usize];
                        let idx = ((yy as usize * width) + xx as usize) * 3 + ch;
                        let (va, vb) = (a[idx], b[idx]);
                        w_sum += wgt;
                        ma += wgt * va;
                        mb += wgt * vb;
                        aa += wgt * va * va;
                        bb += wgt * vb * vb;
                        ab += wgt * va * vb;
                    }
                }
                ma /= w_sum;
                mb /= w_sum;
                let var_a = aa / w_sum - ma * ma;
                let var_b = bb / w_sum - mb * mb;
                let cov = ab / w_sum - ma * mb;
                let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
                total += s;
            }
        }
    }
    total / (height * width * 3) as f64
}

/// Mean SSIM over the frames of an `[L, H, W, 3]` video pair.
pub fn ssim_video(a: &[f64], b: &[f64], frames: usize, height: usize, width: usize) -> f64 {
    assert_eq!(a.len(), frames * height * width * 3);
    let stride = height * width * 3;
    (0..frames)
        .map(|f| ssim(&a[f * stride..(f + 1) * stride], &b[f * stride..(f + 1) * stride], height, width))
        .sum::<f64>()
        / frames as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn psnr_examples() {
        let a = vec![0.5; 64];
        assert_eq!(psnr(&a, &a), 99.0);
        // MSE 0.01 on a [0,1] signal -> 20 dB
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&a, &b) - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_degradation() {
        let mut rng = Rng::new(3, 1);
        let img: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.uniform()).collect();
        assert!((ssim(&img, &img, 8, 8) - 1.0).abs() < 1e-12);
        let noisy: Vec<f64> =
            img.iter().map(|v| (v + 0.3 * rng.gaussian()).clamp(0.0, 1.0)).collect();
        let s = ssim(&img, &noisy, 8, 8);
        assert!(s < 0.95, "ssim of corrupted image = {s}");
    }

    /// Naive double-loop reference for both metrics on random 8x8 images.
    #[test]
    fn agrees_with_naive_reference() {
        let mut rng = Rng::new(9, 2);
        for _ in 0..5 {
            let a: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.uniform()).collect();
            let b: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.uniform()).collect();

            // reference PSNR
            let mut se = 0.0;
            for i in 0..a.len() {
                se += (a[i] - b[i]) * (a[i] - b[i]);
            }
            let want_psnr = 10.0 * (a.len() as f64 / se).log10();
            assert!((psnr(&a, &b) - want_psnr).abs() < 1e-9);

            // reference SSIM: direct per-pixel windowed statistics
            let taps = gaussian_taps();
            let mut want_total = 0.0;
            for ch in 0..3 {
                for y in 0..8i64 {
                    for x in 0..8i64 {
                        let mut acc = [0.0f64; 6]; // w, ma, mb, aa, bb, ab
                        for wy in 0..11i64 {
                            for wx in 0..11i64 {
                                let yy = y + wy - 5;
                                let xx = x + wx - 5;
                                if !(0..8).contains(&yy) || !(0..8).contains(&xx) {
                                    continue;
                                }
                                let wgt = taps[wy as usize] * taps[wx as usize];
                                let i = ((yy * 8 + xx) * 3) as usize + ch;
                                acc[0] += wgt;
                                acc[1] += wgt * a[i];
                                acc[2] += wgt * b[i];
                                acc[3] += wgt * a[i] * a[i];
                                acc[4] += wgt * b[i] * b[i];
                                acc[5] += wgt * a[i] * b[i];
                            }
                        }
                        let (ma, mb) = (acc[1] / acc[0], acc[2] / acc[0]);
                        let va = acc[3] / acc[0] - ma * ma;
                        let vb = acc[4] / acc[0] - mb * mb;
                        let cov = acc[5] / acc[0] - ma * mb;
                        want_total += ((2.0 * ma * mb + 1e-4) * (2.0 * cov + 9e-4))
                            / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4));
                    }
                }
            }
            let want_ssim = want_total / (8.0 * 8.0 * 3.0);
            assert!((ssim(&a, &b, 8, 8) - want_ssim).abs() < 1e-9);
        }
    }
}
