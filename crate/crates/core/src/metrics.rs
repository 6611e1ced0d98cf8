//! Reference image-quality metrics on the BT.601 luma channel.

use crate::image::RgbImage;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
#[allow(unused_imports)]
use num_traits::Float;

/// Identical images report this instead of infinity.
pub const PSNR_CAP: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_L: f64 = 255.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MetricError {
    DimensionMismatch {
        a: (usize, usize),
        b: (usize, usize),
    },
    /// SSIM needs at least one full 11x11 window.
    TooSmall {
        width: usize,
        height: usize,
    },
}

impl fmt::Display for MetricError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricError::DimensionMismatch { a, b } => {
                write!(f, "image dimensions differ: {}x{} vs {}x{}", a.0, a.1, b.0, b.1)
            }
            MetricError::TooSmall { width, height } => {
                write!(f, "image {width}x{height} smaller than the 11x11 SSIM window")
            }
        }
    }
}

fn check_dims(a: &RgbImage, b: &RgbImage) -> Result<(), MetricError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricError::DimensionMismatch {
            a: (a.width, a.height),
            b: (b.width, b.height),
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio on the Y channel, in dB, capped at 100.
pub fn psnr_y(a: &RgbImage, b: &RgbImage) -> Result<f64, MetricError> {
    check_dims(a, b)?;
    let ya = a.to_y();
    let yb = b.to_y();
    let mut mse = 0.0f64;
    for (x, y) in ya.iter().zip(&yb) {
        let d = x - y;
        mse += d * d;
    }
    mse /= ya.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut w = vec![0.0f64; SSIM_WINDOW * SSIM_WINDOW];
    let mut sum = 0.0;
    for dy in -half..=half {
        for dx in -half..=half {
            let v = (-((dx * dx + dy * dy) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[((dy + half) as usize) * SSIM_WINDOW + (dx + half) as usize] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Single-scale SSIM on the Y channel: 11x11 Gaussian window, sigma 1.5,
/// K1 = 0.01, K2 = 0.03, L = 255, averaged over valid window positions.
pub fn ssim_y(a: &RgbImage, b: &RgbImage) -> Result<f64, MetricError> {
    check_dims(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(MetricError::TooSmall {
            width: a.width,
            height: a.height,
        });
    }
    let ya = a.to_y();
    let yb = b.to_y();
    let w = gaussian_window();
    let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
    let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);
    let (width, height) = (a.width, a.height);

    let mut total = 0.0f64;
    let mut count = 0usize;
    for y0 in 0..=height - SSIM_WINDOW {
        for x0 in 0..=width - SSIM_WINDOW {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for wy in 0..SSIM_WINDOW {
                let row = (y0 + wy) * width + x0;
                let wrow = &w[wy * SSIM_WINDOW..(wy + 1) * SSIM_WINDOW];
                for wx in 0..SSIM_WINDOW {
                    let va = ya[row + wx];
                    let vb = yb[row + wx];
                    let ww = wrow[wx];
                    mu_a += ww * va;
                    mu_b += ww * vb;
                    aa += ww * va * va;
                    bb += ww * vb * vb;
                    ab += ww * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn noisy(base: &RgbImage, sigma: f64, seed: u64) -> RgbImage {
        let mut rng = SeededRng::new(seed);
        let mut out = base.clone();
        for v in out.data.iter_mut() {
            let n = *v as f64 + sigma * rng.normal();
            *v = crate::image::quantize_u8(n);
        }
        out
    }

    #[test]
    fn psnr_identical_is_capped() {
        let img = RgbImage::filled(16, 16, [90, 40, 200]);
        assert_eq!(psnr_y(&img, &img).unwrap(), 100.0);
    }

    #[test]
    fn psnr_black_vs_white_is_zero() {
        let a = RgbImage::filled(16, 16, [0, 0, 0]);
        let b = RgbImage::filled(16, 16, [255, 255, 255]);
        let v = psnr_y(&a, &b).unwrap();
        assert!(v.abs() < 1e-9, "psnr {v}");
    }

    #[test]
    fn psnr_symmetric() {
        let base = RgbImage::filled(16, 16, [128, 128, 128]);
        let a = noisy(&base, 10.0, 1);
        let b = noisy(&base, 20.0, 2);
        let ab = psnr_y(&a, &b).unwrap();
        let ba = psnr_y(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn psnr_dimension_mismatch() {
        let a = RgbImage::new(8, 8);
        let b = RgbImage::new(8, 12);
        assert!(psnr_y(&a, &b).is_err());
    }

    #[test]
    fn ssim_identity_is_one() {
        let base = RgbImage::filled(32, 32, [128, 128, 128]);
        let img = noisy(&base, 40.0, 3);
        let v = ssim_y(&img, &img).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "ssim {v}");
    }

    #[test]
    fn ssim_black_vs_white_closed_form() {
        // Zero variances: SSIM = C1 / (255^2 + C1), about 1.0e-4.
        let a = RgbImage::filled(16, 16, [0, 0, 0]);
        let b = RgbImage::filled(16, 16, [255, 255, 255]);
        let c1 = (0.01f64 * 255.0) * (0.01 * 255.0);
        let expect = c1 / (255.0 * 255.0 + c1);
        let v = ssim_y(&a, &b).unwrap();
        assert!((v - expect).abs() < 1e-6, "ssim {v} expect {expect}");
    }

    #[test]
    fn ssim_symmetric_and_bounded() {
        let base = RgbImage::filled(24, 24, [100, 150, 60]);
        let a = noisy(&base, 15.0, 4);
        let b = noisy(&base, 15.0, 5);
        let ab = ssim_y(&a, &b).unwrap();
        let ba = ssim_y(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn ssim_too_small_rejected() {
        let a = RgbImage::new(8, 8);
        assert!(matches!(ssim_y(&a, &a), Err(MetricError::TooSmall { .. })));
    }

    /// PSNR must fall monotonically as noise grows (Spearman < -0.95).
    #[test]
    fn psnr_monotone_in_noise() {
        let base = {
            let mut img = RgbImage::new(32, 32);
            let mut rng = SeededRng::new(9);
            for v in img.data.iter_mut() {
                *v = rng.below(256) as u8;
            }
            img
        };
        let mut psnrs = Vec::new();
        for level in 0..20 {
            let sigma = 1.0 + level as f64 * 2.0;
            let n = noisy(&base, sigma, 100 + level as u64);
            psnrs.push(psnr_y(&base, &n).unwrap());
        }
        // Ranks of psnrs vs noise index; all values distinct in practice.
        let mut order: Vec<usize> = (0..20).collect();
        order.sort_by(|&i, &j| psnrs[i].partial_cmp(&psnrs[j]).unwrap());
        let mut rank = vec![0usize; 20];
        for (r, &i) in order.iter().enumerate() {
            rank[i] = r;
        }
        let n = 20.0f64;
        let mut d2 = 0.0;
        for (i, &r) in rank.iter().enumerate() {
            // Noise rank is i itself; perfect anticorrelation is rank 19-i.
            let d = r as f64 - (19 - i) as f64;
            d2 += d * d;
        }
        // Spearman of psnr vs noise = -(1 - 6*d2/(n(n^2-1))) computed against
        // the reversed ranking.
        let rho_rev = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
        let rho = -rho_rev;
        assert!(rho < -0.95, "spearman {rho}");
    }
}
