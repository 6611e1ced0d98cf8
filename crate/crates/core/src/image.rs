//! 8-bit RGB images and the resampling primitives shared by the pipeline.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

/// Interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// `width * height * 3` bytes, row-major, RGB order.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Per-channel f64 planes in [0, 255].
    pub fn to_planes(&self) -> [Vec<f64>; 3] {
        let n = self.width * self.height;
        let mut planes = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for i in 0..n {
            for c in 0..3 {
                planes[c][i] = self.data[i * 3 + c] as f64;
            }
        }
        planes
    }

    /// Rebuilds an image from f64 planes, clamping and rounding half-up.
    pub fn from_planes(planes: &[Vec<f64>; 3], width: usize, height: usize) -> Self {
        let n = width * height;
        let mut data = vec![0u8; n * 3];
        for i in 0..n {
            for c in 0..3 {
                data[i * 3 + c] = quantize_u8(planes[c][i]);
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// BT.601 luma plane in [0, 255].
    pub fn to_y(&self) -> Vec<f64> {
        let n = self.width * self.height;
        let mut y = vec![0.0; n];
        for i in 0..n {
            y[i] = 0.299 * self.data[i * 3] as f64
                + 0.587 * self.data[i * 3 + 1] as f64
                + 0.114 * self.data[i * 3 + 2] as f64;
        }
        y
    }

    /// Box-filter (area) resampling to an arbitrary size.
    pub fn resize_area(&self, width: usize, height: usize) -> Self {
        let planes = self.to_planes();
        let out = [
            resample_area(&planes[0], self.width, self.height, width, height),
            resample_area(&planes[1], self.width, self.height, width, height),
            resample_area(&planes[2], self.width, self.height, width, height),
        ];
        Self::from_planes(&out, width, height)
    }

    /// Bilinear resampling to an arbitrary size.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Self {
        let planes = self.to_planes();
        let out = [
            resample_bilinear(&planes[0], self.width, self.height, width, height),
            resample_bilinear(&planes[1], self.width, self.height, width, height),
            resample_bilinear(&planes[2], self.width, self.height, width, height),
        ];
        Self::from_planes(&out, width, height)
    }
}

/// Clamp to [0, 255] and round half-up.
#[inline]
pub fn quantize_u8(v: f64) -> u8 {
    let v = (v + 0.5).floor();
    if v <= 0.0 {
        0
    } else if v >= 255.0 {
        255
    } else {
        v as u8
    }
}

/// Area resampling of one plane: each destination pixel averages the source
/// pixels it covers, weighted by fractional overlap.
pub fn resample_area(
    src: &[f64],
    sw: usize,
    sh: usize,
    dw: usize,
    dh: usize,
) -> Vec<f64> {
    assert!(sw > 0 && sh > 0 && dw > 0 && dh > 0);
    let sx = sw as f64 / dw as f64;
    let sy = sh as f64 / dh as f64;
    let mut out = vec![0.0; dw * dh];
    for dy in 0..dh {
        let y0 = dy as f64 * sy;
        let y1 = (dy + 1) as f64 * sy;
        for dx in 0..dw {
            let x0 = dx as f64 * sx;
            let x1 = (dx + 1) as f64 * sx;
            let mut acc = 0.0;
            let mut wsum = 0.0;
            let iy0 = y0.floor() as usize;
            let iy1 = (y1.ceil() as usize).min(sh);
            let ix0 = x0.floor() as usize;
            let ix1 = (x1.ceil() as usize).min(sw);
            for iy in iy0..iy1 {
                let hy = (y1.min((iy + 1) as f64) - y0.max(iy as f64)).max(0.0);
                for ix in ix0..ix1 {
                    let hx = (x1.min((ix + 1) as f64) - x0.max(ix as f64)).max(0.0);
                    let w = hx * hy;
                    acc += w * src[iy * sw + ix];
                    wsum += w;
                }
            }
            out[dy * dw + dx] = acc / wsum;
        }
    }
    out
}

/// Bilinear resampling of one plane (half-pixel centers, clamped edges).
pub fn resample_bilinear(
    src: &[f64],
    sw: usize,
    sh: usize,
    dw: usize,
    dh: usize,
) -> Vec<f64> {
    assert!(sw > 0 && sh > 0 && dw > 0 && dh > 0);
    let sx = sw as f64 / dw as f64;
    let sy = sh as f64 / dh as f64;
    let mut out = vec![0.0; dw * dh];
    for dy in 0..dh {
        let fy = ((dy as f64 + 0.5) * sy - 0.5).max(0.0).min(sh as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = fy - y0 as f64;
        for dx in 0..dw {
            let fx = ((dx as f64 + 0.5) * sx - 0.5).max(0.0).min(sw as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * sw + x0] * (1.0 - tx) + src[y0 * sw + x1] * tx;
            let bot = src[y1 * sw + x0] * (1.0 - tx) + src[y1 * sw + x1] * tx;
            out[dy * dw + dx] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}
