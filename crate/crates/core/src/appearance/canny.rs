//! Canny edge detection in exact integer arithmetic.
//!
//! Grayscale is BT.601 luma scaled by 1000, the Gaussian uses integer
//! weights summing to roughly 4096, and gradients are compared as squared
//! magnitudes. Nothing is rounded between stages, so the result does not
//! depend on the order of summation and ties in non-maximum suppression
//! are exact. Borders are handled by clamping coordinates.

use std::collections::VecDeque;

use image::{GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SIGMA: f64 = 1.4;
pub const DEFAULT_LOW: f64 = 100.0;
pub const DEFAULT_HIGH: f64 = 200.0;

/// Scale of [`gray_i64`] relative to 8-bit luma.
pub const GRAY_SCALE: i64 = 1000;
const KERNEL_SCALE: f64 = 4096.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CannyParams {
    pub sigma: f64,
    /// Thresholds on the gradient magnitude of 8-bit luma.
    pub low: f64,
    pub high: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        CannyParams {
            sigma: DEFAULT_SIGMA,
            low: DEFAULT_LOW,
            high: DEFAULT_HIGH,
        }
    }
}

impl CannyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("canny sigma must be positive, got {}", self.sigma)));
        }
        if !(self.low >= 0.0) || !self.high.is_finite() {
            return Err(Error::invalid("canny thresholds must be finite and non-negative"));
        }
        if self.high < self.low {
            return Err(Error::invalid(format!(
                "canny high threshold {} is below low threshold {}",
                self.high, self.low
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    /// Single channel, values 0 or 255.
    pub raster: GrayImage,
    pub params: CannyParams,
}

/// Radius `round(1.5σ)`, at least 1; σ = 1.4 gives a 5×5 kernel.
pub fn gaussian_radius(sigma: f64) -> usize {
    ((1.5 * sigma).round() as usize).max(1)
}

/// Integer 1-D Gaussian weights, symmetric, length `2r + 1`.
pub fn gaussian_kernel(sigma: f64) -> Vec<i64> {
    let r = gaussian_radius(sigma) as i64;
    let g: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.iter().map(|v| (KERNEL_SCALE * v / total).round() as i64).collect()
}

/// BT.601 luma times [`GRAY_SCALE`].
pub fn gray_i64(img: &RgbImage) -> Vec<i64> {
    img.pixels()
        .map(|p| 299 * p[0] as i64 + 587 * p[1] as i64 + 114 * p[2] as i64)
        .collect()
}

fn clamp(v: i64, n: usize) -> usize {
    v.clamp(0, n as i64 - 1) as usize
}

/// Separable Gaussian blur; the output is scaled by the kernel sum squared.
pub fn smooth(gray: &[i64], w: usize, h: usize, kernel: &[i64]) -> Vec<i64> {
    let r = (kernel.len() / 2) as i64;
    let mut tmp = vec![0i64; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * gray[y * w + clamp(x as i64 + k as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0i64; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * tmp[clamp(y as i64 + k as i64 - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// 3×3 Sobel responses with +x to the right and +y downward.
pub fn sobel(values: &[i64], w: usize, h: usize) -> (Vec<i64>, Vec<i64>) {
    let at = |x: i64, y: i64| values[clamp(y, h) * w + clamp(x, w)];
    let mut gx = vec![0i64; w * h];
    let mut gy = vec![0i64; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = y as usize * w + x as usize;
            gx[i] = (at(x + 1, y - 1) + 2 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2 * at(x - 1, y) + at(x - 1, y + 1));
            gy[i] = (at(x - 1, y + 1) + 2 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2 * at(x, y - 1) + at(x + 1, y - 1));
        }
    }
    (gx, gy)
}

/// Total scale between the squared gradient and squared 8-bit magnitude.
fn magnitude_scale(kernel: &[i64]) -> f64 {
    let k: i64 = kernel.iter().sum();
    (k * k * GRAY_SCALE) as f64
}

/// Gradient magnitude of the smoothed image in 8-bit luma units.
pub fn gradient_magnitude(img: &RgbImage, sigma: f64) -> Vec<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let kernel = gaussian_kernel(sigma);
    let (gx, gy) = sobel(&smooth(&gray_i64(img), w, h, &kernel), w, h);
    let scale = magnitude_scale(&kernel);
    gx.iter()
        .zip(&gy)
        .map(|(&x, &y)| ((x as i128 * x as i128 + y as i128 * y as i128) as f64).sqrt() / scale)
        .collect()
}

const TAN_22_5: f64 = 0.414_213_562_373_095_1;
const TAN_67_5: f64 = 2.414_213_562_373_095;

/// Unit step along the quantized gradient direction.
fn direction(gx: i64, gy: i64) -> (i64, i64) {
    let (ax, ay) = (gx.abs() as f64, gy.abs() as f64);
    if ay <= ax * TAN_22_5 {
        (1, 0)
    } else if ay > ax * TAN_67_5 {
        (0, 1)
    } else if (gx > 0) == (gy > 0) {
        (1, 1)
    } else {
        (-1, 1)
    }
}

pub fn canny(img: &RgbImage, params: &CannyParams) -> Result<EdgeMap> {
    params.validate()?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::invalid("empty image"));
    }
    let kernel = gaussian_kernel(params.sigma);
    let (gx, gy) = sobel(&smooth(&gray_i64(img), w, h, &kernel), w, h);
    let m2: Vec<i128> = gx
        .iter()
        .zip(&gy)
        .map(|(&x, &y)| x as i128 * x as i128 + y as i128 * y as i128)
        .collect();
    let scale = magnitude_scale(&kernel);
    let low2 = (params.low * scale).powi(2);
    let high2 = (params.high * scale).powi(2);

    // non-maximum suppression; ties keep the pixel on the negative side,
    // so a symmetric ridge two pixels wide thins to one
    let mut class = vec![0u8; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let i = y * w + x;
            let m = m2[i];
            if m == 0 {
                continue;
            }
            let (dx, dy) = direction(gx[i], gy[i]);
            let behind = m2[(y as i64 - dy) as usize * w + (x as i64 - dx) as usize];
            let ahead = m2[(y as i64 + dy) as usize * w + (x as i64 + dx) as usize];
            if m > behind && m >= ahead {
                let mf = m as f64;
                class[i] = if mf >= high2 {
                    2
                } else if mf >= low2 {
                    1
                } else {
                    0
                };
            }
        }
    }

    // hysteresis: keep weak pixels 8-connected to a strong one
    let mut out = vec![0u8; w * h];
    let mut queue: VecDeque<usize> = (0..w * h).filter(|&i| class[i] == 2).collect();
    for &i in &queue {
        out[i] = 255;
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if out[j] == 0 && class[j] == 1 {
                    out[j] = 255;
                    queue.push_back(j);
                }
            }
        }
    }
    let raster = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([out[y as usize * w + x as usize]]));
    Ok(EdgeMap {
        raster,
        params: *params,
    })
}
