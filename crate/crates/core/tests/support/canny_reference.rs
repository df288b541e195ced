//! Brute-force Canny reference: direct 2-D convolution, angle-based
//! direction bins and recursive hysteresis. Shares no code with the
//! library. Returns rows of 0/255 for thresholds in luma units.

use image::RgbImage;

pub fn kernel_1d(sigma: f64) -> Vec<i128> {
    let r = ((1.5 * sigma).round() as i64).max(1);
    let g: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| (4096.0 * v / s).round() as i128).collect()
}

pub fn reference_canny(img: &RgbImage, sigma: f64, low: i128, high: i128) -> Vec<Vec<u8>> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let px = |x: i64, y: i64| -> i128 {
        let p = img.get_pixel(x.clamp(0, w - 1) as u32, y.clamp(0, h - 1) as u32);
        299 * p[0] as i128 + 587 * p[1] as i128 + 114 * p[2] as i128
    };
    let k = kernel_1d(sigma);
    let r = (k.len() / 2) as i64;
    let ksum: i128 = k.iter().sum();
    // full 2-D kernel as the outer product
    let mut smooth = vec![vec![0i128; w as usize]; h as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0;
            for j in -r..=r {
                for i in -r..=r {
                    acc += k[(j + r) as usize] * k[(i + r) as usize] * px(x + i, y + j);
                }
            }
            smooth[y as usize][x as usize] = acc;
        }
    }
    let s = |x: i64, y: i64| smooth[y.clamp(0, h - 1) as usize][x.clamp(0, w - 1) as usize];
    const SX: [[i128; 3]; 3] = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]];
    const SY: [[i128; 3]; 3] = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]];
    let mut gx = vec![vec![0i128; w as usize]; h as usize];
    let mut gy = gx.clone();
    for y in 0..h {
        for x in 0..w {
            for j in 0..3 {
                for i in 0..3 {
                    let v = s(x + i as i64 - 1, y + j as i64 - 1);
                    gx[y as usize][x as usize] += SX[j][i] * v;
                    gy[y as usize][x as usize] += SY[j][i] * v;
                }
            }
        }
    }
    let m2 = |x: i64, y: i64| {
        let (a, b) = (gx[y as usize][x as usize], gy[y as usize][x as usize]);
        a * a + b * b
    };
    let scale = ksum * ksum * 1000;
    let (low2, high2) = ((low * scale).pow(2), (high * scale).pow(2));

    let mut strong = vec![vec![false; w as usize]; h as usize];
    let mut weak = strong.clone();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let m = m2(x, y);
            if m == 0 {
                continue;
            }
            let angle = (gy[y as usize][x as usize] as f64)
                .atan2(gx[y as usize][x as usize] as f64)
                .to_degrees()
                .rem_euclid(180.0);
            let (dx, dy) = if !(22.5..157.5).contains(&angle) {
                (1, 0)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle <= 112.5 {
                (0, 1)
            } else {
                (-1, 1)
            };
            // strict against the pixel behind, non-strict ahead
            if m > m2(x - dx, y - dy) && m >= m2(x + dx, y + dy) {
                strong[y as usize][x as usize] = m >= high2;
                weak[y as usize][x as usize] = m >= low2;
            }
        }
    }
    let mut out = vec![vec![0u8; w as usize]; h as usize];
    fn grow(x: i64, y: i64, weak: &[Vec<bool>], out: &mut [Vec<u8>]) {
        if y < 0 || x < 0 || y as usize >= out.len() || x as usize >= out[0].len() {
            return;
        }
        if out[y as usize][x as usize] == 255 || !weak[y as usize][x as usize] {
            return;
        }
        out[y as usize][x as usize] = 255;
        for j in -1..=1 {
            for i in -1..=1 {
                grow(x + i, y + j, weak, out);
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            if strong[y as usize][x as usize] {
                grow(x, y, &weak, &mut out);
            }
        }
    }
    out
}
