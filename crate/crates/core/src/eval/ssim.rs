use image::RgbImage;

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Channel-major planes with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Planes {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape("planes", channels * height * width, data.len()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * w * h];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = p.0[c] as f64 / 255.0;
            }
        }
        Self {
            channels: 3,
            height: h,
            width: w,
            data,
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of one `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over every fully contained 11x11 Gaussian window and every
/// channel, with dynamic range 1.
pub fn ssim(a: &Planes, b: &Planes) -> Result<f64> {
    if (a.channels, a.height, a.width) != (b.channels, b.height, b.width) {
        return Err(Error::shape(
            "ssim inputs",
            format!("{}x{}x{}", a.channels, a.height, a.width),
            format!("{}x{}x{}", b.channels, b.height, b.width),
        ));
    }
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::invalid("ssim", format!("images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let (h, w) = (a.height, a.width);
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..a.channels {
        let x = &a.data[c * plane..(c + 1) * plane];
        let y = &b.data[c * plane..(c + 1) * plane];
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(x, h, w, &taps);
        let my = filter_valid(y, h, w, &taps);
        let mxx = filter_valid(&prod(x, x), h, w, &taps);
        let myy = filter_valid(&prod(y, y), h, w, &taps);
        let mxy = filter_valid(&prod(x, y), h, w, &taps);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cov = mxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn ssim_rgb(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    ssim(&Planes::from_rgb(a), &Planes::from_rgb(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, c: usize, h: usize, w: usize) -> Planes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Planes::new(c, h, w, (0..c * h * w).map(|_| rng.random()).collect()).unwrap()
    }

    /// Direct per-window weighted statistics.
    fn naive(a: &Planes, b: &Planes) -> f64 {
        let g = gaussian_taps(11, 1.5);
        let (c1, c2) = (1e-4, 9e-4);
        let mut sum = 0.0;
        let mut n = 0.0;
        for c in 0..a.channels {
            for y0 in 0..=a.height - 11 {
                for x0 in 0..=a.width - 11 {
                    let (mut ux, mut uy) = (0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            ux += g[i] * g[j] * a.get(c, y0 + i, x0 + j);
                            uy += g[i] * g[j] * b.get(c, y0 + i, x0 + j);
                        }
                    }
                    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wgt = g[i] * g[j];
                            let dx = a.get(c, y0 + i, x0 + j) - ux;
                            let dy = b.get(c, y0 + i, x0 + j) - uy;
                            vx += wgt * dx * dx;
                            vy += wgt * dy * dy;
                            cov += wgt * dx * dy;
                        }
                    }
                    sum += (2.0 * ux * uy + c1) * (2.0 * cov + c2) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
                    n += 1.0;
                }
            }
        }
        sum / n
    }

    #[test]
    fn taps_are_normalized_and_symmetric() {
        let g = gaussian_taps(11, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(g[0], g[10]);
        assert!(g[5] > g[4]);
    }

    #[test]
    fn identical_is_one_and_matches_naive() {
        let a = random(1, 3, 16, 16);
        let b = random(2, 3, 16, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        assert!((ssim(&a, &b).unwrap() - naive(&a, &b)).abs() < 1e-6);
    }

    #[test]
    fn inverted_blocks_anticorrelate() {
        let a = Planes::new(1, 24, 24, (0..24 * 24).map(|i| if (i / 24 / 4 + i % 24 / 4) % 2 == 0 { 0.9 } else { 0.1 }).collect()).unwrap();
        let inv = Planes::new(1, 24, 24, a.data.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&a, &inv).unwrap() < 0.0);
    }

    #[test]
    fn bad_inputs_rejected() {
        assert!(ssim(&random(1, 3, 16, 16), &random(1, 3, 16, 17)).is_err());
        assert!(ssim(&random(1, 1, 8, 8), &random(1, 1, 8, 8)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn symmetric_and_bounded(s1 in any::<u64>(), s2 in any::<u64>()) {
            let a = random(s1, 1, 12, 13);
            let b = random(s2, 1, 12, 13);
            let ab = ssim(&a, &b).unwrap();
            prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }
}
