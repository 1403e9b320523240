//! Corner keypoints with orientation-steered binary descriptors.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::image::Image;

pub const DESCRIPTOR_BITS: usize = 256;
pub const PATCH_RADIUS: i64 = 15;
const PATTERN_RADIUS: f64 = 12.0;
const BORDER: usize = PATCH_RADIUS as usize + 1;

pub type Descriptor = [u64; DESCRIPTOR_BITS / 64];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub max_features: usize,
    /// Minimum response relative to the strongest corner in the image.
    pub quality: f64,
    /// Absolute response floor (intensities in `[0, 1]`).
    pub min_response: f64,
    pub nms_radius: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { max_features: 1000, quality: 0.01, min_response: 1e-4, nms_radius: 3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: usize,
    pub y: usize,
    /// Intensity-centroid orientation, radians.
    pub angle: f64,
    pub response: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Features {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
}

impl Features {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

#[inline]
pub fn hamming(a: &Descriptor, b: &Descriptor) -> u32 {
    a.iter().zip(b.iter()).map(|(x, y)| (x ^ y).count_ones()).sum()
}

type Pattern = Vec<([f64; 2], [f64; 2])>;

fn pattern() -> &'static Pattern {
    static P: OnceLock<Pattern> = OnceLock::new();
    P.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0b5e_55ed);
        let normal = Normal::new(0.0, PATCH_RADIUS as f64 / 2.5).unwrap();
        let mut sample = || loop {
            let p = [normal.sample(&mut rng), normal.sample(&mut rng)];
            if p[0].hypot(p[1]) <= PATTERN_RADIUS {
                return p;
            }
        };
        (0..DESCRIPTOR_BITS).map(|_| (sample(), sample())).collect()
    })
}

const BINOMIAL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

fn smooth(img: &Image<f64>) -> Image<f64> {
    const K: [f64; 5] = BINOMIAL;
    let (w, h) = img.dims();
    let clampi = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let tmp = Image::from_fn_par(w, h, |x, y| {
        (0..5).map(|i| K[i] * img.get(clampi(x as i64 + i as i64 - 2, w), y)).sum::<f64>()
    });
    Image::from_fn_par(w, h, |x, y| (0..5).map(|i| K[i] * tmp.get(x, clampi(y as i64 + i as i64 - 2, h))).sum::<f64>())
}

/// Minimum eigenvalue of the structure tensor of Sobel gradients under a 5x5
/// binomial window.
pub fn corner_response(img: &Image<f64>) -> Image<f64> {
    let (w, h) = img.dims();
    if w < 3 || h < 3 {
        return Image::new(w, h, 0.0);
    }
    let grad = Image::from_fn_par(w, h, |x, y| {
        if x == 0 || y == 0 || x + 1 >= w || y + 1 >= h {
            return [0.0; 3];
        }
        let p = |dx: i64, dy: i64| *img.get((x as i64 + dx) as usize, (y as i64 + dy) as usize);
        let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1) - p(-1, -1) - 2.0 * p(-1, 0) - p(-1, 1)) / 8.0;
        let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1) - p(-1, -1) - 2.0 * p(0, -1) - p(1, -1)) / 8.0;
        [gx * gx, gx * gy, gy * gy]
    });
    Image::from_fn_par(w, h, |x, y| {
        if x < 3 || y < 3 || x + 3 >= w || y + 3 >= h {
            return 0.0;
        }
        let mut s = [0.0; 3];
        for (j, wy) in BINOMIAL.iter().enumerate() {
            for (i, wx) in BINOMIAL.iter().enumerate() {
                let g = grad.get(x + i - 2, y + j - 2);
                let w = wx * wy;
                s[0] += w * g[0];
                s[1] += w * g[1];
                s[2] += w * g[2];
            }
        }
        let [a, b, c] = s;
        0.5 * (a + c - ((a - c).powi(2) + 4.0 * b * b).sqrt())
    })
}

fn orientation(img: &Image<f64>, x: usize, y: usize) -> f64 {
    let (mut m10, mut m01) = (0.0, 0.0);
    let r = PATCH_RADIUS;
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy > r * r {
                continue;
            }
            let v = *img.get((x as i64 + dx) as usize, (y as i64 + dy) as usize);
            m10 += dx as f64 * v;
            m01 += dy as f64 * v;
        }
    }
    m01.atan2(m10)
}

pub fn describe(smoothed: &Image<f64>, kp: &Keypoint) -> Descriptor {
    let (s, c) = kp.angle.sin_cos();
    let sample = |p: &[f64; 2]| {
        let dx = (c * p[0] - s * p[1]).round() as i64;
        let dy = (s * p[0] + c * p[1]).round() as i64;
        *smoothed.get((kp.x as i64 + dx) as usize, (kp.y as i64 + dy) as usize)
    };
    let mut d = [0u64; DESCRIPTOR_BITS / 64];
    for (i, (p, q)) in pattern().iter().enumerate() {
        if sample(p) < sample(q) {
            d[i / 64] |= 1 << (i % 64);
        }
    }
    d
}

pub fn detect_and_describe(intensity: &Image<f64>, cfg: &FeatureConfig) -> Features {
    let (w, h) = intensity.dims();
    if w <= 2 * BORDER || h <= 2 * BORDER || cfg.max_features == 0 {
        return Features::default();
    }
    let resp = corner_response(intensity);
    let peak = resp.as_slice().iter().cloned().fold(0.0, f64::max);
    let thresh = (cfg.quality * peak).max(cfg.min_response);
    let r = cfg.nms_radius as i64;
    let mut cands = Vec::new();
    for y in BORDER..h - BORDER {
        for x in BORDER..w - BORDER {
            let v = *resp.get(x, y);
            if v < thresh {
                continue;
            }
            let mut is_max = true;
            'nms: for dy in -r..=r {
                for dx in -r..=r {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (xx, yy) = ((x as i64 + dx) as usize, (y as i64 + dy) as usize);
                    let o = *resp.get(xx, yy);
                    // Ties go to the earlier pixel in raster order.
                    if o > v || (o == v && (dy < 0 || (dy == 0 && dx < 0))) {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
            if is_max {
                cands.push((v, x, y));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));
    cands.truncate(cfg.max_features);
    let smoothed = smooth(intensity);
    let keypoints: Vec<Keypoint> = cands
        .iter()
        .map(|&(v, x, y)| Keypoint { x, y, angle: orientation(&smoothed, x, y), response: v })
        .collect();
    let descriptors = keypoints.iter().map(|kp| describe(&smoothed, kp)).collect();
    Features { keypoints, descriptors }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard(w: usize, h: usize, cell: usize, x0: usize, y0: usize) -> Image<f64> {
        Image::from_fn_par(w, h, |x, y| {
            let cx = (x + cell - x0 % cell) / cell;
            let cy = (y + cell - y0 % cell) / cell;
            if (cx + cy) % 2 == 0 {
                0.8
            } else {
                0.2
            }
        })
    }

    #[test]
    fn constant_image_has_no_keypoints() {
        let img = Image::new(100, 80, 0.5);
        assert!(detect_and_describe(&img, &FeatureConfig::default()).is_empty());
    }

    #[test]
    fn checkerboard_corners_are_found() {
        let cell = 12;
        let img = checkerboard(120, 96, cell, 0, 0);
        let f = detect_and_describe(&img, &FeatureConfig::default());
        let mut found = 0;
        for cy in (cell..96).step_by(cell) {
            for cx in (cell..120).step_by(cell) {
                // Interior corner between pixels cx-1 and cx.
                let (ux, uy) = (cx as f64 - 0.5, cy as f64 - 0.5);
                if ux < BORDER as f64 || uy < BORDER as f64 || ux > (120 - BORDER) as f64 || uy > (96 - BORDER) as f64 {
                    continue;
                }
                let best = f
                    .keypoints
                    .iter()
                    .map(|k| (k.x as f64 - ux).hypot(k.y as f64 - uy))
                    .fold(f64::INFINITY, f64::min);
                assert!(best <= 1.0, "corner ({cx},{cy}) nearest keypoint {best}");
                found += 1;
            }
        }
        assert!(found >= 12);
    }

    #[test]
    fn descriptor_matches_itself() {
        let img = Image::from_fn_par(80, 80, |x, y| (0.4 * x as f64).sin() * (0.5 * y as f64).cos() * 0.4 + 0.5);
        let f = detect_and_describe(&img, &FeatureConfig::default());
        assert!(!f.is_empty());
        let sm = smooth(&img);
        for (kp, d) in f.keypoints.iter().zip(f.descriptors.iter()) {
            assert_eq!(hamming(d, &describe(&sm, kp)), 0);
        }
    }

    #[test]
    fn descriptor_is_rotation_aware() {
        let base = Image::from_fn_par(101, 101, |x, y| {
            let (dx, dy) = (x as f64 - 50.0, y as f64 - 50.0);
            0.5 + 0.3 * (0.3 * dx + 0.1 * dy).sin() + 0.2 * (dx * 0.05).cos() * (dy * 0.21).sin()
        });
        let rot = Image::from_fn_par(101, 101, |x, y| *base.get(100 - y, x));
        let sb = smooth(&base);
        let sr = smooth(&rot);
        let a = Keypoint { x: 50, y: 50, angle: orientation(&sb, 50, 50), response: 1.0 };
        let b = Keypoint { x: 50, y: 50, angle: orientation(&sr, 50, 50), response: 1.0 };
        let d = hamming(&describe(&sb, &a), &describe(&sr, &b));
        assert!(d < 40, "rotated patch distance {d}");
    }

    #[test]
    fn feature_cap_is_respected() {
        let img = checkerboard(200, 200, 8, 0, 0);
        let cfg = FeatureConfig { max_features: 10, ..Default::default() };
        assert_eq!(detect_and_describe(&img, &cfg).len(), 10);
    }
}
