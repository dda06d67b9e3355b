//! Online geometric augmentation: horizontal flip, isotropic scale, rotation and
//! elastic deformation, applied as one backward mapping shared by image and mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::image::{Image, Mask};
use crate::error::{Error, Result};

pub const FLIP_PROB: f64 = 0.5;
pub const SCALE_RANGE: (f64, f64) = (0.9, 1.1);
pub const MAX_ROTATION_DEG: f64 = 10.0;
pub const ELASTIC_STD_PX: f64 = 1.5;
pub const ELASTIC_SMOOTH_SIGMA: f64 = 8.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub scale: f64,
    pub rotation_deg: f64,
    /// Per-pixel (row, col) displacement in pixels, row-major; empty means none.
    pub displacement: Vec<(f64, f64)>,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            flip: false,
            scale: 1.0,
            rotation_deg: 0.0,
            displacement: Vec::new(),
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip
            && self.scale == 1.0
            && self.rotation_deg == 0.0
            && self.displacement.iter().all(|&(a, b)| a == 0.0 && b == 0.0)
    }

    pub fn sample(seed: u64, height: usize, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flip = rng.gen_bool(FLIP_PROB);
        let scale = rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        let rotation_deg = rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
        let displacement = elastic_field(&mut rng, height, width);
        AugmentParams {
            flip,
            scale,
            rotation_deg,
            displacement,
        }
    }

    /// Source coordinate (row, col) sampled for output pixel (r, c).
    fn source(&self, r: usize, c: usize, h: usize, w: usize) -> (f64, f64) {
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let (mut y, mut x) = (r as f64, c as f64);
        if let Some(&(dy, dx)) = self.displacement.get(r * w + c) {
            y += dy;
            x += dx;
        }
        if self.scale != 1.0 || self.rotation_deg != 0.0 {
            let (s, co) = self.rotation_deg.to_radians().sin_cos();
            let (py, px) = (y - cy, x - cx);
            // inverse of rotate-then-scale
            y = (co * py - s * px) / self.scale + cy;
            x = (s * py + co * px) / self.scale + cx;
        }
        if self.flip {
            x = w as f64 - 1.0 - x;
        }
        (y, x)
    }
}

/// Per-pixel Gaussian displacements with standard deviation `ELASTIC_STD_PX`,
/// smoothed with a Gaussian kernel. Smoothing shrinks the spread by roughly
/// `2 sqrt(pi) sigma`, which keeps the warp gentle.
fn elastic_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<(f64, f64)> {
    let comp = |rng: &mut ChaCha8Rng| {
        let raw: Vec<f64> = (0..h * w)
            .map(|_| ELASTIC_STD_PX * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect();
        gaussian_blur(&raw, h, w, ELASTIC_SMOOTH_SIGMA)
    };
    let dy = comp(rng);
    let dx = comp(rng);
    dy.into_iter().zip(dx).collect()
}

pub(crate) fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * src[r * w + reflect(c as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[reflect(r as isize + k as isize - radius, h) * w + c])
                .sum();
        }
    }
    out
}

/// The nearest source pixel, or `None` when it lies outside the frame. A sample is
/// valid for both image and mask exactly when this is `Some`.
fn nearest(y: f64, x: f64, h: usize, w: usize) -> Option<(usize, usize)> {
    let (ry, rx) = (y.round(), x.round());
    (ry >= 0.0 && rx >= 0.0 && (ry as usize) < h && (rx as usize) < w)
        .then(|| (ry as usize, rx as usize))
}

fn bilinear(img: &Image, y: f64, x: f64) -> f32 {
    let (h, w) = img.shape();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let v = |r, c| img.get(r, c) as f64;
    let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
    let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
    (top * (1.0 - fy) + bot * fy) as f32
}

pub fn apply(img: &Image, mask: &Mask, params: &AugmentParams) -> Result<(Image, Mask)> {
    if img.shape() != mask.shape() {
        return Err(Error::Shape(format!(
            "image {:?} and mask {:?} are not aligned",
            img.shape(),
            mask.shape()
        )));
    }
    if params.is_identity() {
        return Ok((img.clone(), mask.clone()));
    }
    let (h, w) = img.shape();
    let fill = img.min_max().0;
    let mut out = img.clone();
    let mut out_mask = mask.clone();
    for r in 0..h {
        for c in 0..w {
            let (y, x) = params.source(r, c, h, w);
            match nearest(y, x, h, w) {
                Some((nr, nc)) => {
                    out.set(r, c, bilinear(img, y, x));
                    out_mask.set(r, c, mask.get(nr, nc));
                }
                None => {
                    out.set(r, c, fill);
                    out_mask.set(r, c, false);
                }
            }
        }
    }
    Ok((out, out_mask))
}

/// Samples a transform from `seed` and applies it to both grids.
pub fn augment(img: &Image, mask: &Mask, seed: u64) -> Result<(Image, Mask)> {
    let params = AugmentParams::sample(seed, img.height(), img.width());
    apply(img, mask, &params)
}
