//! Body-region extraction and patch cropping.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::image::{Image, Mask};
use crate::error::{Error, Result};

const OTSU_BINS: usize = 256;

/// Top-left corner of a patch in the frame it was cut from. May be negative when the
/// patch extends past the frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Offset {
    pub row: i64,
    pub col: i64,
}

/// Otsu threshold over a 256-bin histogram spanning [min, max].
pub fn otsu_threshold(values: &[f32]) -> f32 {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    if !(hi > lo) {
        return lo;
    }
    let width = (hi - lo) as f64 / OTSU_BINS as f64;
    let mut hist = [0u64; OTSU_BINS];
    for &v in values {
        let b = (((v - lo) as f64 / width) as usize).min(OTSU_BINS - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &h)| i as f64 * h as f64)
        .sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_k) = (-1.0, 0);
    for (k, &h) in hist.iter().enumerate() {
        w0 += h as f64;
        sum0 += k as f64 * h as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_k = k;
        }
    }
    // pixels strictly above the upper edge of bin k are foreground
    (lo as f64 + width * (best_k + 1) as f64) as f32
}

/// Sets every background pixel that is not 4-connected to the frame border.
pub fn fill_holes(mask: &Mask) -> Mask {
    let (h, w) = mask.shape();
    let mut outside = vec![false; h * w];
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if (r == 0 || c == 0 || r == h - 1 || c == w - 1) && !mask.get(r, c) {
                outside[r * w + c] = true;
                queue.push_back((r, c));
            }
        }
    }
    while let Some((r, c)) = queue.pop_front() {
        for (nr, nc) in neighbors4(r, c, h, w) {
            let i = nr * w + nc;
            if !outside[i] && !mask.get(nr, nc) {
                outside[i] = true;
                queue.push_back((nr, nc));
            }
        }
    }
    Mask::from_fn(h, w, mask.spacing, |r, c| !outside[r * w + c])
}

fn neighbors4(r: usize, c: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let cand = [
        (r.wrapping_sub(1), c),
        (r + 1, c),
        (r, c.wrapping_sub(1)),
        (r, c + 1),
    ];
    cand.into_iter().filter(move |&(nr, nc)| nr < h && nc < w)
}

/// Largest 4-connected foreground component. Ties go to the component whose first pixel
/// comes first in raster order.
pub fn largest_component(mask: &Mask) -> Mask {
    let (h, w) = mask.shape();
    let mut label = vec![0u32; h * w];
    let mut best = (0usize, 0u32);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) || label[r * w + c] != 0 {
                continue;
            }
            next += 1;
            label[r * w + c] = next;
            queue.push_back((r, c));
            let mut size = 0;
            while let Some((pr, pc)) = queue.pop_front() {
                size += 1;
                for (nr, nc) in neighbors4(pr, pc, h, w) {
                    let i = nr * w + nc;
                    if mask.get(nr, nc) && label[i] == 0 {
                        label[i] = next;
                        queue.push_back((nr, nc));
                    }
                }
            }
            if size > best.0 {
                best = (size, next);
            }
        }
    }
    Mask::from_fn(h, w, mask.spacing, |r, c| {
        best.1 != 0 && label[r * w + c] == best.1
    })
}

/// Body mask: Otsu foreground, holes filled, largest component kept.
pub fn body_mask(img: &Image) -> Result<Mask> {
    if img.is_constant() {
        return Err(Error::NoBody);
    }
    let t = otsu_threshold(img.pixels());
    let fg = Mask::from_fn(img.height(), img.width(), img.spacing, |r, c| {
        img.get(r, c) > t
    });
    let body = largest_component(&fill_holes(&fg));
    if body.is_empty() {
        return Err(Error::NoBody);
    }
    Ok(body)
}

/// Inclusive bounding box (r0, c0, r1, c1) of the foreground.
pub fn bounding_box(mask: &Mask) -> Option<(usize, usize, usize, usize)> {
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if mask.get(r, c) {
                bb = Some(match bb {
                    None => (r, c, r, c),
                    Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
                });
            }
        }
    }
    bb
}

/// Patch origin so that a `patch`-sized square is centered on the inclusive box.
pub fn centered_offset(bbox: (usize, usize, usize, usize), patch: usize) -> Offset {
    let (r0, c0, r1, c1) = bbox;
    let center = |a: usize, b: usize| (a + b + 1) as i64 / 2;
    Offset {
        row: center(r0, r1) - patch as i64 / 2,
        col: center(c0, c1) - patch as i64 / 2,
    }
}

/// Crops a square `patch`-sized window centered on the body. Pixels outside the frame
/// take the image minimum. A body larger than the patch is truncated symmetrically.
pub fn crop_body(img: &Image, patch: usize) -> Result<(Image, Offset)> {
    let body = body_mask(img)?;
    let bbox = bounding_box(&body).ok_or(Error::NoBody)?;
    let off = centered_offset(bbox, patch);
    let fill = img.min_max().0;
    Ok((extract_patch(img, off, patch, fill)?, off))
}

pub fn extract_patch(img: &Image, off: Offset, patch: usize, fill: f32) -> Result<Image> {
    let (h, w) = img.shape();
    let mut px = vec![fill; patch * patch];
    for r in 0..patch {
        for c in 0..patch {
            let sr = off.row + r as i64;
            let sc = off.col + c as i64;
            if sr >= 0 && sc >= 0 && (sr as usize) < h && (sc as usize) < w {
                px[r * patch + c] = img.get(sr as usize, sc as usize);
            }
        }
    }
    Image::new(patch, patch, px, img.spacing, img.modality)
}

pub fn extract_mask_patch(mask: &Mask, off: Offset, patch: usize) -> Mask {
    let (h, w) = mask.shape();
    Mask::from_fn(patch, patch, mask.spacing, |r, c| {
        let sr = off.row + r as i64;
        let sc = off.col + c as i64;
        sr >= 0
            && sc >= 0
            && (sr as usize) < h
            && (sc as usize) < w
            && mask.get(sr as usize, sc as usize)
    })
    .with_modality(mask.modality)
}
