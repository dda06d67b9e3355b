//! Histogram KL divergence between two image sets.

use crate::error::{Error, Result};
use crate::synthdata::Image;

pub const DEFAULT_BINS: usize = 256;
const SMOOTHING: f64 = 1e-8;

/// KL(p || q) for discrete distributions, after adding `SMOOTHING` to every bin and
/// renormalising.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Metric("histograms must be nonempty and equally long".into()));
    }
    let smooth = |h: &[f64]| -> Result<Vec<f64>> {
        if h.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Metric("histogram entries must be finite and >= 0".into()));
        }
        let total: f64 = h.iter().sum();
        if total <= 0.0 {
            return Err(Error::Metric("empty histogram".into()));
        }
        let s: Vec<f64> = h.iter().map(|v| v / total + SMOOTHING).collect();
        let z: f64 = s.iter().sum();
        Ok(s.into_iter().map(|v| v / z).collect())
    };
    let (p, q) = (smooth(p)?, smooth(q)?);
    let kl: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
    Ok(kl.max(0.0))
}

fn histogram(set: &[&Image], lo: f32, hi: f32, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    let scale = bins as f64 / (hi - lo) as f64;
    for img in set {
        for &v in img.pixels() {
            let b = (((v - lo) as f64) * scale) as usize;
            h[b.min(bins - 1)] += 1.0;
        }
    }
    h
}

/// KL(P_a || P_b) between pooled intensity histograms over the joint range.
pub fn kl_translation_fidelity(set_a: &[&Image], set_b: &[&Image], bins: usize) -> Result<f64> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::Metric("image sets must be nonempty".into()));
    }
    if bins == 0 {
        return Err(Error::Metric("need at least one bin".into()));
    }
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for img in set_a.iter().chain(set_b) {
        let (a, b) = img.min_max();
        lo = lo.min(a);
        hi = hi.max(b);
    }
    if !(hi > lo) {
        return Err(Error::Metric("both sets are the same constant image; histogram range is degenerate".into()));
    }
    kl_divergence(&histogram(set_a, lo, hi, bins), &histogram(set_b, lo, hi, bins))
}
