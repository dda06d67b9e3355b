//! Brute-force references shared by the integration tests.
#![allow(dead_code)]

use cmedl::synthdata::{Mask, Spacing};
use rand::Rng;

pub fn random_mask<R: Rng>(rng: &mut R, h: usize, w: usize, density: f64, spacing: Spacing) -> Mask {
    Mask::from_fn(h, w, spacing, |_, _| rng.gen_bool(density))
}

fn edge_pixels(m: &Mask) -> Vec<(usize, usize)> {
    let (h, w) = m.shape();
    let inside = |r: i64, c: i64| r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && m.get(r as usize, c as usize);
    let mut out = Vec::new();
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            if inside(r, c) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dr, dc)| !inside(r + dr, c + dc)) {
                out.push((r as usize, c as usize));
            }
        }
    }
    out
}

fn nearest(p: (usize, usize), set: &[(usize, usize)], sp: Spacing) -> f64 {
    set.iter()
        .map(|q| {
            let dr = (p.0 as f64 - q.0 as f64) * sp.row as f64;
            let dc = (p.1 as f64 - q.1 as f64) * sp.col as f64;
            (dr * dr + dc * dc).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// All-pairs directed distances between the two boundaries.
pub fn brute_distances(a: &Mask, b: &Mask) -> (Vec<f64>, Vec<f64>) {
    let (ea, eb) = (edge_pixels(a), edge_pixels(b));
    let sp = a.spacing;
    (ea.iter().map(|&p| nearest(p, &eb, sp)).collect(), eb.iter().map(|&p| nearest(p, &ea, sp)).collect())
}

pub fn brute_surface_dsc(a: &Mask, b: &Mask, tau: f64) -> f64 {
    match (a.count() == 0, b.count() == 0) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let (ab, ba) = brute_distances(a, b);
    let hit = ab.iter().chain(&ba).filter(|&&d| d <= tau).count();
    hit as f64 / (ab.len() + ba.len()) as f64
}

pub fn brute_hd95(a: &Mask, b: &Mask) -> f64 {
    let (mut d, ba) = brute_distances(a, b);
    d.extend(ba);
    d.sort_by(|x, y| x.total_cmp(y));
    let h = (d.len() - 1) as f64 * 0.95;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(d.len() - 1);
    d[lo] + (h - lo as f64) * (d[hi] - d[lo])
}

pub fn brute_dsc(a: &Mask, b: &Mask) -> f64 {
    let (h, w) = a.shape();
    let (mut i, mut na, mut nb) = (0, 0, 0);
    for r in 0..h {
        for c in 0..w {
            let (x, y) = (a.get(r, c), b.get(r, c));
            na += x as usize;
            nb += y as usize;
            i += (x && y) as usize;
        }
    }
    if na + nb == 0 { 1.0 } else { 2.0 * i as f64 / (na + nb) as f64 }
}

/// Two-sided signed-rank p-value by enumerating all 2^n sign patterns of the
/// (average-tied) ranks: the share at least as far from the null mean as observed.
pub fn enumerated_wilcoxon_p(diffs: &[f64]) -> f64 {
    let d: Vec<f64> = diffs.iter().copied().filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return 1.0;
    }
    let ranks: Vec<f64> = d
        .iter()
        .map(|x| {
            let less = d.iter().filter(|y| y.abs() < x.abs()).count() as f64;
            let eq = d.iter().filter(|y| y.abs() == x.abs()).count() as f64;
            less + (eq + 1.0) / 2.0
        })
        .collect();
    let total: f64 = ranks.iter().sum();
    let obs: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let dev = (obs - total / 2.0).abs();
    let mut hits = 0u64;
    for pattern in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| pattern >> i & 1 == 1).map(|i| ranks[i]).sum();
        if (w - total / 2.0).abs() >= dev - 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << n) as f64
}

pub mod losses;
