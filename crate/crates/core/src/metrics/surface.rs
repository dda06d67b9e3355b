//! Boundary extraction, exact Euclidean distance transform, surface Dice and HD95.

use super::volume::{check_aligned, VolumeMask};
use crate::error::{Error, Result};

/// Surface tolerance used for reporting, in mm.
pub const DEFAULT_TAU_MM: f64 = 4.38;

/// Relative slack on `d <= tau` so that equal distances compare equal whatever
/// order the squared terms were summed in.
const TAU_SLACK: f64 = 1e-12;

/// Foreground voxels with at least one in-plane 4-neighbour in the background;
/// outside the slice counts as background.
pub fn boundary(v: &VolumeMask) -> Vec<bool> {
    let (nz, h, w) = v.shape();
    let mut out = vec![false; nz * h * w];
    for z in 0..nz {
        let m = &v.slices[z];
        for r in 0..h {
            for c in 0..w {
                if !m.get(r, c) {
                    continue;
                }
                let edge = r == 0
                    || c == 0
                    || r + 1 == h
                    || c + 1 == w
                    || !m.get(r - 1, c)
                    || !m.get(r + 1, c)
                    || !m.get(r, c - 1)
                    || !m.get(r, c + 1);
                out[(z * h + r) * w + c] = edge;
            }
        }
    }
    out
}

/// Lower envelope of parabolas `spacing^2 (q - p)^2 + f[p]` (Felzenszwalb and
/// Huttenlocher). Infinite entries are not sites.
fn edt_1d(f: &[f64], spacing: f64, out: &mut [f64], v: &mut Vec<usize>, zs: &mut Vec<f64>) {
    let s2 = spacing * spacing;
    v.clear();
    zs.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    zs.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let (qf, pf) = (q as f64, p as f64);
                    let s = ((fq + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf));
                    if s <= *zs.last().unwrap() {
                        v.pop();
                        zs.pop();
                    } else {
                        v.push(q);
                        zs.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && zs[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = s2 * d * d + f[v[k]];
    }
}

/// Squared distance (mm^2) from every voxel to the nearest `site`, with voxel size
/// `(dz, dr, dc)`. Infinite when there are no sites.
pub fn squared_edt(sites: &[bool], shape: (usize, usize, usize), spacing: (f64, f64, f64)) -> Vec<f64> {
    let (nz, h, w) = shape;
    let mut g: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut zs) = (Vec::new(), Vec::new());
    let mut pass = |g: &mut Vec<f64>, len: usize, stride: usize, starts: Vec<usize>, sp: f64| {
        let mut line = vec![0.0; len];
        let mut out = vec![0.0; len];
        for s in starts {
            for i in 0..len {
                line[i] = g[s + i * stride];
            }
            edt_1d(&line, sp, &mut out, &mut v, &mut zs);
            for i in 0..len {
                g[s + i * stride] = out[i];
            }
        }
    };
    let cols: Vec<usize> = (0..nz * h).map(|i| i * w).collect();
    pass(&mut g, w, 1, cols, spacing.2);
    let rows: Vec<usize> = (0..nz).flat_map(|z| (0..w).map(move |c| z * h * w + c)).collect();
    pass(&mut g, h, w, rows, spacing.1);
    if nz > 1 {
        let planes: Vec<usize> = (0..h * w).collect();
        pass(&mut g, nz, h * w, planes, spacing.0);
    }
    g
}

fn spacing3(v: &VolumeMask) -> (f64, f64, f64) {
    let s = v.spacing();
    (v.thickness, s.row as f64, s.col as f64)
}

/// Distances (mm) from each boundary voxel of `from` to the boundary of `to`.
fn directed(from: &[bool], to_edt: &[f64]) -> Vec<f64> {
    from.iter()
        .zip(to_edt)
        .filter(|(b, _)| **b)
        .map(|(_, d)| d.sqrt())
        .collect()
}

pub fn surface_distances(a: &VolumeMask, b: &VolumeMask) -> Result<(Vec<f64>, Vec<f64>)> {
    check_aligned(a, b)?;
    let (ba, bb) = (boundary(a), boundary(b));
    let sp = spacing3(a);
    let ea = squared_edt(&ba, a.shape(), sp);
    let eb = squared_edt(&bb, a.shape(), sp);
    Ok((directed(&ba, &eb), directed(&bb, &ea)))
}

pub fn within(d: f64, tau: f64) -> bool {
    d <= tau * (1.0 + TAU_SLACK) + f64::MIN_POSITIVE
}

/// Fraction of both surfaces lying within `tau_mm` of the other surface.
/// 1 when both masks are empty, 0 when exactly one is.
pub fn surface_dsc(a: &VolumeMask, b: &VolumeMask, tau_mm: f64) -> Result<f64> {
    if !(tau_mm >= 0.0) {
        return Err(Error::Metric(format!("tolerance must be >= 0, got {tau_mm}")));
    }
    check_aligned(a, b)?;
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let (ab, ba) = surface_distances(a, b)?;
    let hit = ab.iter().chain(&ba).filter(|&&d| within(d, tau_mm)).count();
    Ok(hit as f64 / (ab.len() + ba.len()) as f64)
}

/// Linear interpolation between order statistics (type 7).
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Metric("percentile of an empty set".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(|x, y| x.total_cmp(y));
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// 95th percentile of the pooled directed surface distances, in mm.
pub fn hd95(a: &VolumeMask, b: &VolumeMask) -> Result<f64> {
    check_aligned(a, b)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::Metric("hd95 is undefined for an empty mask".into()));
    }
    let (mut ab, ba) = surface_distances(a, b)?;
    ab.extend(ba);
    percentile(&ab, 0.95)
}
