//! Tumour/background separability of pixel features.
//!
//! Pixel features are the concatenation of every tap grid sampled at the pixel
//! (nearest cell for downsampled taps). A balanced sample from a tumour-centred ROI
//! is scored with the Euclidean silhouette coefficient.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::FeatureGrid;
use crate::synthdata::Mask;

pub const MIN_PER_CLASS: usize = 10;
/// ROI side relative to the image side (160 px at 256).
pub const ROI_FRACTION: f64 = 160.0 / 256.0;
pub const TSNE_PERPLEXITY: f64 = 60.0;
pub const TSNE_ITERATIONS: usize = 1000;
const TABLE_MAGIC: &[u8; 4] = b"CMFT";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityOptions {
    /// Side of the square ROI; `None` scales with the image.
    pub roi_size: Option<usize>,
    /// Pixels drawn per class, capped by what the ROI holds.
    pub per_class: usize,
    pub seed: u64,
}

impl Default for SeparabilityOptions {
    fn default() -> Self {
        SeparabilityOptions { roi_size: None, per_class: 100, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSample {
    pub pixel_index: u32,
    pub label: u8,
    pub features: Vec<f32>,
}

pub fn default_roi(height: usize, width: usize) -> usize {
    ((height.min(width) as f64 * ROI_FRACTION).round() as usize).max(1)
}

/// Rows `[r0, r0 + side)` and cols `[c0, c0 + side)` centred on the tumour centroid,
/// shifted to stay inside the image.
fn roi_bounds(mask: &Mask, side: usize) -> Result<(usize, usize, usize)> {
    let (h, w) = mask.shape();
    let (mut sr, mut sc, mut n) = (0.0, 0.0, 0usize);
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) {
                sr += r as f64;
                sc += c as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Metric("mask has no tumour pixels".into()));
    }
    let side = side.min(h).min(w);
    let start = |centre: f64, len: usize| -> usize {
        let s = (centre - (side as f64 - 1.0) / 2.0).round().max(0.0) as usize;
        s.min(len - side)
    };
    Ok((start(sr / n as f64, h), start(sc / n as f64, w), side))
}

fn pixel_features(grids: &[FeatureGrid], h: usize, w: usize, r: usize, c: usize) -> Vec<f32> {
    let mut f = Vec::new();
    for g in grids {
        let gr = (r * g.height / h).min(g.height - 1);
        let gc = (c * g.width / w).min(g.width - 1);
        f.extend_from_slice(g.pixel(gr, gc));
    }
    f
}

/// Balanced tumour (label 1) and background (label 0) samples from the ROI.
pub fn sample_features(grids: &[FeatureGrid], mask: &Mask, opts: &SeparabilityOptions) -> Result<Vec<FeatureSample>> {
    if grids.is_empty() {
        return Err(Error::Metric("no feature grids".into()));
    }
    let (h, w) = mask.shape();
    let (r0, c0, side) = roi_bounds(mask, opts.roi_size.unwrap_or_else(|| default_roi(h, w)))?;
    let (mut fg, mut bg) = (Vec::new(), Vec::new());
    for r in r0..r0 + side {
        for c in c0..c0 + side {
            if mask.get(r, c) { fg.push((r, c)) } else { bg.push((r, c)) }
        }
    }
    let n = opts.per_class.min(fg.len()).min(bg.len());
    if n < MIN_PER_CLASS {
        return Err(Error::Metric(format!(
            "fewer than {MIN_PER_CLASS} pixels per class in the ROI ({} tumour, {} background, {} requested)",
            fg.len(),
            bg.len(),
            opts.per_class
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::with_capacity(2 * n);
    for (label, pool) in [(1u8, &mut fg), (0u8, &mut bg)] {
        pool.shuffle(&mut rng);
        for &(r, c) in pool.iter().take(n) {
            out.push(FeatureSample {
                pixel_index: (r * w + c) as u32,
                label,
                features: pixel_features(grids, h, w, r, c),
            });
        }
    }
    Ok(out)
}

/// Mean silhouette coefficient with Euclidean distance. Every label present must
/// have at least two members and there must be at least two labels.
pub fn silhouette(points: &[Vec<f32>], labels: &[u8]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::Metric("points and labels differ in length".into()));
    }
    let mut classes: Vec<u8> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Metric("silhouette needs at least two classes".into()));
    }
    let sizes: Vec<usize> = classes.iter().map(|k| labels.iter().filter(|l| *l == k).count()).collect();
    if sizes.iter().any(|&s| s < 2) {
        return Err(Error::Metric("every class needs at least two points".into()));
    }
    let dist = |a: &[f32], b: &[f32]| -> f64 {
        a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
    };
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums = vec![0.0; classes.len()];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                let k = classes.binary_search(&labels[j]).unwrap();
                sums[k] += dist(p, q);
            }
        }
        let own = classes.binary_search(&labels[i]).unwrap();
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..classes.len())
            .filter(|&k| k != own)
            .map(|k| sums[k] / sizes[k] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    Ok(total / points.len() as f64)
}

pub fn score_samples(samples: &[FeatureSample]) -> Result<f64> {
    let points: Vec<Vec<f32>> = samples.iter().map(|s| s.features.clone()).collect();
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    silhouette(&points, &labels)
}

/// Samples the ROI and scores it.
pub fn feature_separability(grids: &[FeatureGrid], mask: &Mask, opts: &SeparabilityOptions) -> Result<(f64, Vec<FeatureSample>)> {
    let samples = sample_features(grids, mask, opts)?;
    Ok((score_samples(&samples)?, samples))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableHeader {
    pub case_ids: Vec<String>,
    pub tap_names: Vec<String>,
    pub channels: usize,
    pub records: usize,
    pub tsne_perplexity: f64,
    pub tsne_iterations: usize,
    pub record_layout: String,
}

/// Writes `MAGIC | u32 header length | JSON header | records`. A record is
/// `u32 case index | u32 pixel index | u8 label | f32 x channels`, little endian.
pub fn write_feature_table(path: &Path, tap_names: &[String], cases: &[(String, Vec<FeatureSample>)]) -> Result<TableHeader> {
    let channels = cases.iter().flat_map(|(_, s)| s.first()).map(|s| s.features.len()).next().unwrap_or(0);
    if cases.iter().flat_map(|(_, s)| s).any(|s| s.features.len() != channels) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    let header = TableHeader {
        case_ids: cases.iter().map(|(id, _)| id.clone()).collect(),
        tap_names: tap_names.to_vec(),
        channels,
        records: cases.iter().map(|(_, s)| s.len()).sum(),
        tsne_perplexity: TSNE_PERPLEXITY,
        tsne_iterations: TSNE_ITERATIONS,
        record_layout: "u32 case_index, u32 pixel_index, u8 label, f32 x channels (little endian)".into(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(8 + json.len() + header.records * (9 + 4 * channels));
    buf.extend_from_slice(TABLE_MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (ci, (_, samples)) in cases.iter().enumerate() {
        for s in samples {
            buf.extend_from_slice(&(ci as u32).to_le_bytes());
            buf.extend_from_slice(&s.pixel_index.to_le_bytes());
            buf.push(s.label);
            for v in &s.features {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(header)
}

pub fn read_feature_table(path: &Path) -> Result<(TableHeader, Vec<(u32, FeatureSample)>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if buf.len() < 8 || &buf[..4] != TABLE_MAGIC {
        return Err(bad("not a feature table"));
    }
    let hl = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let header: TableHeader = serde_json::from_slice(buf.get(8..8 + hl).ok_or_else(|| bad("truncated header"))?)?;
    let rec = 9 + 4 * header.channels;
    let body = &buf[8 + hl..];
    if body.len() != rec * header.records {
        return Err(bad("record section has the wrong length"));
    }
    let rows = body
        .chunks_exact(rec)
        .map(|r| {
            let u = |i: usize| u32::from_le_bytes(r[i..i + 4].try_into().unwrap());
            let features = r[9..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            (u(0), FeatureSample { pixel_index: u(4), label: r[8], features })
        })
        .collect();
    Ok((header, rows))
}
