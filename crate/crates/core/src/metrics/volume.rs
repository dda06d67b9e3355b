//! Stacked-slice volumes and overlap.

use crate::error::{Error, Result};
use crate::synthdata::{Mask, Offset, Spacing};

/// Aligned 2D slices with a slice thickness in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeMask {
    pub slices: Vec<Mask>,
    pub thickness: f64,
}

impl VolumeMask {
    pub fn new(slices: Vec<Mask>, thickness: f64) -> Result<Self> {
        if !(thickness > 0.0) {
            return Err(Error::Metric(format!("slice thickness must be positive, got {thickness}")));
        }
        if let Some(first) = slices.first() {
            for s in &slices[1..] {
                if s.shape() != first.shape() || s.spacing != first.spacing {
                    return Err(Error::Shape("slices differ in shape or spacing".into()));
                }
            }
        }
        Ok(VolumeMask { slices, thickness })
    }

    pub fn single(mask: Mask) -> Self {
        VolumeMask { slices: vec![mask], thickness: 1.0 }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let (h, w) = self.slices.first().map(|m| m.shape()).unwrap_or((0, 0));
        (self.slices.len(), h, w)
    }

    pub fn spacing(&self) -> Spacing {
        self.slices.first().map(|m| m.spacing).unwrap_or(Spacing::UNIT)
    }

    pub fn count(&self) -> usize {
        self.slices.iter().map(Mask::count).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Voxel (z, r, c) lookup.
    pub fn get(&self, z: usize, r: usize, c: usize) -> bool {
        self.slices[z].get(r, c)
    }
}

pub(crate) fn check_aligned(a: &VolumeMask, b: &VolumeMask) -> Result<()> {
    if a.shape() != b.shape() || a.spacing() != b.spacing() || a.thickness != b.thickness {
        return Err(Error::Shape(format!(
            "volumes differ: {:?}/{:?} vs {:?}/{:?}",
            a.shape(),
            a.spacing(),
            b.shape(),
            b.spacing()
        )));
    }
    Ok(())
}

/// Re-embeds patch predictions into a `frame`-sized slice; overlaps are OR-ed.
pub fn stitch_slice(frame: (usize, usize), spacing: Spacing, patches: &[(Mask, Offset)]) -> Result<Mask> {
    let (h, w) = frame;
    let mut out = Mask::zeros(h, w, spacing);
    for (p, off) in patches {
        if p.spacing != spacing {
            return Err(Error::Shape("patch spacing differs from frame spacing".into()));
        }
        for r in 0..p.height() {
            for c in 0..p.width() {
                if !p.get(r, c) {
                    continue;
                }
                let (fr, fc) = (off.row + r as i64, off.col + c as i64);
                if fr >= 0 && fc >= 0 && (fr as usize) < h && (fc as usize) < w {
                    out.set(fr as usize, fc as usize, true);
                }
            }
        }
    }
    Ok(out)
}

/// One stitched slice per entry of `slices`.
pub fn stitch_volume(
    frame: (usize, usize),
    spacing: Spacing,
    thickness: f64,
    slices: &[Vec<(Mask, Offset)>],
) -> Result<VolumeMask> {
    let out = slices.iter().map(|p| stitch_slice(frame, spacing, p)).collect::<Result<Vec<_>>>()?;
    VolumeMask::new(out, thickness)
}

/// Dice overlap; 1 when both are empty, 0 when exactly one is.
pub fn dsc(a: &VolumeMask, b: &VolumeMask) -> Result<f64> {
    check_aligned(a, b)?;
    let (na, nb) = (a.count(), b.count());
    if na == 0 && nb == 0 {
        return Ok(1.0);
    }
    let inter: usize = a
        .slices
        .iter()
        .zip(&b.slices)
        .map(|(x, y)| x.pixels().iter().zip(y.pixels()).filter(|(p, q)| **p != 0 && **q != 0).count())
        .sum();
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

pub fn dsc2d(a: &Mask, b: &Mask) -> Result<f64> {
    dsc(&VolumeMask::single(a.clone()), &VolumeMask::single(b.clone()))
}
