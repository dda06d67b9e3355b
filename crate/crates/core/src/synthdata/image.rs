//! Scalar intensity grids and binary masks with physical pixel spacing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_IMAGE_SIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "CBCT")]
    Cbct,
    #[serde(rename = "MRI")]
    Mri,
    #[serde(rename = "PMRI")]
    Pmri,
    #[serde(rename = "PCBCT")]
    Pcbct,
}

impl Modality {
    pub fn tag(self) -> u8 {
        match self {
            Modality::Cbct => 0,
            Modality::Mri => 1,
            Modality::Pmri => 2,
            Modality::Pcbct => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Modality::Cbct),
            1 => Some(Modality::Mri),
            2 => Some(Modality::Pmri),
            3 => Some(Modality::Pcbct),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Cbct => "CBCT",
            Modality::Mri => "MRI",
            Modality::Pmri => "PMRI",
            Modality::Pcbct => "PCBCT",
        }
    }
}

/// Pixel spacing in millimetres, (row, col).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub row: f32,
    pub col: f32,
}

impl Spacing {
    pub const UNIT: Spacing = Spacing { row: 1.0, col: 1.0 };

    pub fn new(row: f32, col: f32) -> Result<Self> {
        if !(row > 0.0 && col > 0.0 && row.is_finite() && col.is_finite()) {
            return Err(Error::Shape(format!(
                "spacing must be positive, got ({row}, {col})"
            )));
        }
        Ok(Spacing { row, col })
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Spacing::UNIT
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
    pub spacing: Spacing,
    pub modality: Modality,
}

impl Image {
    pub fn new(
        height: usize,
        width: usize,
        pixels: Vec<f32>,
        spacing: Spacing,
        modality: Modality,
    ) -> Result<Self> {
        if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
            return Err(Error::Shape(format!(
                "image must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        Spacing::new(spacing.row, spacing.col)?;
        Ok(Image {
            height,
            width,
            pixels,
            spacing,
            modality,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32, modality: Modality) -> Result<Self> {
        Image::new(
            height,
            width,
            vec![value; height * width],
            Spacing::UNIT,
            modality,
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.pixels[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.pixels[r * self.width + c] = v;
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.pixels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean_std(&self) -> (f64, f64) {
        mean_std(self.pixels.iter().map(|&v| v as f64))
    }

    pub fn is_constant(&self) -> bool {
        let (lo, hi) = self.min_max();
        lo == hi
    }

    /// Zero mean, unit variance over the whole grid. A constant image maps to all zeros.
    pub fn standardized(&self) -> Image {
        let (mean, std) = self.mean_std();
        let pixels = if std == 0.0 || self.is_constant() {
            vec![0.0; self.pixels.len()]
        } else {
            self.pixels
                .iter()
                .map(|&v| ((v as f64 - mean) / std) as f32)
                .collect()
        };
        Image {
            pixels,
            ..self.clone()
        }
    }

    pub fn with_modality(mut self, modality: Modality) -> Image {
        self.modality = modality;
        self
    }
}

pub(crate) fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Binary grid. `modality` records which image the mask annotates, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
    pub spacing: Spacing,
    pub modality: Option<Modality>,
}

impl Mask {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>, spacing: Spacing) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} pixels for a {height}x{width} mask",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|&&v| v > 1) {
            return Err(Error::Format(format!("mask value {bad} is not binary")));
        }
        Spacing::new(spacing.row, spacing.col)?;
        Ok(Mask {
            height,
            width,
            pixels,
            spacing,
            modality: None,
        })
    }

    pub fn zeros(height: usize, width: usize, spacing: Spacing) -> Self {
        Mask {
            height,
            width,
            pixels: vec![0; height * width],
            spacing,
            modality: None,
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        spacing: Spacing,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c) as u8);
            }
        }
        Mask {
            height,
            width,
            pixels,
            spacing,
            modality: None,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.pixels[r * self.width + c] != 0
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.pixels[r * self.width + c] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.iter().all(|&v| v == 0)
    }

    pub fn with_modality(mut self, modality: Option<Modality>) -> Mask {
        self.modality = modality;
        self
    }

    /// Centroid in (row, col) pixel coordinates, or `None` for an empty mask.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sr, mut sc, mut n) = (0.0, 0.0, 0usize);
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    sr += r as f64;
                    sc += c as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sr / n as f64, sc / n as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardization_hits_zero_mean_unit_std() {
        let px: Vec<f32> = (0..256)
            .map(|i| (i as f32 * 0.37).sin() * 3.0 + 5.0)
            .collect();
        let img = Image::new(16, 16, px, Spacing::UNIT, Modality::Cbct).unwrap();
        let (m, s) = img.standardized().mean_std();
        assert!(m.abs() < 1e-6, "{m}");
        assert!((s - 1.0).abs() < 1e-4, "{s}");
    }

    #[test]
    fn constant_image_standardizes_to_zeros() {
        let img = Image::filled(16, 16, 3.5, Modality::Mri).unwrap();
        assert!(img.standardized().pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_small_or_bad_images() {
        assert!(Image::filled(15, 16, 0.0, Modality::Cbct).is_err());
        assert!(Image::new(16, 16, vec![0.0; 10], Spacing::UNIT, Modality::Cbct).is_err());
        assert!(Spacing::new(0.0, 1.0).is_err());
        assert!(Mask::new(2, 2, vec![0, 1, 2, 0], Spacing::UNIT).is_err());
    }
}
