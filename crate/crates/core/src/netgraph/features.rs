//! Named intermediate activations and their on-disk form.

use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::synthdata::Spacing;

const MAGIC: &[u8; 4] = b"CMF1";

/// Ordered taps captured during one forward pass, each `(N, C, H, W)`.
#[derive(Clone, Debug, Default)]
pub struct FeatureStack {
    pub layers: Vec<(String, Tensor)>,
}

impl FeatureStack {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.layers.push((name.into(), t));
    }

    pub fn names(&self) -> Vec<&str> {
        self.layers.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.layers.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn detach(&self) -> FeatureStack {
        FeatureStack {
            layers: self
                .layers
                .iter()
                .map(|(n, t)| (n.clone(), t.detach()))
                .collect(),
        }
    }

    /// Channel-last grids for one batch element. Tap spacing is the image spacing scaled
    /// by the downsampling factor.
    pub fn grids(
        &self,
        index: usize,
        image_size: (usize, usize),
        spacing: Spacing,
    ) -> Result<Vec<FeatureGrid>> {
        self.layers
            .iter()
            .map(|(name, t)| {
                let (_, c, h, w) = t.dims4()?;
                let data = t
                    .get(index)?
                    .permute((1, 2, 0))?
                    .to_dtype(DType::F32)?
                    .flatten_all()?
                    .to_vec1::<f32>()?;
                Ok(FeatureGrid {
                    name: name.clone(),
                    height: h,
                    width: w,
                    channels: c,
                    spacing: Spacing {
                        row: spacing.row * (image_size.0 as f32 / h as f32),
                        col: spacing.col * (image_size.1 as f32 / w as f32),
                    },
                    data,
                })
            })
            .collect()
    }
}

/// One tap for one image, stored channel-fastest: `data[(r * W + c) * C + ch]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub spacing: Spacing,
    pub data: Vec<f32>,
}

impl FeatureGrid {
    pub fn pixel(&self, r: usize, c: usize) -> &[f32] {
        let i = (r * self.width + c) * self.channels;
        &self.data[i..i + self.channels]
    }
}

pub fn encode_grids(grids: &[FeatureGrid]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(grids.len() as u32).to_le_bytes());
    for g in grids {
        out.extend_from_slice(&(g.name.len() as u16).to_le_bytes());
        out.extend_from_slice(g.name.as_bytes());
        for d in [g.height, g.width, g.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&g.spacing.row.to_le_bytes());
        out.extend_from_slice(&g.spacing.col.to_le_bytes());
        for v in &g.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("feature file truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_grids(buf: &[u8]) -> Result<Vec<FeatureGrid>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a feature file (bad magic)".into()));
    }
    let n = r.u32()?;
    let mut grids = Vec::new();
    for _ in 0..n {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("layer name is not UTF-8".into()))?;
        let (height, width, channels) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let spacing = Spacing {
            row: r.f32()?,
            col: r.f32()?,
        };
        let count = height * width * channels;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(r.f32()?);
        }
        grids.push(FeatureGrid {
            name,
            height,
            width,
            channels,
            spacing,
            data,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after feature layers".into()));
    }
    Ok(grids)
}

pub fn save_grids(path: impl AsRef<Path>, grids: &[FeatureGrid]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_grids(grids)).map_err(|e| Error::io(path, e))
}

pub fn load_grids(path: impl AsRef<Path>) -> Result<Vec<FeatureGrid>> {
    let path = path.as_ref();
    decode_grids(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
