//! Binary image and mask files.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic[4]  "CMI1" (image) | "CMS1" (mask)
//! u32       height
//! u32       width
//! f32       row spacing (mm)
//! f32       col spacing (mm)
//! u8        modality tag (0 CBCT, 1 MRI, 2 PMRI, 3 PCBCT; 255 = untagged mask)
//! payload   height*width f32 (image) or u8 (mask), row-major
//! ```

use std::fs;
use std::path::Path;

use super::image::{Image, Mask, Modality, Spacing};
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: &[u8; 4] = b"CMI1";
pub const MASK_MAGIC: &[u8; 4] = b"CMS1";
pub const UNTAGGED: u8 = 255;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 4 + 1;

struct Header {
    height: usize,
    width: usize,
    spacing: Spacing,
    tag: u8,
}

fn write_header(buf: &mut Vec<u8>, magic: &[u8; 4], h: usize, w: usize, sp: Spacing, tag: u8) {
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&sp.row.to_le_bytes());
    buf.extend_from_slice(&sp.col.to_le_bytes());
    buf.push(tag);
}

fn read_header(bytes: &[u8], magic: &[u8; 4]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "file too short for header: {} bytes",
            bytes.len()
        )));
    }
    if &bytes[0..4] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[0..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let spacing = Spacing::new(f32_at(12), f32_at(16))
        .map_err(|_| Error::Format(format!("invalid spacing ({}, {})", f32_at(12), f32_at(16))))?;
    Ok(Header {
        height: u32_at(4),
        width: u32_at(8),
        spacing,
        tag: bytes[20],
    })
}

pub fn encode_image(img: &Image) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + img.pixels().len() * 4);
    write_header(
        &mut buf,
        IMAGE_MAGIC,
        img.height(),
        img.width(),
        img.spacing,
        img.modality.tag(),
    );
    for v in img.pixels() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let h = read_header(bytes, IMAGE_MAGIC)?;
    let modality = Modality::from_tag(h.tag)
        .ok_or_else(|| Error::Format(format!("unknown modality tag {}", h.tag)))?;
    let payload = &bytes[HEADER_LEN..];
    let expected = h.height.checked_mul(h.width).and_then(|n| n.checked_mul(4));
    if expected != Some(payload.len()) {
        return Err(Error::Format(format!(
            "payload of {} bytes does not match {}x{} float32 grid",
            payload.len(),
            h.height,
            h.width
        )));
    }
    let pixels = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Image::new(h.height, h.width, pixels, h.spacing, modality)
        .map_err(|e| Error::Format(e.to_string()))
}

pub fn encode_mask(mask: &Mask) -> Result<Vec<u8>> {
    if let Some(bad) = mask.pixels().iter().find(|&&v| v > 1) {
        return Err(Error::Format(format!("mask value {bad} is not binary")));
    }
    let tag = mask.modality.map(Modality::tag).unwrap_or(UNTAGGED);
    let mut buf = Vec::with_capacity(HEADER_LEN + mask.pixels().len());
    write_header(
        &mut buf,
        MASK_MAGIC,
        mask.height(),
        mask.width(),
        mask.spacing,
        tag,
    );
    buf.extend_from_slice(mask.pixels());
    Ok(buf)
}

pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let h = read_header(bytes, MASK_MAGIC)?;
    let modality = match h.tag {
        UNTAGGED => None,
        t => Some(
            Modality::from_tag(t)
                .ok_or_else(|| Error::Format(format!("unknown modality tag {t}")))?,
        ),
    };
    let payload = &bytes[HEADER_LEN..];
    if h.height.checked_mul(h.width) != Some(payload.len()) {
        return Err(Error::Format(format!(
            "payload of {} bytes does not match {}x{} u8 grid",
            payload.len(),
            h.height,
            h.width
        )));
    }
    Ok(Mask::new(h.height, h.width, payload.to_vec(), h.spacing)?.with_modality(modality))
}

pub fn save_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_image(img)).map_err(|e| Error::io(path, e))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    decode_image(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_mask(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mask(mask)?).map_err(|e| Error::io(path, e))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    decode_mask(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
