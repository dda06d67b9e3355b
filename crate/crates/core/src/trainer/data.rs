//! Case loading, intensity mapping and deterministic batch schedules.

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::synthdata::{
    augment, crop_body, load_image, load_mask, preprocess::extract_mask_patch, Image, Manifest,
    Mask, Modality, Offset, Split,
};

/// Standardized intensities are divided by this before clamping to the tanh range.
pub const INTENSITY_SCALE: f32 = 3.0;

/// One cropped case. `frame` is the shape of the source image, `offset` where the
/// crop sits in it.
#[derive(Clone, Debug)]
pub struct Case {
    pub id: String,
    pub image: Image,
    pub mask: Option<Mask>,
    pub offset: Offset,
    pub frame: (usize, usize),
}

/// Loads every case of `(modality, split)`, cropped to a `patch`-sided window
/// around the body (defaults to the image size).
pub fn load_cases(
    manifest: &Manifest,
    modality: Modality,
    split: Split,
    patch: Option<usize>,
) -> Result<Vec<Case>> {
    let mut out = Vec::new();
    for e in manifest.select(modality, split) {
        let img = load_image(manifest.resolve(&e.image_path))?;
        let mask = match &e.mask_path {
            Some(p) => Some(load_mask(manifest.resolve(p))?),
            None => None,
        };
        out.push(crop_case(&e.case_id, &img, mask.as_ref(), patch)?);
    }
    Ok(out)
}

pub fn crop_case(id: &str, img: &Image, mask: Option<&Mask>, patch: Option<usize>) -> Result<Case> {
    let patch = patch.unwrap_or(img.height().max(img.width()));
    let (image, offset) = crop_body(img, patch)?;
    let mask = mask.map(|m| {
        if m.shape() != img.shape() {
            return Err(Error::Shape(format!(
                "case {id}: mask {:?} vs image {:?}",
                m.shape(),
                img.shape()
            )));
        }
        Ok(extract_mask_patch(m, offset, patch))
    });
    Ok(Case {
        id: id.to_string(),
        image,
        mask: mask.transpose()?,
        offset,
        frame: img.shape(),
    })
}

pub fn require_nonempty(cases: &[Case], what: &str) -> Result<()> {
    if cases.is_empty() {
        return Err(Error::Config(format!("{what} split is empty")));
    }
    Ok(())
}

/// Per-image standardization, then scaling into [-1, 1].
pub fn normalize(img: &Image) -> Vec<f32> {
    img.standardized()
        .pixels()
        .iter()
        .map(|v| (v / INTENSITY_SCALE).clamp(-1.0, 1.0))
        .collect()
}

pub fn image_batch(images: &[&Image], dtype: DType) -> Result<Tensor> {
    let (h, w) = images.first().map(|i| i.shape()).ok_or_else(|| Error::Shape("empty batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.shape() != (h, w) {
            return Err(Error::Shape("batch images differ in shape".into()));
        }
        data.extend(normalize(img));
    }
    Ok(Tensor::from_vec(data, (images.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn mask_batch(masks: &[&Mask], dtype: DType) -> Result<Tensor> {
    let (h, w) = masks.first().map(|m| m.shape()).ok_or_else(|| Error::Shape("empty batch".into()))?;
    let data: Vec<f32> = masks.iter().flat_map(|m| m.pixels().iter().map(|&p| p as f32)).collect();
    Ok(Tensor::from_vec(data, (masks.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stateless seed for a position in the schedule; every stream of randomness in
/// training is keyed by `(seed, tag, indices...)`.
pub fn derive_seed(seed: u64, tag: &str, parts: &[u64]) -> u64 {
    let mut h = splitmix(seed);
    for b in tag.bytes() {
        h = splitmix(h ^ b as u64);
    }
    for &p in parts {
        h = splitmix(h ^ p);
    }
    h
}

pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Image/mask pair after optional augmentation.
pub fn prepare(case: &Case, aug_seed: Option<u64>) -> Result<(Image, Mask)> {
    let mask = case
        .mask
        .as_ref()
        .ok_or_else(|| Error::Config(format!("case {} has no mask", case.id)))?;
    match aug_seed {
        Some(s) => augment(&case.image, mask, s),
        None => Ok((case.image.clone(), mask.clone())),
    }
}

/// Schedule of one epoch: CBCT batches cover a shuffled permutation (the last
/// incomplete batch is dropped); MRI indices come from an independent permutation
/// and wrap around.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochPlan {
    pub cbct: Vec<Vec<usize>>,
    pub mri: Vec<Vec<usize>>,
}

pub fn plan_epoch(
    seed: u64,
    epoch: usize,
    n_cbct: usize,
    n_mri: usize,
    batch: usize,
    max_steps: Option<usize>,
) -> EpochPlan {
    let pc = permutation(n_cbct, derive_seed(seed, "cbct_order", &[epoch as u64]));
    let mut steps = n_cbct / batch;
    if let Some(m) = max_steps {
        steps = steps.min(m);
    }
    let cbct = (0..steps).map(|s| pc[s * batch..(s + 1) * batch].to_vec()).collect();
    let mri = if n_mri == 0 {
        Vec::new()
    } else {
        let pm = permutation(n_mri, derive_seed(seed, "mri_order", &[epoch as u64]));
        (0..steps)
            .map(|s| (0..batch).map(|j| pm[(s * batch + j) % n_mri]).collect())
            .collect()
    };
    EpochPlan { cbct, mri }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::Spacing;

    #[test]
    fn plan_is_deterministic_and_drops_last() {
        let a = plan_epoch(3, 1, 7, 3, 2, None);
        assert_eq!(a, plan_epoch(3, 1, 7, 3, 2, None));
        assert_eq!(a.cbct.len(), 3);
        let mut seen: Vec<usize> = a.cbct.concat();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 6);
        assert_eq!(a.mri.len(), 3);
        assert_ne!(a.cbct, plan_epoch(3, 2, 7, 3, 2, None).cbct);
        assert_eq!(plan_epoch(3, 1, 7, 3, 2, Some(1)).cbct.len(), 1);
    }

    #[test]
    fn normalized_range_and_batches() {
        let px: Vec<f32> = (0..256).map(|i| if i % 17 == 0 { 100.0 } else { i as f32 * 0.01 }).collect();
        let img = Image::new(16, 16, px, Spacing::UNIT, Modality::Cbct).unwrap();
        assert!(normalize(&img).iter().all(|v| (-1.0..=1.0).contains(v)));
        let t = image_batch(&[&img, &img], DType::F32).unwrap();
        assert_eq!(t.dims(), &[2, 1, 16, 16]);
        let m = Mask::from_fn(16, 16, Spacing::UNIT, |r, _| r < 4);
        let mt = mask_batch(&[&m], DType::F32).unwrap();
        assert_eq!(mt.sum_all().unwrap().to_scalar::<f32>().unwrap(), 64.0);
    }

    #[test]
    fn derived_seeds_separate_tags_and_indices() {
        assert_ne!(derive_seed(1, "a", &[0]), derive_seed(1, "b", &[0]));
        assert_ne!(derive_seed(1, "a", &[0, 1]), derive_seed(1, "a", &[1, 0]));
        assert_eq!(derive_seed(9, "aug", &[2, 3]), derive_seed(9, "aug", &[2, 3]));
    }
}
