//! Inference with trained bundles: translation, segmentation and tap export.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::config::TrainMode;
use super::data::{crop_case, normalize, Case};
use crate::error::{Error, Result};
use crate::losses::tumour_channel;
use crate::metrics::stitch_slice;
use crate::netgraph::{save_grids, CheckpointMeta, FeatureGrid, Mode, ModelBundle, Network};
use crate::synthdata::{Image, Mask, Modality};

pub const THRESHOLD: f32 = 0.5;

/// Which network produces a segmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentMode {
    /// CBCT segmenter on the raw image; no translation at test time.
    Student,
    /// Generator to pseudo-MRI, then the MRI segmenter.
    TeacherOnPmri,
    /// Two-channel segmenter on the image stacked with its pseudo-MRI.
    StudentWithPmri,
}

impl SegmentMode {
    pub fn name(self) -> &'static str {
        match self {
            SegmentMode::Student => "student",
            SegmentMode::TeacherOnPmri => "teacher_on_pmri",
            SegmentMode::StudentWithPmri => "student_with_pmri",
        }
    }

    /// The segmenter a mode was trained to produce.
    pub fn default_for(mode: TrainMode) -> Self {
        match mode {
            TrainMode::Cmedl | TrainMode::CbctOnly => SegmentMode::Student,
            TrainMode::PmriSeg => SegmentMode::TeacherOnPmri,
            TrainMode::CbctPlusPmri => SegmentMode::StudentWithPmri,
        }
    }
}

impl fmt::Display for SegmentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SegmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [SegmentMode::Student, SegmentMode::TeacherOnPmri, SegmentMode::StudentWithPmri]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown segment mode `{s}`; valid: student, teacher_on_pmri, student_with_pmri"
                ))
            })
    }
}

/// Training mode recorded in a checkpoint written by the trainer.
pub fn checkpoint_mode(meta: &CheckpointMeta) -> Result<TrainMode> {
    let v = meta
        .state
        .get("config")
        .and_then(|c| c.get("mode"))
        .ok_or_else(|| Error::SpecMismatch("checkpoint does not record a training mode".into()))?;
    Ok(serde_json::from_value(v.clone())?)
}

/// Tumour probabilities `(N, 1, H, W)` for normalized CBCT inputs `(N, 1, H, W)`.
pub fn predict_probs(bundle: &ModelBundle, mode: SegmentMode, x: &Tensor) -> Result<Tensor> {
    let eval = Mode::Eval;
    let probs = match mode {
        SegmentMode::Student => {
            let s = bundle.student()?;
            if s.spec().in_channels != 1 {
                return Err(Error::SpecMismatch(
                    "student expects a pseudo-MRI channel; use student_with_pmri".into(),
                ));
            }
            s.forward(x, eval)?
        }
        SegmentMode::TeacherOnPmri => {
            let pm = bundle.translation()?.g_c2m.forward(x, eval)?;
            bundle.teacher()?.forward(&pm, eval)?
        }
        SegmentMode::StudentWithPmri => {
            let pm = bundle.translation()?.g_c2m.forward(x, eval)?;
            bundle.student()?.forward(&Tensor::cat(&[x, &pm], 1)?, eval)?
        }
    };
    tumour_channel(&probs)
}

fn case_tensor(cases: &[&Case], dtype: DType) -> Result<Tensor> {
    let (h, w) = cases[0].image.shape();
    let data: Vec<f32> = cases.iter().flat_map(|c| normalize(&c.image)).collect();
    Ok(Tensor::from_vec(data, (cases.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Probability maps of the cropped cases, evaluated in chunks.
pub fn predict_cases(bundle: &ModelBundle, mode: SegmentMode, cases: &[Case], chunk: usize) -> Result<Vec<Vec<f32>>> {
    let dtype = bundle_dtype(bundle);
    let mut out = Vec::with_capacity(cases.len());
    for part in cases.chunks(chunk.max(1)) {
        let refs: Vec<&Case> = part.iter().collect();
        let p = predict_probs(bundle, mode, &case_tensor(&refs, dtype)?)?.to_dtype(DType::F32)?;
        for i in 0..part.len() {
            out.push(p.get(i)?.flatten_all()?.to_vec1::<f32>()?);
        }
    }
    Ok(out)
}

pub fn bundle_dtype(bundle: &ModelBundle) -> DType {
    bundle
        .networks()
        .first()
        .map(|(_, n)| n.store().dtype())
        .unwrap_or(DType::F32)
}

pub fn threshold(probs: &[f32], h: usize, w: usize, like: &Image) -> Result<Mask> {
    let px = probs.iter().map(|&p| (p >= THRESHOLD) as u8).collect();
    Mask::new(h, w, px, like.spacing)
}

/// Segmentation of one image in its original frame.
#[derive(Clone, Debug)]
pub struct Segmentation {
    pub mask: Mask,
    /// Tumour probability in the original frame; zero where the crop did not reach.
    pub probs: Image,
}

/// Maps a prediction on a cropped case back to the source frame.
pub fn uncrop(case: &Case, probs: &[f32]) -> Result<Segmentation> {
    let (ph, pw) = case.image.shape();
    let (h, w) = case.frame;
    let spacing = case.image.spacing;
    let crop_mask = threshold(probs, ph, pw, &case.image)?;
    let mask = stitch_slice(case.frame, spacing, &[(crop_mask, case.offset)])?;
    let mut full = vec![0f32; h * w];
    for r in 0..ph {
        for c in 0..pw {
            let (fr, fc) = (case.offset.row + r as i64, case.offset.col + c as i64);
            if fr >= 0 && fc >= 0 && (fr as usize) < h && (fc as usize) < w {
                full[fr as usize * w + fc as usize] = probs[r * pw + c];
            }
        }
    }
    let probs = Image::new(h, w, full, spacing, case.image.modality)?;
    Ok(Segmentation { mask, probs })
}

pub fn segment(bundle: &ModelBundle, img: &Image, mode: SegmentMode) -> Result<Segmentation> {
    let case = crop_case("input", img, None, None)?;
    let probs = predict_cases(bundle, mode, std::slice::from_ref(&case), 1)?;
    uncrop(&case, &probs[0])
}

/// Pseudo-MRI of a CBCT image, same shape and spacing, values in (-1, 1).
pub fn translate(bundle: &ModelBundle, img: &Image) -> Result<Image> {
    let (h, w) = img.shape();
    let x = Tensor::from_vec(normalize(img), (1, 1, h, w), &Device::Cpu)?.to_dtype(bundle_dtype(bundle))?;
    let y = bundle.translation()?.g_c2m.forward(&x, Mode::Eval)?;
    let px = y.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Image::new(h, w, px, img.spacing, Modality::Pmri)
}

/// Whose taps to export.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapSource {
    /// CBCT segmenter on the image (for a `cbct_only` checkpoint this is the baseline).
    Student,
    /// MRI segmenter on the pseudo-MRI of the image.
    Teacher,
}

impl FromStr for TapSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "student" | "cbct_only" => Ok(TapSource::Student),
            "teacher" => Ok(TapSource::Teacher),
            other => Err(Error::Config(format!(
                "unknown tap source `{other}`; valid: student, teacher, cbct_only"
            ))),
        }
    }
}

/// Tap grids of a cropped case; they align with `case.mask`.
pub fn tap_grids(bundle: &ModelBundle, case: &Case, which: TapSource) -> Result<Vec<FeatureGrid>> {
    let x = case_tensor(&[case], bundle_dtype(bundle))?;
    let (_, taps) = match which {
        TapSource::Student => {
            let s = bundle.student()?;
            if s.spec().in_channels != 1 {
                return Err(Error::SpecMismatch("two-channel students are not supported for tap export".into()));
            }
            s.forward_with_taps(&x, Mode::Eval)?
        }
        TapSource::Teacher => {
            let pm = bundle.translation()?.g_c2m.forward(&x, Mode::Eval)?;
            bundle.teacher()?.forward_with_taps(&pm, Mode::Eval)?
        }
    };
    taps.grids(0, case.image.shape(), case.image.spacing)
}

pub fn export_taps(bundle: &ModelBundle, img: &Image, which: TapSource, path: &Path) -> Result<Vec<FeatureGrid>> {
    let grids = tap_grids(bundle, &crop_case("input", img, None, None)?, which)?;
    save_grids(path, &grids)?;
    Ok(grids)
}
