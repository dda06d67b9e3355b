//! Test-time weight dropout on the last two layers of a segmenter.

use candle_core::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::volume::dsc2d;
use crate::error::{Error, Result};
use crate::netgraph::ModelBundle;
use crate::trainer::data::{derive_seed, Case};
use crate::trainer::infer::{predict_cases, threshold, SegmentMode};

pub const DEFAULT_RATE: f64 = 0.5;
pub const DEFAULT_RUNS: usize = 10;
const CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    pub rate: f64,
    pub runs: usize,
    pub seed: u64,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        DropoutConfig { rate: DEFAULT_RATE, runs: DEFAULT_RUNS, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseSensitivity {
    pub case_id: String,
    pub dsc_runs: Vec<f64>,
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub config: DropoutConfig,
    pub cases: Vec<CaseSensitivity>,
    /// Mean of the per-case standard deviations.
    pub msd: f64,
}

impl DropoutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs < 2 {
            return Err(Error::Config(format!("runs < 2 (got {}); a spread needs at least two runs", self.runs)));
        }
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1], got {}", self.rate)));
        }
        Ok(())
    }
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Puts the original weights back when dropped, so an error mid-run leaves the
/// bundle intact.
struct Restore(Vec<(Var, Tensor)>);

impl Drop for Restore {
    fn drop(&mut self) {
        for (var, t) in &self.0 {
            let _ = var.set(t);
        }
    }
}

fn zero_out(var: &Var, original: &Tensor, rate: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    let keep: Vec<f32> = (0..original.elem_count()).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 }).collect();
    let keep = Tensor::from_vec(keep, original.dims(), original.device())?.to_dtype(original.dtype())?;
    var.set(&original.mul(&keep)?)?;
    Ok(())
}

/// Segments `cases` `runs` times, each with an independent weight-zeroing pattern,
/// and reports per-case DSC spread against the case masks.
pub fn sensitivity_dropout(
    bundle: &ModelBundle,
    mode: SegmentMode,
    cases: &[Case],
    cfg: DropoutConfig,
) -> Result<SensitivityReport> {
    cfg.validate()?;
    let net = match mode {
        SegmentMode::TeacherOnPmri => bundle.teacher()?,
        SegmentMode::Student | SegmentMode::StudentWithPmri => bundle.student()?,
    };
    let vars = net.final_weights();
    if vars.len() != 2 {
        return Err(Error::SpecMismatch(format!("expected two final layers, found {}", vars.len())));
    }
    let truth = cases
        .iter()
        .map(|c| c.mask.as_ref().ok_or_else(|| Error::Metric(format!("case `{}` has no ground truth", c.id))))
        .collect::<Result<Vec<_>>>()?;
    let guard = Restore(vars.iter().map(|v| Ok((v.clone(), v.as_tensor().copy()?))).collect::<Result<_>>()?);

    let mut runs = vec![Vec::with_capacity(cfg.runs); cases.len()];
    for run in 0..cfg.runs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dropout", &[run as u64]));
        for (var, original) in &guard.0 {
            zero_out(var, original, cfg.rate, &mut rng)?;
        }
        let probs = predict_cases(bundle, mode, cases, CHUNK)?;
        for (i, (case, p)) in cases.iter().zip(&probs).enumerate() {
            let (h, w) = case.image.shape();
            runs[i].push(dsc2d(&threshold(p, h, w, &case.image)?, truth[i])?);
        }
    }
    drop(guard);

    let cases: Vec<CaseSensitivity> = cases
        .iter()
        .zip(runs)
        .map(|(c, d)| CaseSensitivity { case_id: c.id.clone(), sd: sample_sd(&d), dsc_runs: d })
        .collect();
    let msd = if cases.is_empty() { 0.0 } else { cases.iter().map(|c| c.sd).sum::<f64>() / cases.len() as f64 };
    Ok(SensitivityReport { config: cfg, cases, msd })
}
