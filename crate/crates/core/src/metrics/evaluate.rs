//! Per-case segmentation metrics for several methods and their pairwise comparison.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::kl::{kl_translation_fidelity, DEFAULT_BINS};
use super::stats::{holm_bonferroni, wilcoxon_paired, MIN_PAIRS};
use super::surface::{hd95, surface_dsc};
use super::volume::{dsc, VolumeMask};
use crate::error::{Error, Result};
use crate::netgraph::ModelBundle;
use crate::synthdata::{load_image, load_mask, Image, Manifest, Mask, Modality, Split};
use crate::trainer::data::{crop_case, Case};
use crate::trainer::infer::{predict_cases, translate, uncrop, SegmentMode};

pub const CASES_FILE: &str = "metrics_cases.csv";
pub const SUMMARY_FILE: &str = "metrics_summary.json";
const CHUNK: usize = 16;

/// A cropped case plus its ground truth in the source frame.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub case: Case,
    pub truth: Mask,
}

pub fn load_eval_cases(manifest: &Manifest, split: Split) -> Result<Vec<EvalCase>> {
    manifest
        .select(Modality::Cbct, split)
        .into_iter()
        .map(|e| {
            let img = load_image(manifest.resolve(&e.image_path))?;
            let path = e
                .mask_path
                .as_ref()
                .ok_or_else(|| Error::Metric(format!("case `{}` has no mask", e.case_id)))?;
            let truth = load_mask(manifest.resolve(path))?;
            Ok(EvalCase { case: crop_case(&e.case_id, &img, Some(&truth), None)?, truth })
        })
        .collect()
}

pub struct Method<'a> {
    pub name: String,
    pub bundle: &'a ModelBundle,
    pub mode: SegmentMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub case_id: String,
    pub method: String,
    pub dsc: Option<f64>,
    pub sdsc: Option<f64>,
    pub hd95_mm: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub n: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
}

impl MeanSd {
    pub fn of(v: &[f64]) -> Self {
        let n = v.len();
        let mean = (n > 0).then(|| v.iter().sum::<f64>() / n as f64);
        let sd = mean.filter(|_| n > 1).map(|m| (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        MeanSd { n, mean, sd }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub dsc: MeanSd,
    pub sdsc: MeanSd,
    pub hd95_mm: MeanSd,
    pub failed_cases: usize,
    /// KL(pseudo-MRI || reference MRI) when the method has a generator and a
    /// reference set was given.
    pub kl: Option<f64>,
}

/// Raw and Holm-adjusted p-values; `None` where fewer than the minimum pairs exist.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PValueMatrix {
    pub raw: Vec<Vec<Option<f64>>>,
    pub holm: Vec<Vec<Option<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub methods: Vec<String>,
    pub tau_mm: f64,
    pub per_method: BTreeMap<String, MethodSummary>,
    pub p_values: BTreeMap<String, PValueMatrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<CaseRow>,
    pub summary: Summary,
}

/// DSC and surface DSC are always defined; HD95 fails on an empty mask and is
/// then recorded as the row's error.
fn case_row(method: &str, id: &str, pred: Result<Mask>, truth: &Mask, tau: f64) -> CaseRow {
    let mut row = CaseRow { case_id: id.into(), method: method.into(), dsc: None, sdsc: None, hd95_mm: None, error: None };
    let t = VolumeMask::single(truth.clone());
    let scored = pred.and_then(|p| {
        let p = VolumeMask::single(p);
        row.dsc = Some(dsc(&p, &t)?);
        row.sdsc = Some(surface_dsc(&p, &t, tau)?);
        row.hd95_mm = Some(hd95(&p, &t)?);
        Ok(())
    });
    row.error = scored.err().map(|e| e.to_string());
    row
}

fn method_rows(m: &Method, cases: &[EvalCase], tau: f64) -> Vec<CaseRow> {
    let plain: Vec<Case> = cases.iter().map(|c| c.case.clone()).collect();
    match predict_cases(m.bundle, m.mode, &plain, CHUNK) {
        Ok(probs) => cases
            .iter()
            .zip(probs)
            .map(|(c, p)| case_row(&m.name, &c.case.id, uncrop(&c.case, &p).map(|s| s.mask), &c.truth, tau))
            .collect(),
        Err(e) => {
            let msg = e.to_string();
            cases.iter().map(|c| case_row(&m.name, &c.case.id, Err(Error::Metric(msg.clone())), &c.truth, tau)).collect()
        }
    }
}

/// Pseudo-MRI KL against `reference`, or `None` if the method has no generator.
fn method_kl(m: &Method, cases: &[EvalCase], reference: &[Image]) -> Result<Option<f64>> {
    if reference.is_empty() || m.bundle.translation.is_none() || cases.is_empty() {
        return Ok(None);
    }
    let pm = cases.iter().map(|c| translate(m.bundle, &c.case.image)).collect::<Result<Vec<_>>>()?;
    let a: Vec<&Image> = pm.iter().collect();
    let b: Vec<&Image> = reference.iter().collect();
    Ok(Some(kl_translation_fidelity(&a, &b, DEFAULT_BINS)?))
}

/// Pairwise tests on the cases where both methods produced the metric.
fn compare(names: &[String], rows: &[CaseRow], pick: fn(&CaseRow) -> Option<f64>) -> PValueMatrix {
    let k = names.len();
    let by_method: Vec<BTreeMap<&str, f64>> = names
        .iter()
        .map(|n| rows.iter().filter(|r| &r.method == n).filter_map(|r| pick(r).map(|v| (r.case_id.as_str(), v))).collect())
        .collect();
    let mut raw = vec![vec![None; k]; k];
    let mut flat = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            let (xs, ys): (Vec<f64>, Vec<f64>) =
                by_method[i].iter().filter_map(|(id, x)| by_method[j].get(id).map(|y| (*x, *y))).unzip();
            if xs.len() >= MIN_PAIRS {
                if let Ok(r) = wilcoxon_paired(&xs, &ys) {
                    raw[i][j] = Some(r.p_value);
                    raw[j][i] = Some(r.p_value);
                    flat.push((i, j, r.p_value));
                }
            }
        }
    }
    let mut holm = vec![vec![None; k]; k];
    let adj = holm_bonferroni(&flat.iter().map(|f| f.2).collect::<Vec<_>>()).unwrap_or_default();
    for ((i, j, _), a) in flat.iter().zip(adj) {
        holm[*i][*j] = Some(a);
        holm[*j][*i] = Some(a);
    }
    PValueMatrix { raw, holm }
}

/// Scores every method on every case. Per-case failures become rows with an error.
pub fn evaluate(methods: &[Method], cases: &[EvalCase], reference_mri: &[Image], tau_mm: f64) -> Result<MetricsReport> {
    if !(tau_mm >= 0.0) {
        return Err(Error::Metric(format!("tolerance must be >= 0, got {tau_mm}")));
    }
    let names: Vec<String> = methods.iter().map(|m| m.name.clone()).collect();
    let mut seen = names.clone();
    seen.sort();
    seen.dedup();
    if seen.len() != names.len() {
        return Err(Error::Config("method names must be unique".into()));
    }
    let mut rows = Vec::new();
    let mut per_method = BTreeMap::new();
    for m in methods {
        let r = method_rows(m, cases, tau_mm);
        let col = |f: fn(&CaseRow) -> Option<f64>| r.iter().filter_map(f).collect::<Vec<_>>();
        per_method.insert(
            m.name.clone(),
            MethodSummary {
                dsc: MeanSd::of(&col(|r| r.dsc)),
                sdsc: MeanSd::of(&col(|r| r.sdsc)),
                hd95_mm: MeanSd::of(&col(|r| r.hd95_mm)),
                failed_cases: r.iter().filter(|x| x.error.is_some()).count(),
                kl: method_kl(m, cases, reference_mri)?,
            },
        );
        rows.extend(r);
    }
    let mut p_values = BTreeMap::new();
    p_values.insert("dsc".to_string(), compare(&names, &rows, |r| r.dsc));
    p_values.insert("sdsc".to_string(), compare(&names, &rows, |r| r.sdsc));
    p_values.insert("hd95_mm".to_string(), compare(&names, &rows, |r| r.hd95_mm));
    Ok(MetricsReport { rows, summary: Summary { methods: names, tau_mm, per_method, p_values } })
}

impl MetricsReport {
    /// Writes the per-case CSV and the JSON summary into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(CASES_FILE);
        let io = |e: csv::Error| Error::Format(format!("{}: {e}", csv_path.display()));
        let mut w = csv::Writer::from_path(&csv_path).map_err(io)?;
        w.write_record(["case_id", "method", "dsc", "sdsc", "hd95_mm", "error"]).map_err(io)?;
        let num = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.case_id.clone(),
                r.method.clone(),
                num(r.dsc),
                num(r.sdsc),
                num(r.hd95_mm),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join(SUMMARY_FILE);
        std::fs::write(&json_path, serde_json::to_vec_pretty(&self.summary)?).map_err(|e| Error::io(&json_path, e))?;
        Ok((csv_path, json_path))
    }
}
