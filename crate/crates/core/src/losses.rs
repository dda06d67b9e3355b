//! Differentiable training objectives.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::{FeatureStack, Mode, Network};

pub const PROB_EPS: f64 = 1e-7;
pub const CX_BANDWIDTH: f64 = 0.5;
pub const CX_EPS: f64 = 1e-5;
pub const DICE_SMOOTH: f64 = 1.0;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_cyc: f64,
    pub lambda_cx: f64,
    pub lambda_hint: f64,
    pub lambda_seg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_adv: 1.0,
            lambda_cyc: 10.0,
            lambda_cx: 1.0,
            lambda_hint: 1.0,
            lambda_seg: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_adv", self.lambda_adv),
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_cx", self.lambda_cx),
            ("lambda_hint", self.lambda_hint),
            ("lambda_seg", self.lambda_seg),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-term values of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub adv_m: f64,
    pub adv_c: f64,
    pub cyc: f64,
    pub cx: f64,
    pub seg_teacher_real: f64,
    pub seg_teacher_pseudo: f64,
    pub seg_student: f64,
    pub hint: f64,
    pub total: f64,
}

impl LossReport {
    pub const COLUMNS: [&'static str; 9] = [
        "adv_m",
        "adv_c",
        "cyc",
        "cx",
        "seg_teacher_real",
        "seg_teacher_pseudo",
        "seg_student",
        "hint",
        "total",
    ];

    pub fn values(&self) -> [f64; 9] {
        [
            self.adv_m,
            self.adv_c,
            self.cyc,
            self.cx,
            self.seg_teacher_real,
            self.seg_teacher_pseudo,
            self.seg_student,
            self.hint,
            self.total,
        ]
    }

    /// Fills `total` from the terms; errors name the first non-finite term.
    pub fn finish(mut self, w: &LossWeights) -> Result<Self> {
        self.total = total_loss(
            &[
                ("adv_m", self.adv_m),
                ("adv_c", self.adv_c),
                ("cyc", self.cyc),
                ("cx", self.cx),
                ("hint", self.hint),
                ("seg_teacher_real", self.seg_teacher_real),
                ("seg_teacher_pseudo", self.seg_teacher_pseudo),
                ("seg_student", self.seg_student),
            ],
            w,
        )?;
        Ok(self)
    }
}

/// Weighted sum of named terms. Adversarial names start with `adv`, segmentation
/// names with `seg`; other names are `cyc`, `cx` and `hint`.
pub fn total_loss(terms: &[(&str, f64)], w: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for &(name, v) in terms {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let lambda = if name.starts_with("adv") {
            w.lambda_adv
        } else if name.starts_with("seg") {
            w.lambda_seg
        } else {
            match name {
                "cyc" => w.lambda_cyc,
                "cx" => w.lambda_cx,
                "hint" => w.lambda_hint,
                other => return Err(Error::Config(format!("unknown loss term `{other}`"))),
            }
        };
        total += lambda * v;
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("total".into()));
    }
    Ok(total)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn ensure_no_nan(t: &Tensor, what: &str) -> Result<()> {
    let nan = t
        .ne(t)?
        .to_dtype(DType::F32)?
        .sum_all()?
        .to_scalar::<f32>()?;
    if nan > 0.0 {
        return Err(Error::NonFinite(format!("{what} contains NaN")));
    }
    Ok(())
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Sigmoid computed through tanh, which stays finite for any logit.
fn probability(logits: &Tensor) -> Result<Tensor> {
    Ok(((logits * 0.5)?.tanh()? + 1.0)?
        .affine(0.5, 0.0)?
        .clamp(PROB_EPS, 1.0 - PROB_EPS)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Generator,
    Discriminator,
}

/// Discriminator side: `-(mean log D(real) + mean log(1 - D(fake)))`.
/// Generator side (non-saturating): `-mean log D(fake)`; `real` is ignored.
pub fn adversarial_loss(real: &Tensor, fake: &Tensor, side: Side) -> Result<Tensor> {
    ensure_no_nan(fake, "fake logits")?;
    let pf = probability(fake)?;
    match side {
        Side::Generator => Ok(pf.log()?.mean_all()?.neg()?),
        Side::Discriminator => {
            ensure_no_nan(real, "real logits")?;
            let pr = probability(real)?;
            let on_real = pr.log()?.mean_all()?;
            let on_fake = pf.affine(-1.0, 1.0)?.log()?.mean_all()?;
            Ok((on_real + on_fake)?.neg()?)
        }
    }
}

pub fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "l1")?;
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Mean L1 of both reconstruction cycles.
pub fn cycle_terms(x_c: &Tensor, rec_c: &Tensor, x_m: &Tensor, rec_m: &Tensor) -> Result<Tensor> {
    Ok((l1(rec_c, x_c)? + l1(rec_m, x_m)?)?)
}

pub fn cycle_loss(
    x_c: &Tensor,
    x_m: &Tensor,
    g_c2m: &dyn Fn(&Tensor) -> Result<Tensor>,
    g_m2c: &dyn Fn(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let rec_c = g_m2c(&g_c2m(x_c)?)?;
    let rec_m = g_c2m(&g_m2c(x_m)?)?;
    cycle_terms(x_c, &rec_c, x_m, &rec_m)
}

fn l2_rows(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(1)? + NORM_EPS)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

/// Contextual similarity between feature collections `g` (N_g x C, generated) and
/// `m` (N_m x C, target). Rows are unordered; the result lies in (0, 1].
pub fn contextual_similarity(g: &Tensor, m: &Tensor) -> Result<Tensor> {
    let (_, cg) = g.dims2()?;
    let (_, cm) = m.dims2()?;
    if cg != cm {
        return Err(Error::Shape(format!(
            "feature channels differ: {cg} vs {cm}"
        )));
    }
    let mu = m.mean_keepdim(0)?;
    let gn = l2_rows(&g.broadcast_sub(&mu)?)?;
    let mn = l2_rows(&m.broadcast_sub(&mu)?)?;
    let cos = gn.matmul(&mn.t()?)?;
    let d = cos.affine(-1.0, 1.0)?.relu()?;
    let dmin = (d.min_keepdim(1)? + CX_EPS)?;
    let dn = d.broadcast_div(&dmin)?;
    let w = dn.affine(-1.0 / CX_BANDWIDTH, 1.0 / CX_BANDWIDTH)?.exp()?;
    let cx = w.broadcast_div(&w.sum_keepdim(1)?)?;
    Ok(cx.max(1)?.mean_all()?)
}

/// `(N, C, H, W)` -> `(H*W, C)` for batch element `i`.
pub fn collection(t: &Tensor, i: usize) -> Result<Tensor> {
    let (_, c, h, w) = t.dims4()?;
    Ok(t.get(i)?.reshape((c, h * w))?.t()?)
}

/// `-log` of the layer-averaged contextual similarity, averaged over the batch.
pub fn contextual_loss_from_taps(gen: &FeatureStack, target: &FeatureStack) -> Result<Tensor> {
    if gen.len() != target.len() || gen.is_empty() {
        return Err(Error::Shape(format!(
            "tap counts differ: {} vs {}",
            gen.len(),
            target.len()
        )));
    }
    let batch = gen.layers[0].1.dims4()?.0;
    let mut per_sample = Vec::with_capacity(batch);
    for i in 0..batch {
        let mut sims = Vec::new();
        for ((_, a), (_, b)) in gen.layers.iter().zip(&target.layers) {
            sims.push(contextual_similarity(
                &collection(a, i)?,
                &collection(b, i)?,
            )?);
        }
        let mean = Tensor::stack(&sims, 0)?.mean_all()?;
        per_sample.push(mean.clamp(NORM_EPS, 1.0)?.log()?.neg()?);
    }
    Ok(Tensor::stack(&per_sample, 0)?.mean_all()?)
}

pub fn contextual_loss(
    x_generated: &Tensor,
    x_target: &Tensor,
    extractor: &dyn Network,
) -> Result<Tensor> {
    let (_, a) = extractor.forward_with_taps(x_generated, Mode::Eval)?;
    let (_, b) = extractor.forward_with_taps(x_target, Mode::Eval)?;
    contextual_loss_from_taps(&a, &b)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegLossKind {
    #[default]
    SoftDice,
    Nll,
}

/// `probs` is the tumour probability `(N, 1, H, W)`, `target` the matching 0/1 mask.
/// Soft Dice is computed per image and averaged.
pub fn segmentation_loss(probs: &Tensor, target: &Tensor, kind: SegLossKind) -> Result<Tensor> {
    same_shape(probs, target, "segmentation")?;
    match kind {
        SegLossKind::SoftDice => {
            let n = probs.dims()[0];
            let p = probs.reshape((n, ()))?;
            let y = target.reshape((n, ()))?;
            let inter = (&p * &y)?.sum(1)?;
            let denom = ((p.sum(1)? + y.sum(1)?)? + DICE_SMOOTH)?;
            let dice = ((inter * 2.0)? + DICE_SMOOTH)?.div(&denom)?;
            Ok(dice.affine(-1.0, 1.0)?.mean_all()?)
        }
        SegLossKind::Nll => {
            let p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
            let pos = (target * p.log()?)?;
            let neg = (target.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
            Ok((pos + neg)?.mean_all()?.neg()?)
        }
    }
}

/// Tumour channel of a two-class probability map.
pub fn tumour_channel(probs: &Tensor) -> Result<Tensor> {
    Ok(probs.narrow(1, probs.dim(1)? - 1, 1)?)
}

/// Sum over tap layers of the per-element mean squared difference.
pub fn hint_loss(student: &FeatureStack, teacher: &FeatureStack) -> Result<Tensor> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(Error::Shape(format!(
            "tap counts differ: {} vs {}",
            student.len(),
            teacher.len()
        )));
    }
    let mut terms = Vec::new();
    for ((na, a), (nb, b)) in student.layers.iter().zip(&teacher.layers) {
        same_shape(a, b, &format!("hint taps {na}/{nb}"))?;
        terms.push((a - b)?.sqr()?.mean_all()?);
    }
    Ok(Tensor::stack(&terms, 0)?.sum_all()?)
}
