//! The per-step update schedule: generators, then discriminators, then segmenters.

use candle_core::{DType, Tensor, Var};

use super::config::{TrainConfig, TrainMode};
use super::data::derive_seed;
use super::pool::ImagePool;
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_loss, contextual_loss, cycle_terms, hint_loss, scalar, segmentation_loss,
    total_loss, tumour_channel, LossReport, Side,
};
use crate::netgraph::{
    load_checkpoint, Adam, AdamConfig, Components, Mode, ModelBundle, Network,
};

/// One unpaired training batch; MRI tensors are only present in `cmedl` mode.
#[derive(Clone, Debug)]
pub struct Batch {
    pub xc: Tensor,
    pub yc: Tensor,
    pub xm: Option<Tensor>,
    pub ym: Option<Tensor>,
}

/// Outputs of the generator phase needed by the discriminator phase.
pub struct GeneratorPhase {
    pub fake_m: Tensor,
    pub fake_c: Tensor,
    pub adv_m: f64,
    pub adv_c: f64,
    pub cyc: f64,
    pub cx: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SegmenterPhase {
    pub seg_teacher_real: f64,
    pub seg_teacher_pseudo: f64,
    pub seg_student: f64,
    pub hint: f64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub bundle: ModelBundle,
    pub(crate) opt_g: Option<Adam>,
    pub(crate) opt_d: Option<Adam>,
    pub(crate) opt_s: Adam,
    pub(crate) pool_m: ImagePool,
    pub(crate) pool_c: ImagePool,
    dtype: DType,
}

pub fn components_for(mode: TrainMode) -> Components {
    let (translation, teacher, student) = match mode {
        TrainMode::Cmedl => (true, true, true),
        TrainMode::CbctOnly => (false, false, true),
        TrainMode::PmriSeg => (true, true, false),
        TrainMode::CbctPlusPmri => (true, false, true),
    };
    Components {
        translation,
        teacher,
        student,
    }
}

fn named_vars(bundle: &ModelBundle, names: &[&str]) -> Result<Vec<(String, Var)>> {
    let mut out = Vec::new();
    for name in names {
        let net = bundle
            .network(name)
            .ok_or_else(|| Error::SpecMismatch(format!("bundle has no `{name}`")))?;
        for (p, v) in net.store().params() {
            out.push((format!("{name}.{p}"), v.clone()));
        }
    }
    Ok(out)
}

/// Copies generator and discriminator weights from another checkpoint.
fn load_frozen_translation(bundle: &ModelBundle, cfg: &TrainConfig, dtype: DType) -> Result<()> {
    let path = cfg
        .translation_checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config(format!("mode {} requires translation_checkpoint", cfg.mode)))?;
    let src = load_checkpoint(path, None, dtype)?;
    if src.bundle.translation.is_none() {
        return Err(Error::SpecMismatch(format!(
            "{} holds no translation networks",
            path.display()
        )));
    }
    if src.meta.bundle.generator != bundle.spec.generator
        || src.meta.bundle.discriminator != bundle.spec.discriminator
    {
        return Err(Error::SpecMismatch(format!(
            "translation networks in {} do not match preset {:?}",
            path.display(),
            cfg.preset
        )));
    }
    for name in ["g_c2m", "g_m2c", "d_m", "d_c"] {
        let net = bundle.network(name).expect("translation present");
        net.store().import(name, &|k| src.tensors.get(k).cloned())?;
    }
    Ok(())
}

fn finite_or(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let bundle = ModelBundle::new(&cfg.bundle_spec(), components_for(cfg.mode), cfg.seed, dtype)?;
        if cfg.mode.uses_frozen_translation() {
            load_frozen_translation(&bundle, &cfg, dtype)?;
        }
        let betas = |lr: f64| AdamConfig {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            ..AdamConfig::gan(lr)
        };
        let (opt_g, opt_d) = if cfg.mode == TrainMode::Cmedl {
            (
                Some(Adam::new(named_vars(&bundle, &["g_c2m", "g_m2c"])?, betas(cfg.lr_translation))?),
                Some(Adam::new(named_vars(&bundle, &["d_m", "d_c"])?, betas(cfg.lr_translation))?),
            )
        } else {
            (None, None)
        };
        let seg_nets: &[&str] = match cfg.mode {
            TrainMode::Cmedl => &["s_teacher", "s_student"],
            TrainMode::CbctOnly | TrainMode::CbctPlusPmri => &["s_student"],
            TrainMode::PmriSeg => &["s_teacher"],
        };
        let opt_s = Adam::new(named_vars(&bundle, seg_nets)?, betas(cfg.lr_segmentation))?;
        let pool_m = ImagePool::new(cfg.replay_pool, derive_seed(cfg.seed, "pool_m", &[]));
        let pool_c = ImagePool::new(cfg.replay_pool, derive_seed(cfg.seed, "pool_c", &[]));
        Ok(Trainer {
            cfg,
            bundle,
            opt_g,
            opt_d,
            opt_s,
            pool_m,
            pool_c,
            dtype,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// One full step for the configured mode.
    pub fn step(&mut self, b: &Batch) -> Result<LossReport> {
        let w = self.cfg.weights;
        let report = match self.cfg.mode {
            TrainMode::Cmedl => {
                let g = self.generator_phase(b)?;
                self.discriminator_phase(b, &g)?;
                let s = self.segmenter_phase(b)?;
                LossReport {
                    adv_m: g.adv_m,
                    adv_c: g.adv_c,
                    cyc: g.cyc,
                    cx: g.cx,
                    seg_teacher_real: s.seg_teacher_real,
                    seg_teacher_pseudo: s.seg_teacher_pseudo,
                    seg_student: s.seg_student,
                    hint: s.hint,
                    total: 0.0,
                }
            }
            _ => {
                let s = self.segmenter_phase(b)?;
                LossReport {
                    seg_teacher_pseudo: s.seg_teacher_pseudo,
                    seg_student: s.seg_student,
                    ..LossReport::default()
                }
            }
        };
        report.finish(&w)
    }

    fn mri<'a>(b: &'a Batch) -> Result<(&'a Tensor, &'a Tensor)> {
        match (&b.xm, &b.ym) {
            (Some(x), Some(y)) => Ok((x, y)),
            _ => Err(Error::Config("cmedl step needs an MRI batch with masks".into())),
        }
    }

    /// Generator update on the full weighted objective. Only generator weights move.
    pub fn generator_phase(&mut self, b: &Batch) -> Result<GeneratorPhase> {
        let w = self.cfg.weights;
        let kind = self.cfg.seg_loss;
        let (xm, _) = Self::mri(b)?;
        let t = self.bundle.translation()?;
        let frozen = Mode::TrainFrozenStats;
        let fake_m = t.g_c2m.forward(&b.xc, Mode::Train)?;
        let rec_c = t.g_m2c.forward(&fake_m, Mode::Train)?;
        let fake_c = t.g_m2c.forward(xm, Mode::Train)?;
        let rec_m = t.g_c2m.forward(&fake_c, Mode::Train)?;

        let adv_m = adversarial_loss(&fake_m, &t.d_m.forward(&fake_m, frozen)?, Side::Generator)?;
        let adv_c = adversarial_loss(&fake_c, &t.d_c.forward(&fake_c, frozen)?, Side::Generator)?;
        let cyc = cycle_terms(&b.xc, &rec_c, xm, &rec_m)?;
        let zero = Tensor::zeros((), fake_m.dtype(), fake_m.device())?;
        let cx = if w.lambda_cx > 0.0 {
            let ext = self
                .bundle
                .cx_extractor
                .as_ref()
                .ok_or_else(|| Error::SpecMismatch("bundle has no contextual feature extractor".into()))?;
            contextual_loss(&fake_m, xm, ext)?
        } else {
            zero.clone()
        };
        let (p_t, taps_t) = self.bundle.teacher()?.forward_with_taps(&fake_m, frozen)?;
        let seg_tp = segmentation_loss(&tumour_channel(&p_t)?, &b.yc, kind)?;
        let hint = if w.lambda_hint > 0.0 {
            let (_, taps_s) = self.bundle.student()?.forward_with_taps(&b.xc, frozen)?;
            hint_loss(&taps_s.detach(), &taps_t)?
        } else {
            zero
        };

        let vals = [
            ("adv_m", scalar(&adv_m)?),
            ("adv_c", scalar(&adv_c)?),
            ("cyc", scalar(&cyc)?),
            ("cx", scalar(&cx)?),
            ("hint", scalar(&hint)?),
            ("seg_teacher_pseudo", scalar(&seg_tp)?),
        ];
        total_loss(&vals, &w)?;
        let loss = ((((adv_m.clone() + &adv_c)? * w.lambda_adv)? + (&cyc * w.lambda_cyc)?)?
            + ((&cx * w.lambda_cx)? + (&hint * w.lambda_hint)?)?)?;
        let loss = (loss + (&seg_tp * w.lambda_seg)?)?;
        let grads = loss.backward()?;
        self.opt_g.as_mut().expect("cmedl has a generator optimizer").step(&grads)?;
        Ok(GeneratorPhase {
            fake_m: fake_m.detach(),
            fake_c: fake_c.detach(),
            adv_m: vals[0].1,
            adv_c: vals[1].1,
            cyc: vals[2].1,
            cx: vals[3].1,
        })
    }

    /// Discriminator objective on detached (replayed) fakes, summed over both domains.
    pub fn discriminator_loss(&mut self, b: &Batch, g: &GeneratorPhase) -> Result<Tensor> {
        let (xm, _) = Self::mri(b)?;
        let fake_m = self.pool_m.query(&g.fake_m)?;
        let fake_c = self.pool_c.query(&g.fake_c)?;
        let t = self.bundle.translation()?;
        let train = Mode::Train;
        let l_m = adversarial_loss(
            &t.d_m.forward(xm, train)?,
            &t.d_m.forward(&fake_m, train)?,
            Side::Discriminator,
        )?;
        let l_c = adversarial_loss(
            &t.d_c.forward(&b.xc, train)?,
            &t.d_c.forward(&fake_c, train)?,
            Side::Discriminator,
        )?;
        Ok((l_m + l_c)?)
    }

    pub fn discriminator_phase(&mut self, b: &Batch, g: &GeneratorPhase) -> Result<f64> {
        let loss = self.discriminator_loss(b, g)?;
        let v = finite_or("discriminator", scalar(&loss)?)?;
        let grads = loss.backward()?;
        self.opt_d.as_mut().expect("cmedl has a discriminator optimizer").step(&grads)?;
        Ok(v)
    }

    /// Segmenter update. Pseudo-MRI comes fresh from the current generator and is
    /// detached, so no gradient reaches the translation networks.
    pub fn segmenter_phase(&mut self, b: &Batch) -> Result<SegmenterPhase> {
        let w = self.cfg.weights;
        let kind = self.cfg.seg_loss;
        let train = Mode::Train;
        let pseudo = |x: &Tensor| -> Result<Tensor> {
            Ok(self.bundle.translation()?.g_c2m.forward(x, Mode::Eval)?.detach())
        };
        let mut out = SegmenterPhase::default();
        let loss = match self.cfg.mode {
            TrainMode::Cmedl => {
                let (xm, ym) = Self::mri(b)?;
                let pm = pseudo(&b.xc)?;
                let teacher = self.bundle.teacher()?;
                let p_tr = teacher.forward(xm, train)?;
                let (p_tp, taps_tp) = teacher.forward_with_taps(&pm, train)?;
                let (p_s, taps_s) = self.bundle.student()?.forward_with_taps(&b.xc, train)?;
                let seg_tr = segmentation_loss(&tumour_channel(&p_tr)?, ym, kind)?;
                let seg_tp = segmentation_loss(&tumour_channel(&p_tp)?, &b.yc, kind)?;
                let seg_s = segmentation_loss(&tumour_channel(&p_s)?, &b.yc, kind)?;
                out.seg_teacher_real = finite_or("seg_teacher_real", scalar(&seg_tr)?)?;
                out.seg_teacher_pseudo = finite_or("seg_teacher_pseudo", scalar(&seg_tp)?)?;
                out.seg_student = finite_or("seg_student", scalar(&seg_s)?)?;
                let seg = (((seg_tr + seg_tp)? + seg_s)? * w.lambda_seg)?;
                if w.lambda_hint > 0.0 {
                    let target = if self.cfg.symmetric_hint {
                        taps_tp
                    } else {
                        taps_tp.detach()
                    };
                    let hint = hint_loss(&taps_s, &target)?;
                    out.hint = finite_or("hint", scalar(&hint)?)?;
                    ((hint * w.lambda_hint)? + seg)?
                } else {
                    seg
                }
            }
            TrainMode::CbctOnly => {
                let p = self.bundle.student()?.forward(&b.xc, train)?;
                let seg = segmentation_loss(&tumour_channel(&p)?, &b.yc, kind)?;
                out.seg_student = finite_or("seg_student", scalar(&seg)?)?;
                (seg * w.lambda_seg)?
            }
            TrainMode::PmriSeg => {
                let pm = pseudo(&b.xc)?;
                let p = self.bundle.teacher()?.forward(&pm, train)?;
                let seg = segmentation_loss(&tumour_channel(&p)?, &b.yc, kind)?;
                out.seg_teacher_pseudo = finite_or("seg_teacher_pseudo", scalar(&seg)?)?;
                (seg * w.lambda_seg)?
            }
            TrainMode::CbctPlusPmri => {
                let x = Tensor::cat(&[&b.xc, &pseudo(&b.xc)?], 1)?;
                let p = self.bundle.student()?.forward(&x, train)?;
                let seg = segmentation_loss(&tumour_channel(&p)?, &b.yc, kind)?;
                out.seg_student = finite_or("seg_student", scalar(&seg)?)?;
                (seg * w.lambda_seg)?
            }
        };
        let grads = loss.backward()?;
        self.opt_s.step(&grads)?;
        Ok(out)
    }
}
