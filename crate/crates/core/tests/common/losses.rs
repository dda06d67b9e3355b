//! Finite-difference gradient suite and loss identities, shared with the
//! acceptance target.

use candle_core::{DType, Device, Tensor, Var};
use cmedl::gradcheck::check;
use cmedl::losses::*;
use cmedl::netgraph::features::FeatureStack;
use cmedl::netgraph::layers::conv2d;
use cmedl::netgraph::{CxExtractor, NetSpec};
use cmedl::Result;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-6;
pub const FD_FLOOR: f64 = 1e-6;
pub const FD_COORDS: usize = 24;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn randn(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); scale * z }).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn var(shape: &[usize], seed: u64, scale: f64) -> Var {
    Var::from_tensor(&randn(shape, seed, scale)).unwrap()
}

fn stack(layers: Vec<(&str, Tensor)>) -> FeatureStack {
    let mut s = FeatureStack::default();
    for (n, t) in layers {
        s.push(n, t);
    }
    s
}

fn sigmoid(t: &Tensor) -> Result<Tensor> {
    Ok(((t * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

fn binary(shape: &[usize], seed: u64) -> Tensor {
    randn(shape, seed, 1.0).gt(0.0).unwrap().to_dtype(DType::F64).unwrap()
}

fn run(vars: &[&Var], f: &dyn Fn() -> Result<Tensor>) -> f64 {
    check(vars, f, FD_STEP, FD_COORDS, FD_FLOOR).unwrap().max_rel_err
}

/// Maximum relative error of autograd against central differences, per loss.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();

    let (real, fake) = (var(&[2, 1, 4, 4], 1, 1.0), var(&[2, 1, 4, 4], 2, 1.0));
    out.push(("adversarial_discriminator", run(&[&real, &fake], &|| adversarial_loss(real.as_tensor(), fake.as_tensor(), Side::Discriminator))));
    out.push(("adversarial_generator", run(&[&fake], &|| adversarial_loss(real.as_tensor(), fake.as_tensor(), Side::Generator))));

    let (xc, xm) = (randn(&[1, 1, 8, 8], 3, 1.0), randn(&[1, 1, 8, 8], 4, 1.0));
    let (wa, wb) = (var(&[1, 1, 3, 3], 5, 0.4), var(&[1, 1, 3, 3], 6, 0.4));
    let ga = |x: &Tensor| -> Result<Tensor> { Ok(conv2d(x, wa.as_tensor(), 1, 1)?.tanh()?) };
    let gb = |x: &Tensor| -> Result<Tensor> { Ok(conv2d(x, wb.as_tensor(), 1, 1)?.tanh()?) };
    out.push(("cycle", run(&[&wa, &wb], &|| cycle_loss(&xc, &xm, &ga, &gb))));

    let g1 = var(&[1, 4, 4, 4], 7, 1.0);
    let g2 = var(&[1, 4, 2, 2], 8, 1.0);
    let (t1, t2) = (randn(&[1, 4, 4, 4], 9, 1.0), randn(&[1, 4, 2, 2], 10, 1.0));
    out.push(("contextual_similarity", run(&[&g1], &|| contextual_similarity(&collection(g1.as_tensor(), 0)?, &collection(&t1, 0)?))));
    out.push(("contextual_loss", run(&[&g1, &g2], &|| {
        contextual_loss_from_taps(&stack(vec![("a", g1.as_tensor().clone()), ("b", g2.as_tensor().clone())]), &stack(vec![("a", t1.clone()), ("b", t2.clone())]))
    })));
    let extractor = CxExtractor::new(&NetSpec::cx_extractor(4), DType::F64, 11).unwrap();
    let xg = var(&[1, 1, 8, 8], 12, 1.0);
    out.push(("contextual_loss_extractor", run(&[&xg], &|| contextual_loss(xg.as_tensor(), &xm, &extractor))));

    let logits = var(&[2, 1, 4, 4], 13, 1.5);
    let y = binary(&[2, 1, 4, 4], 14);
    out.push(("segmentation_soft_dice", run(&[&logits], &|| segmentation_loss(&sigmoid(logits.as_tensor())?, &y, SegLossKind::SoftDice))));
    out.push(("segmentation_nll", run(&[&logits], &|| segmentation_loss(&sigmoid(logits.as_tensor())?, &y, SegLossKind::Nll))));

    out.push(("hint", run(&[&g1, &g2], &|| {
        hint_loss(&stack(vec![("a", g1.as_tensor().clone()), ("b", g2.as_tensor().clone())]), &stack(vec![("a", t1.clone()), ("b", t2.clone())]))
    })));

    out.push(("total", run(&[&wa, &wb, &g1], &|| total_tensor(&TotalInputs::new(&wa, &wb, &g1, &extractor), &LossWeights::default()).map(|t| t.0))));
    out
}

/// A miniature step in which every term shares parameters with the others.
pub struct TotalInputs<'a> {
    pub xc: Tensor,
    pub xm: Tensor,
    pub yc: Tensor,
    pub wa: &'a Var,
    pub wb: &'a Var,
    pub ws: &'a Var,
    pub wd: Tensor,
    pub wt: Tensor,
    pub extractor: &'a CxExtractor,
}

impl<'a> TotalInputs<'a> {
    pub fn new(wa: &'a Var, wb: &'a Var, g1: &'a Var, extractor: &'a CxExtractor) -> Self {
        TotalInputs {
            xc: randn(&[1, 1, 8, 8], 21, 1.0),
            xm: randn(&[1, 1, 8, 8], 22, 1.0),
            yc: binary(&[1, 1, 8, 8], 23),
            wa,
            wb,
            ws: g1,
            wd: randn(&[1, 1, 3, 3], 24, 0.5),
            wt: randn(&[4, 1, 3, 3], 25, 0.5),
            extractor,
        }
    }
}

/// Weighted total and the individual term values.
pub fn total_tensor(i: &TotalInputs, w: &LossWeights) -> Result<(Tensor, Vec<(&'static str, f64)>)> {
    let g = |x: &Tensor, wv: &Var| -> Result<Tensor> { Ok(conv2d(x, wv.as_tensor(), 1, 1)?.tanh()?) };
    let fake_m = g(&i.xc, i.wa)?;
    let fake_c = g(&i.xm, i.wb)?;
    let adv_m = adversarial_loss(&fake_m, &conv2d(&fake_m, &i.wd, 1, 1)?, Side::Generator)?;
    let adv_c = adversarial_loss(&fake_c, &conv2d(&fake_c, &i.wd, 1, 1)?, Side::Generator)?;
    let cyc = cycle_terms(&i.xc, &g(&fake_m, i.wb)?, &i.xm, &g(&fake_c, i.wa)?)?;
    let cx = contextual_loss(&fake_m, &i.xm, i.extractor)?;
    // student features: 4 channels from a 1x1 "network" whose weights are ws
    let ws = i.ws.as_tensor().reshape((4, 4, 4))?.mean(2)?.mean(1)?.reshape((4, 1, 1, 1))?;
    let s_feat = conv2d(&i.xc, &ws, 1, 0)?;
    let t_feat = conv2d(&fake_m, &i.wt, 1, 1)?;
    let hint = hint_loss(&stack(vec![("f", s_feat.clone())]), &stack(vec![("f", t_feat.clone())]))?;
    let seg_s = segmentation_loss(&sigmoid(&s_feat.mean_keepdim(1)?)?, &i.yc, SegLossKind::SoftDice)?;
    let seg_tp = segmentation_loss(&sigmoid(&t_feat.mean_keepdim(1)?)?, &i.yc, SegLossKind::SoftDice)?;
    let terms = [("adv_m", &adv_m), ("adv_c", &adv_c), ("cyc", &cyc), ("cx", &cx), ("hint", &hint), ("seg_student", &seg_s), ("seg_teacher_pseudo", &seg_tp)];
    let lambda = |n: &str| match n {
        "cyc" => w.lambda_cyc,
        "cx" => w.lambda_cx,
        "hint" => w.lambda_hint,
        n if n.starts_with("adv") => w.lambda_adv,
        _ => w.lambda_seg,
    };
    let mut total = terms[0].1.affine(lambda(terms[0].0), 0.0)?;
    for (n, t) in &terms[1..] {
        total = (total + t.affine(lambda(n), 0.0)?)?;
    }
    let values = terms.iter().map(|(n, t)| Ok((*n, scalar(t)?))).collect::<Result<Vec<_>>>()?;
    Ok((total, values))
}

/// Loss identities, each with whether it held and a short detail.
pub fn identity_checks() -> Vec<(&'static str, bool, String)> {
    let mut out = Vec::new();
    let (xc, xm) = (randn(&[2, 1, 8, 8], 31, 1.0), randn(&[2, 1, 8, 8], 32, 1.0));
    let id = |x: &Tensor| -> Result<Tensor> { Ok(x.clone()) };
    let c = scalar(&cycle_loss(&xc, &xm, &id, &id).unwrap()).unwrap();
    out.push(("cycle_of_identity_is_zero", c == 0.0, format!("{c}")));

    let taps = stack(vec![("a", randn(&[2, 3, 4, 4], 33, 1.0)), ("b", randn(&[2, 5, 2, 2], 34, 1.0))]);
    let h = scalar(&hint_loss(&taps, &taps.clone()).unwrap()).unwrap();
    out.push(("hint_of_identical_taps_is_zero", h == 0.0, format!("{h}")));

    let (g, m) = (randn(&[20, 6], 35, 1.0), randn(&[24, 6], 36, 1.0));
    let base = scalar(&contextual_similarity(&g, &m).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let mut pg: Vec<u32> = (0..20).collect();
        let mut pm: Vec<u32> = (0..24).collect();
        pg.shuffle(&mut rng);
        pm.shuffle(&mut rng);
        let idx = |p: &[u32]| Tensor::new(p, &Device::Cpu).unwrap();
        let s = scalar(&contextual_similarity(&g.index_select(&idx(&pg), 0).unwrap(), &m.index_select(&idx(&pm), 0).unwrap()).unwrap()).unwrap();
        worst = worst.max((s - base).abs());
    }
    out.push(("contextual_permutation_invariance", worst <= 1e-12, format!("max deviation {worst:e} over 100 shuffles")));

    let extractor = CxExtractor::new(&NetSpec::cx_extractor(4), DType::F64, 11).unwrap();
    let (wa, wb, g1) = (var(&[1, 1, 3, 3], 5, 0.4), var(&[1, 1, 3, 3], 6, 0.4), var(&[1, 4, 4, 4], 7, 1.0));
    let inputs = TotalInputs::new(&wa, &wb, &g1, &extractor);
    let w0 = LossWeights::default();
    let (t0, terms) = total_tensor(&inputs, &w0).unwrap();
    let t0 = scalar(&t0).unwrap();
    let mut lin_err: f64 = 0.0;
    for k in 0..5 {
        for delta in [0.5, 2.0, 7.25] {
            let mut w = w0;
            let slot = [&mut w.lambda_adv, &mut w.lambda_cyc, &mut w.lambda_cx, &mut w.lambda_hint, &mut w.lambda_seg];
            *slot.into_iter().nth(k).unwrap() += delta;
            let t = scalar(&total_tensor(&inputs, &w).unwrap().0).unwrap();
            let names: [&[&str]; 5] = [&["adv_m", "adv_c"], &["cyc"], &["cx"], &["hint"], &["seg_student", "seg_teacher_pseudo"]];
            let term: f64 = terms.iter().filter(|(n, _)| names[k].contains(n)).map(|(_, v)| v).sum();
            lin_err = lin_err.max((t - t0 - delta * term).abs() / t0.abs().max(1.0));
        }
    }
    out.push(("total_linear_in_each_weight", lin_err <= 1e-12, format!("max relative deviation {lin_err:e}")));

    let via_report = total_loss(&terms, &w0).unwrap();
    let mut report = LossReport::default();
    for (n, v) in &terms {
        match *n {
            "adv_m" => report.adv_m = *v,
            "adv_c" => report.adv_c = *v,
            "cyc" => report.cyc = *v,
            "cx" => report.cx = *v,
            "hint" => report.hint = *v,
            "seg_student" => report.seg_student = *v,
            _ => report.seg_teacher_pseudo = *v,
        }
    }
    let finished = report.finish(&w0).unwrap().total;
    let dev = (finished - t0).abs().max((via_report - t0).abs());
    out.push(("loss_report_total_consistent", dev <= 1e-6, format!("deviation {dev:e}")));
    out
}
