//! Central finite-difference gradient checks.

use candle_core::{Tensor, Var};

use crate::error::Result;
use crate::losses::scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub coords: usize,
}

/// Compares autograd against central differences of the scalar `f` for up to
/// `per_var` evenly spaced coordinates of each variable. The relative error uses
/// `max(|fd|, |analytic|, floor)` as denominator so that vanishing gradients do not
/// blow it up.
pub fn check(vars: &[&Var], f: &dyn Fn() -> Result<Tensor>, h: f64, per_var: usize, floor: f64) -> Result<GradCheck> {
    let grads = f()?.backward()?;
    let mut out = GradCheck { max_rel_err: 0.0, coords: 0 };
    for v in vars {
        let base = v.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let analytic = match grads.get(v.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; base.len()],
        };
        let shape = v.dims().to_vec();
        let set = |p: Vec<f64>| -> Result<()> {
            v.set(&Tensor::from_vec(p, shape.as_slice(), v.device())?)?;
            Ok(())
        };
        let step = (base.len() / per_var.max(1)).max(1);
        for i in (0..base.len()).step_by(step) {
            let mut p = base.clone();
            p[i] = base[i] + h;
            set(p.clone())?;
            let lp = scalar(&f()?)?;
            p[i] = base[i] - h;
            set(p)?;
            let lm = scalar(&f()?)?;
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(floor);
            out.max_rel_err = out.max_rel_err.max(err);
            out.coords += 1;
        }
        set(base)?;
    }
    Ok(out)
}
