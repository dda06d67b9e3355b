//! Adam with bias correction over a fixed list of variables.

use candle_core::{backprop::GradStore, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn gan(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    pub config: AdamConfig,
    vars: Vec<(String, Var)>,
    m: Vec<Var>,
    v: Vec<Var>,
    pub step: u64,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                config.lr
            )));
        }
        let zeros =
            |v: &Var| -> Result<Var> { Ok(Var::from_tensor(&v.as_tensor().zeros_like()?)?) };
        let m = vars.iter().map(|(_, v)| zeros(v)).collect::<Result<_>>()?;
        let v = vars.iter().map(|(_, v)| zeros(v)).collect::<Result<_>>()?;
        Ok(Adam {
            config,
            vars,
            m,
            v,
            step: 0,
        })
    }

    /// Applies one update. Variables without a gradient in `grads` are left untouched
    /// along with their moments.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((_, var), (m, v)) in self.vars.iter().zip(self.m.iter().zip(&self.v)) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let m_new = ((m.as_tensor() * beta1)? + (&g * (1.0 - beta1))?)?;
            let v_new = ((v.as_tensor() * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let denom = ((&v_new / bc2)?.sqrt()? + eps)?;
            let update = ((&m_new / bc1)?.div(&denom)? * lr)?;
            var.set(&var.as_detached_tensor().sub(&update)?)?;
            m.set(&m_new)?;
            v.set(&v_new)?;
        }
        Ok(())
    }

    /// Moment tensors keyed `<prefix>.m.<name>` and `<prefix>.v.<name>`.
    pub fn export(&self, prefix: &str) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::new();
        for ((name, _), (m, v)) in self.vars.iter().zip(self.m.iter().zip(&self.v)) {
            out.push((format!("{prefix}.m.{name}"), m.as_tensor().copy()?));
            out.push((format!("{prefix}.v.{name}"), v.as_tensor().copy()?));
        }
        Ok(out)
    }

    pub fn import(
        &mut self,
        prefix: &str,
        step: u64,
        lookup: &dyn Fn(&str) -> Option<Tensor>,
    ) -> Result<()> {
        for ((name, var), (m, v)) in self.vars.iter().zip(self.m.iter().zip(&self.v)) {
            for (kind, slot) in [("m", m), ("v", v)] {
                let key = format!("{prefix}.{kind}.{name}");
                let t = lookup(&key).ok_or_else(|| {
                    Error::SpecMismatch(format!("checkpoint lacks optimizer tensor `{key}`"))
                })?;
                if t.dims() != var.dims() {
                    return Err(Error::SpecMismatch(format!(
                        "optimizer tensor `{key}` has wrong shape"
                    )));
                }
                slot.set(&t.to_dtype(var.dtype())?)?;
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // with bias correction the first Adam step is lr * g / (|g| + eps')
        let x =
            Var::from_tensor(&Tensor::new(&[1.0f64, -2.0, 0.5], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(vec![("x".into(), x.clone())], AdamConfig::gan(0.1)).unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let got = x.as_tensor().to_vec1::<f64>().unwrap();
        let want = [0.9, -1.9, 0.4];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-6, "{got:?}");
        }
    }

    #[test]
    fn minimizes_quadratic() {
        let x = Var::from_tensor(&Tensor::new(&[3.0f32, -4.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(vec![("x".into(), x.clone())], AdamConfig::gan(0.05)).unwrap();
        for _ in 0..500 {
            let loss = (x.as_tensor() - 1.0)
                .unwrap()
                .sqr()
                .unwrap()
                .sum_all()
                .unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        for v in x
            .as_tensor()
            .to_dtype(DType::F64)
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()
        {
            assert!((v - 1.0).abs() < 1e-2);
        }
    }
}
