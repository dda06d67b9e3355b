//! Translation generator and patch discriminator.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Tensor, Var};

use super::features::FeatureStack;
use super::layers::{
    instance_norm, leaky_relu, BatchNorm2d, Conv2d, ConvTranspose2d, Mode, WeightInit,
};
use super::params::{role_rng, Init, ParamStore};
use super::spec::{NetKind, NetSpec, NormKind};
use crate::error::{Error, Result};

pub(crate) const GAN_INIT: WeightInit = WeightInit::Normal(0.02);
const IN_EPS: f64 = 1e-5;

pub trait Network: Send + Sync {
    fn spec(&self) -> &NetSpec;
    fn store(&self) -> &ParamStore;
    /// Output plus the declared taps from a single pass.
    fn forward_with_taps(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, FeatureStack)>;

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_with_taps(x, mode)?.0)
    }

    /// Weight tensors of the last two weighted layers.
    fn final_weights(&self) -> Vec<Var> {
        Vec::new()
    }

    fn calls(&self) -> usize {
        0
    }
}

pub(crate) fn check_input(spec: &NetSpec, x: &Tensor) -> Result<(usize, usize)> {
    let (_, c, h, w) = x.dims4()?;
    if c != spec.in_channels {
        return Err(Error::Shape(format!(
            "{:?} expects {} input channels, got {c}",
            spec.kind, spec.in_channels
        )));
    }
    let m = spec.size_multiple();
    if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "{:?} input {h}x{w} is not a multiple of {m}",
            spec.kind
        )));
    }
    Ok((h, w))
}

fn relu_norm(x: &Tensor, norm: NormKind) -> Result<Tensor> {
    let x = match norm {
        NormKind::Instance => instance_norm(x, IN_EPS)?,
        _ => x.clone(),
    };
    Ok(x.relu()?)
}

/// ResNet-style image-to-image network: 7x7 stem, two stride-2 convolutions, residual
/// blocks, two stride-1/2 transposed convolutions, 7x7 head with tanh.
pub struct Generator {
    spec: NetSpec,
    store: ParamStore,
    stem: Conv2d,
    down: Vec<Conv2d>,
    res: Vec<(Conv2d, Conv2d)>,
    up: Vec<ConvTranspose2d>,
    head: Conv2d,
    calls: AtomicUsize,
}

impl Generator {
    pub fn new(spec: &NetSpec, dtype: DType, seed: u64, role: &str) -> Result<Self> {
        if spec.kind != NetKind::Generator {
            return Err(Error::Config(format!(
                "expected generator spec, got {:?}",
                spec.kind
            )));
        }
        spec.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = role_rng(seed, role);
        let mut init = Init::new(&mut store, &mut rng);
        let b = spec.base_width;
        let stem = Conv2d::new(&mut init, "stem", spec.in_channels, b, 7, 1, 3, GAN_INIT)?;
        let down = vec![
            Conv2d::new(&mut init, "down1", b, 2 * b, 3, 2, 1, GAN_INIT)?,
            Conv2d::new(&mut init, "down2", 2 * b, 4 * b, 3, 2, 1, GAN_INIT)?,
        ];
        let mut res = Vec::new();
        for i in 0..spec.residual_blocks {
            let mut sub = init.sub(format!("res{i}"));
            res.push((
                Conv2d::new(&mut sub, "conv1", 4 * b, 4 * b, 3, 1, 1, GAN_INIT)?,
                Conv2d::new(&mut sub, "conv2", 4 * b, 4 * b, 3, 1, 1, GAN_INIT)?,
            ));
        }
        let up = vec![
            ConvTranspose2d::new(&mut init, "up1", 4 * b, 2 * b, 3, 2, 1, 1, GAN_INIT)?,
            ConvTranspose2d::new(&mut init, "up2", 2 * b, b, 3, 2, 1, 1, GAN_INIT)?,
        ];
        let head = Conv2d::new(&mut init, "head", b, spec.out_channels, 7, 1, 3, GAN_INIT)?;
        Ok(Generator {
            spec: spec.clone(),
            store,
            stem,
            down,
            res,
            up,
            head,
            calls: AtomicUsize::new(0),
        })
    }
}

impl Network for Generator {
    fn spec(&self) -> &NetSpec {
        &self.spec
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn forward_with_taps(&self, x: &Tensor, _mode: Mode) -> Result<(Tensor, FeatureStack)> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        check_input(&self.spec, x)?;
        let norm = self.spec.norm;
        let mut h = relu_norm(&self.stem.forward(x)?, norm)?;
        for d in &self.down {
            h = relu_norm(&d.forward(&h)?, norm)?;
        }
        for (c1, c2) in &self.res {
            let r = relu_norm(&c1.forward(&h)?, norm)?;
            let r = c2.forward(&r)?;
            let r = if norm == NormKind::Instance {
                instance_norm(&r, IN_EPS)?
            } else {
                r
            };
            h = (h + r)?;
        }
        for u in &self.up {
            h = relu_norm(&u.forward(&h)?, norm)?;
        }
        // clamping before tanh keeps |y| strictly below 1 in floating point
        let y = self.head.forward(&h)?.clamp(-8.0, 8.0)?.tanh()?;
        Ok((y, FeatureStack::default()))
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

/// Convolutional patch classifier emitting a grid of logits.
pub struct PatchDiscriminator {
    spec: NetSpec,
    store: ParamStore,
    convs: Vec<Conv2d>,
    norms: Vec<Option<BatchNorm2d>>,
}

impl PatchDiscriminator {
    pub fn new(spec: &NetSpec, dtype: DType, seed: u64, role: &str) -> Result<Self> {
        if spec.kind != NetKind::PatchDiscriminator {
            return Err(Error::Config(format!(
                "expected discriminator spec, got {:?}",
                spec.kind
            )));
        }
        spec.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = role_rng(seed, role);
        let mut init = Init::new(&mut store, &mut rng);
        let b = spec.base_width;
        let width = |i: usize| b * (1usize << i).min(8);
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let batch = spec.norm == NormKind::Batch;
        convs.push(Conv2d::new(
            &mut init,
            "conv0",
            spec.in_channels,
            b,
            4,
            2,
            1,
            GAN_INIT,
        )?);
        norms.push(None);
        for i in 1..spec.strided_layers {
            let name = format!("conv{i}");
            convs.push(Conv2d::new(
                &mut init,
                &name,
                width(i - 1),
                width(i),
                4,
                2,
                1,
                GAN_INIT,
            )?);
            norms.push(if batch {
                Some(BatchNorm2d::new(&mut init, &format!("norm{i}"), width(i))?)
            } else {
                None
            });
        }
        let n = spec.strided_layers;
        convs.push(Conv2d::new(
            &mut init,
            &format!("conv{n}"),
            width(n - 1),
            width(n),
            4,
            1,
            1,
            GAN_INIT,
        )?);
        norms.push(if batch {
            Some(BatchNorm2d::new(&mut init, &format!("norm{n}"), width(n))?)
        } else {
            None
        });
        convs.push(Conv2d::new(
            &mut init,
            "head",
            width(n),
            spec.out_channels,
            4,
            1,
            1,
            GAN_INIT,
        )?);
        Ok(PatchDiscriminator {
            spec: spec.clone(),
            store,
            convs,
            norms,
        })
    }

    /// Side length of the input region seen by one output logit.
    pub fn receptive_field(&self) -> usize {
        self.convs
            .iter()
            .rev()
            .fold(1, |rf, c| (rf - 1) * c.stride + 4)
    }

    pub fn output_size(&self, input: usize) -> usize {
        self.convs
            .iter()
            .fold(input, |s, c| (s + 2 * c.padding - 4) / c.stride + 1)
    }
}

impl Network for PatchDiscriminator {
    fn spec(&self) -> &NetSpec {
        &self.spec
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn forward_with_taps(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, FeatureStack)> {
        let (h, w) = check_input(&self.spec, x)?;
        let rf = self.receptive_field();
        if h < rf || w < rf {
            return Err(Error::Shape(format!(
                "discriminator input {h}x{w} is smaller than its {rf}x{rf} receptive field"
            )));
        }
        let last = self.convs.len() - 1;
        let mut y = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            y = conv.forward(&y)?;
            if i == last {
                break;
            }
            if let Some(bn) = &self.norms[i] {
                y = bn.forward(&y, mode)?;
            }
            y = leaky_relu(&y, 0.2)?;
        }
        Ok((y, FeatureStack::default()))
    }
}
