//! Segmentation networks: U-Net and a 57-layer-style fully convolutional DenseNet.

use candle_core::{DType, Tensor, Var};

use super::features::FeatureStack;
use super::layers::{
    max_pool2, softmax_channels, BatchNorm2d, Conv2d, ConvTranspose2d, Mode, WeightInit,
};
use super::nets::{check_input, Network};
use super::params::{role_rng, Init, ParamStore};
use super::spec::{NetKind, NetSpec};
use crate::error::{Error, Result};

const SEG_INIT: WeightInit = WeightInit::Kaiming;

/// conv3x3 - BN - ReLU, twice.
struct DoubleConv {
    c1: Conv2d,
    n1: BatchNorm2d,
    c2: Conv2d,
    n2: BatchNorm2d,
}

impl DoubleConv {
    fn new(init: &mut Init, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let mut s = init.sub(name);
        Ok(DoubleConv {
            c1: Conv2d::new(&mut s, "conv1", cin, cout, 3, 1, 1, SEG_INIT)?,
            n1: BatchNorm2d::new(&mut s, "norm1", cout)?,
            c2: Conv2d::new(&mut s, "conv2", cout, cout, 3, 1, 1, SEG_INIT)?,
            n2: BatchNorm2d::new(&mut s, "norm2", cout)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.n1.forward(&self.c1.forward(x)?, mode)?.relu()?;
        Ok(self.n2.forward(&self.c2.forward(&h)?, mode)?.relu()?)
    }
}

fn check_kind(spec: &NetSpec, kind: NetKind) -> Result<()> {
    if spec.kind != kind {
        return Err(Error::Config(format!(
            "expected {kind:?} spec, got {:?}",
            spec.kind
        )));
    }
    spec.validate()
}

/// Encoder widths double per level up to 8x base; the decoder halves the skip width,
/// never going below base.
pub struct Unet {
    spec: NetSpec,
    store: ParamStore,
    enc: Vec<DoubleConv>,
    bottom: DoubleConv,
    ups: Vec<ConvTranspose2d>,
    dec: Vec<DoubleConv>,
    head: Conv2d,
}

impl Unet {
    pub fn new(spec: &NetSpec, dtype: DType, seed: u64, role: &str) -> Result<Self> {
        check_kind(spec, NetKind::Unet)?;
        let mut store = ParamStore::new(dtype);
        let mut rng = role_rng(seed, role);
        let mut init = Init::new(&mut store, &mut rng);
        let b = spec.base_width;
        let levels = spec.pool_levels;
        let widths: Vec<usize> = (0..levels).map(|i| b * (1usize << i).min(8)).collect();
        let mut enc = Vec::new();
        let mut cin = spec.in_channels;
        for (i, &w) in widths.iter().enumerate() {
            enc.push(DoubleConv::new(
                &mut init,
                &format!("enc{}", i + 1),
                cin,
                w,
            )?);
            cin = w;
        }
        let bottom = DoubleConv::new(&mut init, "bottom", cin, widths[levels - 1])?;
        let mut ups = Vec::new();
        let mut dec = Vec::new();
        for (j, &skip) in widths.iter().rev().enumerate() {
            let d = (skip / 2).max(b);
            ups.push(ConvTranspose2d::new(
                &mut init,
                &format!("up{}", j + 1),
                cin,
                d,
                2,
                2,
                0,
                0,
                SEG_INIT,
            )?);
            dec.push(DoubleConv::new(
                &mut init,
                &format!("dec{}", j + 1),
                d + skip,
                d,
            )?);
            cin = d;
        }
        let head = Conv2d::new(&mut init, "head", cin, spec.out_channels, 1, 1, 0, SEG_INIT)?;
        Ok(Unet {
            spec: spec.clone(),
            store,
            enc,
            bottom,
            ups,
            dec,
            head,
        })
    }
}

impl Network for Unet {
    fn spec(&self) -> &NetSpec {
        &self.spec
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn forward_with_taps(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, FeatureStack)> {
        check_input(&self.spec, x)?;
        let mut skips = Vec::new();
        let mut h = x.clone();
        for e in &self.enc {
            let s = e.forward(&h, mode)?;
            h = max_pool2(&s)?;
            skips.push(s);
        }
        h = self.bottom.forward(&h, mode)?;
        let mut taps = FeatureStack::default();
        let n = self.dec.len();
        for (j, (up, block)) in self.ups.iter().zip(&self.dec).enumerate() {
            let u = up.forward(&h)?;
            let s = skips.pop().expect("one skip per level");
            h = block.forward(&Tensor::cat(&[&u, &s], 1)?, mode)?;
            if j + 2 >= n {
                taps.push(format!("dec{}", j + 1), h.clone());
            }
        }
        let probs = softmax_channels(&self.head.forward(&h)?)?;
        Ok((probs, taps))
    }

    fn final_weights(&self) -> Vec<Var> {
        vec![
            self.dec.last().unwrap().c2.weight.clone(),
            self.head.weight.clone(),
        ]
    }
}

/// BN - ReLU - conv3x3 producing `growth` new channels.
struct DenseLayer {
    norm: BatchNorm2d,
    conv: Conv2d,
}

struct DenseBlock {
    layers: Vec<DenseLayer>,
}

impl DenseBlock {
    fn new(init: &mut Init, name: &str, cin: usize, n: usize, growth: usize) -> Result<Self> {
        let mut s = init.sub(name);
        let mut layers = Vec::new();
        for i in 0..n {
            let c = cin + i * growth;
            let mut ls = s.sub(format!("layer{i}"));
            layers.push(DenseLayer {
                norm: BatchNorm2d::new(&mut ls, "norm", c)?,
                conv: Conv2d::new(&mut ls, "conv", c, growth, 3, 1, 1, SEG_INIT)?,
            });
        }
        Ok(DenseBlock { layers })
    }

    /// Returns (input concatenated with all new features, new features only).
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let mut all = x.clone();
        let mut new = Vec::new();
        for l in &self.layers {
            let f = l.conv.forward(&l.norm.forward(&all, mode)?.relu()?)?;
            all = Tensor::cat(&[&all, &f], 1)?;
            new.push(f);
        }
        Ok((all, Tensor::cat(&new, 1)?))
    }
}

/// Transition down: BN - ReLU - 1x1 conv - 2x2 max pool.
struct TransitionDown {
    norm: BatchNorm2d,
    conv: Conv2d,
}

pub struct DenseFcn {
    spec: NetSpec,
    store: ParamStore,
    first: Conv2d,
    down_blocks: Vec<DenseBlock>,
    tds: Vec<TransitionDown>,
    bottleneck: DenseBlock,
    tus: Vec<ConvTranspose2d>,
    up_blocks: Vec<DenseBlock>,
    head: Conv2d,
}

impl DenseFcn {
    pub fn new(spec: &NetSpec, dtype: DType, seed: u64, role: &str) -> Result<Self> {
        check_kind(spec, NetKind::Densefcn)?;
        let mut store = ParamStore::new(dtype);
        let mut rng = role_rng(seed, role);
        let mut init = Init::new(&mut store, &mut rng);
        let (n, g) = (spec.db_layers, spec.growth_rate);
        let added = n * g;
        let first = Conv2d::new(
            &mut init,
            "first",
            spec.in_channels,
            spec.base_width,
            3,
            1,
            1,
            SEG_INIT,
        )?;
        let mut c = spec.base_width;
        let mut skips = Vec::new();
        let mut down_blocks = Vec::new();
        let mut tds = Vec::new();
        for i in 0..spec.td_count {
            down_blocks.push(DenseBlock::new(
                &mut init,
                &format!("db{}", i + 1),
                c,
                n,
                g,
            )?);
            c += added;
            skips.push(c);
            let mut s = init.sub(format!("td{}", i + 1));
            tds.push(TransitionDown {
                norm: BatchNorm2d::new(&mut s, "norm", c)?,
                conv: Conv2d::new(&mut s, "conv", c, c, 1, 1, 0, SEG_INIT)?,
            });
        }
        let bottleneck = DenseBlock::new(&mut init, "bottleneck", c, n, g)?;
        let mut tus = Vec::new();
        let mut up_blocks = Vec::new();
        for (j, skip) in skips.iter().rev().enumerate() {
            tus.push(ConvTranspose2d::new(
                &mut init,
                &format!("tu{}", j + 1),
                added,
                added,
                3,
                2,
                1,
                1,
                SEG_INIT,
            )?);
            up_blocks.push(DenseBlock::new(
                &mut init,
                &format!("ub{}", j + 1),
                added + skip,
                n,
                g,
            )?);
            c = added + skip + added;
        }
        let head = Conv2d::new(&mut init, "head", c, spec.out_channels, 1, 1, 0, SEG_INIT)?;
        Ok(DenseFcn {
            spec: spec.clone(),
            store,
            first,
            down_blocks,
            tds,
            bottleneck,
            tus,
            up_blocks,
            head,
        })
    }
}

impl Network for DenseFcn {
    fn spec(&self) -> &NetSpec {
        &self.spec
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn forward_with_taps(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, FeatureStack)> {
        check_input(&self.spec, x)?;
        let mut h = self.first.forward(x)?;
        let mut skips = Vec::new();
        for (db, td) in self.down_blocks.iter().zip(&self.tds) {
            let (all, _) = db.forward(&h, mode)?;
            h = max_pool2(&td.conv.forward(&td.norm.forward(&all, mode)?.relu()?)?)?;
            skips.push(all);
        }
        let (_, mut new) = self.bottleneck.forward(&h, mode)?;
        let mut taps = FeatureStack::default();
        let count = self.tus.len();
        for (j, (tu, ub)) in self.tus.iter().zip(&self.up_blocks).enumerate() {
            let u = tu.forward(&new)?;
            if j + 2 >= count {
                taps.push(format!("tu{}", j + 1), u.clone());
            }
            let s = skips.pop().expect("one skip per transition");
            let (all, fresh) = ub.forward(&Tensor::cat(&[&u, &s], 1)?, mode)?;
            h = all;
            new = fresh;
        }
        let probs = softmax_channels(&self.head.forward(&h)?)?;
        Ok((probs, taps))
    }

    fn final_weights(&self) -> Vec<Var> {
        let last = self.up_blocks.last().unwrap().layers.last().unwrap();
        vec![last.conv.weight.clone(), self.head.weight.clone()]
    }
}
