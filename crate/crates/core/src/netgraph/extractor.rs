//! Frozen convolutional pyramid used as the feature space for the contextual loss.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use super::features::FeatureStack;
use super::layers::{max_pool2, Conv2d, Mode, WeightInit};
use super::nets::{check_input, Network};
use super::params::{role_rng, Init, ParamStore};
use super::spec::{NetKind, NetSpec};
use crate::error::{Error, Result};

/// Orthogonal init with ReLU gain, zero bias. Taps at 1/4, 1/4 and 1/8 resolution with
/// channel widths c, c, 2c.
pub struct CxExtractor {
    spec: NetSpec,
    store: ParamStore,
    convs: Vec<Conv2d>,
}

impl CxExtractor {
    pub fn new(spec: &NetSpec, dtype: DType, seed: u64) -> Result<Self> {
        if spec.kind != NetKind::CxExtractor {
            return Err(Error::Config(format!(
                "expected extractor spec, got {:?}",
                spec.kind
            )));
        }
        spec.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = role_rng(seed, "cx_extractor");
        let mut init = Init::new(&mut store, &mut rng);
        let c = spec.base_width;
        let w = WeightInit::Orthogonal(2f64.sqrt());
        let plan = [
            (spec.in_channels, c / 4),
            (c / 4, c / 2),
            (c / 2, c),
            (c, c),
            (c, 2 * c),
        ];
        let convs = plan
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| Conv2d::new(&mut init, &format!("conv{}", i + 1), a, b, 3, 1, 1, w))
            .collect::<Result<Vec<_>>>()?;
        Ok(CxExtractor {
            spec: spec.clone(),
            store,
            convs,
        })
    }

    /// Replaces the weights with externally supplied ones (safetensors, keys
    /// `convN.weight` / `convN.bias`). Shapes must match the spec.
    pub fn load_weights(&self, path: &Path) -> Result<()> {
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
        self.store.import("cx", &|k: &str| {
            tensors.get(k.strip_prefix("cx.").unwrap_or(k)).cloned()
        })
    }
}

impl Network for CxExtractor {
    fn spec(&self) -> &NetSpec {
        &self.spec
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Weights enter the graph detached, so gradients reach the input only.
    fn forward_with_taps(&self, x: &Tensor, _mode: Mode) -> Result<(Tensor, FeatureStack)> {
        check_input(&self.spec, x)?;
        let mut taps = FeatureStack::default();
        let conv = |i: usize, h: &Tensor| -> Result<Tensor> {
            Ok(self.convs[i].forward_detached(h)?.relu()?)
        };
        let h = max_pool2(&conv(0, x)?)?;
        let h = max_pool2(&conv(1, &h)?)?;
        let t1 = conv(2, &h)?;
        let t2 = conv(3, &t1)?;
        let t3 = conv(4, &max_pool2(&t2)?)?;
        taps.push("cx1", t1);
        taps.push("cx2", t2);
        taps.push("cx3", t3.clone());
        Ok((t3, taps))
    }
}
