use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Generator,
    PatchDiscriminator,
    Unet,
    Densefcn,
    CxExtractor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Instance,
    Batch,
    None,
}

/// Architecture description. Depth fields that do not apply to `kind` are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub kind: NetKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    #[serde(default = "default_residual_blocks")]
    pub residual_blocks: usize,
    #[serde(default = "default_strided_layers")]
    pub strided_layers: usize,
    #[serde(default = "default_pool_levels")]
    pub pool_levels: usize,
    #[serde(default = "default_db_layers")]
    pub db_layers: usize,
    #[serde(default = "default_growth_rate")]
    pub growth_rate: usize,
    #[serde(default = "default_td_count")]
    pub td_count: usize,
    pub norm: NormKind,
    #[serde(default)]
    pub tap_names: Vec<String>,
}

fn default_residual_blocks() -> usize {
    9
}
fn default_strided_layers() -> usize {
    3
}
fn default_pool_levels() -> usize {
    4
}
fn default_db_layers() -> usize {
    4
}
fn default_growth_rate() -> usize {
    12
}
fn default_td_count() -> usize {
    5
}

impl NetSpec {
    fn base(
        kind: NetKind,
        in_channels: usize,
        out_channels: usize,
        base_width: usize,
        norm: NormKind,
    ) -> Self {
        NetSpec {
            kind,
            in_channels,
            out_channels,
            base_width,
            residual_blocks: default_residual_blocks(),
            strided_layers: default_strided_layers(),
            pool_levels: default_pool_levels(),
            db_layers: default_db_layers(),
            growth_rate: default_growth_rate(),
            td_count: default_td_count(),
            norm,
            tap_names: Vec::new(),
        }
    }

    pub fn generator(base_width: usize, residual_blocks: usize) -> Self {
        NetSpec {
            residual_blocks,
            ..Self::base(NetKind::Generator, 1, 1, base_width, NormKind::Instance)
        }
    }

    pub fn discriminator(base_width: usize, strided_layers: usize) -> Self {
        NetSpec {
            strided_layers,
            ..Self::base(
                NetKind::PatchDiscriminator,
                1,
                1,
                base_width,
                NormKind::Batch,
            )
        }
    }

    pub fn unet(in_channels: usize, base_width: usize, pool_levels: usize) -> Self {
        let mut s = NetSpec {
            pool_levels,
            ..Self::base(NetKind::Unet, in_channels, 2, base_width, NormKind::Batch)
        };
        s.tap_names = s.default_taps();
        s
    }

    pub fn densefcn(
        in_channels: usize,
        first_width: usize,
        growth_rate: usize,
        db_layers: usize,
    ) -> Self {
        let mut s = NetSpec {
            growth_rate,
            db_layers,
            ..Self::base(
                NetKind::Densefcn,
                in_channels,
                2,
                first_width,
                NormKind::Batch,
            )
        };
        s.tap_names = s.default_taps();
        s
    }

    pub fn cx_extractor(width: usize) -> Self {
        let mut s = Self::base(NetKind::CxExtractor, 1, 2 * width, width, NormKind::None);
        s.tap_names = s.default_taps();
        s
    }

    /// Taps each kind exposes, in output order.
    pub fn default_taps(&self) -> Vec<String> {
        let names: Vec<String> = match self.kind {
            NetKind::Generator | NetKind::PatchDiscriminator => Vec::new(),
            NetKind::Unet => {
                let l = self.pool_levels;
                vec![format!("dec{}", l - 1), format!("dec{l}")]
            }
            NetKind::Densefcn => {
                let t = self.td_count;
                vec![format!("tu{}", t - 1), format!("tu{t}")]
            }
            NetKind::CxExtractor => vec!["cx1".into(), "cx2".into(), "cx3".into()],
        };
        names
    }

    pub fn is_segmenter(&self) -> bool {
        matches!(self.kind, NetKind::Unet | NetKind::Densefcn)
    }

    /// Side length every input must be a multiple of.
    pub fn size_multiple(&self) -> usize {
        match self.kind {
            NetKind::Generator => 4,
            NetKind::Unet => 1 << self.pool_levels,
            NetKind::Densefcn => 1 << self.td_count,
            NetKind::CxExtractor => 8,
            NetKind::PatchDiscriminator => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{:?} spec: {m}", self.kind)));
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return bad("channel counts must be positive");
        }
        match self.kind {
            NetKind::Generator if self.out_channels != self.in_channels => {
                return bad("generator must map channels to themselves")
            }
            NetKind::PatchDiscriminator if self.strided_layers == 0 => {
                return bad("needs at least one strided layer")
            }
            NetKind::Unet if self.pool_levels < 2 => return bad("pool_levels must be at least 2"),
            NetKind::Densefcn
                if self.td_count < 2 || self.db_layers == 0 || self.growth_rate == 0 =>
            {
                return bad("td_count >= 2, db_layers >= 1, growth_rate >= 1 required")
            }
            NetKind::CxExtractor if self.base_width % 4 != 0 => {
                return bad("width must be a multiple of 4")
            }
            _ => {}
        }
        if self.tap_names != self.default_taps() {
            return bad(&format!(
                "taps {:?} do not match architecture {:?}",
                self.tap_names,
                self.default_taps()
            ));
        }
        Ok(())
    }
}

/// Scale presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Full,
    Desk,
    Tiny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmenterKind {
    Unet,
    Densefcn,
}

/// Specs for every network in a bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleSpec {
    pub generator: NetSpec,
    pub discriminator: NetSpec,
    pub segmenter: NetSpec,
    pub cx_extractor: NetSpec,
}

impl BundleSpec {
    pub fn preset(preset: Preset, segmenter: SegmenterKind, seg_in_channels: usize) -> Self {
        let (g, d, u, fcn, cx) = match preset {
            Preset::Full => (
                NetSpec::generator(64, 9),
                NetSpec::discriminator(64, 3),
                NetSpec::unet(seg_in_channels, 64, 4),
                NetSpec::densefcn(seg_in_channels, 48, 12, 4),
                NetSpec::cx_extractor(256),
            ),
            Preset::Desk => (
                NetSpec::generator(32, 4),
                NetSpec::discriminator(32, 1),
                NetSpec::unet(seg_in_channels, 16, 4),
                NetSpec::densefcn(seg_in_channels, 16, 12, 4),
                NetSpec::cx_extractor(64),
            ),
            Preset::Tiny => (
                NetSpec::generator(8, 2),
                NetSpec::discriminator(8, 1),
                NetSpec::unet(seg_in_channels, 8, 4),
                NetSpec::densefcn(seg_in_channels, 8, 6, 2),
                NetSpec::cx_extractor(32),
            ),
        };
        let segmenter = match segmenter {
            SegmenterKind::Unet => u,
            SegmenterKind::Densefcn => fcn,
        };
        BundleSpec {
            generator: g,
            discriminator: d,
            segmenter,
            cx_extractor: cx,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let want = [
            (&self.generator, NetKind::Generator),
            (&self.discriminator, NetKind::PatchDiscriminator),
            (&self.cx_extractor, NetKind::CxExtractor),
        ];
        for (s, k) in want {
            if s.kind != k {
                return Err(Error::Config(format!(
                    "expected a {k:?} spec, got {:?}",
                    s.kind
                )));
            }
        }
        if !self.segmenter.is_segmenter() {
            return Err(Error::Config(format!(
                "{:?} is not a segmenter",
                self.segmenter.kind
            )));
        }
        for s in [
            &self.generator,
            &self.discriminator,
            &self.segmenter,
            &self.cx_extractor,
        ] {
            s.validate()?;
        }
        Ok(())
    }
}
