use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossWeights, SegLossKind};
use crate::netgraph::{BundleSpec, Preset, SegmenterKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Cmedl,
    CbctOnly,
    PmriSeg,
    CbctPlusPmri,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [
        TrainMode::Cmedl,
        TrainMode::CbctOnly,
        TrainMode::PmriSeg,
        TrainMode::CbctPlusPmri,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Cmedl => "cmedl",
            TrainMode::CbctOnly => "cbct_only",
            TrainMode::PmriSeg => "pmri_seg",
            TrainMode::CbctPlusPmri => "cbct_plus_pmri",
        }
    }

    /// Whether the mode needs a frozen translation network loaded from elsewhere.
    pub fn uses_frozen_translation(self) -> bool {
        matches!(self, TrainMode::PmriSeg | TrainMode::CbctPlusPmri)
    }

    pub fn segmenter_channels(self) -> usize {
        match self {
            TrainMode::CbctPlusPmri => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = TrainMode::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown mode `{s}`; valid modes: {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub segmenter: SegmenterKind,
    pub preset: Preset,
    pub batch_size: usize,
    pub lr_translation: f64,
    pub lr_segmentation: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub augmentation: bool,
    /// Capacity of the fake-image replay buffers; 0 disables them.
    pub replay_pool: usize,
    pub seg_loss: SegLossKind,
    /// Let the hint gradient reach the teacher as well as the student.
    pub symmetric_hint: bool,
    /// Caps the number of CBCT batches per epoch.
    pub max_steps_per_epoch: Option<usize>,
    /// Source of the frozen generators for `pmri_seg` and `cbct_plus_pmri`.
    pub translation_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Cmedl,
            segmenter: SegmenterKind::Unet,
            preset: Preset::Desk,
            batch_size: 2,
            lr_translation: 1e-4,
            lr_segmentation: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            max_epochs: 100,
            early_stop_patience: 10,
            weights: LossWeights::default(),
            seed: 0,
            augmentation: true,
            replay_pool: 50,
            seg_loss: SegLossKind::SoftDice,
            symmetric_hint: false,
            max_steps_per_epoch: None,
            translation_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, lr) in [
            ("lr_translation", self.lr_translation),
            ("lr_segmentation", self.lr_segmentation),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.max_steps_per_epoch == Some(0) {
            return bad("max_steps_per_epoch must be at least 1".into());
        }
        if self.mode.uses_frozen_translation() && self.translation_checkpoint.is_none() {
            return bad(format!(
                "mode {} requires translation_checkpoint (a checkpoint holding trained generators)",
                self.mode
            ));
        }
        self.weights.validate()
    }

    pub fn bundle_spec(&self) -> BundleSpec {
        BundleSpec::preset(self.preset, self.segmenter, self.mode.segmenter_channels())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_parse_and_list_alternatives() {
        for m in TrainMode::ALL {
            assert_eq!(m.name().parse::<TrainMode>().unwrap(), m);
        }
        let err = "cyclegan".parse::<TrainMode>().unwrap_err().to_string();
        assert!(err.contains("cmedl, cbct_only, pmri_seg, cbct_plus_pmri"), "{err}");
    }

    #[test]
    fn defaults_and_validation() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!((c.batch_size, c.max_epochs, c.early_stop_patience), (2, 100, 10));
        assert_eq!((c.lr_translation, c.lr_segmentation), (1e-4, 2e-4));
        let mut bad = c.clone();
        bad.lr_segmentation = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = c.clone();
        bad.mode = TrainMode::PmriSeg;
        assert!(bad.validate().is_err());
        let mut two = c;
        two.mode = TrainMode::CbctPlusPmri;
        assert_eq!(two.bundle_spec().segmenter.in_channels, 2);
        let parsed: std::result::Result<TrainConfig, _> = serde_json::from_str(r#"{"epochs": 3}"#);
        assert!(parsed.is_err());
    }
}
