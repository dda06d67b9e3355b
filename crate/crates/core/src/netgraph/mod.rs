//! Network definitions on top of candle tensors.

pub mod bundle;
pub mod extractor;
pub mod features;
pub mod im2col;
pub mod layers;
pub mod nets;
pub mod optim;
pub mod params;
pub mod segnets;
pub mod spec;

pub use bundle::{
    build_segmenter, load_checkpoint, read_meta, save_checkpoint, CheckpointMeta, Components,
    LoadedCheckpoint, ModelBundle, Translation,
};
pub use extractor::CxExtractor;
pub use features::{load_grids, save_grids, FeatureGrid, FeatureStack};
pub use layers::Mode;
pub use nets::{Generator, Network, PatchDiscriminator};
pub use optim::{Adam, AdamConfig};
pub use params::ParamStore;
pub use segnets::{DenseFcn, Unet};
pub use spec::{BundleSpec, NetKind, NetSpec, NormKind, Preset, SegmenterKind};
