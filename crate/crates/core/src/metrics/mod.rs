//! Evaluation metrics and statistics.

pub mod evaluate;
pub mod kl;
pub mod sensitivity;
pub mod separability;
pub mod stats;
pub mod surface;
pub mod volume;

pub use evaluate::{evaluate, load_eval_cases, EvalCase, Method, MetricsReport};
pub use kl::{kl_divergence, kl_translation_fidelity};
pub use sensitivity::{sensitivity_dropout, DropoutConfig, SensitivityReport};
pub use separability::{feature_separability, silhouette, SeparabilityOptions};
pub use stats::{holm_bonferroni, wilcoxon_paired, WilcoxonResult};
pub use surface::{hd95, surface_dsc, DEFAULT_TAU_MM};
pub use volume::{dsc, dsc2d, stitch_slice, stitch_volume, VolumeMask};
