//! Phantom corpora, preprocessing, augmentation and on-disk formats.

pub mod augment;
pub mod image;
pub mod io;
pub mod manifest;
pub mod phantom;
pub mod preprocess;

pub use augment::{augment, AugmentParams};
pub use image::{Image, Mask, Modality, Spacing};
pub use io::{load_image, load_mask, save_image, save_mask};
pub use manifest::{generate_corpus, Manifest, ManifestEntry, Split};
pub use phantom::{generate_phantom, PhantomConfig};
pub use preprocess::{crop_body, Offset};
