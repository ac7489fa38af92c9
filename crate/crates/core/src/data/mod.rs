//! Dataset ingestion and the augmentation regime.

pub mod aug;
mod image;
mod manifest;
pub mod toy;

pub use self::image::{grid, images_to_tensor, tensor_to_images, Image};
pub use aug::{augment, augmented_embedding, AugmentConfig, AugmentationLabel, AUG_OPS};
pub use manifest::{DatasetManifest, ManifestRow, Split};
