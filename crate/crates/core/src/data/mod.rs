//! The procedural shapes dataset, manifest files and augmentation.

mod augment;
mod manifest;
mod synth;

pub use augment::{augment, hflip, AugmentOptions};
pub use manifest::{
    load_annotations, load_dataset, load_image, save_image, write_dataset, ManifestHeader, ObjectRecord, Record,
    SampleDescriptor, MANIFEST_FILE, MANIFEST_FORMAT, MANIFEST_VERSION,
};
pub use synth::{generate, generate_sample, Sample, ShapeKind, SynthSpec};

use crate::error::Result;
use crate::match_loss::BBox;
use crate::tensor::Tensor;

/// Converts a pixel box to unit coordinates by plain division, the single
/// conversion used by both the generator and the manifest loader.
pub(crate) fn px_to_unit(b: &BBox, width: f64, height: f64) -> BBox {
    BBox { xmin: b.xmin / width, ymin: b.ymin / height, xmax: b.xmax / width, ymax: b.ymax / height }
}

/// Stacks `[C, H, W]` images into one `[N, C, H, W]` batch.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| crate::Error::shape("stack_images", "empty batch"))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.len());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(crate::Error::shape("stack_images", format!("{:?} vs {:?}", img.shape(), shape)));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::new(full, data)
}
