//! Image/mask loading, manifests, and the synthetic benchmark.

pub mod manifest;
pub mod pgm;
pub mod shift;
pub mod synth;

pub use manifest::{load_manifest, Manifest, ManifestEntry, Split};
pub use shift::{apply_shift, Moire, ShiftSpec};

use crate::error::{Error, Result};
use crate::tensor::{resample, ResizeMode, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    /// `[1, 1, h, w]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[1, 1, h, w]` with values in `{0, 1}`.
    pub mask: Option<Tensor<f32>>,
    pub domain: String,
}

/// Loads one entry, scaling to `[0, 1]` and resizing to the manifest's
/// working size (bilinear for images, nearest for masks). Mask pixels above
/// 127 are foreground.
pub fn load_sample(manifest: &Manifest, entry: &ManifestEntry) -> Result<SampleRecord> {
    let img = pgm::read(&manifest.resolve(&entry.image))?;
    let mask = match &entry.mask {
        None => None,
        Some(p) => {
            let m = pgm::read(&manifest.resolve(p))?;
            if (m.width, m.height) != (img.width, img.height) {
                return Err(Error::Manifest(format!(
                    "entry {:?}: mask is {}x{}, image is {}x{}",
                    entry.id, m.width, m.height, img.width, img.height
                )));
            }
            Some(binarize(&m))
        }
    };
    let size = manifest.working_size;
    let mut image = img.to_tensor();
    let mut mask = mask;
    if (img.height, img.width) != (size, size) {
        image = resample(&image, size, size, ResizeMode::Bilinear)?;
        mask = mask.map(|m| resample(&m, size, size, ResizeMode::Nearest)).transpose()?;
    }
    Ok(SampleRecord {
        id: entry.id.clone(),
        image,
        mask,
        domain: entry.domain.clone(),
    })
}

fn binarize(m: &pgm::GrayImage) -> Tensor<f32> {
    let data = m.data.iter().map(|&v| if v > 127 { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(crate::tensor::Shape::new(1, 1, m.height, m.width), data).expect("consistent size")
}

pub fn load_split(manifest: &Manifest, split: Split) -> Result<Vec<SampleRecord>> {
    manifest.split(split).map(|e| load_sample(manifest, e)).collect()
}
