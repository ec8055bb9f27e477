//! Synthetic chest-like images: a body silhouette, a mediastinum and two
//! bright "lung" ellipses on a dark background, with smooth texture and
//! noise. The mask is the union of the two lungs.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

use super::manifest::{Manifest, ManifestEntry, Split, MANIFEST_VERSION};
use super::pgm::{self, GrayImage};
use super::shift::ShiftSpec;
use super::SampleRecord;

pub const DOMAIN: &str = "synthetic";

/// Foreground fraction range every generated mask satisfies.
pub const FOREGROUND_RANGE: (f64, f64) = (0.1, 0.45);

struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    angle: f64,
}

impl Ellipse {
    /// Normalized radius; `< 1` inside.
    fn radius(&self, u: f64, v: f64) -> f64 {
        let (du, dv) = (u - self.cx, v - self.cy);
        let (s, c) = self.angle.sin_cos();
        let a = (c * du + s * dv) / self.ax;
        let b = (-s * du + c * dv) / self.ay;
        (a * a + b * b).sqrt()
    }

    /// Soft coverage with an edge about `edge` wide in normalized units.
    fn coverage(&self, u: f64, v: f64, edge: f64) -> f64 {
        let r = self.radius(u, v);
        let d = (1.0 - r) * self.ax.min(self.ay) / edge;
        (d + 0.5).clamp(0.0, 1.0)
    }
}

/// One image/mask pair of side `size`.
pub fn generate_sample(size: usize, rng: &mut Rng) -> (Tensor<f32>, Tensor<f32>) {
    loop {
        let (img, mask) = draw(size, rng);
        let frac = mask.mean() as f64;
        if (FOREGROUND_RANGE.0..=FOREGROUND_RANGE.1).contains(&frac) {
            return (img, mask);
        }
    }
}

fn draw(size: usize, rng: &mut Rng) -> (Tensor<f32>, Tensor<f32>) {
    let mut r = |lo: f64, hi: f64| rng.uniform_range(lo, hi);
    let background = r(0.05, 0.15);
    let body = Ellipse {
        cx: r(0.47, 0.53),
        cy: r(0.49, 0.55),
        ax: r(0.38, 0.45),
        ay: r(0.42, 0.48),
        angle: 0.0,
    };
    let body_level = r(0.28, 0.38);
    let med = Ellipse {
        cx: body.cx + r(-0.02, 0.02),
        cy: r(0.45, 0.55),
        ax: r(0.05, 0.08),
        ay: r(0.2, 0.3),
        angle: r(-0.1, 0.1),
    };
    let med_level = r(0.45, 0.55);
    let lungs = [
        Ellipse {
            cx: r(0.28, 0.36),
            cy: r(0.42, 0.52),
            ax: r(0.10, 0.15),
            ay: r(0.18, 0.26),
            angle: r(-0.25, 0.25),
        },
        Ellipse {
            cx: r(0.64, 0.72),
            cy: r(0.42, 0.52),
            ax: r(0.10, 0.15),
            ay: r(0.18, 0.26),
            angle: r(-0.25, 0.25),
        },
    ];
    let lung_level = [r(0.62, 0.78), r(0.62, 0.78)];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let f = r(1.0, 3.0) * std::f64::consts::TAU;
            let a = r(0.0, std::f64::consts::TAU);
            (f * a.cos(), f * a.sin(), r(0.0, std::f64::consts::TAU), r(0.01, 0.03))
        })
        .collect();
    let noise_sigma = 0.015;

    let shape = Shape::new(1, 1, size, size);
    let edge = 1.0 / size as f64;
    let mut img = Tensor::zeros(shape);
    let mut mask = Tensor::zeros(shape);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64;
            let v = (y as f64 + 0.5) / size as f64;
            let mut val = background;
            val += (body_level - background) * body.coverage(u, v, edge);
            val += (med_level - val) * med.coverage(u, v, edge);
            let mut inside = false;
            for (lung, &level) in lungs.iter().zip(&lung_level) {
                let rr = lung.radius(u, v);
                // Slightly darker towards the rim.
                let shaded = level * (1.0 - 0.12 * rr.min(1.0).powi(2));
                val += (shaded - val) * lung.coverage(u, v, edge);
                inside |= rr < 1.0;
            }
            for &(fu, fv, ph, amp) in &waves {
                val += amp * (fu * u + fv * v + ph).sin();
            }
            val += noise_sigma * rng.normal();
            img.set(0, 0, y, x, val.clamp(0.0, 1.0) as f32);
            mask.set(0, 0, y, x, if inside { 1.0 } else { 0.0 });
        }
    }
    (img, mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 50,
            val: 50,
            test: 50,
        }
    }
}

/// In-memory synthetic dataset, quantized exactly as it would be on disk.
pub fn synthesize(sizes: SplitSizes, size: usize, seed: u64) -> Vec<(Split, SampleRecord)> {
    let mut out = Vec::new();
    for (si, (split, count)) in [(Split::Train, sizes.train), (Split::Val, sizes.val), (Split::Test, sizes.test)]
        .into_iter()
        .enumerate()
    {
        for i in 0..count {
            let mut rng = Rng::derive(seed, &[0x5e17, si as u64, i as u64]);
            let (img, mask) = generate_sample(size, &mut rng);
            let img = GrayImage::from_tensor(&img).to_tensor();
            out.push((
                split,
                SampleRecord {
                    id: format!("{split}-{i:03}"),
                    image: img,
                    mask: Some(mask),
                    domain: DOMAIN.into(),
                },
            ));
        }
    }
    out
}

/// Manifest paths written by [`generate_synthetic`].
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub manifest: PathBuf,
    pub shifted_manifest: Option<PathBuf>,
    pub count: usize,
}

/// Writes `images/`, `masks/` and `manifest.json` under `out`. With a
/// shift, the same anatomy is also written under `<shift name>/` with its
/// own `manifest.json`, masks copied byte for byte.
pub fn generate_synthetic(out: &Path, sizes: SplitSizes, size: usize, seed: u64, shift: Option<&ShiftSpec>) -> Result<SynthOutput> {
    if size == 0 {
        return Err(Error::invalid("image size must be positive"));
    }
    if let Some(s) = shift {
        s.validate()?;
    }
    let records = synthesize(sizes, size, seed);
    let manifest = write_domain(out, &records, size, |r| r.clone())?;
    let shifted_manifest = match shift {
        None => None,
        Some(spec) => Some(write_domain(&out.join(&spec.name), &records, size, |r| super::shift::apply_shift(r, spec))?),
    };
    Ok(SynthOutput {
        manifest,
        shifted_manifest,
        count: records.len(),
    })
}

fn write_domain(dir: &Path, records: &[(Split, SampleRecord)], size: usize, f: impl Fn(&SampleRecord) -> SampleRecord) -> Result<PathBuf> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(records.len());
    for (split, rec) in records {
        let rec = f(rec);
        let image = PathBuf::from("images").join(format!("{}.pgm", rec.id));
        let mask = PathBuf::from("masks").join(format!("{}.pgm", rec.id));
        pgm::write(&dir.join(&image), &GrayImage::from_tensor(&rec.image))?;
        pgm::write(&dir.join(&mask), &GrayImage::from_tensor(rec.mask.as_ref().expect("synthetic masks")))?;
        entries.push(ManifestEntry {
            id: rec.id.clone(),
            image,
            mask: Some(mask),
            split: *split,
            domain: rec.domain.clone(),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        working_size: size,
        entries,
        root: dir.to_path_buf(),
    };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}
