//! Synthetic acquisition shifts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{hash_str, Rng};
use crate::tensor::Tensor;

use super::SampleRecord;

const MAX_MAGNITUDE: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Moire {
    pub period_px: f64,
    pub angle_rad: f64,
    pub amplitude: f64,
}

/// `clamp(contrast · (x^gamma − 0.5) + 0.5 + bias + moire + noise, 0, 1)`.
///
/// The bias field is a linear ramp from `−bias_field_strength` in the top
/// left corner to `+bias_field_strength` in the bottom right. Noise is
/// Gaussian, drawn from a stream keyed by `(seed, sample id)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftSpec {
    pub name: String,
    pub gamma_correction: f64,
    pub contrast_scale: f64,
    pub gaussian_noise_sigma: f64,
    pub bias_field_strength: f64,
    pub moire: Option<Moire>,
    pub seed: u64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec::identity()
    }
}

impl ShiftSpec {
    pub fn identity() -> Self {
        ShiftSpec {
            name: "identity".into(),
            gamma_correction: 1.0,
            contrast_scale: 1.0,
            gaussian_noise_sigma: 0.0,
            bias_field_strength: 0.0,
            moire: None,
            seed: 0,
        }
    }

    /// Scanner/site change: brighter mid-tones, harder contrast, shading
    /// and sensor noise.
    pub fn cross_site() -> Self {
        ShiftSpec {
            name: "cross_site".into(),
            gamma_correction: 0.6,
            contrast_scale: 1.6,
            gaussian_noise_sigma: 0.05,
            bias_field_strength: 0.3,
            moire: None,
            seed: 0x5eed,
        }
    }

    /// Photo of a lightbox or monitor: strong contrast and a moiré grating.
    pub fn phone_capture() -> Self {
        ShiftSpec {
            name: "phone_capture".into(),
            gamma_correction: 0.6,
            contrast_scale: 1.6,
            gaussian_noise_sigma: 0.02,
            bias_field_strength: 0.0,
            moire: Some(Moire {
                period_px: 6.0,
                angle_rad: 0.5,
                amplitude: 0.12,
            }),
            seed: 0xf0e,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "identity" => Some(Self::identity()),
            "cross_site" => Some(Self::cross_site()),
            "phone_capture" => Some(Self::phone_capture()),
            _ => None,
        }
    }

    pub const PRESETS: [&'static str; 3] = ["identity", "cross_site", "phone_capture"];

    pub fn validate(&self) -> Result<()> {
        // Bounded so no combination of terms can reach inf - inf.
        let bounded = |v: f64| v.is_finite() && v.abs() <= MAX_MAGNITUDE;
        if !(self.gamma_correction > 0.0 && bounded(self.gamma_correction)) {
            return Err(Error::invalid("gamma_correction must be positive"));
        }
        let noise_ok = self.gaussian_noise_sigma >= 0.0 && bounded(self.gaussian_noise_sigma);
        if !bounded(self.contrast_scale) || !noise_ok || !bounded(self.bias_field_strength) {
            return Err(Error::invalid(format!(
                "shift parameters must be finite with magnitude <= {MAX_MAGNITUDE} and noise non-negative"
            )));
        }
        if let Some(m) = &self.moire {
            if !(m.period_px > 0.0 && m.period_px.is_finite()) || !bounded(m.amplitude) || !m.angle_rad.is_finite() {
                return Err(Error::invalid("moire period must be positive and amplitude bounded"));
            }
        }
        // The name becomes a directory next to the source manifest.
        let name_ok = !self.name.is_empty() && self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        if !name_ok {
            return Err(Error::invalid(format!("shift name {:?} must be non-empty [A-Za-z0-9_-]", self.name)));
        }
        Ok(())
    }

    /// JSON spec, validated.
    pub fn parse(text: &str) -> Result<Self> {
        let spec: ShiftSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Applies the shift to a `[1, 1, h, w]` image. `key` selects the
    /// noise stream.
    pub fn apply_image(&self, image: &Tensor<f32>, key: &str) -> Tensor<f32> {
        let s = image.shape();
        let mut rng = Rng::derive(self.seed, &[hash_str(key)]);
        let diag = ((s.h.max(2) - 1) + (s.w.max(2) - 1)) as f64;
        let mut out = image.clone();
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..s.h {
                    for x in 0..s.w {
                        let v = image.at(n, c, y, x) as f64;
                        let mut z = self.contrast_scale * (v.max(0.0).powf(self.gamma_correction) - 0.5) + 0.5;
                        z += self.bias_field_strength * (2.0 * (x + y) as f64 / diag - 1.0);
                        if let Some(m) = &self.moire {
                            let phase = (x as f64 * m.angle_rad.cos() + y as f64 * m.angle_rad.sin()) / m.period_px;
                            z += m.amplitude * (std::f64::consts::TAU * phase).sin();
                        }
                        if self.gaussian_noise_sigma > 0.0 {
                            z += self.gaussian_noise_sigma * rng.normal();
                        }
                        out.set(n, c, y, x, z.clamp(0.0, 1.0) as f32);
                    }
                }
            }
        }
        out
    }
}

/// Shifted copy of `sample`; the mask is untouched and the domain tag gains
/// a `+name` suffix.
pub fn apply_shift(sample: &SampleRecord, spec: &ShiftSpec) -> SampleRecord {
    SampleRecord {
        id: sample.id.clone(),
        image: spec.apply_image(&sample.image, &sample.id),
        mask: sample.mask.clone(),
        domain: format!("{}+{}", sample.domain, spec.name),
    }
}
