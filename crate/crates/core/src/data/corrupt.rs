use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionType {
    GaussianNoise,
    ImpulseNoise,
    BoxBlur,
    Contrast,
    Brightness,
}

impl CorruptionType {
    pub const ALL: [CorruptionType; 5] = [
        CorruptionType::GaussianNoise,
        CorruptionType::ImpulseNoise,
        CorruptionType::BoxBlur,
        CorruptionType::Contrast,
        CorruptionType::Brightness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionType::GaussianNoise => "gaussian_noise",
            CorruptionType::ImpulseNoise => "impulse_noise",
            CorruptionType::BoxBlur => "box_blur",
            CorruptionType::Contrast => "contrast",
            CorruptionType::Brightness => "brightness",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown corruption type `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CorruptionSpec {
    kind: CorruptionType,
    intensity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionType, intensity: u8) -> Result<Self> {
        if !(1..=5).contains(&intensity) {
            return Err(Error::InvalidArgument(format!(
                "corruption intensity must be 1-5, got {intensity}"
            )));
        }
        Ok(Self { kind, intensity })
    }

    pub fn kind(self) -> CorruptionType {
        self.kind
    }

    pub fn intensity(self) -> u8 {
        self.intensity
    }

    /// The full 5 × 5 grid in a fixed order.
    pub fn grid() -> Vec<CorruptionSpec> {
        CorruptionType::ALL
            .into_iter()
            .flat_map(|kind| (1..=5).map(move |intensity| CorruptionSpec { kind, intensity }))
            .collect()
    }
}

/// Mean of each channel over the in-bounds `(2r+1)²` window.
fn box_blur(img: &[f64], h: usize, w: usize, c: usize, radius: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(h - 1));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(w - 1));
            let count = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
            for ch in 0..c {
                let mut s = 0.0;
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        s += img[(yy * w + xx) * c + ch];
                    }
                }
                out[(y * w + x) * c + ch] = s / count;
            }
        }
    }
    out
}

/// Applies `spec` to every row of `x: [N, D]` (features in `[0, 1]`).
/// Rows are treated as `image_shape` images, or as `1 × D` strips without one.
pub fn corrupt<R: Rng + ?Sized>(
    x: &Tensor,
    image_shape: Option<(usize, usize, usize)>,
    spec: CorruptionSpec,
    rng: &mut R,
) -> Result<Tensor> {
    if x.ndim() != 2 {
        return Err(Error::Shape {
            op: "corrupt",
            lhs: x.shape().to_vec(),
            rhs: vec![],
        });
    }
    let d = x.shape()[1];
    let (h, w, c) = image_shape.unwrap_or((1, d, 1));
    if h * w * c != d {
        return Err(Error::Shape {
            op: "corrupt",
            lhs: vec![h, w, c],
            rhs: vec![d],
        });
    }
    let i = spec.intensity as f64;
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(d.max(1)) {
        match spec.kind {
            CorruptionType::GaussianNoise => {
                let sd = 0.04 * i;
                out.extend(row.iter().map(|v| {
                    let z: f64 = StandardNormal.sample(rng);
                    v + sd * z
                }));
            }
            CorruptionType::ImpulseNoise => {
                let p = 0.03 * i;
                out.extend(row.iter().map(|&v| {
                    if rng.gen::<f64>() < p {
                        if rng.gen::<bool>() {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        v
                    }
                }));
            }
            CorruptionType::BoxBlur => out.extend(box_blur(row, h, w, c, spec.intensity as usize)),
            CorruptionType::Contrast => {
                let f = 1.0 - 0.15 * i;
                let mean = row.iter().sum::<f64>() / d as f64;
                out.extend(row.iter().map(|v| (v - mean) * f + mean));
            }
            CorruptionType::Brightness => out.extend(row.iter().map(|v| v + 0.1 * i)),
        }
    }
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(x.shape().to_vec(), out)
}
