use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use super::RobustnessError;
use crate::net::InputShape;

/// Built-in parametric corruptions. Severity `s ∈ 1..=5` selects the `s`-th
/// entry of [`Corruption::table`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    /// Additive `N(0, σ²)` noise, σ from the table.
    GaussianNoise,
    /// Salt-and-pepper noise: each value becomes 0 or 1 with probability `p`.
    ImpulseNoise,
    /// Separable Gaussian blur per channel, σ in pixels.
    GaussianBlur,
    /// Additive shift `δ`.
    Brightness,
    /// `(x − mean)·c + mean` per image, contrast factor `c`.
    Contrast,
}

pub const ALL_CORRUPTIONS: [Corruption; 5] = [
    Corruption::GaussianNoise,
    Corruption::ImpulseNoise,
    Corruption::GaussianBlur,
    Corruption::Brightness,
    Corruption::Contrast,
];

impl Corruption {
    pub fn name(self) -> &'static str {
        match self {
            Corruption::GaussianNoise => "gaussian_noise",
            Corruption::ImpulseNoise => "impulse_noise",
            Corruption::GaussianBlur => "gaussian_blur",
            Corruption::Brightness => "brightness",
            Corruption::Contrast => "contrast",
        }
    }

    pub fn table(self) -> [f64; 5] {
        match self {
            Corruption::GaussianNoise => [0.04, 0.06, 0.08, 0.10, 0.12],
            Corruption::ImpulseNoise => [0.01, 0.02, 0.03, 0.05, 0.07],
            Corruption::GaussianBlur => [0.5, 0.75, 1.0, 1.25, 1.5],
            Corruption::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
            Corruption::Contrast => [0.75, 0.6, 0.45, 0.3, 0.2],
        }
    }

    /// Parameter value that leaves the input unchanged.
    pub fn neutral(self) -> f64 {
        match self {
            Corruption::Contrast => 1.0,
            _ => 0.0,
        }
    }

    pub fn parameter(self, severity: u8) -> Result<f64, RobustnessError> {
        if !(1..=5).contains(&severity) {
            return Err(RobustnessError::InvalidConfig(format!("severity {severity} outside 1..=5")));
        }
        Ok(self.table()[severity as usize - 1])
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Corruption {
    type Err = RobustnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ALL_CORRUPTIONS
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| RobustnessError::UnknownCorruption(s.to_string()))
    }
}

/// Corrupts every sample of `x` (rows laid out per `shape`) at `severity`.
/// Output is clipped to `[0, 1]` and depends only on the inputs and `seed`.
pub fn corrupt(
    x: ArrayView2<'_, f32>,
    shape: InputShape,
    name: &str,
    severity: u8,
    seed: u64,
) -> Result<Array2<f32>, RobustnessError> {
    let c: Corruption = name.parse()?;
    corrupt_with(x, shape, c, c.parameter(severity)?, seed)
}

/// Like [`corrupt`] with an explicit parameter value.
pub fn corrupt_with(
    x: ArrayView2<'_, f32>,
    shape: InputShape,
    corruption: Corruption,
    param: f64,
    seed: u64,
) -> Result<Array2<f32>, RobustnessError> {
    if x.ncols() != shape.numel() {
        return Err(RobustnessError::InvalidInput(format!(
            "rows of width {} for input size {}",
            x.ncols(),
            shape.numel()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = x.to_owned();
    match corruption {
        Corruption::GaussianNoise => {
            if param > 0.0 {
                let noise = Normal::new(0.0, param).map_err(|e| RobustnessError::InvalidConfig(e.to_string()))?;
                out.mapv_inplace(|v| v + noise.sample(&mut rng) as f32);
            }
        }
        Corruption::ImpulseNoise => {
            out.mapv_inplace(|v| {
                if rng.gen_bool(param) {
                    if rng.gen_bool(0.5) {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    v
                }
            });
        }
        Corruption::GaussianBlur => {
            let InputShape::Image {
                height,
                width,
                channels,
            } = shape
            else {
                return Err(RobustnessError::InvalidInput("blur needs image inputs".into()));
            };
            if param > 0.0 {
                let kernel = gaussian_kernel(param);
                for mut row in out.rows_mut() {
                    let blurred = blur(row.as_slice().expect("standard layout"), height, width, channels, &kernel);
                    row.assign(&ndarray::ArrayView1::from(&blurred));
                }
            }
        }
        Corruption::Brightness => {
            let d = param as f32;
            out.mapv_inplace(|v| v + d);
        }
        Corruption::Contrast => {
            let c = param as f32;
            for mut row in out.rows_mut() {
                let mean = row.mean().unwrap_or(0.0);
                row.mapv_inplace(|v| (v - mean) * c + mean);
            }
        }
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / sum) as f32).collect()
}

/// Separable blur with edge replication.
fn blur(src: &[f32], h: usize, w: usize, c: usize, kernel: &[f32]) -> Vec<f32> {
    let r = (kernel.len() / 2) as isize;
    let at = |y: usize, x: usize, ch: usize| (y * w + x) * c + ch;
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let xx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += kv * src[at(y, xx, ch)];
                }
                tmp[at(y, x, ch)] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let yy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[at(yy, x, ch)];
                }
                out[at(y, x, ch)] = acc;
            }
        }
    }
    out
}
