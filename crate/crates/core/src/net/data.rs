//! Datasets: synthetic generators, on-disk loaders and augmentation.
//!
//! Two on-disk formats are understood:
//!
//! * **Image array** (`.lpia`): little-endian magic `LPIA`, then `u32` sample
//!   count, height, width, channels and class count, then `n·h·w·c` `u8`
//!   pixels in sample-major `h × w × c` order, then `n` `u32` labels. Pixels
//!   are scaled to `[0, 1]` on load.
//! * **Tabular CSV**: one sample per line, `label,f1,...,fk`; an optional
//!   header line is skipped when its first field is not an integer. Features
//!   are expected to lie in `[0, 1]`.

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::checkpoint::Augmentation;
use super::spec::InputShape;
use super::NetError;

const IMAGE_MAGIC: &[u8; 4] = b"LPIA";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: InputShape,
    pub x: Array2<f32>,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(shape: InputShape, x: Array2<f32>, y: Vec<usize>, classes: usize) -> Result<Self, NetError> {
        if x.ncols() != shape.numel() {
            return Err(NetError::Data(format!(
                "rows have {} values, input shape needs {}",
                x.ncols(),
                shape.numel()
            )));
        }
        if x.nrows() != y.len() {
            return Err(NetError::Data(format!("{} samples but {} labels", x.nrows(), y.len())));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
            return Err(NetError::Data(format!("label {bad} outside {classes} classes")));
        }
        Ok(Self { shape, x, y, classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            shape: self.shape,
            x: self.x.select(ndarray::Axis(0), idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            shape: self.shape,
            x: self.x.slice(s![..n, ..]).to_owned(),
            y: self.y[..n].to_vec(),
            classes: self.classes,
        }
    }

    /// Gathers the rows in `idx`, applying augmentation when requested.
    pub fn batch<R: Rng>(&self, idx: &[usize], aug: Augmentation, rng: &mut R) -> (Array2<f32>, Vec<usize>) {
        let mut x = self.x.select(ndarray::Axis(0), idx);
        if let InputShape::Image {
            height,
            width,
            channels,
        } = self.shape
        {
            if aug.random_crop || aug.horizontal_flip {
                let pad = (height.min(width) / 8).max(1);
                for mut row in x.rows_mut() {
                    let src = row.to_vec();
                    let (dy, dx) = if aug.random_crop {
                        (
                            rng.gen_range(0..=2 * pad) as isize - pad as isize,
                            rng.gen_range(0..=2 * pad) as isize - pad as isize,
                        )
                    } else {
                        (0, 0)
                    };
                    let flip = aug.horizontal_flip && rng.gen_bool(0.5);
                    for yy in 0..height {
                        for xx in 0..width {
                            let sx0 = if flip { width - 1 - xx } else { xx };
                            let sy = yy as isize + dy;
                            let sx = sx0 as isize + dx;
                            for c in 0..channels {
                                let dst = (yy * width + xx) * channels + c;
                                row[dst] = if sy < 0 || sx < 0 || sy >= height as isize || sx >= width as isize {
                                    0.0
                                } else {
                                    src[(sy as usize * width + sx as usize) * channels + c]
                                };
                            }
                        }
                    }
                }
            }
        }
        (x, idx.iter().map(|&i| self.y[i]).collect())
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.x.view()
    }

    pub fn save_image_array(&self, path: &Path) -> Result<(), NetError> {
        let InputShape::Image {
            height,
            width,
            channels,
        } = self.shape
        else {
            return Err(NetError::Data("image array format needs image samples".into()));
        };
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        out.write_all(IMAGE_MAGIC)?;
        for v in [self.len(), height, width, channels, self.classes] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        let pixels: Vec<u8> = self
            .x
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        out.write_all(&pixels)?;
        for &l in &self.y {
            out.write_all(&(l as u32).to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load_image_array(path: &Path) -> Result<Self, NetError> {
        let mut raw = Vec::new();
        fs::File::open(path)?.read_to_end(&mut raw)?;
        let bad = |m: &str| NetError::Data(format!("{}: {m}", path.display()));
        if raw.len() < 24 || &raw[..4] != IMAGE_MAGIC {
            return Err(bad("not an image array file"));
        }
        let header: Vec<usize> = raw[4..24]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let (n, height, width, channels, classes) = (header[0], header[1], header[2], header[3], header[4]);
        let numel = height * width * channels;
        let expected = 24 + n * numel + 4 * n;
        if raw.len() != expected {
            return Err(bad(&format!("expected {expected} bytes, found {}", raw.len())));
        }
        let pixels = &raw[24..24 + n * numel];
        let x = Array2::from_shape_vec((n, numel), pixels.iter().map(|&p| p as f32 / 255.0).collect())
            .expect("sized above");
        let y = raw[24 + n * numel..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        Self::new(
            InputShape::Image {
                height,
                width,
                channels,
            },
            x,
            y,
            classes,
        )
    }

    /// Reads `label,f1,...,fk` rows; the class count is `max label + 1` unless
    /// `classes` is given.
    pub fn load_tabular_csv(path: &Path, delimiter: u8, classes: Option<usize>) -> Result<Self, NetError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .delimiter(delimiter)
            .from_path(path)
            .map_err(|e| NetError::Data(format!("{}: {e}", path.display())))?;
        let mut labels = Vec::new();
        let mut values = Vec::new();
        let mut width = None;
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| NetError::Data(e.to_string()))?;
            let Some(first) = record.get(0) else { continue };
            let label: usize = match first.trim().parse() {
                Ok(l) => l,
                Err(_) if line == 0 => continue,
                Err(_) => return Err(NetError::Data(format!("line {}: bad label `{first}`", line + 1))),
            };
            let feats: Result<Vec<f32>, _> = record.iter().skip(1).map(|f| f.trim().parse::<f32>()).collect();
            let feats = feats.map_err(|e| NetError::Data(format!("line {}: {e}", line + 1)))?;
            match width {
                None => width = Some(feats.len()),
                Some(w) if w != feats.len() => {
                    return Err(NetError::Data(format!("line {}: {} features, expected {w}", line + 1, feats.len())))
                }
                _ => {}
            }
            labels.push(label);
            values.extend(feats);
        }
        let features = width.ok_or_else(|| NetError::Data(format!("{}: no samples", path.display())))?;
        let n = labels.len();
        let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Self::new(
            InputShape::Tabular { features },
            Array2::from_shape_vec((n, features), values).expect("sized above"),
            labels,
            classes,
        )
    }
}

/// Train/test pair used by training and evaluation.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Distribution the synthetic generators draw from. `Shifted` produces the
/// out-of-distribution split: same classes, perturbed nuisance parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Standard,
    Shifted,
}

/// Ten classes of 2-D textures: five pattern families (horizontal stripes,
/// vertical stripes, checkerboard, rings, blob) in two colour palettes. Every
/// class is invariant under horizontal flips and small translations, so the
/// usual crop/flip augmentation preserves labels.
pub fn synthetic_textures(n: usize, height: usize, width: usize, seed: u64, domain: Domain) -> Dataset {
    let channels = 3;
    let classes = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let palettes = [[0.9, 0.55, 0.2], [0.2, 0.55, 0.9]];
    let (freq_lo, freq_hi, noise_sd, bg_shift) = match domain {
        Domain::Standard => (1.5, 3.0, 0.08, 0.0),
        Domain::Shifted => (2.5, 4.0, 0.1, 0.1),
    };
    let noise = Normal::new(0.0, noise_sd).expect("valid");
    let mut x = Array2::<f32>::zeros((n, height * width * channels));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = rng.gen_range(0..classes);
        let pattern = label % 5;
        let palette = palettes[label / 5];
        let freq = rng.gen_range(freq_lo..freq_hi);
        let phase_a = rng.gen_range(0.0..2.0 * PI);
        let phase_b = rng.gen_range(0.0..2.0 * PI);
        let cx = width as f64 / 2.0 + rng.gen_range(-2.0..2.0);
        let cy = height as f64 / 2.0 + rng.gen_range(-2.0..2.0);
        let sigma = height as f64 / rng.gen_range(4.0..6.0);
        let amp = rng.gen_range(0.15..0.35);
        let bg = rng.gen_range(0.25..0.55) + bg_shift;
        let color: Vec<f64> = palette.iter().map(|c| c + rng.gen_range(-0.1..0.1)).collect();
        let mut row = x.row_mut(i);
        for yy in 0..height {
            for xx in 0..width {
                let u = xx as f64 / width as f64;
                let v = yy as f64 / height as f64;
                let r = ((xx as f64 - cx).powi(2) + (yy as f64 - cy).powi(2)).sqrt();
                let p = match pattern {
                    0 => (2.0 * PI * freq * v + phase_a).sin(),
                    1 => (2.0 * PI * freq * u + phase_a).sin(),
                    2 => (2.0 * PI * freq * u + phase_a).sin() * (2.0 * PI * freq * v + phase_b).sin(),
                    3 => (2.0 * PI * freq * r / height as f64 + phase_a).sin(),
                    _ => 2.0 * (-(r * r) / (2.0 * sigma * sigma)).exp() - 1.0,
                };
                for c in 0..channels {
                    let val = bg + amp * p * color[c] + noise.sample(&mut rng);
                    row[(yy * width + xx) * channels + c] = val.clamp(0.0, 1.0) as f32;
                }
            }
        }
        y.push(label);
    }
    Dataset::new(
        InputShape::Image {
            height,
            width,
            channels,
        },
        x,
        y,
        classes,
    )
    .expect("generator respects its own shape")
}

/// Flat-colour images whose class is given by a fixed per-class colour plus
/// small pixel noise: linearly separable in the pooled colour space.
pub fn synthetic_blobs(n: usize, height: usize, width: usize, classes: usize, seed: u64) -> Dataset {
    let channels = 3;
    let mut task = ChaCha8Rng::seed_from_u64(0xB10B5);
    let means: Vec<[f64; 3]> = (0..classes)
        .map(|_| [task.gen_range(0.1..0.9), task.gen_range(0.1..0.9), task.gen_range(0.1..0.9)])
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).expect("valid");
    let mut x = Array2::<f32>::zeros((n, height * width * channels));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = rng.gen_range(0..classes);
        let mut row = x.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = (means[label][j % channels] + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
        y.push(label);
    }
    Dataset::new(
        InputShape::Image {
            height,
            width,
            channels,
        },
        x,
        y,
        classes,
    )
    .expect("generator respects its own shape")
}

/// Gaussian class clusters squashed into `[0, 1]` by a logistic map.
pub fn synthetic_tabular(n: usize, features: usize, classes: usize, seed: u64, domain: Domain) -> Dataset {
    let mut task = ChaCha8Rng::seed_from_u64(0x7AB1E);
    let unit = Normal::new(0.0, 1.0).expect("valid");
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..features).map(|_| 1.5 * unit.sample(&mut task)).collect())
        .collect();
    let shift = match domain {
        Domain::Standard => 0.0,
        Domain::Shifted => 0.4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::<f32>::zeros((n, features));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = rng.gen_range(0..classes);
        for j in 0..features {
            let z = centers[label][j] + 0.7 * unit.sample(&mut rng) + shift;
            x[[i, j]] = (1.0 / (1.0 + (-z).exp())) as f32;
        }
        y.push(label);
    }
    Dataset::new(InputShape::Tabular { features }, x, y, classes).expect("generator respects its own shape")
}
