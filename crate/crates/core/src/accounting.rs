//! FLOP, parameter, latency and carbon accounting.
//!
//! FLOPs count two operations per multiply-accumulate. Convolutions cost
//! `2·Ho·Wo·Cin·Cout·k²`, linear maps `2·din·dout` per row, attention
//! `2·(4·n·d² + 2·n²·d)` per encoder block. Normalisation, activations and
//! pooling are not counted.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

use crate::net::{ArchitectureSpec, BlockKind, Family, InputShape, LayerRef, Mode, Model, StemSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AccountingError {
    #[error("unsupported layer: {0}")]
    UnsupportedLayer(String),
    #[error("pruned model costs more than its base ({pruned} > {base} FLOPs)")]
    NegativeReduction { base: u64, pruned: u64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no block {0}")]
    UnknownBlock(LayerRef),
}

pub type Result<T> = std::result::Result<T, AccountingError>;

pub fn conv_flops(h_out: usize, w_out: usize, c_in: usize, c_out: usize, kernel: usize) -> u64 {
    2 * (h_out * w_out * c_in * c_out * kernel * kernel) as u64
}

pub fn linear_flops(d_in: usize, d_out: usize) -> u64 {
    2 * (d_in * d_out) as u64
}

/// Q, K, V, O projections plus the score and value products for `n` tokens.
pub fn attention_flops(n: usize, d: usize) -> u64 {
    2 * (4 * n * d * d + 2 * n * n * d) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerShape {
    Conv {
        h_out: usize,
        w_out: usize,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    },
    /// `rows` applications of a `d_in → d_out` affine map.
    Linear { rows: usize, d_in: usize, d_out: usize, bias: bool },
    Attention { tokens: usize, model_dim: usize },
    BatchNorm { channels: usize },
    LayerNorm { dim: usize },
    /// Per-feature token embedding with a weight and a bias per token.
    Embedding { tokens: usize, model_dim: usize },
}

impl LayerShape {
    pub fn flops(&self) -> u64 {
        match *self {
            LayerShape::Conv {
                h_out,
                w_out,
                c_in,
                c_out,
                kernel,
            } => conv_flops(h_out, w_out, c_in, c_out, kernel),
            LayerShape::Linear { rows, d_in, d_out, .. } => rows as u64 * linear_flops(d_in, d_out),
            LayerShape::Attention { tokens, model_dim } => attention_flops(tokens, model_dim),
            LayerShape::BatchNorm { .. } | LayerShape::LayerNorm { .. } => 0,
            LayerShape::Embedding { tokens, model_dim } => 2 * (tokens * model_dim) as u64,
        }
    }

    /// Trainable scalars; normalisation running statistics are excluded.
    pub fn params(&self) -> u64 {
        let p = match *self {
            LayerShape::Conv {
                c_in, c_out, kernel, ..
            } => c_in * c_out * kernel * kernel,
            LayerShape::Linear { d_in, d_out, bias, .. } => d_in * d_out + if bias { d_out } else { 0 },
            LayerShape::Attention { model_dim, .. } => 4 * (model_dim * model_dim + model_dim),
            LayerShape::BatchNorm { channels } => 2 * channels,
            LayerShape::LayerNorm { dim } => 2 * dim,
            LayerShape::Embedding { tokens, model_dim } => 2 * tokens * model_dim,
        };
        p as u64
    }
}

/// One countable layer and the block that owns it, if any.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub block: Option<LayerRef>,
    pub shape: LayerShape,
}

/// Every countable layer of `spec` in forward order.
pub fn layer_costs(spec: &ArchitectureSpec) -> Result<Vec<LayerCost>> {
    let mut out = Vec::new();
    let mut push = |name: String, block: Option<LayerRef>, shape: LayerShape| out.push(LayerCost { name, block, shape });
    match (spec.family, spec.input, spec.stem) {
        (
            Family::ResnetCifar,
            InputShape::Image {
                height,
                width,
                channels,
            },
            StemSpec::Conv { out_channels },
        ) => {
            push("stem.conv".into(), None, LayerShape::Conv {
                h_out: height,
                w_out: width,
                c_in: channels,
                c_out: out_channels,
                kernel: 3,
            });
            push("stem.bn".into(), None, LayerShape::BatchNorm { channels: out_channels });
            let (mut h, mut w) = (height, width);
            for b in spec.blocks() {
                let id = b.id;
                let (c_in, c_out, stride, project) = match b.kind {
                    BlockKind::ResidualIdentity { channels } => (channels, channels, 1, false),
                    BlockKind::ResidualDownsample {
                        in_channels,
                        out_channels,
                        stride,
                    } => (in_channels, out_channels, stride, true),
                    BlockKind::TransformerEncoder { .. } => {
                        return Err(AccountingError::UnsupportedLayer(format!("encoder block {id} in a resnet")))
                    }
                };
                if stride == 0 {
                    return Err(AccountingError::UnsupportedLayer(format!("{id} has stride 0")));
                }
                let (ho, wo) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
                push(format!("{id}.conv1"), Some(id), LayerShape::Conv {
                    h_out: ho,
                    w_out: wo,
                    c_in,
                    c_out,
                    kernel: 3,
                });
                push(format!("{id}.bn1"), Some(id), LayerShape::BatchNorm { channels: c_out });
                push(format!("{id}.conv2"), Some(id), LayerShape::Conv {
                    h_out: ho,
                    w_out: wo,
                    c_in: c_out,
                    c_out,
                    kernel: 3,
                });
                push(format!("{id}.bn2"), Some(id), LayerShape::BatchNorm { channels: c_out });
                if project {
                    push(format!("{id}.shortcut.conv"), Some(id), LayerShape::Conv {
                        h_out: ho,
                        w_out: wo,
                        c_in,
                        c_out,
                        kernel: 1,
                    });
                    push(format!("{id}.shortcut.bn"), Some(id), LayerShape::BatchNorm { channels: c_out });
                }
                (h, w) = (ho, wo);
            }
        }
        (Family::TransformerTabular, InputShape::Tabular { features }, StemSpec::FeatureEmbedding { model_dim }) => {
            push("embed".into(), None, LayerShape::Embedding {
                tokens: features,
                model_dim,
            });
            for b in spec.blocks() {
                let id = b.id;
                let BlockKind::TransformerEncoder { model_dim: d, ff_dim, .. } = b.kind else {
                    return Err(AccountingError::UnsupportedLayer(format!("{id} in a transformer")));
                };
                push(format!("{id}.ln1"), Some(id), LayerShape::LayerNorm { dim: d });
                push(format!("{id}.attn"), Some(id), LayerShape::Attention {
                    tokens: features,
                    model_dim: d,
                });
                push(format!("{id}.ln2"), Some(id), LayerShape::LayerNorm { dim: d });
                push(format!("{id}.mlp.fc1"), Some(id), LayerShape::Linear {
                    rows: features,
                    d_in: d,
                    d_out: ff_dim,
                    bias: true,
                });
                push(format!("{id}.mlp.fc2"), Some(id), LayerShape::Linear {
                    rows: features,
                    d_in: ff_dim,
                    d_out: d,
                    bias: true,
                });
            }
            push("final_ln".into(), None, LayerShape::LayerNorm { dim: model_dim });
        }
        (family, input, stem) => {
            return Err(AccountingError::UnsupportedLayer(format!(
                "{family:?} with input {input:?} and stem {stem:?}"
            )))
        }
    }
    push("head".into(), None, LayerShape::Linear {
        rows: 1,
        d_in: spec.head.in_features,
        d_out: spec.head.classes,
        bias: true,
    });
    Ok(out)
}

/// FLOPs of one forward pass on a single sample.
pub fn flops_count(spec: &ArchitectureSpec) -> Result<u64> {
    Ok(layer_costs(spec)?.iter().map(|l| l.shape.flops()).sum())
}

pub fn param_count(spec: &ArchitectureSpec) -> Result<u64> {
    Ok(layer_costs(spec)?.iter().map(|l| l.shape.params()).sum())
}

fn block_sum(spec: &ArchitectureSpec, id: LayerRef, f: impl Fn(&LayerShape) -> u64) -> Result<u64> {
    if spec.block(id).is_none() {
        return Err(AccountingError::UnknownBlock(id));
    }
    Ok(layer_costs(spec)?.iter().filter(|l| l.block == Some(id)).map(|l| f(&l.shape)).sum())
}

/// Standalone FLOPs of one block at its position in `spec`.
pub fn block_flops(spec: &ArchitectureSpec, id: LayerRef) -> Result<u64> {
    block_sum(spec, id, LayerShape::flops)
}

pub fn block_params(spec: &ArchitectureSpec, id: LayerRef) -> Result<u64> {
    block_sum(spec, id, LayerShape::params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub flops: u64,
    pub params: u64,
    pub latency_ms: Option<f64>,
    pub flop_reduction_pct: f64,
}

impl CostReport {
    /// Counts for `spec`, with the reduction taken against `base` when given.
    pub fn for_spec(spec: &ArchitectureSpec, base: Option<&CostReport>) -> Result<Self> {
        let mut report = Self {
            flops: flops_count(spec)?,
            params: param_count(spec)?,
            latency_ms: None,
            flop_reduction_pct: 0.0,
        };
        if let Some(base) = base {
            report.flop_reduction_pct = flop_reduction(base, &report)?;
        }
        Ok(report)
    }
}

/// `100·(1 − pruned/base)`.
pub fn flop_reduction(base: &CostReport, pruned: &CostReport) -> Result<f64> {
    if base.flops == 0 {
        return Err(AccountingError::InvalidInput("base model has zero FLOPs".into()));
    }
    if pruned.flops > base.flops {
        return Err(AccountingError::NegativeReduction {
            base: base.flops,
            pruned: pruned.flops,
        });
    }
    Ok(100.0 * (1.0 - pruned.flops as f64 / base.flops as f64))
}

/// Two decimals, the table convention (`78.80`).
pub fn format_pct(v: f64) -> String {
    format!("{v:.2}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyMeasurement {
    pub median_ms: f64,
    pub samples_ms: Vec<f64>,
    pub device: String,
}

pub const LATENCY_WARMUPS: usize = 3;

pub fn device_descriptor() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("cpu {}-{} ({threads} threads)", std::env::consts::ARCH, std::env::consts::OS)
}

/// Median wall time of `repeats` calls to `run` after three warm-up calls.
pub fn time_median(repeats: usize, mut run: impl FnMut()) -> Result<LatencyMeasurement> {
    if repeats < 10 {
        return Err(AccountingError::InvalidInput(format!("repeats must be at least 10, got {repeats}")));
    }
    for _ in 0..LATENCY_WARMUPS {
        run();
    }
    let mut samples: Vec<f64> = (0..repeats)
        .map(|_| {
            let t = Instant::now();
            run();
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median_ms = if sorted.len() % 2 == 0 {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    };
    samples.shrink_to_fit();
    Ok(LatencyMeasurement {
        median_ms,
        samples_ms: samples,
        device: device_descriptor(),
    })
}

/// Inference latency of `model` on `batch`.
pub fn measure_latency(model: &mut Model<f32>, batch: ArrayView2<'_, f32>, repeats: usize) -> Result<LatencyMeasurement> {
    if batch.ncols() != model.spec().input.numel() || batch.nrows() == 0 {
        return Err(AccountingError::InvalidInput("batch does not match the model input".into()));
    }
    time_median(repeats, || {
        std::hint::black_box(model.forward(batch, Mode::Infer));
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarbonEstimate {
    pub device_power_watts: f64,
    pub wall_hours: f64,
    pub energy_kwh: f64,
    pub carbon_intensity_kg_per_kwh: f64,
    pub co2_kg: f64,
    pub cost_usd: f64,
}

/// `energy = W·h/1000`, `co2 = energy·intensity`, `cost = h·rate`.
pub fn estimate_carbon(power_watts: f64, wall_hours: f64, intensity: f64, usd_per_hour: f64) -> Result<CarbonEstimate> {
    for (name, v) in [
        ("power", power_watts),
        ("hours", wall_hours),
        ("intensity", intensity),
        ("usd_per_hour", usd_per_hour),
    ] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(AccountingError::InvalidInput(format!("{name} = {v}")));
        }
    }
    let energy_kwh = power_watts * wall_hours / 1000.0;
    Ok(CarbonEstimate {
        device_power_watts: power_watts,
        wall_hours,
        energy_kwh,
        carbon_intensity_kg_per_kwh: intensity,
        // Scaling last keeps round inputs exact (300 W · 10 h · 0.475 = 1.425).
        co2_kg: power_watts * wall_hours * intensity / 1000.0,
        cost_usd: wall_hours * usd_per_hour,
    })
}

/// `100·(1 − pruned/base)`; zero when the base is zero.
pub fn reduction_pct(base: f64, pruned: f64) -> f64 {
    if base == 0.0 {
        0.0
    } else {
        100.0 * (1.0 - pruned / base)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarbonReduction {
    pub energy_pct: f64,
    pub co2_pct: f64,
    pub cost_pct: f64,
}

pub fn carbon_reduction(base: &CarbonEstimate, pruned: &CarbonEstimate) -> CarbonReduction {
    CarbonReduction {
        energy_pct: reduction_pct(base.energy_kwh, pruned.energy_kwh),
        co2_pct: reduction_pct(base.co2_kg, pruned.co2_kg),
        cost_pct: reduction_pct(base.cost_usd, pruned.cost_usd),
    }
}
