//! Checkpoint persistence.
//!
//! A checkpoint is a directory holding three files:
//!
//! * `architecture.json`: the [`ArchitectureSpec`], pretty-printed JSON;
//! * `weights.bin`: every state tensor, see below;
//! * `meta.json`: [`TrainingMeta`].
//!
//! `weights.bin` is little-endian: the magic `LPW1`, a `u32` tensor count, then
//! per tensor (in name order) a `u32` name length, the UTF-8 name, a `u32`
//! rank, `u64` dimensions and the `f32` values in row-major order.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::spec::ArchitectureSpec;
use super::tensor::Tensor;
use super::NetError;

const MAGIC: &[u8; 4] = b"LPW1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Augmentation {
    pub random_crop: bool,
    pub horizontal_flip: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub seed: u64,
    pub augmentation: Augmentation,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// Mean training loss per epoch across every run this checkpoint went through.
    #[serde(default)]
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub architecture: ArchitectureSpec,
    pub weights: BTreeMap<String, Tensor>,
    pub meta: TrainingMeta,
}

impl ModelCheckpoint {
    /// Trainable parameter count implied by the stored tensors.
    pub fn param_count(&self) -> usize {
        self.weights
            .iter()
            .filter(|(name, _)| !name.ends_with(".running_mean") && !name.ends_with(".running_var"))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn save(&self, dir: &Path) -> Result<(), NetError> {
        fs::create_dir_all(dir)?;
        let arch = serde_json::to_string_pretty(&self.architecture)?;
        fs::write(dir.join("architecture.json"), arch)?;
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&self.meta)?)?;
        let mut out = io::BufWriter::new(fs::File::create(dir.join("weights.bin"))?);
        write_weights(&mut out, &self.weights)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, NetError> {
        let architecture: ArchitectureSpec =
            serde_json::from_str(&fs::read_to_string(dir.join("architecture.json"))?)?;
        architecture.validate()?;
        let meta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        let mut input = io::BufReader::new(fs::File::open(dir.join("weights.bin"))?);
        let weights = read_weights(&mut input)?;
        Ok(Self {
            architecture,
            weights,
            meta,
        })
    }
}

pub fn write_weights<W: Write>(out: &mut W, weights: &BTreeMap<String, Tensor>) -> io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(weights.len() as u32).to_le_bytes())?;
    for (name, t) in weights {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &t.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_weights<R: Read>(input: &mut R) -> Result<BTreeMap<String, Tensor>, NetError> {
    let corrupt = |m: &str| NetError::CorruptCheckpoint(m.to_string());
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(corrupt("bad weight archive magic"));
    }
    let count = read_u32(input)?;
    let mut weights = BTreeMap::new();
    for _ in 0..count {
        let len = read_u32(input)? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| corrupt("non-UTF-8 tensor name"))?;
        let rank = read_u32(input)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            input.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        input.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if weights.insert(name.clone(), Tensor { shape, data }).is_some() {
            return Err(NetError::CorruptCheckpoint(format!("duplicate tensor {name}")));
        }
    }
    Ok(weights)
}

fn read_u32<R: Read>(input: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
