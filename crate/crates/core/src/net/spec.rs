use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::str::FromStr;

use super::NetError;

/// Stable identifier of a block: 1-based stage and 1-based position within the
/// stage as originally built. Identifiers survive block removal, so a stage
/// that lost its second block holds `s1b1, s1b3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerRef {
    pub stage: u32,
    pub block: u32,
}

impl LayerRef {
    pub fn new(stage: u32, block: u32) -> Self {
        Self { stage, block }
    }
}

impl fmt::Display for LayerRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}b{}", self.stage, self.block)
    }
}

impl FromStr for LayerRef {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || NetError::Spec(format!("malformed layer reference `{s}`"));
        let rest = s.strip_prefix('s').ok_or_else(bad)?;
        let (stage, block) = rest.split_once('b').ok_or_else(bad)?;
        Ok(Self {
            stage: stage.parse().map_err(|_| bad())?,
            block: block.parse().map_err(|_| bad())?,
        })
    }
}

impl Serialize for LayerRef {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ResnetCifar,
    TransformerTabular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputShape {
    /// Images stored row-major as `height × width × channels`, values in `[0, 1]`.
    Image {
        height: usize,
        width: usize,
        channels: usize,
    },
    Tabular {
        features: usize,
    },
}

impl InputShape {
    /// Length of one flattened sample.
    pub fn numel(&self) -> usize {
        match *self {
            InputShape::Image {
                height,
                width,
                channels,
            } => height * width * channels,
            InputShape::Tabular { features } => features,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockKind {
    /// conv–bn–relu–conv–bn plus identity shortcut, relu after the sum.
    ResidualIdentity { channels: usize },
    /// Same body with a strided 1×1 conv–bn projection shortcut. Opens a stage.
    ResidualDownsample {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    },
    /// Pre-norm encoder block: attention and MLP sub-layers, each residual.
    TransformerEncoder {
        model_dim: usize,
        heads: usize,
        ff_dim: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub id: LayerRef,
    #[serde(flatten)]
    pub kind: BlockKind,
    pub removable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub blocks: Vec<BlockSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StemSpec {
    /// 3×3 stride-1 conv–bn–relu.
    Conv { out_channels: usize },
    /// Each scalar feature becomes a token `x_t · w_t + b_t`.
    FeatureEmbedding { model_dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub in_features: usize,
    pub classes: usize,
}

/// Declarative description of a network; the unit that surgery rewrites.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub family: Family,
    pub input: InputShape,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub head: HeadSpec,
}

/// Shape parameters of a CIFAR-style residual network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResnetShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub stem_width: usize,
    pub widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub classes: usize,
}

impl ResnetShape {
    /// ResNet-20 layout on 32×32 RGB inputs.
    pub fn desk() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            stem_width: 16,
            widths: vec![16, 32, 64],
            blocks_per_stage: vec![3, 3, 3],
            classes: 10,
        }
    }

    /// The narrow 16×16 variant used for CPU-bound campaigns.
    pub fn tiny() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 3,
            stem_width: 8,
            widths: vec![8, 16, 32],
            blocks_per_stage: vec![3, 3, 3],
            classes: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerShape {
    pub features: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub blocks: usize,
    pub classes: usize,
}

impl TransformerShape {
    pub fn desk() -> Self {
        Self {
            features: 8,
            model_dim: 64,
            heads: 4,
            ff_dim: 128,
            blocks: 4,
            classes: 4,
        }
    }
}

impl ArchitectureSpec {
    pub fn resnet_cifar(shape: &ResnetShape) -> Result<Self, NetError> {
        if shape.widths.len() != shape.blocks_per_stage.len() {
            return Err(NetError::Spec(format!(
                "{} widths for {} stages",
                shape.widths.len(),
                shape.blocks_per_stage.len()
            )));
        }
        let mut stages = Vec::with_capacity(shape.widths.len());
        let mut prev = shape.stem_width;
        for (s, (&width, &count)) in shape.widths.iter().zip(&shape.blocks_per_stage).enumerate() {
            let stage = s as u32 + 1;
            let blocks = (1..=count as u32)
                .map(|b| {
                    let kind = if b == 1 {
                        BlockKind::ResidualDownsample {
                            in_channels: prev,
                            out_channels: width,
                            stride: if s == 0 { 1 } else { 2 },
                        }
                    } else {
                        BlockKind::ResidualIdentity { channels: width }
                    };
                    BlockSpec {
                        id: LayerRef::new(stage, b),
                        kind,
                        removable: b != 1,
                    }
                })
                .collect();
            stages.push(StageSpec { blocks });
            prev = width;
        }
        let spec = Self {
            family: Family::ResnetCifar,
            input: InputShape::Image {
                height: shape.height,
                width: shape.width,
                channels: shape.channels,
            },
            stem: StemSpec::Conv {
                out_channels: shape.stem_width,
            },
            stages,
            head: HeadSpec {
                in_features: prev,
                classes: shape.classes,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A single-stage encoder stack. The first and last blocks are marked
    /// non-removable.
    pub fn transformer_tabular(shape: &TransformerShape) -> Result<Self, NetError> {
        let blocks = (1..=shape.blocks as u32)
            .map(|b| BlockSpec {
                id: LayerRef::new(1, b),
                kind: BlockKind::TransformerEncoder {
                    model_dim: shape.model_dim,
                    heads: shape.heads,
                    ff_dim: shape.ff_dim,
                },
                removable: b != 1 && b != shape.blocks as u32,
            })
            .collect();
        let spec = Self {
            family: Family::TransformerTabular,
            input: InputShape::Tabular {
                features: shape.features,
            },
            stem: StemSpec::FeatureEmbedding {
                model_dim: shape.model_dim,
            },
            stages: vec![StageSpec { blocks }],
            head: HeadSpec {
                in_features: shape.model_dim,
                classes: shape.classes,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &BlockSpec> {
        self.stages.iter().flat_map(|s| s.blocks.iter())
    }

    pub fn block(&self, id: LayerRef) -> Option<&BlockSpec> {
        self.blocks().find(|b| b.id == id)
    }

    pub fn block_count(&self) -> usize {
        self.stages.iter().map(|s| s.blocks.len()).sum()
    }

    /// Width of the representation fed to the classifier.
    pub fn feature_dim(&self) -> usize {
        self.head.in_features
    }

    pub fn classes(&self) -> usize {
        self.head.classes
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let err = |m: String| Err(NetError::Spec(m));
        if self.head.classes < 2 {
            return err("at least two classes are required".into());
        }
        if self.stages.is_empty() {
            return err("no stages".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for b in self.blocks() {
            if !seen.insert(b.id) {
                return err(format!("duplicate block id {}", b.id));
            }
        }
        for (s, stage) in self.stages.iter().enumerate() {
            if stage.blocks.len() < 2 {
                return err(format!("stage {} has fewer than 2 blocks", s + 1));
            }
            if stage.blocks.iter().any(|b| b.id.stage != s as u32 + 1) {
                return err(format!("stage {} holds a block from another stage", s + 1));
            }
            if stage.blocks.windows(2).any(|w| w[0].id.block >= w[1].id.block) {
                return err(format!("stage {} blocks out of order", s + 1));
            }
        }
        match self.family {
            Family::ResnetCifar => self.validate_resnet(),
            Family::TransformerTabular => self.validate_transformer(),
        }
    }

    fn validate_resnet(&self) -> Result<(), NetError> {
        let err = |m: String| Err(NetError::Spec(m));
        let (height, width) = match self.input {
            InputShape::Image {
                height,
                width,
                channels,
            } if height > 0 && width > 0 && channels > 0 => (height, width),
            _ => return err("resnet_cifar needs a non-empty image input".into()),
        };
        let StemSpec::Conv { out_channels } = self.stem else {
            return err("resnet_cifar needs a conv stem".into());
        };
        let (mut ch, mut h, mut w) = (out_channels, height, width);
        for stage in &self.stages {
            for (i, b) in stage.blocks.iter().enumerate() {
                match (i, b.kind) {
                    (
                        0,
                        BlockKind::ResidualDownsample {
                            in_channels,
                            out_channels,
                            stride,
                        },
                    ) => {
                        if in_channels != ch {
                            return err(format!(
                                "{} expects {in_channels} input channels, receives {ch}",
                                b.id
                            ));
                        }
                        if stride == 0 || out_channels == 0 {
                            return err(format!("{} has zero stride or width", b.id));
                        }
                        if b.removable {
                            return err(format!("{} opens a stage and cannot be removable", b.id));
                        }
                        ch = out_channels;
                        h = (h - 1) / stride + 1;
                        w = (w - 1) / stride + 1;
                    }
                    (0, _) => return err(format!("{} must be a downsample block", b.id)),
                    (_, BlockKind::ResidualIdentity { channels }) => {
                        if channels != ch {
                            return err(format!("{} width {channels} differs from {ch}", b.id));
                        }
                    }
                    (_, kind) => {
                        return err(format!("{} has unexpected kind {kind:?} inside a stage", b.id))
                    }
                }
            }
        }
        if h == 0 || w == 0 {
            return err("spatial size collapsed to zero".into());
        }
        if self.head.in_features != ch {
            return err(format!(
                "classifier expects {} features, body produces {ch}",
                self.head.in_features
            ));
        }
        Ok(())
    }

    fn validate_transformer(&self) -> Result<(), NetError> {
        let err = |m: String| Err(NetError::Spec(m));
        if !matches!(self.input, InputShape::Tabular { features } if features > 0) {
            return err("transformer_tabular needs a tabular input".into());
        }
        let StemSpec::FeatureEmbedding { model_dim } = self.stem else {
            return err("transformer_tabular needs a feature embedding stem".into());
        };
        if self.stages.len() != 1 {
            return err("transformer_tabular has exactly one stage".into());
        }
        for b in self.blocks() {
            match b.kind {
                BlockKind::TransformerEncoder {
                    model_dim: d,
                    heads,
                    ff_dim,
                } => {
                    if d != model_dim {
                        return err(format!("{} model dim {d} differs from {model_dim}", b.id));
                    }
                    if heads == 0 || d % heads != 0 {
                        return err(format!("{}: model dim {d} not divisible by {heads} heads", b.id));
                    }
                    if ff_dim == 0 {
                        return err(format!("{} has empty MLP", b.id));
                    }
                }
                kind => return err(format!("{} has unexpected kind {kind:?}", b.id)),
            }
        }
        if self.head.in_features != model_dim {
            return err("classifier width differs from model dim".into());
        }
        Ok(())
    }
}
