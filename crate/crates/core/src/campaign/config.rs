//! The experiment document.
//!
//! A TOML file with sections `[model]`, `[data]`, `[train]`, `[finetune]`,
//! `[pruning]`, `[evaluation]` and `[carbon]`; unknown keys are rejected.
//! A resolved copy (defaults filled in, seed overrides applied) is written to
//! every run directory as `config.toml`.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::CampaignError;
use crate::consensus::validate_metric_set;
use crate::metrics::{default_metric_set, MetricDescriptor, MetricKind};
use crate::net::data::{synthetic_blobs, synthetic_tabular, synthetic_textures};
use crate::net::{
    ArchitectureSpec, Augmentation, Dataset, Domain, LrSchedule, NetError, ResnetShape, TrainConfig, TrainData,
    TransformerShape,
};
use crate::robustness::{standard_suite, AttackConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed: model initialisation, training order, probe choice and
    /// per-iteration fine-tuning seeds all derive from it.
    pub seed: u64,
    /// Default run directory; `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainSection,
    pub finetune: TrainSection,
    #[serde(default)]
    pub pruning: PruningConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub carbon: CarbonConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelConfig {
    ResnetCifar(ResnetShape),
    TransformerTabular(TransformerShape),
}

impl ModelConfig {
    pub fn spec(&self) -> Result<ArchitectureSpec, NetError> {
        match self {
            ModelConfig::ResnetCifar(s) => ArchitectureSpec::resnet_cifar(s),
            ModelConfig::TransformerTabular(s) => ArchitectureSpec::transformer_tabular(s),
        }
    }
}

fn default_ood_split() -> String {
    "shifted".to_string()
}

/// Where the samples come from. File formats are described in
/// [`Dataset::load_image_array`] and [`Dataset::load_tabular_csv`]; relative
/// paths are resolved against the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Ten-class oriented-texture images; the OOD split uses the shifted
    /// generator.
    SyntheticTextures {
        train_samples: usize,
        test_samples: usize,
        #[serde(default)]
        ood_samples: usize,
        height: usize,
        width: usize,
        seed: u64,
    },
    SyntheticBlobs {
        train_samples: usize,
        test_samples: usize,
        height: usize,
        width: usize,
        classes: usize,
        seed: u64,
    },
    SyntheticTabular {
        train_samples: usize,
        test_samples: usize,
        #[serde(default)]
        ood_samples: usize,
        features: usize,
        classes: usize,
        seed: u64,
    },
    ImageArray {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        ood: BTreeMap<String, PathBuf>,
    },
    TabularCsv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        ood: BTreeMap<String, PathBuf>,
        #[serde(default = "default_delimiter")]
        delimiter: char,
        #[serde(default)]
        classes: Option<usize>,
    },
}

fn default_delimiter() -> char {
    ','
}

/// Train/test data plus named out-of-distribution splits.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub data: TrainData,
    pub ood: BTreeMap<String, Dataset>,
}

fn read_input(path: &Path, f: impl FnOnce(&Path) -> Result<Dataset, NetError>) -> Result<Dataset, CampaignError> {
    if !path.exists() {
        return Err(CampaignError::Input(format!("dataset {} not found", path.display())));
    }
    f(path).map_err(|e| CampaignError::Input(format!("{}: {e}", path.display())))
}

impl DataConfig {
    pub fn load(&self) -> Result<LoadedData, CampaignError> {
        let mut ood = BTreeMap::new();
        let data = match self {
            &DataConfig::SyntheticTextures {
                train_samples,
                test_samples,
                ood_samples,
                height,
                width,
                seed,
            } => {
                if ood_samples > 0 {
                    ood.insert(
                        default_ood_split(),
                        synthetic_textures(ood_samples, height, width, seed.wrapping_add(2), Domain::Shifted),
                    );
                }
                TrainData {
                    train: synthetic_textures(train_samples, height, width, seed, Domain::Standard),
                    test: synthetic_textures(test_samples, height, width, seed.wrapping_add(1), Domain::Standard),
                }
            }
            &DataConfig::SyntheticBlobs {
                train_samples,
                test_samples,
                height,
                width,
                classes,
                seed,
            } => TrainData {
                train: synthetic_blobs(train_samples, height, width, classes, seed),
                test: synthetic_blobs(test_samples, height, width, classes, seed.wrapping_add(1)),
            },
            &DataConfig::SyntheticTabular {
                train_samples,
                test_samples,
                ood_samples,
                features,
                classes,
                seed,
            } => {
                if ood_samples > 0 {
                    ood.insert(
                        default_ood_split(),
                        synthetic_tabular(ood_samples, features, classes, seed.wrapping_add(2), Domain::Shifted),
                    );
                }
                TrainData {
                    train: synthetic_tabular(train_samples, features, classes, seed, Domain::Standard),
                    test: synthetic_tabular(test_samples, features, classes, seed.wrapping_add(1), Domain::Standard),
                }
            }
            DataConfig::ImageArray { train, test, ood: splits } => {
                for (name, path) in splits {
                    ood.insert(name.clone(), read_input(path, Dataset::load_image_array)?);
                }
                TrainData {
                    train: read_input(train, Dataset::load_image_array)?,
                    test: read_input(test, Dataset::load_image_array)?,
                }
            }
            DataConfig::TabularCsv {
                train,
                test,
                ood: splits,
                delimiter,
                classes,
            } => {
                if !delimiter.is_ascii() {
                    return Err(CampaignError::Config(format!("delimiter {delimiter:?} is not ASCII")));
                }
                let d = *delimiter as u8;
                let load = |p: &Path| Dataset::load_tabular_csv(p, d, *classes);
                for (name, path) in splits {
                    ood.insert(name.clone(), read_input(path, load)?);
                }
                TrainData {
                    train: read_input(train, load)?,
                    test: read_input(test, load)?,
                }
            }
        };
        if data.train.is_empty() || data.test.is_empty() {
            return Err(CampaignError::Input("train and test sets must be non-empty".into()));
        }
        Ok(LoadedData { data, ood })
    }
}

/// Training hyper-parameters; the seed is derived from the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_schedule")]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub augmentation: Augmentation,
}

fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    0.05
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_schedule() -> LrSchedule {
    LrSchedule::Cosine
}

impl TrainSection {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            schedule: self.schedule,
            seed,
            augmentation: self.augmentation,
        }
    }
}

/// One entry of the metric set. `name` defaults to the kind's canonical
/// name; `lambda` applies to the interpolated metric, `ridge` to the
/// stochastic ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub kind: MetricKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ridge: Option<f64>,
}

impl MetricSpec {
    pub fn descriptor(&self) -> MetricDescriptor {
        let mut d = MetricDescriptor::new(self.kind);
        if let Some(name) = &self.name {
            d = d.with_name(name.clone());
        }
        if let Some(l) = self.lambda {
            d = d.with_param("lambda", l);
        }
        if let Some(r) = self.ridge {
            d = d.with_param("ridge", r);
        }
        d
    }

    pub fn from_descriptor(d: &MetricDescriptor) -> Self {
        Self {
            name: Some(d.name.clone()),
            kind: d.kind,
            lambda: d.params.get("lambda").copied(),
            ridge: d.params.get("ridge").copied(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum StopRule {
    /// Stop once the FLOP reduction reaches `target_pct`.
    FlopReductionTarget { target_pct: f64 },
    /// Stop after this many removals.
    MaxIterations { iterations: usize },
    /// Keep removing until no block is eligible.
    UntilNoEligible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningConfig {
    #[serde(default = "default_metrics")]
    pub metrics: Vec<MetricSpec>,
    /// Number of training samples in the probe batch.
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_stop")]
    pub stop: StopRule,
}

fn default_metrics() -> Vec<MetricSpec> {
    default_metric_set().iter().map(MetricSpec::from_descriptor).collect()
}
fn default_probes() -> usize {
    512
}
fn default_stop() -> StopRule {
    StopRule::UntilNoEligible
}

impl Default for PruningConfig {
    fn default() -> Self {
        Self {
            metrics: default_metrics(),
            probes: default_probes(),
            stop: default_stop(),
        }
    }
}

impl PruningConfig {
    pub fn descriptors(&self) -> Vec<MetricDescriptor> {
        self.metrics.iter().map(MetricSpec::descriptor).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default = "default_attacks")]
    pub attacks: Vec<AttackConfig>,
    /// Evaluate on the first `samples` test samples only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
    /// Latency repeats (at least 10); `0` skips latency measurement.
    #[serde(default = "default_latency_repeats")]
    pub latency_repeats: usize,
    #[serde(default = "default_latency_batch")]
    pub latency_batch: usize,
}

fn default_attacks() -> Vec<AttackConfig> {
    standard_suite(4)
}
fn default_eval_batch() -> usize {
    256
}
fn default_latency_repeats() -> usize {
    10
}
fn default_latency_batch() -> usize {
    32
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            attacks: default_attacks(),
            samples: None,
            batch_size: default_eval_batch(),
            latency_repeats: default_latency_repeats(),
            latency_batch: default_latency_batch(),
        }
    }
}

/// Carbon is estimated from training compute rather than measured: the wall
/// time of `train.epochs` epochs over the training set is
/// `3 · flops · samples · epochs / throughput`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarbonConfig {
    #[serde(default = "default_power")]
    pub device_power_watts: f64,
    #[serde(default = "default_intensity")]
    pub carbon_intensity_kg_per_kwh: f64,
    #[serde(default = "default_usd")]
    pub usd_per_hour: f64,
    /// Sustained training throughput, in GFLOP/s.
    #[serde(default = "default_throughput")]
    pub throughput_gflops: f64,
}

fn default_power() -> f64 {
    300.0
}
fn default_intensity() -> f64 {
    0.475
}
fn default_usd() -> f64 {
    1.0
}
fn default_throughput() -> f64 {
    1.0
}

impl Default for CarbonConfig {
    fn default() -> Self {
        Self {
            device_power_watts: default_power(),
            carbon_intensity_kg_per_kwh: default_intensity(),
            usd_per_hour: default_usd(),
            throughput_gflops: default_throughput(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CampaignError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CampaignError::Input(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CampaignError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CampaignError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable in TOML")
    }

    pub fn validate(&self) -> Result<(), CampaignError> {
        let bad = |m: String| Err(CampaignError::Config(m));
        let spec = self.model.spec().map_err(|e| CampaignError::Config(e.to_string()))?;
        for (name, t) in [("train", &self.train), ("finetune", &self.finetune)] {
            if let Err(e) = t.with_seed(0).validate() {
                return bad(format!("[{name}] {e}"));
            }
        }
        validate_metric_set(&self.pruning.descriptors()).map_err(|e| CampaignError::Config(e.to_string()))?;
        if self.pruning.probes < 2 {
            return bad("pruning.probes must be at least 2".into());
        }
        match self.pruning.stop {
            StopRule::FlopReductionTarget { target_pct } if !(0.0..100.0).contains(&target_pct) => {
                return bad(format!("flop reduction target {target_pct} outside [0, 100)"))
            }
            _ => {}
        }
        let mut keys = std::collections::BTreeSet::new();
        for a in &self.evaluation.attacks {
            a.validate().map_err(|e| CampaignError::Config(e.to_string()))?;
            if !keys.insert(a.key()) {
                return bad(format!("attack `{}` listed twice", a.key()));
            }
        }
        if self.evaluation.latency_repeats != 0 && self.evaluation.latency_repeats < 10 {
            return bad("evaluation.latency_repeats must be 0 or at least 10".into());
        }
        if self.evaluation.batch_size == 0 || self.evaluation.latency_batch == 0 {
            return bad("evaluation batch sizes must be positive".into());
        }
        let c = &self.carbon;
        if [c.device_power_watts, c.carbon_intensity_kg_per_kwh, c.usd_per_hour]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
            || !(c.throughput_gflops.is_finite() && c.throughput_gflops > 0.0)
        {
            return bad("carbon parameters must be non-negative and throughput positive".into());
        }
        let data_matches = match (&self.data, spec.input) {
            (
                DataConfig::SyntheticTextures { height, width, .. } | DataConfig::SyntheticBlobs { height, width, .. },
                crate::net::InputShape::Image {
                    height: h,
                    width: w,
                    channels,
                },
            ) => *height == h && *width == w && channels == 3,
            (DataConfig::SyntheticTabular { features, .. }, crate::net::InputShape::Tabular { features: f }) => {
                *features == f
            }
            (DataConfig::ImageArray { .. }, crate::net::InputShape::Image { .. }) => true,
            (DataConfig::TabularCsv { .. }, crate::net::InputShape::Tabular { .. }) => true,
            _ => false,
        };
        if !data_matches {
            return bad("data section does not match the model input".into());
        }
        let classes = match self.data {
            DataConfig::SyntheticTextures { .. } => Some(10),
            DataConfig::SyntheticBlobs { classes, .. } | DataConfig::SyntheticTabular { classes, .. } => Some(classes),
            _ => None,
        };
        if let Some(c) = classes {
            if c != spec.classes() {
                return bad(format!("data has {c} classes, model {}", spec.classes()));
            }
        }
        Ok(())
    }

    /// Seed used to fine-tune after removal number `iteration`.
    pub fn finetune_seed(&self, iteration: usize) -> u64 {
        derive_seed(self.seed, 0xF1_7E, iteration as u64)
    }

    pub fn train_seed(&self) -> u64 {
        derive_seed(self.seed, 0x7A_17, 0)
    }

    pub fn probe_seed(&self) -> u64 {
        derive_seed(self.seed, 0x9B_0E, 0)
    }
}

/// SplitMix64 finaliser over `(seed, tag, index)`.
fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
