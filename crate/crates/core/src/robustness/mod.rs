//! Adversarial and distribution-shift evaluation.
//!
//! Accuracies are percentages in `[0, 100]`; deltas are pruned minus
//! baseline in percentage points, so a negative delta is a degradation.

mod corrupt;
mod fgsm;
pub mod plot;

pub use corrupt::{corrupt, corrupt_with, Corruption, ALL_CORRUPTIONS};
pub use fgsm::fgsm_attack;

use ndarray::s;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::net::train::{accuracy_of, argmax_rows};
use crate::net::{Dataset, Model};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RobustnessError {
    #[error("unknown corruption `{0}`")]
    UnknownCorruption(String),
    #[error("attack failed: {0}")]
    AttackFailed(String),
    #[error("invalid attack configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no out-of-distribution split named `{0}`")]
    UnknownSplit(String),
    #[error("report does not match its baseline: {0}")]
    ReportMismatch(String),
}

pub const DEFAULT_FGSM_EPSILON: f64 = 16.0 / 255.0;

fn default_epsilon() -> f64 {
    DEFAULT_FGSM_EPSILON
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackConfig {
    Fgsm {
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    Corruption { name: String, severity: u8 },
    OodSplit { split: String },
}

impl AttackConfig {
    pub fn fgsm() -> Self {
        AttackConfig::Fgsm {
            epsilon: DEFAULT_FGSM_EPSILON,
        }
    }

    pub fn corruption(c: Corruption, severity: u8) -> Self {
        AttackConfig::Corruption {
            name: c.name().to_string(),
            severity,
        }
    }

    /// Report key: `fgsm`, `{name}@{severity}` or `ood:{split}`.
    pub fn key(&self) -> String {
        match self {
            AttackConfig::Fgsm { .. } => "fgsm".to_string(),
            AttackConfig::Corruption { name, severity } => format!("{name}@{severity}"),
            AttackConfig::OodSplit { split } => format!("ood:{split}"),
        }
    }

    pub fn validate(&self) -> Result<(), RobustnessError> {
        match self {
            AttackConfig::Fgsm { epsilon } => {
                if !(0.0..=1.0).contains(epsilon) {
                    return Err(RobustnessError::InvalidConfig(format!("epsilon {epsilon} outside [0, 1]")));
                }
            }
            AttackConfig::Corruption { name, severity } => {
                name.parse::<Corruption>()?.parameter(*severity)?;
            }
            AttackConfig::OodSplit { split } => {
                if split.is_empty() {
                    return Err(RobustnessError::InvalidConfig("empty split name".into()));
                }
            }
        }
        Ok(())
    }
}

/// The standard suite: FGSM at 16/255 plus every built-in corruption at one
/// severity.
pub fn standard_suite(severity: u8) -> Vec<AttackConfig> {
    let mut suite = vec![AttackConfig::fgsm()];
    suite.extend(ALL_CORRUPTIONS.iter().map(|&c| AttackConfig::corruption(c, severity)));
    suite
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub clean_acc: f64,
    /// Accuracy per attack key.
    pub accuracy: BTreeMap<String, f64>,
    /// Mean accuracy over the corruption entries, when there are any.
    pub mean_corruption_acc: Option<f64>,
    /// Pruned minus baseline, in pp, keyed by `clean`, every attack key and
    /// `mean_corruption`. Absent when no baseline was supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_pp: Option<BTreeMap<String, f64>>,
}

impl RobustnessReport {
    pub fn new(clean_acc: f64, accuracy: BTreeMap<String, f64>, corruption_keys: &[String]) -> Self {
        let corr: Vec<f64> = corruption_keys.iter().filter_map(|k| accuracy.get(k).copied()).collect();
        Self {
            clean_acc,
            accuracy,
            mean_corruption_acc: (!corr.is_empty()).then(|| mean(&corr)),
            delta_pp: None,
        }
    }

    /// `clean` followed by every attack, in key order.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out = vec![("clean".to_string(), self.clean_acc)];
        out.extend(self.accuracy.iter().map(|(k, &v)| (k.clone(), v)));
        out
    }

    /// Fills `delta_pp` against `baseline`, which must cover the same attacks.
    pub fn with_baseline(mut self, baseline: &RobustnessReport) -> Result<Self, RobustnessError> {
        let ours: Vec<&String> = self.accuracy.keys().collect();
        let theirs: Vec<&String> = baseline.accuracy.keys().collect();
        if ours != theirs {
            return Err(RobustnessError::ReportMismatch(format!("attacks {ours:?} vs baseline {theirs:?}")));
        }
        let mut delta = BTreeMap::new();
        delta.insert("clean".to_string(), self.clean_acc - baseline.clean_acc);
        for (k, v) in &self.accuracy {
            delta.insert(k.clone(), v - baseline.accuracy[k]);
        }
        match (self.mean_corruption_acc, baseline.mean_corruption_acc) {
            (Some(a), Some(b)) => {
                delta.insert("mean_corruption".to_string(), a - b);
            }
            (None, None) => {}
            _ => return Err(RobustnessError::ReportMismatch("corruption sets differ".into())),
        }
        self.delta_pp = Some(delta);
        Ok(self)
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Two decimals with an explicit sign: `+0.99`, `-0.58`, `0.00`.
pub fn format_delta(pp: f64) -> String {
    let rounded = (pp * 100.0).round() / 100.0;
    if rounded == 0.0 {
        "0.00".to_string()
    } else if rounded > 0.0 {
        format!("+{rounded:.2}")
    } else {
        format!("{rounded:.2}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// Seed for the random corruptions.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            batch_size: 256,
            seed: 0,
        }
    }
}

fn predict_accuracy(model: &mut Model<f32>, x: ndarray::ArrayView2<'_, f32>, y: &[usize], batch: usize) -> f64 {
    let logits = model.predict(x, batch);
    accuracy_of(&argmax_rows(&logits), y)
}

/// Clean accuracy on `test` plus one accuracy per attack. OOD splits are
/// looked up by name in `ood`.
pub fn evaluate(
    model: &mut Model<f32>,
    test: &Dataset,
    attacks: &[AttackConfig],
    ood: &BTreeMap<String, Dataset>,
    opts: &EvalOptions,
) -> Result<RobustnessReport, RobustnessError> {
    if test.is_empty() {
        return Err(RobustnessError::InvalidInput("empty evaluation set".into()));
    }
    if test.shape != model.spec().input {
        return Err(RobustnessError::InvalidInput("evaluation data does not match the model input".into()));
    }
    let batch = opts.batch_size.max(1);
    let clean_acc = predict_accuracy(model, test.view(), &test.y, batch);
    let mut accuracy = BTreeMap::new();
    let mut corruption_keys = Vec::new();
    for attack in attacks {
        attack.validate()?;
        let key = attack.key();
        if accuracy.contains_key(&key) {
            return Err(RobustnessError::InvalidConfig(format!("attack `{key}` listed twice")));
        }
        let acc = match attack {
            AttackConfig::Fgsm { epsilon } => {
                let mut hits = 0.0;
                let mut start = 0;
                while start < test.len() {
                    let end = (start + batch).min(test.len());
                    let x = test.x.slice(s![start..end, ..]);
                    let y = &test.y[start..end];
                    let adv = fgsm_attack(model, x, y, *epsilon)?;
                    let bound = *epsilon as f32 + 1e-7;
                    if adv.iter().zip(x.iter()).any(|(a, b)| (a - b).abs() > bound) {
                        return Err(RobustnessError::AttackFailed("perturbation exceeds epsilon".into()));
                    }
                    hits += predict_accuracy(model, adv.view(), y, batch) * (end - start) as f64;
                    start = end;
                }
                hits / test.len() as f64
            }
            AttackConfig::Corruption { name, severity } => {
                let xc = corrupt(test.view(), test.shape, name, *severity, opts.seed)?;
                corruption_keys.push(key.clone());
                predict_accuracy(model, xc.view(), &test.y, batch)
            }
            AttackConfig::OodSplit { split } => {
                let data = ood.get(split).ok_or_else(|| RobustnessError::UnknownSplit(split.clone()))?;
                if data.shape != model.spec().input || data.is_empty() {
                    return Err(RobustnessError::InvalidInput(format!("split `{split}` does not fit the model")));
                }
                predict_accuracy(model, data.view(), &data.y, batch)
            }
        };
        accuracy.insert(key, acc);
    }
    Ok(RobustnessReport::new(clean_acc, accuracy, &corruption_keys))
}
