use ndarray::{Array2, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Augmentation, ModelCheckpoint, TrainingMeta};
use super::data::{Dataset, TrainData};
use super::layers::Mode;
use super::model::Model;
use super::tensor::Float;
use super::NetError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from the base rate to zero over the run.
    Cosine,
    /// Multiply by `gamma` every `every_epochs` epochs.
    Step { every_epochs: usize, gamma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_schedule")]
    pub schedule: LrSchedule,
    pub seed: u64,
    #[serde(default)]
    pub augmentation: Augmentation,
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

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            schedule: default_schedule(),
            seed,
            augmentation: Augmentation {
                random_crop: true,
                horizontal_flip: true,
            },
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.batch_size == 0 {
            return Err(NetError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(NetError::Config(format!("learning_rate = {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NetError::Config(format!("momentum = {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(NetError::Config(format!("weight_decay = {}", self.weight_decay)));
        }
        if let LrSchedule::Step { every_epochs: 0, .. } = self.schedule {
            return Err(NetError::Config("step schedule needs every_epochs > 0".into()));
        }
        Ok(())
    }

    fn rate(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let total = (self.epochs * steps_per_epoch).max(1);
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
            }
            LrSchedule::Step { every_epochs, gamma } => {
                let epoch = step / steps_per_epoch.max(1);
                self.learning_rate * gamma.powi((epoch / every_epochs) as i32)
            }
        }
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy<F: Float>(logits: &Array2<F>, labels: &[usize]) -> (f64, Array2<F>) {
    let n = logits.nrows();
    let mut grad = logits.clone();
    let mut loss = 0.0;
    let inv_n = F::of(1.0 / n as f64);
    for (mut row, &label) in grad.rows_mut().into_iter().zip(labels) {
        let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let shifted = row[label] - max;
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        loss -= (shifted - sum.ln()).as_f64();
        row.mapv_inplace(|v| v / sum);
        row[label] -= F::one();
        row.mapv_inplace(|v| v * inv_n);
    }
    (loss / n as f64, grad)
}

pub fn argmax_rows<F: Float>(logits: &Array2<F>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Percentage of correct predictions, `[0, 100]`.
pub fn accuracy_of(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * hits as f64 / labels.len() as f64
}

pub fn evaluate_accuracy(model: &mut Model<f32>, data: &Dataset) -> f64 {
    let logits = model.predict(data.view(), 256);
    accuracy_of(&argmax_rows(&logits), &data.y)
}

/// Trains from the model's current weights and returns the resulting
/// checkpoint. `epochs = 0` returns the initial weights unchanged.
pub fn train(mut model: Model<f32>, data: &TrainData, cfg: &TrainConfig) -> Result<ModelCheckpoint, NetError> {
    let meta = TrainingMeta {
        seed: cfg.seed,
        augmentation: cfg.augmentation,
        ..Default::default()
    };
    run(&mut model, data, cfg, meta)
}

/// Continues training from a checkpoint's weights. The architecture is never
/// changed.
pub fn finetune(ckpt: &ModelCheckpoint, data: &TrainData, cfg: &TrainConfig) -> Result<ModelCheckpoint, NetError> {
    let mut model = Model::<f32>::from_checkpoint(ckpt)?;
    let mut meta = ckpt.meta.clone();
    meta.seed = cfg.seed;
    meta.augmentation = cfg.augmentation;
    run(&mut model, data, cfg, meta)
}

fn run(model: &mut Model<f32>, data: &TrainData, cfg: &TrainConfig, mut meta: TrainingMeta) -> Result<ModelCheckpoint, NetError> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(NetError::Data("empty training set".into()));
    }
    if data.train.shape != model.spec().input {
        return Err(NetError::Data("training data does not match the model input".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<ArrayD<f32>> = Vec::new();
    model.visit(&mut |_, p| {
        if p.is_trainable() {
            velocity.push(ArrayD::zeros(p.value.raw_dim()));
        }
    });
    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    let mut last_train_acc = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut hits = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.train.batch(chunk, cfg.augmentation, &mut rng);
            model.zero_grad();
            let logits = model.forward(x.view(), Mode::Train);
            let (loss, dlogits) = softmax_cross_entropy(&logits, &y);
            if !loss.is_finite() {
                return Err(NetError::TrainingDiverged { epoch, step });
            }
            epoch_loss += loss * chunk.len() as f64;
            hits += argmax_rows(&logits).iter().zip(&y).filter(|(p, l)| p == l).count();
            model.backward(&dlogits);
            let lr = cfg.rate(step, steps_per_epoch) as f32;
            let (mu, wd) = (cfg.momentum as f32, cfg.weight_decay as f32);
            let mut i = 0;
            model.visit(&mut |_, p| {
                let Some(grad) = p.grad.as_ref() else { return };
                let decay = if p.value.ndim() >= 2 { wd } else { 0.0 };
                let v = &mut velocity[i];
                ndarray::Zip::from(&mut *v)
                    .and(grad)
                    .and(&p.value)
                    .for_each(|v, &g, &w| *v = mu * *v + g + decay * w);
                p.value.zip_mut_with(v, |w, &v| *w -= lr * v);
                i += 1;
            });
            step += 1;
        }
        let mut finite = true;
        model.visit(&mut |_, p| finite &= p.value.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(NetError::TrainingDiverged { epoch, step });
        }
        let mean_loss = epoch_loss / n as f64;
        log::debug!("epoch {} loss {:.4} acc {:.2}", epoch + 1, mean_loss, 100.0 * hits as f64 / n as f64);
        meta.loss_history.push(mean_loss);
        last_train_acc = Some(100.0 * hits as f64 / n as f64);
    }
    meta.epochs += cfg.epochs;
    if last_train_acc.is_some() {
        meta.train_accuracy = last_train_acc;
    }
    meta.test_accuracy = Some(evaluate_accuracy(model, &data.test));
    Ok(model.to_checkpoint(meta))
}
