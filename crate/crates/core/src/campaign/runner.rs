use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::{ExperimentConfig, LoadedData, StopRule};
use super::report::write_report;
use super::state::{CampaignStatus, IterationRecord, PruneCampaignState, RunLock, STATE_FILE};
use super::CampaignError;
use crate::accounting::{estimate_carbon, measure_latency, CarbonEstimate, CostReport};
use crate::consensus::{prune_iteration, CheckpointSource};
use crate::metrics::MetricDescriptor;
use crate::net::{finetune, train, ArchitectureSpec, Dataset, Model, ModelCheckpoint};
use crate::robustness::{evaluate, EvalOptions, RobustnessReport};
use crate::surgery::{eligible_layers, remove_block};

pub const CONFIG_COPY: &str = "config.toml";
pub const BASELINE_DIR: &str = "baseline";

/// Summary written next to a freshly trained checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub epochs: usize,
    pub seed: u64,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: f64,
    pub loss_history: Vec<f64>,
    pub cost: CostReport,
}

fn check_data_fits(spec: &ArchitectureSpec, loaded: &LoadedData) -> Result<(), CampaignError> {
    let sets = [&loaded.data.train, &loaded.data.test]
        .into_iter()
        .chain(loaded.ood.values());
    for d in sets {
        if d.shape != spec.input {
            return Err(CampaignError::Input(format!(
                "data shape {:?} does not match model input {:?}",
                d.shape, spec.input
            )));
        }
        if d.classes > spec.classes() {
            return Err(CampaignError::Input(format!(
                "data has {} classes, model only {}",
                d.classes,
                spec.classes()
            )));
        }
    }
    Ok(())
}

fn write_config_copy(cfg: &ExperimentConfig, out: &Path) -> Result<(), CampaignError> {
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_COPY), cfg.to_toml())?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint, CampaignError> {
    if !path.join("architecture.json").exists() {
        return Err(CampaignError::Input(format!("no checkpoint at {}", path.display())));
    }
    Ok(ModelCheckpoint::load(path)?)
}

/// Trains the configured model from scratch and writes
/// `<out>/baseline/{architecture.json, weights.bin, meta.json, metrics.json}`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf, CampaignError> {
    let spec = cfg.model.spec()?;
    let loaded = cfg.data.load()?;
    check_data_fits(&spec, &loaded)?;
    write_config_copy(cfg, out)?;
    let model = Model::<f32>::build(&spec, cfg.seed)?;
    let ckpt = train(model, &loaded.data, &cfg.train.with_seed(cfg.train_seed()))?;
    let dir = out.join(BASELINE_DIR);
    ckpt.save(&dir)?;
    let metrics = TrainMetrics {
        epochs: ckpt.meta.epochs,
        seed: cfg.seed,
        train_accuracy: ckpt.meta.train_accuracy,
        test_accuracy: ckpt.meta.test_accuracy.unwrap_or_default(),
        loss_history: ckpt.meta.loss_history.clone(),
        cost: CostReport::for_spec(&spec, None)?,
    };
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    log::info!("trained baseline: test accuracy {:.2}%", metrics.test_accuracy);
    Ok(dir)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PruneOptions {
    /// Continue an existing campaign in the run directory.
    pub resume: bool,
    /// Return after this many new removals, leaving the campaign resumable.
    pub halt_after: Option<usize>,
}

/// Everything an iteration needs that does not change between iterations.
struct Context<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
    loaded: LoadedData,
    eval_set: Dataset,
    probes: Array2<f32>,
    metrics: Vec<MetricDescriptor>,
}

impl Context<'_> {
    fn assess(
        &self,
        ckpt: &ModelCheckpoint,
        base: Option<(&CostReport, &RobustnessReport)>,
    ) -> Result<(CostReport, CarbonEstimate, RobustnessReport), CampaignError> {
        let mut cost = CostReport::for_spec(&ckpt.architecture, base.map(|b| b.0))?;
        let mut model = Model::<f32>::from_checkpoint(ckpt)?;
        let ev = &self.cfg.evaluation;
        if ev.latency_repeats > 0 {
            let n = ev.latency_batch.min(self.eval_set.len());
            let batch = self.eval_set.head(n);
            cost.latency_ms = Some(measure_latency(&mut model, batch.view(), ev.latency_repeats)?.median_ms);
        }
        let carbon = self.carbon(&cost)?;
        let opts = EvalOptions {
            batch_size: ev.batch_size,
            seed: self.cfg.seed,
        };
        let report = evaluate(&mut model, &self.eval_set, &ev.attacks, &self.loaded.ood, &opts)?;
        let baseline = base.map_or(&report, |b| b.1).clone();
        Ok((cost, carbon, report.with_baseline(&baseline)?))
    }

    /// Estimated footprint of training this architecture for `train.epochs`
    /// epochs at the configured throughput.
    fn carbon(&self, cost: &CostReport) -> Result<CarbonEstimate, CampaignError> {
        let c = &self.cfg.carbon;
        let samples = self.loaded.data.train.len() as f64;
        let flops = 3.0 * cost.flops as f64 * samples * self.cfg.train.epochs as f64;
        let hours = flops / (c.throughput_gflops * 1e9) / 3600.0;
        Ok(estimate_carbon(
            c.device_power_watts,
            hours,
            c.carbon_intensity_kg_per_kwh,
            c.usd_per_hour,
        )?)
    }

    fn stop(&self, state: &PruneCampaignState, no_eligible: bool) -> Option<(CampaignStatus, String)> {
        let last = state.last();
        match self.cfg.pruning.stop {
            StopRule::FlopReductionTarget { target_pct } if last.cost.flop_reduction_pct >= target_pct => {
                return Some((
                    CampaignStatus::Completed,
                    format!("reached {:.2}% FLOP reduction", last.cost.flop_reduction_pct),
                ))
            }
            StopRule::MaxIterations { iterations } if last.iteration >= iterations => {
                return Some((CampaignStatus::Completed, format!("ran {iterations} iterations")))
            }
            _ => {}
        }
        if no_eligible {
            let status = match self.cfg.pruning.stop {
                StopRule::UntilNoEligible => CampaignStatus::Completed,
                _ => CampaignStatus::Exhausted,
            };
            return Some((status, "no eligible layers remain".into()));
        }
        None
    }

    fn iteration(&self, state: &PruneCampaignState) -> Result<Option<IterationRecord>, CampaignError> {
        let last = state.last();
        let current = ModelCheckpoint::load(&self.out.join(&last.checkpoint))?;
        let eligible = eligible_layers(&current.architecture).eligible;
        if eligible.is_empty() {
            return Ok(None);
        }
        let iteration = last.iteration + 1;
        let mut source = CheckpointSource::new(&current, &self.probes);
        let outcome = prune_iteration(&mut source, &eligible, &self.metrics)?;
        let victim = outcome.victim;
        log::info!("iteration {iteration}: removing {victim}");

        let dir = iteration_dir(iteration);
        fs::create_dir_all(self.out.join(&dir))?;
        let audit_path = dir.join("audit.json");
        fs::write(
            self.out.join(&audit_path),
            serde_json::to_string_pretty(&outcome.audit(iteration))?,
        )?;

        let pruned = remove_block(&current, victim)?;
        let tuned = finetune(
            &pruned,
            &self.loaded.data,
            &self.cfg.finetune.with_seed(self.cfg.finetune_seed(iteration)),
        )?;
        let before = tuned.meta.loss_history.len() - self.cfg.finetune.epochs;
        let finetune_loss = tuned.meta.loss_history[before..].to_vec();
        let ckpt_path = dir.join("checkpoint");
        tuned.save(&self.out.join(&ckpt_path))?;

        let base = &state.records[0];
        let (cost, carbon, robustness) = self.assess(&tuned, Some((&base.cost, &base.robustness)))?;
        if cost.flops >= last.cost.flops {
            return Err(CampaignError::Report(format!(
                "FLOPs did not decrease after removing {victim}"
            )));
        }
        Ok(Some(IterationRecord {
            iteration,
            victim: Some(victim),
            checkpoint: ckpt_path,
            audit: Some(audit_path),
            cost,
            carbon,
            robustness,
            finetune_loss,
        }))
    }
}

fn iteration_dir(i: usize) -> PathBuf {
    PathBuf::from("iterations").join(format!("{i:03}"))
}

/// First `n` samples of a seeded permutation of the training set.
pub fn probe_batch(train: &Dataset, n: usize, seed: u64) -> Array2<f32> {
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n.min(train.len()));
    train.subset(&idx).x
}

/// Runs (or resumes) the pruning campaign in `out`, starting from the
/// checkpoint at `checkpoint`. State is persisted after every iteration and
/// the report is rewritten when the campaign finishes.
pub fn cmd_prune(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    out: &Path,
    opts: &PruneOptions,
) -> Result<PruneCampaignState, CampaignError> {
    let _lock = RunLock::acquire(out)?;
    let existing = out.join(STATE_FILE).exists();
    if existing && !opts.resume {
        return Err(CampaignError::Usage(format!(
            "{} already holds a campaign; pass --resume to continue it",
            out.display()
        )));
    }
    let base_ckpt = load_checkpoint(checkpoint)?;
    let loaded = cfg.data.load()?;
    check_data_fits(&base_ckpt.architecture, &loaded)?;
    let eval_set = match cfg.evaluation.samples {
        Some(n) => loaded.data.test.head(n.min(loaded.data.test.len())),
        None => loaded.data.test.clone(),
    };
    let probes = probe_batch(&loaded.data.train, cfg.pruning.probes, cfg.probe_seed());
    let ctx = Context {
        cfg,
        out,
        loaded,
        eval_set,
        probes,
        metrics: cfg.pruning.descriptors(),
    };

    let mut state = if existing {
        let stored = fs::read_to_string(out.join(CONFIG_COPY)).unwrap_or_default();
        if stored != cfg.to_toml() {
            return Err(CampaignError::Usage("config differs from the one the campaign started with".into()));
        }
        let state = PruneCampaignState::load(out)?;
        if state.base_checkpoint != checkpoint {
            return Err(CampaignError::Usage(format!(
                "campaign started from {}, not {}",
                state.base_checkpoint.display(),
                checkpoint.display()
            )));
        }
        state
    } else {
        write_config_copy(cfg, out)?;
        let path = iteration_dir(0).join("checkpoint");
        base_ckpt.save(&out.join(&path))?;
        let (cost, carbon, robustness) = ctx.assess(&base_ckpt, None)?;
        let state = PruneCampaignState {
            status: CampaignStatus::Running,
            stop_reason: None,
            base_checkpoint: checkpoint.to_path_buf(),
            records: vec![IterationRecord {
                iteration: 0,
                victim: None,
                checkpoint: path,
                audit: None,
                cost,
                carbon,
                robustness,
                finetune_loss: Vec::new(),
            }],
        };
        state.save(out)?;
        state
    };

    let mut done_now = 0;
    while state.status == CampaignStatus::Running {
        if opts.halt_after.is_some_and(|h| done_now >= h) {
            return Ok(state);
        }
        let no_eligible = eligible_layers(
            &ModelCheckpoint::load(&out.join(&state.last().checkpoint))?.architecture,
        )
        .eligible
        .is_empty();
        if let Some((status, reason)) = ctx.stop(&state, no_eligible) {
            state.status = status;
            state.stop_reason = Some(reason);
            state.save(out)?;
            break;
        }
        match ctx.iteration(&state)? {
            Some(record) => {
                state.records.push(record);
                state.save(out)?;
                done_now += 1;
            }
            None => unreachable!("eligibility checked above"),
        }
    }
    write_report(out, &state)?;
    Ok(state)
}

/// Evaluates one checkpoint under the configured attack suite, optionally
/// against a baseline given either as a report JSON file or as a checkpoint
/// directory. Writes `<out>/eval.json` and `<out>/eval.csv`.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    baseline: Option<&Path>,
    out: &Path,
) -> Result<RobustnessReport, CampaignError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let loaded = cfg.data.load()?;
    check_data_fits(&ckpt.architecture, &loaded)?;
    let eval_set = match cfg.evaluation.samples {
        Some(n) => loaded.data.test.head(n.min(loaded.data.test.len())),
        None => loaded.data.test.clone(),
    };
    let opts = EvalOptions {
        batch_size: cfg.evaluation.batch_size,
        seed: cfg.seed,
    };
    let run = |ckpt: &ModelCheckpoint| -> Result<RobustnessReport, CampaignError> {
        let mut model = Model::<f32>::from_checkpoint(ckpt)?;
        Ok(evaluate(&mut model, &eval_set, &cfg.evaluation.attacks, &loaded.ood, &opts)?)
    };
    let mut report = run(&ckpt)?;
    if let Some(b) = baseline {
        let base = if b.is_dir() {
            run(&load_checkpoint(b)?)?
        } else {
            let text = fs::read_to_string(b)
                .map_err(|e| CampaignError::Input(format!("cannot read baseline {}: {e}", b.display())))?;
            let mut r: RobustnessReport = serde_json::from_str(&text)
                .map_err(|e| CampaignError::Input(format!("baseline {}: {e}", b.display())))?;
            r.delta_pp = None;
            r
        };
        report = report.with_baseline(&base)?;
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    let mut w = csv::Writer::from_path(out.join("eval.csv"))?;
    w.write_record(["attack", "accuracy", "delta_pp"])?;
    let deltas: BTreeMap<String, f64> = report.delta_pp.clone().unwrap_or_default();
    let mut rows = report.entries();
    if let Some(m) = report.mean_corruption_acc {
        rows.push(("mean_corruption".into(), m));
    }
    for (k, v) in rows {
        let d = deltas.get(&k).map(|&d| crate::robustness::format_delta(d)).unwrap_or_default();
        w.write_record([k, format!("{v:.2}"), d])?;
    }
    w.flush()?;
    Ok(report)
}
