// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end run configuration and the pretrain → train → eval pipeline
//! shared by the command-line driver and the acceptance suite.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::analysis::{self, RunSummary, SuiteScores};
use crate::base_model::{pretrain_base, PretrainConfig, PretrainReport, ToyBaseModel, ToyModelConfig};
use crate::concepts::ConceptLibrary;
use crate::error::{Error, Result};
use crate::evolution::Event;
use crate::tasks::{base_specs, compositional_specs, fixed_batches, ood_transform, Curriculum, LabeledBatch, OodKind, TaskSpec};
use crate::training::{Observer, Recorder, StepMetrics, StepRecord, TrainConfig, TrainState, Trainer};

/// Mixture used during the concept-evolution phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    /// Total weight of the base tasks, split evenly; the rest is split
    /// evenly over the compositional tasks.
    pub base_weight: f64,
    /// Fraction of batches relabeled by a symmetry permutation.
    pub augment_fraction: f64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            base_weight: 0.25,
            augment_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub batches_per_task: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            batches_per_task: 4,
            batch_size: 16,
            seed: 1234,
        }
    }
}

/// Everything needed to reproduce a run. `seed` overrides the seeds of the
/// nested sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ToyModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub curriculum: CurriculumConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ToyModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            curriculum: CurriculumConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Copy with `seed` pushed into the nested sections and the library
    /// width tied to the model width.
    pub fn resolved(mut self) -> Self {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.train.library.d_model = self.model.d_model;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolved()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.curriculum.base_weight) {
            return Err(Error::Config("curriculum.base_weight must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.curriculum.augment_fraction) {
            return Err(Error::Config("curriculum.augment_fraction must lie in [0, 1]".into()));
        }
        if self.eval.batches_per_task == 0 || self.eval.batch_size == 0 {
            return Err(Error::Config("eval batches_per_task and batch_size must be >= 1".into()));
        }
        if self.train.library.d_model != self.model.d_model {
            return Err(Error::Config("train.library.d_model must equal model.d_model".into()));
        }
        Ok(())
    }

    /// Replaces one value addressed by a dotted key, e.g. `train.spawn.tau`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut tree = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &mut tree;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, p) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{key}` does not name a config value")))?;
            let slot = table
                .get_mut(*p)
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            if i + 1 == parts.len() {
                *slot = parse_like(slot, value).ok_or_else(|| {
                    Error::Config(format!("cannot parse `{value}` for config key `{key}`"))
                })?;
                break;
            }
            node = slot;
        }
        let updated: RunConfig = tree.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        *self = updated.resolved();
        self.validate()
    }
}

fn parse_like(old: &toml::Value, text: &str) -> Option<toml::Value> {
    use toml::Value;
    Some(match old {
        Value::Integer(_) => Value::Integer(text.parse().ok()?),
        Value::Float(_) => Value::Float(text.parse().ok()?),
        Value::Boolean(_) => Value::Boolean(text.parse().ok()?),
        Value::String(_) => Value::String(text.to_string()),
        _ => return None,
    })
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

pub fn pretrain_curriculum(cfg: &RunConfig) -> Result<Curriculum> {
    let specs = base_specs();
    let w = vec![1.0 / specs.len() as f64; specs.len()];
    Curriculum::new(specs, w, cfg.seed, cfg.pretrain.batch_size)
}

/// Initializes and pretrains a frozen base model.
pub fn pretrain(cfg: &RunConfig) -> Result<(ToyBaseModel, PretrainReport)> {
    let mut model = ToyBaseModel::init(cfg.model.clone())?;
    let report = pretrain_base(&mut model, &pretrain_curriculum(cfg)?, &cfg.pretrain)?;
    Ok((model, report))
}

/// Base plus compositional mixture with invariance augmentation.
pub fn training_curriculum(cfg: &RunConfig) -> Result<Curriculum> {
    let base = base_specs();
    let comp = compositional_specs();
    let bw = cfg.curriculum.base_weight;
    let mut weights = vec![bw / base.len() as f64; base.len()];
    weights.extend(vec![(1.0 - bw) / comp.len() as f64; comp.len()]);
    let mut specs = base;
    specs.extend(comp);
    Ok(Curriculum::new(specs, weights, cfg.seed, cfg.train.batch_size)?
        .with_augmentation(cfg.curriculum.augment_fraction))
}

pub const SUITES: [&str; 7] = [
    "base",
    "compositional",
    "copy",
    "identity-remap",
    "mirror-remap",
    "modular-chain",
    "nested-constraint",
];

/// Task specs of a named suite.
pub fn suite_specs(name: &str) -> Result<Vec<TaskSpec>> {
    let all: Vec<TaskSpec> = base_specs().into_iter().chain(compositional_specs()).collect();
    let specs: Vec<TaskSpec> = match name {
        "base" => base_specs(),
        "compositional" => compositional_specs(),
        other => all.into_iter().filter(|s| s.label() == other).collect(),
    };
    if specs.is_empty() {
        return Err(Error::Config(format!(
            "unknown suite `{name}`; available: {}",
            SUITES.join(", ")
        )));
    }
    Ok(specs)
}

/// Fixed evaluation batches of a suite; independent of the training seed.
pub fn eval_batches(cfg: &RunConfig, suite: &str) -> Result<Vec<LabeledBatch>> {
    let specs = suite_specs(suite)?;
    fixed_batches(&specs, cfg.eval.batches_per_task, cfg.eval.batch_size, cfg.eval.seed)
}

/// Shifted copies of `batches`.
pub fn shifted(batches: &[LabeledBatch], kind: OodKind, seed: u64) -> Result<Vec<LabeledBatch>> {
    batches
        .iter()
        .enumerate()
        .map(|(i, b)| ood_transform(b, kind, seed.wrapping_add(i as u64)))
        .collect()
}

/// Collects metrics and events and forwards each step to an inner observer.
pub struct Tee<'a> {
    pub recorder: Recorder,
    pub inner: Option<&'a mut dyn Observer>,
}

impl Observer for Tee<'_> {
    fn on_step(&mut self, record: &StepRecord, state: &TrainState, config: &TrainConfig) -> Result<()> {
        self.recorder.on_step(record, state, config)?;
        if let Some(o) = self.inner.as_mut() {
            o.on_step(record, state, config)?;
        }
        Ok(())
    }
}

/// Result of a training run plus its logs.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
    pub events: Vec<Event>,
}

/// Fresh concept-evolution run for `cfg.train.optim.total_steps` steps.
pub fn train(base: &ToyBaseModel, cfg: &RunConfig, observer: Option<&mut dyn Observer>) -> Result<TrainedRun> {
    let lib = ConceptLibrary::new(cfg.train.library.clone(), cfg.seed)?;
    let trainer = Trainer::new(base, training_curriculum(cfg)?, cfg.train.clone(), lib)?;
    drive(trainer, cfg.train.optim.total_steps, observer)
}

/// Continues `state` up to step `until`.
pub fn resume(
    base: &ToyBaseModel,
    cfg: &RunConfig,
    state: TrainState,
    until: u64,
    observer: Option<&mut dyn Observer>,
) -> Result<TrainedRun> {
    let trainer = Trainer::resume(base, training_curriculum(cfg)?, cfg.train.clone(), state)?;
    drive(trainer, until, observer)
}

fn drive(mut trainer: Trainer<'_>, until: u64, observer: Option<&mut dyn Observer>) -> Result<TrainedRun> {
    let mut tee = Tee {
        recorder: Recorder::default(),
        inner: observer,
    };
    trainer.run(until, &mut tee)?;
    Ok(TrainedRun {
        state: trainer.state,
        metrics: tee.recorder.metrics,
        events: tee.recorder.events,
    })
}

/// Compositional-suite scores of a trained library, with per-transform
/// augmented accuracy on shifted copies of the same batches.
pub fn summarize(base: &ToyBaseModel, cfg: &RunConfig, label: &str, run: &TrainedRun) -> Result<RunSummary> {
    let batches = eval_batches(cfg, "compositional")?;
    let scores = analysis::evaluate(base, &run.state.library, &batches)?;
    let pooled: SuiteScores = analysis::pooled_scores(&scores);
    let mut ood_accuracy = BTreeMap::new();
    for kind in OodKind::ALL {
        let s = analysis::evaluate(base, &run.state.library, &shifted(&batches, kind, cfg.eval.seed)?)?;
        ood_accuracy.insert(kind.name().to_string(), analysis::mean_accuracy(&s, true));
    }
    let tail: Vec<f64> = run.metrics.iter().rev().take(100).map(|m| m.kl).collect();
    Ok(RunSummary {
        label: label.to_string(),
        seed: cfg.seed,
        base_loss: pooled.base.loss(),
        aug_loss: pooled.augmented.loss(),
        base_accuracy: analysis::mean_accuracy(&scores, false),
        aug_accuracy: analysis::mean_accuracy(&scores, true),
        final_n: run.state.library.len(),
        spawns_accepted: run
            .events
            .iter()
            .filter(|e| matches!(e, Event::Spawn { outcome, .. } if outcome == "accepted"))
            .count(),
        merges: run.events.iter().filter(|e| matches!(e, Event::Merge { .. })).count(),
        kl_tail: if tail.is_empty() { 0.0 } else { tail.iter().sum::<f64>() / tail.len() as f64 },
        kl_peak: run.metrics.iter().map(|m| m.kl).fold(0.0, f64::max),
        ood_accuracy,
    })
}

/// Keys a sweep may vary, with their dotted config paths.
pub const SWEEP_KEYS: [(&str, &str); 5] = [
    ("r", "train.library.rank"),
    ("k", "train.library.k"),
    ("tau", "train.spawn.tau"),
    ("lambda", "train.spawn.lambda"),
    ("lambda_orth", "train.lambda_orth"),
];

pub fn sweep_path(key: &str) -> Result<&'static str> {
    SWEEP_KEYS
        .iter()
        .find(|(k, p)| *k == key || *p == key)
        .map(|(_, p)| *p)
        .ok_or_else(|| {
            let names: Vec<&str> = SWEEP_KEYS.iter().map(|(k, _)| *k).collect();
            Error::Config(format!("unsupported sweep key `{key}`; supported: {}", names.join(", ")))
        })
}

/// Trains and summarizes every (value, seed) cell of a one-key sweep.
/// `bases` supplies the frozen base for a seed.
pub fn sweep(
    cfg: &RunConfig,
    key: &str,
    values: &[String],
    seeds: &[u64],
    bases: &mut dyn FnMut(u64) -> Result<ToyBaseModel>,
) -> Result<Vec<(String, Vec<RunSummary>)>> {
    let path = sweep_path(key)?;
    let mut groups = Vec::new();
    for v in values {
        let mut runs = Vec::new();
        for &seed in seeds {
            let mut c = cfg.clone().with_seed(seed);
            c.set(path, v)?;
            let base = bases(seed)?;
            let run = train(&base, &c, None)?;
            runs.push(summarize(&base, &c, &format!("{key}={v}"), &run)?);
        }
        groups.push((format!("{key}={v}"), runs));
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        let err = RunConfig::from_toml("[train.spawn]\ntua = 3.0\n").unwrap_err();
        assert!(err.to_string().contains("tua"), "{err}");
        let partial = RunConfig::from_toml("seed = 7\n[train.spawn]\ntau = 2.0\n").unwrap();
        assert_eq!(partial.train.spawn.tau, 2.0);
        assert_eq!(partial.train.seed, 7);
        assert_eq!(partial.model.seed, 7);
    }

    #[test]
    fn dotted_set() {
        let mut cfg = RunConfig::default();
        cfg.set("train.spawn.tau", "2").unwrap();
        assert_eq!(cfg.train.spawn.tau, 2.0);
        cfg.set("train.library.rank", "8").unwrap();
        assert_eq!(cfg.train.library.rank, 8);
        assert!(cfg.set("train.spawn.nope", "1").is_err());
        assert!(cfg.set("train.library.rank", "x").is_err());
        assert!(sweep_path("gamma").is_err());
    }

    #[test]
    fn suites_resolve() {
        assert_eq!(suite_specs("compositional").unwrap().len(), 3);
        assert_eq!(suite_specs("mirror-remap").unwrap().len(), 1);
        let err = suite_specs("arc").unwrap_err().to_string();
        assert!(err.contains("nested-constraint"));
    }
}
