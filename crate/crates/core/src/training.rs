// SPDX-License-Identifier: MIT OR Apache-2.0

//! Composite objective, KL-constrained dual updates and the outer training
//! loop that interleaves gradient steps with library evolution.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::base_model::{segments, AnswerScore, ToyBaseModel};
use crate::concepts::{
    gate_entropy_var, orthogonality_penalty_var, overlap_penalty_var, pool_segments, ConceptLibrary, GateSelection,
    LibraryConfig, LibraryVars,
};
use crate::error::{Error, Result};
use crate::evolution::{
    self, batch_failure, merge_pass, prune, spawn_event, try_spawn, CoActivation, Event, GeneratorNet, MergeConfig,
    SpawnConfig, SpawnInput, SpawnOutcome,
};
use crate::numerics::{self, Matrix};
use crate::optim::{AdamW, OptimConfig, StepOutcome};
use crate::seed::{self, Stream};
use crate::tasks::{gen_batch, Curriculum, Example, LabeledBatch, TaskKind, Vocab};

/// Single-flag switches that each disable one mechanism.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    pub remove_mdl: bool,
    pub remove_kl: bool,
    pub remove_merge: bool,
    pub remove_orth: bool,
    pub remove_gate_entropy: bool,
    pub no_augmentation: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 6] = [
        "remove-mdl",
        "remove-kl",
        "remove-merge",
        "remove-orth",
        "remove-gate-entropy",
        "no-augmentation",
    ];

    /// Enables the ablation called `name`.
    pub fn enable(&mut self, name: &str) -> Result<()> {
        let flag = match name {
            "remove-mdl" => &mut self.remove_mdl,
            "remove-kl" => &mut self.remove_kl,
            "remove-merge" => &mut self.remove_merge,
            "remove-orth" => &mut self.remove_orth,
            "remove-gate-entropy" => &mut self.remove_gate_entropy,
            "no-augmentation" => &mut self.no_augmentation,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation `{other}` (expected one of {})",
                    Self::NAMES.join(", ")
                )))
            }
        };
        *flag = true;
        Ok(())
    }

    pub fn enabled(&self) -> Vec<&'static str> {
        let flags = [
            self.remove_mdl,
            self.remove_kl,
            self.remove_merge,
            self.remove_orth,
            self.remove_gate_entropy,
            self.no_augmentation,
        ];
        Self::NAMES
            .iter()
            .zip(flags)
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub lambda_orth: f64,
    pub lambda_ov: f64,
    pub lambda_gate: f64,
    pub eps_kl: f64,
    pub eta_dual: f64,
    /// Steps between dual updates.
    pub dual_interval: u64,
    pub seed: u64,
    pub batch_size: usize,
    /// Step size of the usage average.
    pub usage_rho: f64,
    /// Sequences per task spec in the held-out merge evaluation batch.
    pub merge_eval_size: usize,
    /// Steps between checkpoints (0 disables periodic checkpoints).
    pub checkpoint_every: u64,
    pub library: LibraryConfig,
    pub spawn: SpawnConfig,
    pub merge: MergeConfig,
    pub ablations: Ablations,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            lambda_orth: 0.05,
            lambda_ov: 0.02,
            lambda_gate: 0.01,
            eps_kl: 0.05,
            eta_dual: 0.1,
            dual_interval: 1,
            seed: 0,
            batch_size: 8,
            usage_rho: 0.01,
            merge_eval_size: 8,
            checkpoint_every: 500,
            library: LibraryConfig::default(),
            spawn: SpawnConfig::default(),
            merge: MergeConfig::default(),
            ablations: Ablations::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.library.validate()?;
        self.spawn.validate()?;
        self.merge.validate()?;
        let lambdas = [self.lambda_orth, self.lambda_ov, self.lambda_gate, self.eps_kl];
        if lambdas.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::Config("regularizer weights and eps_kl must be >= 0".into()));
        }
        if !(self.eta_dual > 0.0) || self.dual_interval == 0 {
            return Err(Error::Config("eta_dual must be > 0 and dual_interval >= 1".into()));
        }
        if self.optim.warmup_steps >= self.optim.total_steps && self.optim.total_steps > 0 {
            return Err(Error::Config("warmup_steps must be below total_steps".into()));
        }
        if self.batch_size == 0 || self.merge_eval_size == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.usage_rho) {
            return Err(Error::Config("usage_rho must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Regularizer weights after ablations.
    pub fn coefficients(&self, lambda_kl: f64) -> Coefficients {
        Coefficients {
            orth: if self.ablations.remove_orth { 0.0 } else { self.lambda_orth },
            overlap: self.lambda_ov,
            gate: if self.ablations.remove_gate_entropy { 0.0 } else { self.lambda_gate },
            kl: if self.ablations.remove_kl { 0.0 } else { lambda_kl },
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub orth: f64,
    pub overlap: f64,
    pub gate: f64,
    pub kl: f64,
}

/// Unweighted loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lm: f64,
    pub orth: f64,
    pub overlap: f64,
    pub gate_entropy: f64,
    pub kl: f64,
}

impl LossBreakdown {
    pub fn total(&self, c: &Coefficients) -> f64 {
        self.lm + c.orth * self.orth + c.overlap * self.overlap + c.gate * self.gate_entropy + c.kl * self.kl
    }
}

// ---------------------------------------------------------------------------
// Cached frozen computations
// ---------------------------------------------------------------------------

/// Frozen-base quantities for one packed batch: states leaving the
/// injection layer and unmodified logits.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenPass {
    pub segs: Vec<Range<usize>>,
    pub hidden: Matrix,
    pub base_logits: Matrix,
    pub targets: Vec<Option<usize>>,
}

impl FrozenPass {
    pub fn new(base: &ToyBaseModel, batch: &LabeledBatch) -> Result<Self> {
        let inputs = batch.inputs();
        let targets = batch.targets().into_iter().flatten().collect();
        Self::from_sequences(base, &inputs, targets)
    }

    pub fn from_sequences(base: &ToyBaseModel, seqs: &[Vec<usize>], targets: Vec<Option<usize>>) -> Result<Self> {
        let segs = segments(seqs);
        let hidden = base.lower(seqs)?;
        let base_logits = base.upper(&hidden, &segs)?;
        if targets.len() != hidden.rows() {
            return Err(Error::Shape(format!(
                "{} targets for {} positions",
                targets.len(),
                hidden.rows()
            )));
        }
        Ok(Self {
            segs,
            hidden,
            base_logits,
            targets,
        })
    }

    /// Mean pooled state per sequence.
    pub fn pooled(&self) -> Matrix {
        pool_segments(&self.hidden, &self.segs)
    }

    pub fn base_score(&self) -> AnswerScore {
        AnswerScore::from_logits(&self.base_logits, &self.targets)
    }
}

/// Augmented logits and routing for a cached batch, without gradients.
pub fn augmented_logits(base: &ToyBaseModel, lib: &ConceptLibrary, pass: &FrozenPass) -> Result<(Matrix, Vec<GateSelection>)> {
    if lib.is_empty() {
        let empty = GateSelection {
            ids: Vec::new(),
            weights: Vec::new(),
        };
        return Ok((pass.base_logits.clone(), vec![empty; pass.segs.len()]));
    }
    let (h, sel) = lib.inject_batch(&pass.hidden, &pass.segs)?;
    Ok((base.upper(&h, &pass.segs)?, sel))
}

/// Answer metrics of the augmented model on a cached batch.
pub fn augmented_score(base: &ToyBaseModel, lib: &ConceptLibrary, pass: &FrozenPass) -> Result<AnswerScore> {
    let (logits, _) = augmented_logits(base, lib, pass)?;
    Ok(AnswerScore::from_logits(&logits, &pass.targets))
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

/// `mean_t Σ_v p_aug(v)·(log p_aug(v) − log p_base(v))` over rows.
pub fn kl_divergence(logits_aug: &Matrix, logits_base: &Matrix) -> Result<f64> {
    if logits_aug.shape() != logits_base.shape() {
        return Err(Error::Shape(format!(
            "kl between {:?} and {:?}",
            logits_aug.shape(),
            logits_base.shape()
        )));
    }
    if logits_aug.rows() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for t in 0..logits_aug.rows() {
        let la = numerics::log_softmax(logits_aug.row(t));
        let lb = numerics::log_softmax(logits_base.row(t));
        let kl: f64 = la.iter().zip(&lb).map(|(a, b)| a.exp() * (a - b)).sum();
        total += kl.max(0.0);
    }
    Ok(total / logits_aug.rows() as f64)
}

/// `max(0, λ + η·(KL − ε))`.
pub fn dual_update(lambda_kl: f64, measured_kl: f64, eps_kl: f64, eta: f64) -> f64 {
    (lambda_kl + eta * (measured_kl - eps_kl)).max(0.0)
}

fn kl_var(tape: &mut Tape, logits: Var, base_log_probs: &Matrix) -> Result<Var> {
    let la = tape.log_softmax_rows(logits);
    let p = tape.exp(la);
    let lb = tape.constant(base_log_probs.clone());
    let diff = tape.sub(la, lb)?;
    let prod = tape.mul(p, diff)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, 1.0 / base_log_probs.rows().max(1) as f64))
}

fn log_softmax_matrix(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for t in 0..logits.rows() {
        out.row_mut(t).copy_from_slice(&numerics::log_softmax(logits.row(t)));
    }
    out
}

/// Loss graph recorded on a tape.
pub struct LossGraph {
    pub total: Var,
    pub logits: Var,
    pub breakdown: LossBreakdown,
    pub selections: Vec<GateSelection>,
    /// Library parameter names paired with their leaves.
    pub params: Vec<(String, Var)>,
}

/// Records the full objective for `lib` on top of a cached frozen pass.
/// Base parameters enter as constants; library leaves are trainable when
/// `trainable` is set.
pub fn record_loss(
    tape: &mut Tape,
    base: &ToyBaseModel,
    lib: &ConceptLibrary,
    pass: &FrozenPass,
    coeffs: &Coefficients,
    trainable: bool,
) -> Result<LossGraph> {
    let cfg = base.config();
    let (vars, params) = lib.register(tape, trainable);
    let base_vars = base.register(tape, cfg.inject_layer + 1..cfg.n_layers, false, true);
    loss_graph(tape, base, lib, pass, coeffs, &vars, &base_vars, params)
}

/// Same objective as [`record_loss`] over leaves the caller already placed:
/// `named` must hold every library parameter and the upper base layers plus
/// head, under their parameter names.
pub fn record_loss_from(
    tape: &mut Tape,
    base: &ToyBaseModel,
    lib: &ConceptLibrary,
    pass: &FrozenPass,
    coeffs: &Coefficients,
    named: &BTreeMap<String, Var>,
) -> Result<LossGraph> {
    let vars = lib.vars_from(named)?;
    let params = lib
        .params()
        .iter()
        .filter_map(|(n, _)| named.get(n).map(|&v| (n.clone(), v)))
        .collect();
    loss_graph(tape, base, lib, pass, coeffs, &vars, named, params)
}

#[allow(clippy::too_many_arguments)]
fn loss_graph(
    tape: &mut Tape,
    base: &ToyBaseModel,
    lib: &ConceptLibrary,
    pass: &FrozenPass,
    coeffs: &Coefficients,
    vars: &LibraryVars,
    base_vars: &BTreeMap<String, Var>,
    params: Vec<(String, Var)>,
) -> Result<LossGraph> {
    let cfg = base.config();
    let routing = lib.route(tape, vars, &pass.pooled())?;
    let h = tape.constant(pass.hidden.clone());
    let mut x = lib.inject_var(tape, vars, h, &pass.segs, &routing)?;
    for l in cfg.inject_layer + 1..cfg.n_layers {
        x = base.block(tape, base_vars, l, x, &pass.segs)?;
    }
    let logits = base.head(tape, base_vars, x)?;
    let lm = tape.cross_entropy(logits, pass.targets.clone())?;
    let orth = orthogonality_penalty_var(tape, &vars.bases)?;
    let overlap = overlap_penalty_var(tape, &vars.bases)?;
    let gate = gate_entropy_var(tape, &routing)?;
    let kl = if lib.is_empty() {
        tape.constant(Matrix::scalar(0.0))
    } else {
        kl_var(tape, logits, &log_softmax_matrix(&pass.base_logits))?
    };
    let breakdown = LossBreakdown {
        lm: tape.scalar(lm),
        orth: tape.scalar(orth),
        overlap: tape.scalar(overlap),
        gate_entropy: tape.scalar(gate),
        kl: tape.scalar(kl),
    };
    let total = tape.scalar_combine(&[
        (lm, 1.0),
        (orth, coeffs.orth),
        (overlap, coeffs.overlap),
        (gate, coeffs.gate),
        (kl, coeffs.kl),
    ])?;
    Ok(LossGraph {
        total,
        logits,
        breakdown,
        selections: routing.selections,
        params,
    })
}

/// Value of the composite objective and its breakdown.
pub fn total_loss(
    base: &ToyBaseModel,
    lib: &ConceptLibrary,
    batch: &LabeledBatch,
    coeffs: &Coefficients,
) -> Result<(f64, LossBreakdown)> {
    let pass = FrozenPass::new(base, batch)?;
    let mut tape = Tape::no_grad();
    let g = record_loss(&mut tape, base, lib, &pass, coeffs, false)?;
    Ok((tape.scalar(g.total), g.breakdown))
}

/// Mean log-likelihood of `completion` after `prompt` under the augmented
/// model.
pub fn completion_log_likelihood(
    base: &ToyBaseModel,
    lib: &ConceptLibrary,
    vocab: &Vocab,
    kind: TaskKind,
    example: &Example,
    completion: &[usize],
) -> Result<f64> {
    if completion.is_empty() {
        return Err(Error::Input("completion must be non-empty".into()));
    }
    let ex = example.with_completion(completion);
    let pass = FrozenPass::from_sequences(base, &[ex.input(vocab, kind)], ex.targets())?;
    let (logits, _) = augmented_logits(base, lib, &pass)?;
    let mut total = 0.0;
    for (t, target) in pass.targets.iter().enumerate() {
        if let Some(y) = target {
            total += numerics::log_softmax(logits.row(t))[*y];
        }
    }
    Ok(total / completion.len() as f64)
}

/// `s(x, y⁺) − s(x, y⁻)` with `s` the mean completion log-likelihood.
pub fn disc_score(
    base: &ToyBaseModel,
    lib: &ConceptLibrary,
    batch: &LabeledBatch,
    index: usize,
    y_plus: &[usize],
    y_minus: &[usize],
) -> Result<f64> {
    let vocab = batch.vocab();
    let ex = batch
        .examples
        .get(index)
        .ok_or_else(|| Error::Input(format!("example {index} out of range")))?;
    if y_plus == y_minus {
        return Ok(0.0);
    }
    let sp = completion_log_likelihood(base, lib, &vocab, batch.kind(), ex, y_plus)?;
    let sm = completion_log_likelihood(base, lib, &vocab, batch.kind(), ex, y_minus)?;
    Ok(sp - sm)
}

/// Mean discriminative score over the examples of `batch` carrying a
/// negative completion.
pub fn batch_disc_score(base: &ToyBaseModel, lib: &ConceptLibrary, batch: &LabeledBatch) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, ex) in batch.examples.iter().enumerate() {
        if let Some(neg) = &ex.negative {
            total += disc_score(base, lib, batch, i, &ex.answer, neg)?;
            n += 1;
        }
    }
    Ok((n > 0).then(|| total / n as f64))
}

// ---------------------------------------------------------------------------
// State and loop
// ---------------------------------------------------------------------------

/// Everything that evolves during training. Random streams are derived from
/// `(config.seed, stream, step)`, so the step counter is their whole state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub library: ConceptLibrary,
    pub generator: GeneratorNet,
    pub optimizer: AdamW,
    pub lambda_kl: f64,
    pub coact: CoActivation,
    /// Number of events emitted so far.
    pub events_emitted: u64,
}

impl TrainState {
    pub fn new(config: &TrainConfig, library: ConceptLibrary) -> Result<Self> {
        config.validate()?;
        if library.config.d_model != config.library.d_model || library.config.rank != config.library.rank {
            return Err(Error::Config("library shape differs from the training config".into()));
        }
        let generator = GeneratorNet::init(
            config.library.d_model,
            config.library.rank,
            config.spawn.generator_hidden,
            config.seed,
        );
        Ok(Self {
            step: 0,
            library,
            generator,
            optimizer: AdamW::new(config.optim.clone()),
            lambda_kl: 0.0,
            coact: CoActivation::default(),
            events_emitted: 0,
        })
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub task: String,
    pub loss_total: f64,
    pub loss_lm: f64,
    pub orth: f64,
    pub overlap: f64,
    pub gate_entropy: f64,
    pub kl: f64,
    pub coefficients: Coefficients,
    /// λ_KL after this step's dual update.
    pub lambda_kl: f64,
    pub failure: f64,
    pub n_concepts: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub skipped: bool,
}

impl StepMetrics {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            lm: self.loss_lm,
            orth: self.orth,
            overlap: self.overlap,
            gate_entropy: self.gate_entropy,
            kl: self.kl,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub metrics: StepMetrics,
    pub events: Vec<Event>,
}

/// Receives each completed step; used for logging and checkpointing.
pub trait Observer {
    fn on_step(&mut self, record: &StepRecord, state: &TrainState, config: &TrainConfig) -> Result<()>;
}

/// Collects records in memory.
#[derive(Debug, Default)]
pub struct Recorder {
    pub metrics: Vec<StepMetrics>,
    pub events: Vec<Event>,
}

impl Observer for Recorder {
    fn on_step(&mut self, record: &StepRecord, _: &TrainState, _: &TrainConfig) -> Result<()> {
        self.metrics.push(record.metrics.clone());
        self.events.extend(record.events.iter().cloned());
        Ok(())
    }
}

pub struct Trainer<'a> {
    pub base: &'a ToyBaseModel,
    pub curriculum: Curriculum,
    pub config: TrainConfig,
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(base: &'a ToyBaseModel, curriculum: Curriculum, config: TrainConfig, library: ConceptLibrary) -> Result<Self> {
        let state = TrainState::new(&config, library)?;
        Self::resume(base, curriculum, config, state)
    }

    pub fn resume(base: &'a ToyBaseModel, mut curriculum: Curriculum, config: TrainConfig, state: TrainState) -> Result<Self> {
        config.validate()?;
        if !base.is_frozen() {
            return Err(Error::State("training requires a frozen base model".into()));
        }
        if base.config().d_model != config.library.d_model {
            return Err(Error::Config(format!(
                "library d_model {} differs from base d_model {}",
                config.library.d_model,
                base.config().d_model
            )));
        }
        if config.ablations.no_augmentation {
            curriculum.augment_fraction = 0.0;
        }
        curriculum.batch_size = config.batch_size;
        Ok(Self {
            base,
            curriculum,
            config,
            state,
        })
    }

    fn merge_eval(&self, step: u64) -> Result<FrozenPass> {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for (i, spec) in self.curriculum.specs.iter().enumerate() {
            if self.curriculum.weights[i] <= 0.0 {
                continue;
            }
            let s = seed::derive(self.config.seed, Stream::MergeEval, step * 64 + i as u64);
            let b = gen_batch(spec, self.config.merge_eval_size, s)?;
            inputs.extend(b.inputs());
            targets.extend(b.targets().into_iter().flatten());
        }
        FrozenPass::from_sequences(self.base, &inputs, targets)
    }

    /// Runs one full iteration and advances the step counter.
    pub fn step(&mut self) -> Result<StepRecord> {
        let t = self.state.step;
        let batch = self.curriculum.batch_at(t)?;
        let pass = FrozenPass::new(self.base, &batch)?;
        let coeffs = self.config.coefficients(self.state.lambda_kl);
        let mut events = Vec::new();

        // Forward, loss, backward, update.
        let lib = &self.state.library;
        let mut tape = if lib.is_empty() { Tape::no_grad() } else { Tape::new() };
        let graph = record_loss(&mut tape, self.base, lib, &pass, &coeffs, true)?;
        let loss_total = tape.scalar(graph.total);
        let logits = tape.value(graph.logits).clone();
        let (mut lr, mut grad_norm, mut skipped) = (self.config.optim.lr_at(t + 1), 0.0, false);
        if !lib.is_empty() {
            let mut grads = tape.backward(graph.total)?;
            let named: BTreeMap<String, Matrix> = graph
                .params
                .iter()
                .map(|(n, v)| {
                    let g = grads.take(*v).ok_or_else(|| Error::Consistency(format!("no gradient for `{n}`")))?;
                    Ok((n.clone(), g))
                })
                .collect::<Result<_>>()?;
            let mut params = lib.params();
            match self.state.optimizer.step(&mut params, named, t + 1)? {
                StepOutcome::Applied {
                    lr: used,
                    grad_norm: norm,
                    ..
                } => {
                    lr = used;
                    grad_norm = norm;
                    self.state.library.set_params(&params)?;
                }
                StepOutcome::Skipped { reason } => {
                    skipped = true;
                    events.push(Event::SkippedStep { step: t, reason });
                }
            }
            let fixed = self.state.library.reorthogonalize()?;
            if !fixed.is_empty() {
                events.push(Event::Reorthogonalize { step: t, ids: fixed });
            }
        }
        drop(tape);

        // Usage and co-activation statistics from this step's routing.
        if !self.state.library.is_empty() {
            let ids = self.state.library.ids();
            self.state.library.update_usage_batch(&graph.selections, self.config.usage_rho);
            self.state.coact.update(&ids, &graph.selections, self.config.merge.coact_decay);
        }

        // Dual ascent on the KL constraint.
        if !self.config.ablations.remove_kl && (t + 1) % self.config.dual_interval == 0 {
            self.state.lambda_kl = dual_update(
                self.state.lambda_kl,
                graph.breakdown.kl,
                self.config.eps_kl,
                self.config.eta_dual,
            );
        }

        // Failure-driven spawning.
        let failure = batch_failure(&logits, &pass.segs, self.config.spawn.eps)?;
        let h_pool = pass.pooled().mean_rows();
        let base = self.base;
        let lib_snapshot = self.state.library.clone();
        let prior = self.config.spawn.prior_pi;
        let disc_fn = |cand: &Matrix| -> Result<f64> {
            let mut with = lib_snapshot.clone();
            if with.len() >= with.config.n_max {
                return Ok(0.0);
            }
            let head = with.zero_head();
            with.add_concept(cand.clone(), t, Vec::new(), 0, prior, head)?;
            Ok(batch_disc_score(base, &with, &batch)?.unwrap_or(0.0))
        };
        let use_disc = self.config.spawn.lambda_disc > 0.0 && batch.examples.iter().any(|e| e.negative.is_some());
        let input = SpawnInput {
            failure,
            hidden: &pass.hidden,
            h_pool: &h_pool,
            step: t,
            seed: self.config.seed,
            bypass_mdl: self.config.ablations.remove_mdl,
            disc: if use_disc { Some(&disc_fn) } else { None },
        };
        let outcome = try_spawn(&mut self.state.library, &mut self.state.generator, &input, &self.config.spawn)?;
        let accepted = matches!(outcome, SpawnOutcome::Accepted { .. });
        if let Some(e) = spawn_event(t, failure, &outcome, self.state.library.len()) {
            events.push(e);
        }
        if accepted && self.state.library.len() > self.config.library.n_keep {
            let removed = prune(&mut self.state.library, &mut self.state.coact, self.config.library.n_keep)?;
            events.push(Event::Prune {
                step: t,
                removed,
                size_after: self.state.library.len(),
            });
        }

        // Periodic merging on a held-out batch.
        if !self.config.ablations.remove_merge
            && (t + 1) % self.config.merge.interval == 0
            && self.state.library.len() >= 2
        {
            let eval = self.merge_eval(t)?;
            let loss = |l: &ConceptLibrary| -> Result<f64> { Ok(augmented_score(base, l, &eval)?.loss()) };
            let (done, candidates) = merge_pass(
                &mut self.state.library,
                &mut self.state.coact,
                &loss,
                &self.config.merge,
                &self.config.spawn,
                t,
            )?;
            events.push(Event::MergeCandidates {
                step: t,
                evaluated: candidates.len(),
                qualifying: candidates.iter().filter(|c| c.qualifies).count(),
            });
            let mut size = self.state.library.len() + done.len();
            for m in done {
                size -= 1;
                events.push(Event::Merge {
                    step: t,
                    parents: m.parents,
                    new_id: m.new_id,
                    synergy: m.synergy,
                    delta_omega: m.delta_omega,
                    level: m.level,
                    joint_beats_parts: m.joint_beats_parts,
                    size_after: size,
                });
            }
        }
        let params = self.state.library.params();
        self.state.optimizer.retain(&params);

        let b = graph.breakdown;
        let metrics = StepMetrics {
            step: t,
            task: batch.spec.label(),
            loss_total,
            loss_lm: b.lm,
            orth: b.orth,
            overlap: b.overlap,
            gate_entropy: b.gate_entropy,
            kl: b.kl,
            coefficients: coeffs,
            lambda_kl: self.state.lambda_kl,
            failure,
            n_concepts: self.state.library.len(),
            lr,
            grad_norm,
            skipped,
        };
        self.state.step += 1;
        self.state.events_emitted += events.len() as u64;
        Ok(StepRecord { metrics, events })
    }

    /// Steps until the counter reaches `until`, reporting each step.
    pub fn run(&mut self, until: u64, observer: &mut dyn Observer) -> Result<()> {
        while self.state.step < until {
            let record = self.step()?;
            observer.on_step(&record, &self.state, &self.config)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
    pub events: Vec<Event>,
}

/// Trains for `config.optim.total_steps` steps from a fresh state.
pub fn train_loop(
    base: &ToyBaseModel,
    library: ConceptLibrary,
    curriculum: &Curriculum,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(base, curriculum.clone(), config.clone(), library)?;
    let mut rec = Recorder::default();
    trainer.run(config.optim.total_steps, &mut rec)?;
    Ok(TrainOutcome {
        state: trainer.state,
        metrics: rec.metrics,
        events: rec.events,
    })
}

/// Library size implied by replaying an event log from `initial`.
pub fn replay_size(initial: usize, events: &[Event]) -> Vec<(u64, usize)> {
    let mut n = initial as i64;
    let mut out = Vec::new();
    for e in events {
        match e {
            Event::Spawn { outcome, .. } if outcome == "accepted" => n += 1,
            Event::Merge { .. } => n -= 1,
            Event::Prune { removed, .. } => n -= removed.len() as i64,
            _ => continue,
        }
        out.push((e.step(), n.max(0) as usize));
    }
    out
}

/// Ω of every concept, keyed by id.
pub fn concept_costs(lib: &ConceptLibrary, cfg: &SpawnConfig) -> Result<BTreeMap<u64, f64>> {
    lib.concepts
        .iter()
        .map(|c| Ok((c.id, evolution::concept_cost(c, cfg)?)))
        .collect()
}
