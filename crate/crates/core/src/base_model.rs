// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small pre-norm decoder-only transformer used as the frozen base.
//!
//! Batches are packed: sequences are concatenated row-wise without padding
//! and attention runs per sequence, so every row of every activation depends
//! only on its own sequence.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::{self, Matrix};
use crate::optim::{AdamW, OptimConfig, StepOutcome};
use crate::seed::{self, Stream};
use crate::tasks::{Curriculum, LabeledBatch};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub inject_layer: usize,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            d_model: 64,
            n_layers: 6,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 64,
            inject_layer: 3,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.inject_layer >= self.n_layers {
            return Err(Error::Config(format!(
                "inject_layer {} outside 0..{}",
                self.inject_layer, self.n_layers
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, d, f, s) = (self.vocab_size, self.d_model, self.d_ff, self.max_seq_len);
        let per_layer = 4 * d * d + 2 * d + 2 * d + d * f + f + f * d + d;
        v * d + s * d + self.n_layers * per_layer + 2 * d + d * v
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

const LAYER_PARAMS: [&str; 12] = [
    "ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
];

fn layer_param(layer: usize, name: &str) -> String {
    format!("layer.{layer}.{name}")
}

/// Hidden states and logits of a no-grad forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HookedOutput {
    /// `hidden[0]` is the embedding output, `hidden[l + 1]` the output of
    /// block `l` (before any hook).
    pub hidden: Vec<Matrix>,
    pub logits: Matrix,
}

/// Per-row transform applied to the states leaving the injection layer.
pub type Hook<'a> = &'a dyn Fn(&Matrix) -> Result<Matrix>;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyBaseModel {
    config: ToyModelConfig,
    params: ParamSet,
    frozen: bool,
}

/// Row ranges of each sequence inside a packed batch.
pub fn segments(seqs: &[Vec<usize>]) -> Vec<Range<usize>> {
    let mut start = 0;
    seqs.iter()
        .map(|s| {
            let r = start..start + s.len();
            start += s.len();
            r
        })
        .collect()
}

impl ToyBaseModel {
    /// Deterministic initialization from `config.seed`.
    pub fn init(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(config.seed, Stream::Init, 0);
        let (v, d, f, s) = (config.vocab_size, config.d_model, config.d_ff, config.max_seq_len);
        let mut normal = |rows: usize, cols: usize, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Matrix::from_fn(rows, cols, |_, _| dist.sample(&mut rng))
        };
        let resid_scale = 1.0 / ((2 * config.n_layers) as f64).sqrt();
        let mut params = ParamSet::new();
        params.insert("tok_emb", normal(v, d, 0.5), true);
        params.insert("pos_emb", normal(s, d, 0.1), true);
        for l in 0..config.n_layers {
            let std_d = 1.0 / (d as f64).sqrt();
            let std_f = 1.0 / (f as f64).sqrt();
            params.insert(layer_param(l, "ln1_g"), Matrix::filled(1, d, 1.0), true);
            params.insert(layer_param(l, "ln1_b"), Matrix::zeros(1, d), true);
            params.insert(layer_param(l, "wq"), normal(d, d, std_d), true);
            params.insert(layer_param(l, "wk"), normal(d, d, std_d), true);
            params.insert(layer_param(l, "wv"), normal(d, d, std_d), true);
            params.insert(layer_param(l, "wo"), normal(d, d, std_d * resid_scale), true);
            params.insert(layer_param(l, "ln2_g"), Matrix::filled(1, d, 1.0), true);
            params.insert(layer_param(l, "ln2_b"), Matrix::zeros(1, d), true);
            params.insert(layer_param(l, "w1"), normal(d, f, std_d), true);
            params.insert(layer_param(l, "b1"), Matrix::zeros(1, f), true);
            params.insert(layer_param(l, "w2"), normal(f, d, std_f * resid_scale), true);
            params.insert(layer_param(l, "b2"), Matrix::zeros(1, d), true);
        }
        params.insert("lnf_g", Matrix::filled(1, d, 1.0), true);
        params.insert("lnf_b", Matrix::zeros(1, d), true);
        params.insert("unembed", normal(d, v, 1.0 / (d as f64).sqrt()), true);
        Ok(Self {
            config,
            params,
            frozen: false,
        })
    }

    /// Rebuilds a model from stored parameters (used by checkpoint loading).
    pub fn from_parts(config: ToyModelConfig, params: ParamSet, frozen: bool) -> Result<Self> {
        config.validate()?;
        let reference = Self::init(config.clone())?;
        for (name, p) in reference.params.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing base parameter `{name}`")))?;
            if got.value.shape() != p.value.shape() {
                return Err(Error::Shape(format!("base parameter `{name}` has wrong shape")));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Config("unexpected base parameters".into()));
        }
        let mut params = params;
        let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        for n in names {
            params.get_mut(&n).expect("present").trainable = !frozen;
        }
        Ok(Self {
            config,
            params,
            frozen,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        let names: Vec<String> = self.params.iter().map(|(n, _)| n.clone()).collect();
        for n in names {
            self.params.get_mut(&n).expect("present").trainable = false;
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, p)| p.value.len()).sum()
    }

    /// SHA-256 over parameter names and little-endian values.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter() {
            h.update(name.as_bytes());
            h.update((p.value.rows() as u64).to_le_bytes());
            h.update((p.value.cols() as u64).to_le_bytes());
            for x in p.value.data() {
                h.update(x.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    pub fn check_tokens(&self, seqs: &[Vec<usize>]) -> Result<()> {
        for s in seqs {
            if s.is_empty() {
                return Err(Error::Input("empty sequence".into()));
            }
            if s.len() > self.config.max_seq_len {
                return Err(Error::Input(format!(
                    "sequence of {} tokens exceeds max_seq_len {}",
                    s.len(),
                    self.config.max_seq_len
                )));
            }
            if let Some(t) = s.iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(Error::Input(format!(
                    "token {t} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Puts the parameters needed for `layers` (plus embeddings / head when
    /// requested) on `tape`; trainable only while the model is unfrozen.
    pub fn register(
        &self,
        tape: &mut Tape,
        layers: Range<usize>,
        embed: bool,
        head: bool,
    ) -> BTreeMap<String, Var> {
        let mut names: Vec<String> = Vec::new();
        if embed {
            names.extend(["tok_emb".to_string(), "pos_emb".to_string()]);
        }
        for l in layers {
            names.extend(LAYER_PARAMS.iter().map(|p| layer_param(l, p)));
        }
        if head {
            names.extend(["lnf_g", "lnf_b", "unembed"].map(String::from));
        }
        names
            .into_iter()
            .map(|n| {
                let p = self.params.get(&n).expect("registered name exists");
                let v = tape.leaf(p.value.clone(), p.trainable);
                (n, v)
            })
            .collect()
    }

    pub fn embed(&self, tape: &mut Tape, vars: &BTreeMap<String, Var>, seqs: &[Vec<usize>]) -> Result<Var> {
        self.check_tokens(seqs)?;
        let tokens: Vec<usize> = seqs.iter().flatten().copied().collect();
        let positions: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
        let tok = tape.gather_rows(vars["tok_emb"], &tokens)?;
        let pos = tape.gather_rows(vars["pos_emb"], &positions)?;
        tape.add(tok, pos)
    }

    /// One transformer block over a packed batch.
    pub fn block(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, Var>,
        layer: usize,
        x: Var,
        segs: &[Range<usize>],
    ) -> Result<Var> {
        let p = |n: &str| vars[&layer_param(layer, n)];
        let d = self.config.d_model;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let a = tape.layer_norm(x, p("ln1_g"), p("ln1_b"))?;
        let q = tape.matmul(a, p("wq"))?;
        let k = tape.matmul(a, p("wk"))?;
        let v = tape.matmul(a, p("wv"))?;
        let mut seq_out = Vec::with_capacity(segs.len());
        for seg in segs {
            let mut heads = Vec::with_capacity(self.config.n_heads);
            for h in 0..self.config.n_heads {
                let (c0, c1) = (h * dh, (h + 1) * dh);
                let qh = tape.slice(q, seg.start, seg.end, c0, c1)?;
                let kh = tape.slice(k, seg.start, seg.end, c0, c1)?;
                let vh = tape.slice(v, seg.start, seg.end, c0, c1)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, scale);
                let attn = tape.softmax_rows(scores, true);
                heads.push(tape.matmul(attn, vh)?);
            }
            seq_out.push(tape.concat_cols(&heads)?);
        }
        let att = tape.concat_rows(&seq_out)?;
        let att = tape.matmul(att, p("wo"))?;
        let x = tape.add(x, att)?;

        let b = tape.layer_norm(x, p("ln2_g"), p("ln2_b"))?;
        let f = tape.matmul(b, p("w1"))?;
        let f = tape.add_row(f, p("b1"))?;
        let f = tape.silu(f);
        let f = tape.matmul(f, p("w2"))?;
        let f = tape.add_row(f, p("b2"))?;
        debug_assert_eq!(tape.value(f).cols(), d);
        tape.add(x, f)
    }

    pub fn head(&self, tape: &mut Tape, vars: &BTreeMap<String, Var>, x: Var) -> Result<Var> {
        let y = tape.layer_norm(x, vars["lnf_g"], vars["lnf_b"])?;
        tape.matmul(y, vars["unembed"])
    }

    /// States leaving the injection layer for a packed batch (no gradients).
    pub fn lower(&self, seqs: &[Vec<usize>]) -> Result<Matrix> {
        let mut tape = Tape::no_grad();
        let vars = self.register(&mut tape, 0..self.config.inject_layer + 1, true, false);
        let segs = segments(seqs);
        let mut x = self.embed(&mut tape, &vars, seqs)?;
        for l in 0..=self.config.inject_layer {
            x = self.block(&mut tape, &vars, l, x, &segs)?;
        }
        Ok(tape.value(x).clone())
    }

    /// Logits from states entering the block after the injection layer.
    pub fn upper(&self, h: &Matrix, segs: &[Range<usize>]) -> Result<Matrix> {
        let mut tape = Tape::no_grad();
        let vars = self.register(&mut tape, self.config.inject_layer + 1..self.config.n_layers, false, true);
        let mut x = tape.constant(h.clone());
        for l in self.config.inject_layer + 1..self.config.n_layers {
            x = self.block(&mut tape, &vars, l, x, segs)?;
        }
        let logits = self.head(&mut tape, &vars, x)?;
        Ok(tape.value(logits).clone())
    }

    /// Forward pass over a packed batch with an optional hook on the states
    /// leaving the injection layer.
    pub fn forward_batch(&self, seqs: &[Vec<usize>], hook: Option<Hook<'_>>) -> Result<HookedOutput> {
        let mut tape = Tape::no_grad();
        let vars = self.register(&mut tape, 0..self.config.n_layers, true, true);
        let segs = segments(seqs);
        let mut x = self.embed(&mut tape, &vars, seqs)?;
        let mut hidden = vec![tape.value(x).clone()];
        for l in 0..self.config.n_layers {
            x = self.block(&mut tape, &vars, l, x, &segs)?;
            hidden.push(tape.value(x).clone());
            if l == self.config.inject_layer {
                if let Some(f) = hook {
                    let h = f(tape.value(x))?;
                    if h.shape() != tape.value(x).shape() {
                        return Err(Error::Shape("hook changed the hidden-state shape".into()));
                    }
                    if !h.is_finite() {
                        return Err(Error::Numeric("hook produced non-finite states".into()));
                    }
                    x = tape.constant(h);
                }
            }
        }
        let logits = self.head(&mut tape, &vars, x)?;
        Ok(HookedOutput {
            hidden,
            logits: tape.value(logits).clone(),
        })
    }

    pub fn forward_hooked(&self, tokens: &[usize], hook: Option<Hook<'_>>) -> Result<HookedOutput> {
        self.forward_batch(&[tokens.to_vec()], hook)
    }

    /// Mean answer-token cross-entropy of a recorded forward over `batch`,
    /// mixed with the uniform-target loss when `smoothing > 0`.
    fn lm_loss(&self, tape: &mut Tape, vars: &BTreeMap<String, Var>, batch: &LabeledBatch, smoothing: f64) -> Result<Var> {
        let inputs = batch.inputs();
        let segs = segments(&inputs);
        let mut x = self.embed(tape, vars, &inputs)?;
        for l in 0..self.config.n_layers {
            x = self.block(tape, vars, l, x, &segs)?;
        }
        let logits = self.head(tape, vars, x)?;
        let targets: Vec<Option<usize>> = batch.targets().into_iter().flatten().collect();
        let rows: Vec<usize> = targets.iter().enumerate().filter(|(_, t)| t.is_some()).map(|(i, _)| i).collect();
        let ce = tape.cross_entropy(logits, targets)?;
        if smoothing == 0.0 || rows.is_empty() {
            return Ok(ce);
        }
        let ls = tape.log_softmax_rows(logits);
        let picked = tape.gather_rows(ls, &rows)?;
        let total = tape.sum(picked);
        let per_row = (rows.len() * self.config.vocab_size) as f64;
        tape.scalar_combine(&[(ce, 1.0 - smoothing), (total, -smoothing / per_row)])
    }

    /// Teacher-forced answer metrics with an optional hook.
    pub fn score(&self, batch: &LabeledBatch, hook: Option<Hook<'_>>) -> Result<AnswerScore> {
        let out = self.forward_batch(&batch.inputs(), hook)?;
        let targets: Vec<Option<usize>> = batch.targets().into_iter().flatten().collect();
        Ok(AnswerScore::from_logits(&out.logits, &targets))
    }
}

/// Summed answer-token loss and accuracy counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AnswerScore {
    pub loss_sum: f64,
    pub correct: usize,
    pub count: usize,
}

impl AnswerScore {
    pub fn from_logits(logits: &Matrix, targets: &[Option<usize>]) -> Self {
        let mut s = AnswerScore::default();
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = logits.row(i);
                s.loss_sum += numerics::log_sum_exp(row) - row[t];
                let argmax = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                    .0;
                s.correct += usize::from(argmax == t);
                s.count += 1;
            }
        }
        s
    }

    pub fn merge(&mut self, other: AnswerScore) {
        self.loss_sum += other.loss_sum;
        self.correct += other.correct;
        self.count += other.count;
    }

    pub fn loss(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.loss_sum / self.count as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Weight of the uniform target mixed into each answer label.
    pub label_smoothing: f64,
    pub optim: OptimConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            label_smoothing: 0.1,
            optim: OptimConfig {
                lr_peak: 3e-3,
                warmup_steps: 100,
                total_steps: 2000,
                ..OptimConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    pub skipped_steps: Vec<u64>,
}

/// Trains every base parameter on `curriculum` for `config.steps`, then
/// freezes the model.
pub fn pretrain_base(model: &mut ToyBaseModel, curriculum: &Curriculum, config: &PretrainConfig) -> Result<PretrainReport> {
    if model.frozen {
        return Err(Error::State("base model is already frozen".into()));
    }
    config.optim.validate()?;
    if !(0.0..1.0).contains(&config.label_smoothing) {
        return Err(Error::Config("label_smoothing must lie in [0, 1)".into()));
    }
    let mut opt = AdamW::new(OptimConfig {
        total_steps: config.steps,
        ..config.optim.clone()
    });
    let mut report = PretrainReport {
        losses: Vec::with_capacity(config.steps as usize),
        skipped_steps: Vec::new(),
    };
    let all = 0..model.config.n_layers;
    for step in 0..config.steps {
        let batch = curriculum.batch_at(step)?;
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, all.clone(), true, true);
        let loss = model.lm_loss(&mut tape, &vars, &batch, config.label_smoothing)?;
        report.losses.push(tape.scalar(loss));
        let mut grads = tape.backward(loss)?;
        let named: BTreeMap<String, Matrix> = vars
            .iter()
            .map(|(n, v)| {
                let g = grads.take(*v).unwrap_or_else(|| {
                    let p = &model.params.get(n).expect("param").value;
                    Matrix::zeros(p.rows(), p.cols())
                });
                (n.clone(), g)
            })
            .collect();
        if let StepOutcome::Skipped { .. } = opt.step(&mut model.params, named, step + 1)? {
            report.skipped_steps.push(step);
        }
    }
    model.freeze();
    Ok(report)
}

/// Random token sequences for probes and tests.
pub fn random_tokens(config: &ToyModelConfig, len: usize, seed_value: u64) -> Vec<usize> {
    let mut rng = seed::rng(seed_value, Stream::Eval, len as u64);
    (0..len).map(|_| rng.gen_range(0..config.vocab_size)).collect()
}
