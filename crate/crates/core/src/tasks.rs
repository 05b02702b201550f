// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic compositional tasks, distribution-shift transforms and the
//! training curriculum.
//!
//! Every example is laid out as `[marker, prompt.., SEP, answer..]`. The model
//! reads all but the last token and is supervised only on the positions that
//! predict answer tokens.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Stream};

const N_MARKERS: usize = 6;
const N_DISTRACTORS: usize = 5;
/// Content symbols needed by the fixed sub-alphabets below.
const MIN_CONTENT: usize = 19;
const MAX_MODULUS: usize = 7;
const MAX_STEP: usize = 3;

// Offsets into the content alphabet.
const OPS_OFFSET: usize = 7;
const BRACKETS_OFFSET: usize = 13;
const YES_OFFSET: usize = 17;
const NO_OFFSET: usize = 18;

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Partition of token ids: separator, task markers, content, distractors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 1 + N_MARKERS + MIN_CONTENT + N_DISTRACTORS {
            return Err(Error::Config(format!(
                "vocabulary of {size} cannot hold the task alphabets (need {})",
                1 + N_MARKERS + MIN_CONTENT + N_DISTRACTORS
            )));
        }
        Ok(Self { size })
    }

    pub const fn sep(&self) -> usize {
        0
    }

    pub fn marker(&self, kind: TaskKind) -> usize {
        1 + kind as usize
    }

    pub fn content_start(&self) -> usize {
        1 + N_MARKERS
    }

    pub fn content_len(&self) -> usize {
        self.size - 1 - N_MARKERS - N_DISTRACTORS
    }

    pub fn content(&self, i: usize) -> usize {
        debug_assert!(i < self.content_len());
        self.content_start() + i
    }

    pub fn is_content(&self, tok: usize) -> bool {
        (self.content_start()..self.content_start() + self.content_len()).contains(&tok)
    }

    pub fn distractor(&self, i: usize) -> usize {
        self.size - N_DISTRACTORS + i
    }

    pub fn is_distractor(&self, tok: usize) -> bool {
        tok >= self.size - N_DISTRACTORS && tok < self.size
    }

    pub fn digit(&self, v: usize) -> usize {
        self.content(v)
    }

    pub fn digit_value(&self, tok: usize) -> Option<usize> {
        let start = self.content_start();
        (tok >= start && tok < start + MAX_MODULUS).then(|| tok - start)
    }

    /// Token for adding `step` (positive) or subtracting it (negative).
    pub fn op(&self, step: i64) -> usize {
        let k = step.unsigned_abs() as usize - 1;
        if step > 0 {
            self.content(OPS_OFFSET + k)
        } else {
            self.content(OPS_OFFSET + MAX_STEP + k)
        }
    }

    pub fn op_value(&self, tok: usize) -> Option<i64> {
        let base = self.content(OPS_OFFSET);
        if tok < base || tok >= base + 2 * MAX_STEP {
            return None;
        }
        let k = (tok - base) as i64;
        Some(if k < MAX_STEP as i64 { k + 1 } else { -(k - MAX_STEP as i64 + 1) })
    }

    /// Bracket token: `kind` 0 or 1, `open` or closing.
    pub fn bracket(&self, kind: usize, open: bool) -> usize {
        self.content(BRACKETS_OFFSET + 2 * kind + usize::from(!open))
    }

    /// `(kind, open)` for bracket tokens.
    pub fn bracket_info(&self, tok: usize) -> Option<(usize, bool)> {
        let base = self.content(BRACKETS_OFFSET);
        (tok >= base && tok < base + 4).then(|| ((tok - base) / 2, (tok - base) % 2 == 0))
    }

    pub fn yes(&self) -> usize {
        self.content(YES_OFFSET)
    }

    pub fn no(&self) -> usize {
        self.content(NO_OFFSET)
    }
}

// ---------------------------------------------------------------------------
// Task specs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy = 0,
    Mirror = 1,
    Remap = 2,
    MirrorRemap = 3,
    ModularChain = 4,
    NestedConstraint = 5,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::Copy,
        TaskKind::Mirror,
        TaskKind::Remap,
        TaskKind::MirrorRemap,
        TaskKind::ModularChain,
        TaskKind::NestedConstraint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Mirror => "mirror",
            TaskKind::Remap => "remap",
            TaskKind::MirrorRemap => "mirror-remap",
            TaskKind::ModularChain => "modular-chain",
            TaskKind::NestedConstraint => "nested-constraint",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Difficulty {
    Base,
    Compositional,
}

fn default_depth() -> usize {
    1
}
fn default_min_len() -> usize {
    2
}
fn default_max_len() -> usize {
    5
}
fn default_modulus() -> usize {
    5
}
fn default_vocab() -> usize {
    32
}
fn default_max_seq() -> usize {
    64
}

/// Generator settings for one task family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Composition steps (modular-chain ops, bracket nesting depth).
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Prompt length bounds for the sequence tasks.
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Seed of the remap bijection; `None` is the identity map.
    #[serde(default)]
    pub bijection_seed: Option<u64>,
    #[serde(default = "default_modulus")]
    pub modulus: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_max_seq")]
    pub max_seq_len: usize,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        Self {
            kind,
            depth: default_depth(),
            min_len: default_min_len(),
            max_len: default_max_len(),
            bijection_seed: None,
            modulus: default_modulus(),
            vocab_size: default_vocab(),
            max_seq_len: default_max_seq(),
        }
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn with_lengths(mut self, min_len: usize, max_len: usize) -> Self {
        self.min_len = min_len;
        self.max_len = max_len;
        self
    }

    pub fn with_bijection(mut self, seed: u64) -> Self {
        self.bijection_seed = Some(seed);
        self
    }

    pub fn with_modulus(mut self, m: usize) -> Self {
        self.modulus = m;
        self
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.vocab_size)
    }

    pub fn difficulty(&self) -> Difficulty {
        match (self.kind, self.bijection_seed) {
            (TaskKind::Copy, _) | (TaskKind::Remap, None) => Difficulty::Base,
            _ => Difficulty::Compositional,
        }
    }

    pub fn label(&self) -> String {
        match (self.kind, self.bijection_seed) {
            (TaskKind::Remap, None) => "identity-remap".into(),
            (k, _) => k.name().into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vocab = self.vocab()?;
        if self.depth == 0 {
            return Err(Error::Config("task depth must be >= 1".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "bad length bounds {}..={}",
                self.min_len, self.max_len
            )));
        }
        if !(2..=MAX_MODULUS).contains(&self.modulus) {
            return Err(Error::Config(format!(
                "modulus {} outside 2..={MAX_MODULUS}",
                self.modulus
            )));
        }
        let longest = self.longest_sequence();
        if longest > self.max_seq_len + 1 {
            return Err(Error::Config(format!(
                "{} examples reach {longest} tokens, above max_seq_len {}",
                self.kind, self.max_seq_len
            )));
        }
        debug_assert!(vocab.content_len() >= MIN_CONTENT);
        Ok(())
    }

    /// Longest full example (marker + prompt + SEP + answer).
    fn longest_sequence(&self) -> usize {
        match self.kind {
            TaskKind::ModularChain => 1 + (1 + self.depth) + 1 + 1,
            TaskKind::NestedConstraint => 1 + 4 * self.depth + 1 + 1,
            _ => 1 + self.max_len + 1 + self.max_len,
        }
    }

    /// The remap bijection over token ids (identity outside content).
    pub fn bijection(&self) -> Result<Vec<usize>> {
        let vocab = self.vocab()?;
        let mut map: Vec<usize> = (0..vocab.size).collect();
        if let Some(s) = self.bijection_seed {
            let mut rng = seed::rng(s, Stream::Bijection, 0);
            let mut content: Vec<usize> = (0..vocab.content_len()).map(|i| vocab.content(i)).collect();
            let original = content.clone();
            content.shuffle(&mut rng);
            for (from, to) in original.into_iter().zip(content) {
                map[from] = to;
            }
        }
        Ok(map)
    }
}

// ---------------------------------------------------------------------------
// Examples and batches
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
    /// Incorrect completion paired with `answer`, when available.
    pub negative: Option<Vec<usize>>,
}

impl Example {
    pub fn sequence(&self, vocab: &Vocab, kind: TaskKind) -> Vec<usize> {
        let mut seq = Vec::with_capacity(self.prompt.len() + self.answer.len() + 2);
        seq.push(vocab.marker(kind));
        seq.extend_from_slice(&self.prompt);
        seq.push(vocab.sep());
        seq.extend_from_slice(&self.answer);
        seq
    }

    /// Position of the separator within the input.
    pub fn sep_position(&self) -> usize {
        1 + self.prompt.len()
    }

    /// Model input: the full sequence without its last token.
    pub fn input(&self, vocab: &Vocab, kind: TaskKind) -> Vec<usize> {
        let mut seq = self.sequence(vocab, kind);
        seq.pop();
        seq
    }

    /// Next-token targets, `Some` only on positions predicting the answer.
    pub fn targets(&self) -> Vec<Option<usize>> {
        let len = self.prompt.len() + 1 + self.answer.len();
        let mut t = vec![None; len];
        for (k, &a) in self.answer.iter().enumerate() {
            t[self.sep_position() + k] = Some(a);
        }
        t
    }

    /// Input paired with an arbitrary completion (for likelihood scoring).
    pub fn with_completion(&self, completion: &[usize]) -> Example {
        Example {
            prompt: self.prompt.clone(),
            answer: completion.to_vec(),
            negative: None,
        }
    }
}

/// A batch drawn from one task spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBatch {
    pub spec: TaskSpec,
    pub examples: Vec<Example>,
}

impl LabeledBatch {
    pub fn vocab(&self) -> Vocab {
        Vocab {
            size: self.spec.vocab_size,
        }
    }

    pub fn kind(&self) -> TaskKind {
        self.spec.kind
    }

    pub fn difficulty(&self) -> Difficulty {
        self.spec.difficulty()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn inputs(&self) -> Vec<Vec<usize>> {
        let vocab = self.vocab();
        self.examples
            .iter()
            .map(|e| e.input(&vocab, self.spec.kind))
            .collect()
    }

    pub fn targets(&self) -> Vec<Vec<Option<usize>>> {
        self.examples.iter().map(Example::targets).collect()
    }

    /// Loss mask per example: true exactly on answer-predicting positions.
    pub fn loss_mask(&self) -> Vec<Vec<bool>> {
        self.targets()
            .into_iter()
            .map(|t| t.into_iter().map(|x| x.is_some()).collect())
            .collect()
    }

    /// Line-delimited text export, one example per line.
    pub fn to_lines(&self) -> String {
        let vocab = self.vocab();
        let mut out = String::new();
        for e in &self.examples {
            let input = e.input(&vocab, self.spec.kind);
            let targets: Vec<String> = e
                .targets()
                .iter()
                .map(|t| t.map_or("_".to_string(), |v| v.to_string()))
                .collect();
            let diff = match self.difficulty() {
                Difficulty::Base => "base",
                Difficulty::Compositional => "compositional",
            };
            out.push_str(&format!(
                "{}\t{}\tinput: {}\ttarget: {}\n",
                self.spec.label(),
                diff,
                input.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "),
                targets.join(" ")
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Rules
// ---------------------------------------------------------------------------

/// Ground-truth answer for `prompt` under the spec's rule. Distractor tokens
/// are ignored.
pub fn rule_answer(spec: &TaskSpec, prompt: &[usize]) -> Result<Vec<usize>> {
    let vocab = spec.vocab()?;
    let clean: Vec<usize> = prompt
        .iter()
        .copied()
        .filter(|&t| !vocab.is_distractor(t))
        .collect();
    let sigma = spec.bijection()?;
    Ok(match spec.kind {
        TaskKind::Copy => clean,
        TaskKind::Mirror => clean.into_iter().rev().collect(),
        TaskKind::Remap => clean.into_iter().map(|t| sigma[t]).collect(),
        TaskKind::MirrorRemap => clean.into_iter().rev().map(|t| sigma[t]).collect(),
        TaskKind::ModularChain => {
            let (first, ops) = clean
                .split_first()
                .ok_or_else(|| Error::Input("empty modular-chain prompt".into()))?;
            let start = vocab
                .digit_value(*first)
                .filter(|&v| v < spec.modulus)
                .ok_or_else(|| Error::Input(format!("token {first} is not a digit")))?;
            let m = spec.modulus as i64;
            let mut acc = start as i64;
            for &op in ops {
                let step = vocab
                    .op_value(op)
                    .ok_or_else(|| Error::Input(format!("token {op} is not an op")))?;
                acc = (acc + step).rem_euclid(m);
            }
            vec![vocab.digit(acc as usize)]
        }
        TaskKind::NestedConstraint => {
            let ok = brackets_balanced(&vocab, &clean)?;
            vec![if ok { vocab.yes() } else { vocab.no() }]
        }
    })
}

fn brackets_balanced(vocab: &Vocab, tokens: &[usize]) -> Result<bool> {
    let mut stack = Vec::new();
    for &t in tokens {
        let (kind, open) = vocab
            .bracket_info(t)
            .ok_or_else(|| Error::Input(format!("token {t} is not a bracket")))?;
        if open {
            stack.push(kind);
        } else if stack.pop() != Some(kind) {
            return Ok(false);
        }
    }
    Ok(stack.is_empty())
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

fn nest(vocab: &Vocab, depth: usize, rng: &mut ChaCha8Rng, out: &mut Vec<usize>) {
    if depth == 0 {
        return;
    }
    let kind = rng.gen_range(0..2);
    out.push(vocab.bracket(kind, true));
    nest(vocab, depth - 1, rng, out);
    out.push(vocab.bracket(kind, false));
}

fn gen_example(spec: &TaskSpec, vocab: &Vocab, rng: &mut ChaCha8Rng) -> Result<Example> {
    let prompt: Vec<usize> = match spec.kind {
        TaskKind::Copy | TaskKind::Mirror | TaskKind::Remap | TaskKind::MirrorRemap => {
            let n = rng.gen_range(spec.min_len..=spec.max_len);
            (0..n)
                .map(|_| vocab.content(rng.gen_range(0..vocab.content_len())))
                .collect()
        }
        TaskKind::ModularChain => {
            let mut p = vec![vocab.digit(rng.gen_range(0..spec.modulus))];
            for _ in 0..spec.depth {
                let mag = rng.gen_range(1..=MAX_STEP as i64);
                let step = if rng.gen_bool(0.5) { mag } else { -mag };
                p.push(vocab.op(step));
            }
            p
        }
        TaskKind::NestedConstraint => {
            let mut p = Vec::new();
            nest(vocab, spec.depth, rng, &mut p);
            if rng.gen_bool(0.5) {
                let extra = rng.gen_range(1..=spec.depth);
                nest(vocab, extra, rng, &mut p);
            }
            if rng.gen_bool(0.5) {
                // Flip the type of one closing bracket.
                let closers: Vec<usize> = (0..p.len())
                    .filter(|&i| vocab.bracket_info(p[i]).is_some_and(|(_, open)| !open))
                    .collect();
                let i = closers[rng.gen_range(0..closers.len())];
                let (kind, _) = vocab.bracket_info(p[i]).expect("closer");
                p[i] = vocab.bracket(1 - kind, false);
            }
            p
        }
    };
    let answer = rule_answer(spec, &prompt)?;
    let negative = Some(corrupt(spec, vocab, &answer, rng));
    Ok(Example {
        prompt,
        answer,
        negative,
    })
}

fn corrupt(spec: &TaskSpec, vocab: &Vocab, answer: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut neg = answer.to_vec();
    match spec.kind {
        TaskKind::NestedConstraint => {
            neg[0] = if answer[0] == vocab.yes() {
                vocab.no()
            } else {
                vocab.yes()
            };
        }
        TaskKind::ModularChain => {
            let v = vocab.digit_value(answer[0]).expect("digit answer");
            let shift = rng.gen_range(1..spec.modulus);
            neg[0] = vocab.digit((v + shift) % spec.modulus);
        }
        _ => {
            let i = rng.gen_range(0..neg.len());
            let shift = rng.gen_range(1..vocab.content_len());
            let cur = neg[i] - vocab.content_start();
            neg[i] = vocab.content((cur + shift) % vocab.content_len());
        }
    }
    neg
}

/// Deterministic batch of `batch_size` examples for `spec`.
pub fn gen_batch(spec: &TaskSpec, batch_size: usize, seed: u64) -> Result<LabeledBatch> {
    spec.validate()?;
    let vocab = spec.vocab()?;
    let mut rng = seed::rng(seed, Stream::Batch, spec.kind as u64);
    let examples = (0..batch_size)
        .map(|_| gen_example(spec, &vocab, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledBatch {
        spec: spec.clone(),
        examples,
    })
}

// ---------------------------------------------------------------------------
// Distribution shift
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OodKind {
    Permute,
    Reverse,
    Distractor,
}

impl OodKind {
    pub const ALL: [OodKind; 3] = [OodKind::Permute, OodKind::Reverse, OodKind::Distractor];

    pub fn name(self) -> &'static str {
        match self {
            OodKind::Permute => "permute",
            OodKind::Reverse => "reverse",
            OodKind::Distractor => "distractor",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Applies a token-id map to prompts, answers and negatives.
pub fn apply_token_map(batch: &LabeledBatch, map: &[usize]) -> LabeledBatch {
    let m = |v: &Vec<usize>| v.iter().map(|&t| map[t]).collect::<Vec<_>>();
    LabeledBatch {
        spec: batch.spec.clone(),
        examples: batch
            .examples
            .iter()
            .map(|e| Example {
                prompt: m(&e.prompt),
                answer: m(&e.answer),
                negative: e.negative.as_ref().map(m),
            })
            .collect(),
    }
}

pub fn invert_map(map: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; map.len()];
    for (from, &to) in map.iter().enumerate() {
        inv[to] = from;
    }
    inv
}

/// A fresh relabeling of content symbols under which the spec's rule still
/// holds: any permutation for copy/mirror, powers of the bijection for remap
/// tasks, digit rotation for modular chains, bracket-type swaps for nesting.
pub fn symmetry_permutation(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let vocab = spec.vocab()?;
    let mut map: Vec<usize> = (0..vocab.size).collect();
    let identity_remap = spec.bijection_seed.is_none();
    match spec.kind {
        TaskKind::Copy | TaskKind::Mirror => shuffle_content(&vocab, &mut map, rng),
        TaskKind::Remap | TaskKind::MirrorRemap if identity_remap => {
            shuffle_content(&vocab, &mut map, rng)
        }
        TaskKind::Remap | TaskKind::MirrorRemap => {
            let sigma = spec.bijection()?;
            let power = rng.gen_range(1..=vocab.content_len());
            for _ in 0..power {
                map = map.iter().map(|&t| sigma[t]).collect();
            }
        }
        TaskKind::ModularChain => {
            let c = rng.gen_range(0..spec.modulus);
            for v in 0..spec.modulus {
                map[vocab.digit(v)] = vocab.digit((v + c) % spec.modulus);
            }
        }
        TaskKind::NestedConstraint => {
            if rng.gen_bool(0.5) {
                for open in [true, false] {
                    map[vocab.bracket(0, open)] = vocab.bracket(1, open);
                    map[vocab.bracket(1, open)] = vocab.bracket(0, open);
                }
            }
        }
    }
    Ok(map)
}

fn shuffle_content(vocab: &Vocab, map: &mut [usize], rng: &mut ChaCha8Rng) {
    let mut content: Vec<usize> = (0..vocab.content_len()).map(|i| vocab.content(i)).collect();
    let original = content.clone();
    content.shuffle(rng);
    for (from, to) in original.into_iter().zip(content) {
        map[from] = to;
    }
}

fn reverse_example(spec: &TaskSpec, vocab: &Vocab, e: &Example) -> Example {
    let swap_bracket = |t: usize| match vocab.bracket_info(t) {
        Some((kind, open)) => vocab.bracket(kind, !open),
        None => t,
    };
    match spec.kind {
        TaskKind::ModularChain => {
            let mut prompt = vec![e.prompt[0]];
            prompt.extend(e.prompt[1..].iter().rev());
            Example {
                prompt,
                answer: e.answer.clone(),
                negative: e.negative.clone(),
            }
        }
        TaskKind::NestedConstraint => Example {
            prompt: e.prompt.iter().rev().map(|&t| swap_bracket(t)).collect(),
            answer: e.answer.clone(),
            negative: e.negative.clone(),
        },
        _ => Example {
            prompt: e.prompt.iter().rev().copied().collect(),
            answer: e.answer.iter().rev().copied().collect(),
            negative: e.negative.as_ref().map(|n| n.iter().rev().copied().collect()),
        },
    }
}

/// Distribution-shifted copy of `batch`.
pub fn ood_transform(batch: &LabeledBatch, kind: OodKind, seed: u64) -> Result<LabeledBatch> {
    let spec = &batch.spec;
    let vocab = spec.vocab()?;
    let mut rng = seed::rng(seed, Stream::Augment, kind as u64);
    Ok(match kind {
        OodKind::Permute => {
            let map = symmetry_permutation(spec, &mut rng)?;
            apply_token_map(batch, &map)
        }
        OodKind::Reverse => LabeledBatch {
            spec: spec.clone(),
            examples: batch
                .examples
                .iter()
                .map(|e| reverse_example(spec, &vocab, e))
                .collect(),
        },
        OodKind::Distractor => {
            let mut examples = Vec::with_capacity(batch.len());
            for e in &batch.examples {
                let mut prompt = e.prompt.clone();
                let budget = spec.max_seq_len + 1 - (prompt.len() + e.answer.len() + 2);
                let n = rng.gen_range(1..=2).min(budget);
                for _ in 0..n {
                    let at = rng.gen_range(0..=prompt.len());
                    prompt.insert(at, vocab.distractor(rng.gen_range(0..N_DISTRACTORS)));
                }
                examples.push(Example {
                    prompt,
                    answer: e.answer.clone(),
                    negative: e.negative.clone(),
                });
            }
            LabeledBatch {
                spec: spec.clone(),
                examples,
            }
        }
    })
}

// ---------------------------------------------------------------------------
// Curriculum
// ---------------------------------------------------------------------------

/// Weighted mixture of task specs; the batch at step `t` depends only on
/// `(seed, t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curriculum {
    pub specs: Vec<TaskSpec>,
    pub weights: Vec<f64>,
    pub seed: u64,
    pub batch_size: usize,
    /// Fraction of batches relabeled by a symmetry permutation (0 disables).
    pub augment_fraction: f64,
}

impl Curriculum {
    pub fn new(specs: Vec<TaskSpec>, weights: Vec<f64>, seed: u64, batch_size: usize) -> Result<Self> {
        if specs.is_empty() || specs.len() != weights.len() {
            return Err(Error::Config(format!(
                "{} specs with {} weights",
                specs.len(),
                weights.len()
            )));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| *w < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "curriculum weights must be non-negative and sum to 1 (got {total})"
            )));
        }
        for s in &specs {
            s.validate()?;
        }
        Ok(Self {
            specs,
            weights,
            seed,
            batch_size,
            augment_fraction: 0.0,
        })
    }

    pub fn with_augmentation(mut self, fraction: f64) -> Self {
        self.augment_fraction = fraction;
        self
    }

    /// Which spec the batch at `step` draws from.
    pub fn spec_index(&self, step: u64) -> usize {
        let mut rng = seed::rng(self.seed, Stream::Batch, step);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }

    pub fn batch_at(&self, step: u64) -> Result<LabeledBatch> {
        let idx = self.spec_index(step);
        let batch_seed = seed::derive(self.seed, Stream::Batch, step);
        let batch = gen_batch(&self.specs[idx], self.batch_size, batch_seed)?;
        if self.augment_fraction > 0.0 {
            let mut rng = seed::rng(self.seed, Stream::Augment, step);
            if rng.gen::<f64>() < self.augment_fraction {
                return ood_transform(&batch, OodKind::Permute, rng.gen());
            }
        }
        Ok(batch)
    }

    pub fn stream(&self) -> impl Iterator<Item = Result<LabeledBatch>> + '_ {
        (0u64..).map(move |t| self.batch_at(t))
    }
}

/// Fixed evaluation batches: `per_spec` batches for each spec.
pub fn fixed_batches(specs: &[TaskSpec], per_spec: usize, batch_size: usize, seed: u64) -> Result<Vec<LabeledBatch>> {
    let mut out = Vec::with_capacity(specs.len() * per_spec);
    for (i, spec) in specs.iter().enumerate() {
        for b in 0..per_spec {
            let s = seed::derive(seed, Stream::Eval, (i * 10_000 + b) as u64);
            out.push(gen_batch(spec, batch_size, s)?);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Default suites and config files
// ---------------------------------------------------------------------------

/// Base distribution used for pretraining: copy and identity-remap.
pub fn base_specs() -> Vec<TaskSpec> {
    vec![TaskSpec::new(TaskKind::Copy), TaskSpec::new(TaskKind::Remap)]
}

/// Compositional tasks the frozen base never saw.
pub fn compositional_specs() -> Vec<TaskSpec> {
    vec![
        TaskSpec::new(TaskKind::MirrorRemap).with_bijection(1),
        TaskSpec::new(TaskKind::ModularChain).with_depth(2),
        TaskSpec::new(TaskKind::NestedConstraint).with_depth(2),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedSpec {
    #[serde(flatten)]
    pub spec: TaskSpec,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskFile {
    task: Vec<WeightedSpec>,
}

/// Parses `[[task]]` tables from TOML text.
pub fn parse_task_specs(text: &str) -> Result<Vec<WeightedSpec>> {
    let file: TaskFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    for w in &file.task {
        w.spec.validate()?;
    }
    Ok(file.task)
}

pub fn load_task_specs(path: &Path) -> Result<Vec<WeightedSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_task_specs(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::new(32).unwrap()
    }

    #[test]
    fn vocab_partition_is_disjoint() {
        let v = vocab();
        for t in 0..v.size {
            let classes = [
                t == v.sep(),
                (1..=N_MARKERS).contains(&t),
                v.is_content(t),
                v.is_distractor(t),
            ];
            assert_eq!(classes.iter().filter(|&&c| c).count(), 1, "token {t}");
        }
        assert!(Vocab::new(20).is_err());
    }

    #[test]
    fn mirror_layout() {
        let v = vocab();
        let spec = TaskSpec::new(TaskKind::Mirror);
        let prompt = vec![v.content(3), v.content(5), v.content(7)];
        let answer = rule_answer(&spec, &prompt).unwrap();
        assert_eq!(answer, vec![v.content(7), v.content(5), v.content(3)]);
        let e = Example {
            prompt: prompt.clone(),
            answer,
            negative: None,
        };
        let seq = e.sequence(&v, TaskKind::Mirror);
        assert_eq!(&seq[1..4], &prompt[..]);
        assert_eq!(seq[4], v.sep());
        assert_eq!(&seq[5..], &[v.content(7), v.content(5), v.content(3)]);
    }

    #[test]
    fn identity_remap_equals_copy() {
        let copy = gen_batch(&TaskSpec::new(TaskKind::Copy), 16, 3).unwrap();
        let spec = TaskSpec::new(TaskKind::Remap);
        for e in &copy.examples {
            assert_eq!(rule_answer(&spec, &e.prompt).unwrap(), e.answer);
        }
    }

    #[test]
    fn modular_chain_arithmetic() {
        let v = vocab();
        let spec = TaskSpec::new(TaskKind::ModularChain).with_modulus(7).with_depth(3);
        let prompt = vec![v.digit(2), v.op(3), v.op(3), v.op(-1)];
        assert_eq!(rule_answer(&spec, &prompt).unwrap(), vec![v.digit(0)]);
    }

    #[test]
    fn nested_constraint_oracle() {
        let v = vocab();
        let spec = TaskSpec::new(TaskKind::NestedConstraint).with_depth(2);
        let ok = vec![v.bracket(0, true), v.bracket(1, true), v.bracket(1, false), v.bracket(0, false)];
        assert_eq!(rule_answer(&spec, &ok).unwrap(), vec![v.yes()]);
        let bad = vec![v.bracket(0, true), v.bracket(1, true), v.bracket(0, false), v.bracket(1, false)];
        assert_eq!(rule_answer(&spec, &bad).unwrap(), vec![v.no()]);
    }

    #[test]
    fn batches_are_deterministic_and_masked() {
        for spec in base_specs().into_iter().chain(compositional_specs()) {
            let a = gen_batch(&spec, 8, 42).unwrap();
            assert_eq!(a, gen_batch(&spec, 8, 42).unwrap());
            for (e, mask) in a.examples.iter().zip(a.loss_mask()) {
                let answer_positions: Vec<usize> =
                    (e.sep_position()..e.sep_position() + e.answer.len()).collect();
                let masked: Vec<usize> = mask.iter().enumerate().filter(|p| *p.1).map(|p| p.0).collect();
                assert_eq!(masked, answer_positions);
                assert_eq!(rule_answer(&spec, &e.prompt).unwrap(), e.answer);
                assert_ne!(e.negative.as_ref().unwrap(), &e.answer);
            }
        }
    }

    #[test]
    fn nested_constraint_is_roughly_balanced() {
        let spec = TaskSpec::new(TaskKind::NestedConstraint).with_depth(2);
        let b = gen_batch(&spec, 400, 1).unwrap();
        let yes = b.examples.iter().filter(|e| e.answer[0] == vocab().yes()).count();
        assert!((120..=280).contains(&yes), "{yes}");
    }

    #[test]
    fn length_bounds_are_enforced() {
        let spec = TaskSpec::new(TaskKind::Copy).with_lengths(2, 40);
        assert!(matches!(gen_batch(&spec, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn identity_and_inverse_permutations() {
        let b = gen_batch(&TaskSpec::new(TaskKind::Mirror), 8, 9).unwrap();
        let id: Vec<usize> = (0..32).collect();
        assert_eq!(apply_token_map(&b, &id), b);
        let mut rng = seed::rng(5, Stream::Augment, 0);
        let p = symmetry_permutation(&b.spec, &mut rng).unwrap();
        let back = apply_token_map(&apply_token_map(&b, &p), &invert_map(&p));
        assert_eq!(back, b);
    }

    #[test]
    fn transforms_preserve_rules() {
        let mut specs = base_specs();
        specs.extend(compositional_specs());
        specs.push(TaskSpec::new(TaskKind::Mirror));
        specs.push(TaskSpec::new(TaskKind::Remap).with_bijection(4));
        for spec in &specs {
            let b = gen_batch(spec, 16, 11).unwrap();
            for kind in OodKind::ALL {
                for s in 0..3 {
                    let t = ood_transform(&b, kind, s).unwrap();
                    for e in &t.examples {
                        assert_eq!(
                            rule_answer(spec, &e.prompt).unwrap(),
                            e.answer,
                            "{} under {}",
                            spec.label(),
                            kind.name()
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn distractors_leave_targets_unchanged() {
        let b = gen_batch(&TaskSpec::new(TaskKind::Copy), 8, 2).unwrap();
        let t = ood_transform(&b, OodKind::Distractor, 0).unwrap();
        let v = vocab();
        for (x, y) in b.examples.iter().zip(&t.examples) {
            assert_eq!(x.answer, y.answer);
            assert!(y.prompt.iter().any(|&tok| v.is_distractor(tok)));
            assert!(x.prompt.iter().all(|&tok| !v.is_distractor(tok)));
        }
    }

    #[test]
    fn curriculum_weights_and_determinism() {
        let specs = vec![TaskSpec::new(TaskKind::Copy), TaskSpec::new(TaskKind::Mirror)];
        let only_first = Curriculum::new(specs.clone(), vec![1.0, 0.0], 3, 4).unwrap();
        assert!((0..200).all(|t| only_first.spec_index(t) == 0));

        let half = Curriculum::new(specs.clone(), vec![0.5, 0.5], 3, 4).unwrap();
        let a: Vec<_> = half.stream().take(100).map(|b| b.unwrap()).collect();
        let b: Vec<_> = half.stream().take(100).map(|b| b.unwrap()).collect();
        assert_eq!(a, b);

        let firsts = (0..10_000).filter(|&t| half.spec_index(t) == 0).count();
        let frac = firsts as f64 / 10_000.0;
        assert!((frac - 0.5).abs() <= 0.02, "{frac}");

        assert!(Curriculum::new(specs, vec![0.7, 0.7], 0, 4).is_err());
    }

    #[test]
    fn augmentation_relabels_some_batches() {
        let specs = vec![TaskSpec::new(TaskKind::Copy)];
        let plain = Curriculum::new(specs.clone(), vec![1.0], 1, 4).unwrap();
        let aug = plain.clone().with_augmentation(0.5);
        let changed = (0..100)
            .filter(|&t| plain.batch_at(t).unwrap() != aug.batch_at(t).unwrap())
            .count();
        assert!((25..=75).contains(&changed), "{changed}");
    }

    #[test]
    fn spec_file_round_trip() {
        let text = r#"
            [[task]]
            kind = "copy"
            weight = 0.5

            [[task]]
            kind = "modular-chain"
            depth = 3
            modulus = 7
            weight = 0.5
        "#;
        let specs = parse_task_specs(text).unwrap();
        assert_eq!(specs.len(), 2);
        assert_eq!(specs[1].spec.depth, 3);
        assert!(parse_task_specs("[[task]]\nkind = \"copy\"\nbogus = 1\n").is_err());
    }

    #[test]
    fn export_has_one_line_per_example() {
        let b = gen_batch(&TaskSpec::new(TaskKind::Copy), 3, 0).unwrap();
        let text = b.to_lines();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("copy\tbase\tinput: 1 "));
    }
}
