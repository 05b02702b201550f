// SPDX-License-Identifier: MIT OR Apache-2.0

//! Measurements over frozen snapshots: effective rank, library statistics,
//! closed-form compute overhead, and seed-aggregated report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::base_model::{AnswerScore, ToyBaseModel, ToyModelConfig};
use crate::concepts::{pool_segments, ConceptLibrary, LibraryConfig};
use crate::error::{Error, Result};
use crate::evolution::{self, SpawnConfig};
use crate::numerics::{self, Matrix};
use crate::tasks::LabeledBatch;
use crate::training::{augmented_logits, FrozenPass};

// ---------------------------------------------------------------------------
// Effective rank
// ---------------------------------------------------------------------------

/// Uncentered second moment `E[hhᵀ]` of the rows of `samples`.
pub fn second_moment(samples: &Matrix) -> Result<Matrix> {
    if samples.rows() == 0 {
        return Err(Error::Input("second moment of zero samples".into()));
    }
    Ok(numerics::matmul_tn(samples, samples)?.scale(1.0 / samples.rows() as f64))
}

/// `1e-3 · trace(Σ)/d`.
pub fn default_rank_eps(sigma: &Matrix) -> f64 {
    1e-3 * sigma.trace() / sigma.rows().max(1) as f64
}

/// Eigenvalues of `E[hhᵀ]`, largest first.
pub fn spectrum(samples: &Matrix) -> Result<Vec<f64>> {
    Ok(numerics::sym_eig(&second_moment(samples)?)?.eigenvalues)
}

/// Number of second-moment eigenvalues strictly above `eps`.
pub fn effective_rank(samples: &Matrix, eps: f64) -> Result<usize> {
    if samples.rows() < 2 {
        return Err(Error::Input(format!(
            "effective rank needs at least 2 samples, got {}",
            samples.rows()
        )));
    }
    Ok(spectrum(samples)?.iter().filter(|&&l| l > eps).count())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub spectrum_before: Vec<f64>,
    pub spectrum_after: Vec<f64>,
    pub eps: f64,
    pub before: usize,
    pub after: usize,
}

impl RankReport {
    /// Compares two sample sets under one threshold. Without an explicit
    /// `eps` the threshold is taken from the pre-injection covariance, so
    /// both counts use the same cut.
    pub fn measure(before: &Matrix, after: &Matrix, eps: Option<f64>) -> Result<Self> {
        if before.shape() != after.shape() {
            return Err(Error::Shape(format!(
                "rank comparison of {:?} and {:?} samples",
                before.shape(),
                after.shape()
            )));
        }
        if before.rows() < 2 {
            return Err(Error::Input("effective rank needs at least 2 samples".into()));
        }
        let sigma = second_moment(before)?;
        let eps = eps.unwrap_or_else(|| default_rank_eps(&sigma));
        let spectrum_before = numerics::sym_eig(&sigma)?.eigenvalues;
        let spectrum_after = spectrum(after)?;
        let count = |s: &[f64]| s.iter().filter(|&&l| l > eps).count();
        Ok(Self {
            before: count(&spectrum_before),
            after: count(&spectrum_after),
            spectrum_before,
            spectrum_after,
            eps,
        })
    }

    /// The weak inequality `rank(Σ′) ≥ rank(Σ)`.
    pub fn holds(&self) -> bool {
        self.after >= self.before
    }
}

/// Rank of injection-layer states with and without the library, on one
/// cached batch.
pub fn injection_rank_report(lib: &ConceptLibrary, pass: &FrozenPass, eps: Option<f64>) -> Result<RankReport> {
    let after = if lib.is_empty() {
        pass.hidden.clone()
    } else {
        lib.inject_batch(&pass.hidden, &pass.segs)?.0
    };
    RankReport::measure(&pass.hidden, &after, eps)
}

/// Constructed sub-threshold case: states have second moment `a²` along
/// e₀, e₁ and `eps/2` along e₂. A single concept spanning {e₂, e₀} at full
/// gate weight doubles both components, lifting the e₂ eigenvalue to
/// `2·eps` while the zero directions stay zero.
pub fn planted_rank_scenario(d: usize, eps: f64) -> Result<RankReport> {
    if d < 4 || !(eps > 0.0) {
        return Err(Error::Config("planted scenario needs d >= 4 and eps > 0".into()));
    }
    let a = (100.0 * eps).sqrt();
    let b = (0.5 * eps).sqrt();
    // Mutually orthogonal ±1 sign columns keep the second moment diagonal.
    let signs = [[1.0, 1.0, 1.0], [-1.0, 1.0, -1.0], [1.0, -1.0, -1.0], [-1.0, -1.0, 1.0]];
    let h = Matrix::from_fn(4, d, |i, j| match j {
        0 => a * signs[i][0],
        1 => a * signs[i][1],
        2 => b * signs[i][2],
        _ => 0.0,
    });
    let cfg = LibraryConfig {
        d_model: d,
        rank: 2,
        k: 1,
        n_max: 1,
        n_keep: 1,
        gate_hidden: 4,
    };
    let mut lib = ConceptLibrary::new(cfg, 0)?;
    let basis = Matrix::from_fn(d, 2, |i, j| match (i, j) {
        (2, 0) | (0, 1) => 1.0,
        _ => 0.0,
    });
    let head = lib.zero_head();
    let id = lib.add_concept(basis, 0, Vec::new(), 0, 0.1, head)?;
    let after = lib.inject(&h, &[id], &[1.0])?;
    RankReport::measure(&h, &after, Some(eps))
}

// ---------------------------------------------------------------------------
// Library statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryStats {
    pub n: usize,
    pub counts_by_level: BTreeMap<u32, usize>,
    /// Fraction of sequences of each task kind whose top-k contains the concept.
    pub activation_rate: BTreeMap<u64, BTreeMap<String, f64>>,
    /// Mean gate weight per task kind (0 when inactive).
    pub mean_gate: BTreeMap<u64, BTreeMap<String, f64>>,
    /// Task kinds whose mean gate weight reaches the concept's own median.
    pub reuse: BTreeMap<u64, usize>,
    pub mean_reuse: f64,
    pub omega: BTreeMap<u64, f64>,
    pub total_omega: f64,
}

/// Gate statistics of `lib` over cached evaluation batches keyed by task kind.
pub fn library_stats(
    lib: &ConceptLibrary,
    suites: &BTreeMap<String, Vec<FrozenPass>>,
    spawn: &SpawnConfig,
) -> Result<LibraryStats> {
    if suites.len() < 2 {
        return Err(Error::Input(format!(
            "library statistics need at least 2 task kinds, got {}",
            suites.len()
        )));
    }
    let ids = lib.ids();
    // Per concept: gate weight on every sequence, grouped by kind.
    let mut history: BTreeMap<u64, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for (kind, passes) in suites {
        for pass in passes {
            let selections = if lib.is_empty() {
                Vec::new()
            } else {
                lib.select_batch(&pool_segments(&pass.hidden, &pass.segs))?
            };
            for sel in &selections {
                for &id in &ids {
                    let g = sel.ids.iter().position(|&i| i == id).map_or(0.0, |p| sel.weights[p]);
                    history.entry(id).or_default().entry(kind.clone()).or_default().push(g);
                }
            }
        }
    }
    let mut counts_by_level = BTreeMap::new();
    for c in &lib.concepts {
        *counts_by_level.entry(c.level).or_insert(0) += 1;
    }
    let mut activation_rate = BTreeMap::new();
    let mut mean_gate = BTreeMap::new();
    let mut reuse = BTreeMap::new();
    for (&id, by_kind) in &history {
        let mut all: Vec<f64> = by_kind.values().flatten().copied().collect();
        all.sort_by(f64::total_cmp);
        let median = median_sorted(&all);
        let mut rates = BTreeMap::new();
        let mut means = BTreeMap::new();
        let mut kinds = 0;
        for (kind, gs) in by_kind {
            let n = gs.len().max(1) as f64;
            let mean = gs.iter().sum::<f64>() / n;
            rates.insert(kind.clone(), gs.iter().filter(|&&g| g > 0.0).count() as f64 / n);
            means.insert(kind.clone(), mean);
            if mean > 0.0 && mean >= median {
                kinds += 1;
            }
        }
        activation_rate.insert(id, rates);
        mean_gate.insert(id, means);
        reuse.insert(id, kinds);
    }
    let omega = crate::training::concept_costs(lib, spawn)?;
    let total_omega = evolution::library_cost(lib, spawn)?;
    let mean_reuse = if reuse.is_empty() {
        0.0
    } else {
        reuse.values().sum::<usize>() as f64 / reuse.len() as f64
    };
    Ok(LibraryStats {
        n: lib.len(),
        counts_by_level,
        activation_rate,
        mean_gate,
        reuse,
        mean_reuse,
        omega,
        total_omega,
    })
}

fn median_sorted(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

// ---------------------------------------------------------------------------
// Compute overhead
// ---------------------------------------------------------------------------

/// Shape of a decoder-only transformer for FLOP accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopModel {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Key/value heads (grouped-query attention when below `n_heads`).
    pub n_kv_heads: usize,
    pub d_ff: usize,
    /// Weight matrices in the feed-forward block (3 for gated units).
    pub ff_matrices: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
}

impl FlopModel {
    pub fn toy(cfg: &ToyModelConfig) -> Self {
        Self {
            d_model: cfg.d_model,
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
            n_kv_heads: cfg.n_heads,
            d_ff: cfg.d_ff,
            ff_matrices: 2,
            vocab_size: cfg.vocab_size,
            seq_len: cfg.max_seq_len,
        }
    }

    /// Mistral-7B: 32 layers, GQA with 8 KV heads, SwiGLU width 14336.
    pub fn mistral_7b() -> Self {
        Self {
            d_model: 4096,
            n_layers: 32,
            n_heads: 32,
            n_kv_heads: 8,
            d_ff: 14336,
            ff_matrices: 3,
            vocab_size: 32000,
            seq_len: 512,
        }
    }

    /// Forward FLOPs per token (multiply-add = 2), with the causal mean
    /// context `(T+1)/2` in the attention products. Norms, softmax and
    /// activations are lower order and omitted.
    pub fn base_flops_per_token(&self) -> f64 {
        let d = self.d_model as f64;
        let kv = d * self.n_kv_heads as f64 / self.n_heads as f64;
        let ctx = (self.seq_len as f64 + 1.0) / 2.0;
        let proj = 2.0 * (d * d + 2.0 * d * kv + d * d);
        let attn = 2.0 * 2.0 * ctx * d;
        let ff = 2.0 * self.ff_matrices as f64 * d * self.d_ff as f64;
        self.n_layers as f64 * (proj + attn + ff) + 2.0 * d * self.vocab_size as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RceShape {
    pub n_concepts: usize,
    pub rank: usize,
    pub k: usize,
    pub gate_hidden: usize,
}

impl RceShape {
    pub fn of(lib: &ConceptLibrary) -> Self {
        Self {
            n_concepts: lib.len(),
            rank: lib.config.rank,
            k: lib.config.k,
            gate_hidden: lib.config.gate_hidden,
        }
    }
}

/// Added FLOPs per token: mean pooling, the gate (trunk plus one head per
/// concept) amortized over the sequence, and `2·k·(2dr)` for the active
/// projections.
pub fn rce_flops_per_token(m: &FlopModel, s: &RceShape) -> f64 {
    if s.n_concepts == 0 {
        return 0.0;
    }
    let d = m.d_model as f64;
    let h = s.gate_hidden as f64;
    let k = s.k.min(s.n_concepts) as f64;
    let gate = 2.0 * (d * h + h * h) + 2.0 * h * s.n_concepts as f64;
    d + gate / m.seq_len.max(1) as f64 + 2.0 * k * (2.0 * d * s.rank as f64)
}

/// `(base + RCE) / base` FLOPs per token.
pub fn overhead_estimate(m: &FlopModel, s: &RceShape) -> f64 {
    let base = m.base_flops_per_token();
    (base + rce_flops_per_token(m, s)) / base
}

// ---------------------------------------------------------------------------
// Evaluation and report tables
// ---------------------------------------------------------------------------

/// Base and augmented answer metrics on one suite.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteScores {
    pub base: AnswerScore,
    pub augmented: AnswerScore,
}

/// Scores per task label over `batches`.
pub fn evaluate(base: &ToyBaseModel, lib: &ConceptLibrary, batches: &[LabeledBatch]) -> Result<BTreeMap<String, SuiteScores>> {
    let mut out: BTreeMap<String, SuiteScores> = BTreeMap::new();
    for b in batches {
        let pass = FrozenPass::new(base, b)?;
        let (logits, _) = augmented_logits(base, lib, &pass)?;
        let e = out.entry(b.spec.label()).or_default();
        e.base.merge(pass.base_score());
        e.augmented.merge(AnswerScore::from_logits(&logits, &pass.targets));
    }
    Ok(out)
}

/// Sum of scores over suites.
pub fn pooled_scores(scores: &BTreeMap<String, SuiteScores>) -> SuiteScores {
    let mut total = SuiteScores::default();
    for s in scores.values() {
        total.base.merge(s.base);
        total.augmented.merge(s.augmented);
    }
    total
}

/// Mean per-suite accuracy, each suite weighted equally.
pub fn mean_accuracy(scores: &BTreeMap<String, SuiteScores>, augmented: bool) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let sum: f64 = scores
        .values()
        .map(|s| if augmented { s.augmented.accuracy() } else { s.base.accuracy() })
        .sum();
    sum / scores.len() as f64
}

/// Shifted accuracy over standard accuracy; undefined when the standard
/// accuracy is zero.
pub fn retention(standard: &AnswerScore, shifted: &AnswerScore) -> Option<f64> {
    let a = standard.accuracy();
    (a > 0.0).then(|| shifted.accuracy() / a)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (0 for fewer than two values).
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

/// Measured outcome of one train + eval run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub base_loss: f64,
    pub aug_loss: f64,
    pub base_accuracy: f64,
    pub aug_accuracy: f64,
    pub final_n: usize,
    pub spawns_accepted: usize,
    pub merges: usize,
    pub kl_tail: f64,
    pub kl_peak: f64,
    /// Mean augmented accuracy on shifted batches, per transform.
    #[serde(default)]
    pub ood_accuracy: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub accuracy: Summary,
    pub loss: Summary,
    pub final_n: Summary,
}

/// Seed-aggregated rows, one per labeled group of runs.
pub fn ablation_report(groups: &[(String, Vec<RunSummary>)]) -> Vec<ReportRow> {
    groups
        .iter()
        .map(|(label, runs)| {
            let col = |f: fn(&RunSummary) -> f64| Summary::of(&runs.iter().map(f).collect::<Vec<_>>());
            ReportRow {
                label: label.clone(),
                accuracy: col(|r| r.aug_accuracy),
                loss: col(|r| r.aug_loss),
                final_n: col(|r| r.final_n as f64),
            }
        })
        .collect()
}

/// Plain-text table of report rows.
pub fn format_table(header: &str, rows: &[ReportRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<24} {:>17} {:>17} {:>14} {:>5}",
        header, "accuracy", "loss", "final N", "runs"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<24} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4} {:>6.2} ± {:<5.2} {:>5}",
            r.label,
            r.accuracy.mean,
            r.accuracy.std,
            r.loss.mean,
            r.loss.std,
            r.final_n.mean,
            r.final_n.std,
            r.accuracy.n
        );
    }
    s
}
