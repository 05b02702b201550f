// SPDX-License-Identifier: MIT OR Apache-2.0

//! Library evolution: failure scoring, candidate generation, MDL-gated
//! spawning, synergy-driven merging and usage-based pruning.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape};
use crate::concepts::{Concept, ConceptLibrary, GateSelection};
use crate::error::{Error, Result};
use crate::numerics::{self, Matrix};
use crate::optim::clip_global;
use crate::seed::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpawnConfig {
    /// Spawn threshold on the mean failure score.
    pub tau: f64,
    /// Candidates per attempt.
    pub k_s: usize,
    /// Noise scale added to the raw generator output.
    pub sigma: f64,
    /// Stability constant in the failure score.
    pub eps: f64,
    /// MDL weight in the acceptance test.
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Sparse prior activation probability.
    pub prior_pi: f64,
    /// Weight of the optional discriminative bonus (0 disables).
    pub lambda_disc: f64,
    pub generator_hidden: usize,
    /// Step size of the auxiliary generator update on acceptance.
    pub generator_lr: f64,
    pub max_retries: usize,
    /// Measure captured energy in units of the mean per-direction energy
    /// of the batch, so a random rank-r subspace scores about r.
    pub normalize_energy: bool,
}

impl Default for SpawnConfig {
    fn default() -> Self {
        Self {
            tau: 5.0,
            k_s: 4,
            sigma: 0.03,
            eps: 1e-6,
            lambda: 0.5,
            alpha: 2.0,
            beta: 1.0,
            prior_pi: 0.1,
            lambda_disc: 0.0,
            generator_hidden: 512,
            generator_lr: 1e-3,
            max_retries: 5,
            normalize_energy: true,
        }
    }
}

impl SpawnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || self.sigma < 0.0 || !(self.eps > 0.0) {
            return Err(Error::Config("spawn needs tau > 0, sigma >= 0, eps > 0".into()));
        }
        if !(self.prior_pi > 0.0 && self.prior_pi < 1.0) {
            return Err(Error::Config("prior_pi must lie in (0, 1)".into()));
        }
        if self.k_s == 0 || self.generator_hidden == 0 {
            return Err(Error::Config("k_s and generator_hidden must be >= 1".into()));
        }
        if self.lambda < 0.0 || self.alpha < 0.0 || self.beta < 0.0 || self.lambda_disc < 0.0 {
            return Err(Error::Config("MDL weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeConfig {
    /// Steps between merge passes.
    pub interval: u64,
    pub lambda_m: f64,
    pub max_candidates: usize,
    /// Per-step decay of the co-activation average.
    pub coact_decay: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            interval: 200,
            lambda_m: 0.002,
            max_candidates: 12,
            coact_decay: 0.99,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 || self.max_candidates == 0 {
            return Err(Error::Config("merge interval and max_candidates must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.coact_decay) {
            return Err(Error::Config("coact_decay must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Failure score
// ---------------------------------------------------------------------------

/// `F = H / (M + ε)` for one next-token distribution.
pub fn failure_score(logits_last: &[f64], eps: f64) -> Result<f64> {
    let (h, m) = numerics::entropy_and_margin(logits_last)?;
    Ok(h / (m + eps))
}

/// Mean failure score over the last position of each sequence.
pub fn batch_failure(logits: &Matrix, segs: &[std::ops::Range<usize>], eps: f64) -> Result<f64> {
    if segs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for seg in segs {
        total += failure_score(logits.row(seg.end - 1), eps)?;
    }
    Ok(total / segs.len() as f64)
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

/// Three-layer SiLU MLP from a pooled state to a raw d×r basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorNet {
    pub d_model: usize,
    pub rank: usize,
    pub params: BTreeMap<String, Matrix>,
}

const GEN_NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];

impl GeneratorNet {
    pub fn init(d: usize, rank: usize, hidden: usize, seed_value: u64) -> Self {
        let mut rng = seed::rng(seed_value, Stream::Init, 2);
        let mut normal = |rows: usize, cols: usize| {
            let dist = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("std");
            Matrix::from_fn(rows, cols, |_, _| dist.sample(&mut rng))
        };
        let mut params = BTreeMap::new();
        params.insert("w1".to_string(), normal(d, hidden));
        params.insert("b1".to_string(), Matrix::zeros(1, hidden));
        params.insert("w2".to_string(), normal(hidden, hidden));
        params.insert("b2".to_string(), Matrix::zeros(1, hidden));
        params.insert("w3".to_string(), normal(hidden, d * rank));
        params.insert("b3".to_string(), Matrix::zeros(1, d * rank));
        Self {
            d_model: d,
            rank,
            params,
        }
    }

    fn program(&self, tape: &mut Tape, trainable: bool, h_pool: &[f64]) -> Result<(crate::autodiff::Var, Vec<(String, crate::autodiff::Var)>)> {
        let vars: Vec<(String, crate::autodiff::Var)> = GEN_NAMES
            .iter()
            .map(|n| (n.to_string(), tape.leaf(self.params[*n].clone(), trainable)))
            .collect();
        let v = |n: &str| vars.iter().find(|(k, _)| k == n).expect("name").1;
        let x = tape.constant(Matrix::row_vector(h_pool));
        let z = tape.matmul(x, v("w1"))?;
        let z = tape.add_row(z, v("b1"))?;
        let z = tape.silu(z);
        let z = tape.matmul(z, v("w2"))?;
        let z = tape.add_row(z, v("b2"))?;
        let z = tape.silu(z);
        let z = tape.matmul(z, v("w3"))?;
        let out = tape.add_row(z, v("b3"))?;
        Ok((out, vars))
    }

    /// Raw output reshaped row-major into d×r.
    pub fn forward(&self, h_pool: &[f64]) -> Result<Matrix> {
        if h_pool.len() != self.d_model {
            return Err(Error::Shape(format!(
                "generator input of length {}, expected {}",
                h_pool.len(),
                self.d_model
            )));
        }
        let mut tape = Tape::no_grad();
        let (out, _) = self.program(&mut tape, false, h_pool)?;
        let flat = tape.value(out).data().to_vec();
        let raw = Matrix::new(self.d_model, self.rank, flat)?;
        if !raw.is_finite() {
            return Err(Error::Numeric("generator output is not finite".into()));
        }
        Ok(raw)
    }

    /// One clipped gradient step on `mean_t ‖h_t − W Wᵀ h_t‖²` where `W` is
    /// the raw output. Returns the loss before the step.
    pub fn reconstruction_step(&mut self, h_pool: &[f64], hidden: &Matrix, lr: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let (out, vars) = self.program(&mut tape, true, h_pool)?;
        // Reshape the 1×(d·r) output into d×r with per-row slices.
        let rows: Vec<_> = (0..self.d_model)
            .map(|i| tape.slice(out, 0, 1, i * self.rank, (i + 1) * self.rank))
            .collect::<Result<_>>()?;
        let w = tape.concat_rows(&rows)?;
        let h = tape.constant(hidden.clone());
        let proj = tape.matmul(h, w)?;
        let recon = tape.matmul_nt(proj, w)?;
        let resid = tape.sub(h, recon)?;
        let ss = tape.sum_squares(resid);
        let loss = tape.scale(ss, 1.0 / hidden.rows().max(1) as f64);
        let value = tape.scalar(loss);
        let mut grads = tape.backward(loss)?;
        let mut named: BTreeMap<String, Matrix> = vars
            .iter()
            .map(|(n, v)| (n.clone(), grads.take(*v).expect("trainable leaf")))
            .collect();
        if named.values().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite generator gradient".into()));
        }
        clip_global(&mut named, 1.0);
        for (n, g) in named {
            self.params.get_mut(&n).expect("name").axpy(-lr, &g);
        }
        Ok(value)
    }

    pub fn param_set(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (n, m) in &self.params {
            p.insert(format!("generator.{n}"), m.clone(), true);
        }
        p
    }
}

/// `k_s` orthonormal candidates from one raw output with independent noise.
pub fn generate_candidates(
    generator: &GeneratorNet,
    h_pool: &[f64],
    k_s: usize,
    sigma: f64,
    max_retries: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Matrix>> {
    let raw = generator.forward(h_pool)?;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(k_s);
    for _ in 0..k_s {
        let mut attempt = 0;
        loop {
            let noisy = Matrix::from_fn(raw.rows(), raw.cols(), |i, j| {
                raw.get(i, j) + sigma * noise.sample(rng)
            });
            match numerics::householder_qr(&noisy) {
                Ok(q) => {
                    out.push(q);
                    break;
                }
                Err(Error::DegenerateBasis(msg)) => {
                    attempt += 1;
                    if attempt > max_retries {
                        return Err(Error::DegenerateBasis(format!(
                            "spawn failed after {max_retries} retries: {msg}"
                        )));
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

/// Mean over rows of `‖h − BBᵀh‖²`.
pub fn reconstruction_score(basis: &Matrix, hidden: &Matrix) -> Result<f64> {
    let coeff = numerics::matmul(hidden, basis)?;
    let recon = numerics::matmul_nt(&coeff, basis)?;
    Ok(hidden.sub(&recon)?.frobenius_sq() / hidden.rows().max(1) as f64)
}

/// Mean over rows of `‖Bᵀh‖²`, the energy captured by an orthonormal basis.
pub fn captured_energy(basis: &Matrix, hidden: &Matrix) -> Result<f64> {
    let coeff = numerics::matmul(hidden, basis)?;
    Ok(coeff.frobenius_sq() / hidden.rows().max(1) as f64)
}

/// `Ω = α·‖B‖_* + β·KL(Bern(q) ‖ Bern(π))`.
pub fn mdl_cost(basis: &Matrix, q: f64, alpha: f64, beta: f64, prior_pi: f64) -> Result<f64> {
    Ok(alpha * numerics::nuclear_norm(basis)? + beta * numerics::bernoulli_kl(q.clamp(0.0, 1.0), prior_pi))
}

/// Ω of a live concept using its usage average as activation rate.
pub fn concept_cost(c: &Concept, cfg: &SpawnConfig) -> Result<f64> {
    mdl_cost(&c.basis, c.usage_ema, cfg.alpha, cfg.beta, cfg.prior_pi)
}

/// Total Ω over the library.
pub fn library_cost(lib: &ConceptLibrary, cfg: &SpawnConfig) -> Result<f64> {
    lib.concepts.iter().map(|c| concept_cost(c, cfg)).sum()
}

// ---------------------------------------------------------------------------
// Spawning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum SpawnOutcome {
    /// Failure score at or below threshold.
    None,
    /// Library at capacity.
    Suppressed,
    /// No usable candidate after retries.
    Failed { reason: String },
    Rejected { candidate: Matrix, delta_l: f64, omega: f64 },
    Accepted { id: u64, delta_l: f64, omega: f64, generator_loss: f64 },
}

/// Inputs of one spawn attempt.
pub struct SpawnInput<'a> {
    pub failure: f64,
    /// Hidden states at the injection layer (all positions of the batch).
    pub hidden: &'a Matrix,
    /// Batch-mean pooled hidden state.
    pub h_pool: &'a [f64],
    pub step: u64,
    pub seed: u64,
    /// Skip the MDL test and accept any candidate.
    pub bypass_mdl: bool,
    /// Optional discriminative score of a candidate.
    pub disc: Option<&'a dyn Fn(&Matrix) -> Result<f64>>,
}

/// Mean squared norm of the rows of `h` divided by the width.
pub fn direction_energy(h: &Matrix) -> f64 {
    if h.rows() == 0 || h.cols() == 0 {
        return 0.0;
    }
    h.data().iter().map(|x| x * x).sum::<f64>() / (h.rows() * h.cols()) as f64
}

pub fn try_spawn(
    lib: &mut ConceptLibrary,
    generator: &mut GeneratorNet,
    input: &SpawnInput<'_>,
    cfg: &SpawnConfig,
) -> Result<SpawnOutcome> {
    if input.failure <= cfg.tau {
        return Ok(SpawnOutcome::None);
    }
    if lib.len() >= lib.config.n_max {
        return Ok(SpawnOutcome::Suppressed);
    }
    let mut rng = seed::rng(input.seed, Stream::Noise, input.step);
    let candidates = match generate_candidates(generator, input.h_pool, cfg.k_s, cfg.sigma, cfg.max_retries, &mut rng) {
        Ok(c) => c,
        Err(Error::DegenerateBasis(reason)) => return Ok(SpawnOutcome::Failed { reason }),
        Err(e) => return Err(e),
    };
    let mut best = 0;
    let mut best_score = f64::INFINITY;
    for (i, c) in candidates.iter().enumerate() {
        let s = reconstruction_score(c, input.hidden)?;
        if s < best_score {
            best_score = s;
            best = i;
        }
    }
    let candidate = candidates.into_iter().nth(best).expect("k_s >= 1");
    let mut delta_l = captured_energy(&candidate, input.hidden)?;
    if cfg.normalize_energy {
        let unit = direction_energy(input.hidden);
        if unit > 0.0 {
            delta_l /= unit;
        }
    }
    if cfg.lambda_disc > 0.0 {
        if let Some(disc) = input.disc {
            delta_l += cfg.lambda_disc * disc(&candidate)?;
        }
    }
    let omega = mdl_cost(&candidate, cfg.prior_pi, cfg.alpha, cfg.beta, cfg.prior_pi)?;
    if !input.bypass_mdl && delta_l - cfg.lambda * omega <= 0.0 {
        return Ok(SpawnOutcome::Rejected {
            candidate,
            delta_l,
            omega,
        });
    }
    let head = lib.zero_head();
    let id = lib.add_concept(candidate, input.step, Vec::new(), 0, cfg.prior_pi, head)?;
    let generator_loss = generator.reconstruction_step(input.h_pool, input.hidden, cfg.generator_lr)?;
    Ok(SpawnOutcome::Accepted {
        id,
        delta_l,
        omega,
        generator_loss,
    })
}

// ---------------------------------------------------------------------------
// Co-activation
// ---------------------------------------------------------------------------

/// Exponential average of joint top-k membership per concept pair.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoActivation {
    pub ema: BTreeMap<(u64, u64), f64>,
}

impl CoActivation {
    /// One decay step using the fraction of sequences in which both
    /// members of each live pair were active.
    pub fn update(&mut self, ids: &[u64], selections: &[GateSelection], decay: f64) {
        let n = selections.len().max(1) as f64;
        for (a, &i) in ids.iter().enumerate() {
            for &j in &ids[a + 1..] {
                let both = selections
                    .iter()
                    .filter(|s| s.ids.contains(&i) && s.ids.contains(&j))
                    .count() as f64;
                let e = self.ema.entry((i, j)).or_insert(0.0);
                *e = decay * *e + (1.0 - decay) * both / n;
            }
        }
    }

    pub fn get(&self, i: u64, j: u64) -> f64 {
        let key = if i < j { (i, j) } else { (j, i) };
        self.ema.get(&key).copied().unwrap_or(0.0)
    }

    pub fn forget(&mut self, id: u64) {
        self.ema.retain(|&(i, j), _| i != id && j != id);
    }

    /// Up to `n` pairs with positive co-activation, most frequent first.
    pub fn top_pairs(&self, n: usize) -> Vec<(u64, u64)> {
        let mut pairs: Vec<((u64, u64), f64)> = self.ema.iter().filter(|(_, v)| **v > 0.0).map(|(k, v)| (*k, *v)).collect();
        pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        pairs.into_iter().take(n).map(|(k, _)| k).collect()
    }
}

// ---------------------------------------------------------------------------
// Merging
// ---------------------------------------------------------------------------

/// `QR(top-r left singular vectors of [B_i | B_j])`.
pub fn merged_basis(bi: &Matrix, bj: &Matrix, r: usize) -> Result<Matrix> {
    let stacked = bi.hstack(bj)?;
    let u = numerics::truncated_svd_left(&stacked, r)?;
    numerics::householder_qr(&u)
}

/// A library with `i` and `j` replaced by their merge; returns the new id.
pub fn merged_library(lib: &ConceptLibrary, i: u64, j: u64, usage: f64, step: u64) -> Result<(ConceptLibrary, u64)> {
    if i == j {
        return Err(Error::Consistency("cannot merge a concept with itself".into()));
    }
    let ci = lib
        .get(i)
        .ok_or_else(|| Error::Consistency(format!("concept {i} is not live")))?;
    let cj = lib
        .get(j)
        .ok_or_else(|| Error::Consistency(format!("concept {j} is not live")))?;
    let basis = merged_basis(&ci.basis, &cj.basis, lib.config.rank)?;
    let level = 1 + ci.level.max(cj.level);
    let head = lib.gate.heads[&i].add(&lib.gate.heads[&j])?.scale(0.5);
    let mut out = lib.clone();
    out.remove_concept(i)?;
    out.remove_concept(j)?;
    let id = out.add_concept(basis, step, vec![i, j], level, usage, head)?;
    Ok((out, id))
}

/// Replaces `i` and `j` by their merge in place.
pub fn merge_concepts(lib: &mut ConceptLibrary, i: u64, j: u64, usage: f64, step: u64) -> Result<u64> {
    let (merged, id) = merged_library(lib, i, j, usage, step)?;
    *lib = merged;
    Ok(id)
}

/// `Syn = L(merged library) − L(library)` on the same evaluation batch.
pub fn synergy<F>(lib: &ConceptLibrary, i: u64, j: u64, usage: f64, step: u64, loss: &F) -> Result<f64>
where
    F: Fn(&ConceptLibrary) -> Result<f64>,
{
    let (merged, _) = merged_library(lib, i, j, usage, step)?;
    Ok(loss(&merged)? - loss(lib)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub parents: (u64, u64),
    pub new_id: u64,
    pub synergy: f64,
    /// `Ω(C_ij) − Ω(C_i) − Ω(C_j)`.
    pub delta_omega: f64,
    pub level: u32,
    /// Whether the merged loss also beats removing either parent alone.
    pub joint_beats_parts: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeCandidate {
    pub parents: (u64, u64),
    pub synergy: f64,
    pub delta_omega: f64,
    pub qualifies: bool,
    pub joint_beats_parts: bool,
}

/// Activation rate assigned to a merge of `i` and `j`: the union of their
/// usage averages.
pub fn merged_usage(lib: &ConceptLibrary, coact: &CoActivation, i: u64, j: u64) -> f64 {
    let ui = lib.get(i).map_or(0.0, |c| c.usage_ema);
    let uj = lib.get(j).map_or(0.0, |c| c.usage_ema);
    (ui + uj - coact.get(i, j)).clamp(0.0, 1.0)
}

/// Evaluates the top co-activated pairs and executes qualifying merges
/// greedily in ascending synergy.
pub fn merge_pass<F>(
    lib: &mut ConceptLibrary,
    coact: &mut CoActivation,
    loss: &F,
    merge_cfg: &MergeConfig,
    spawn_cfg: &SpawnConfig,
    step: u64,
) -> Result<(Vec<MergeRecord>, Vec<MergeCandidate>)>
where
    F: Fn(&ConceptLibrary) -> Result<f64>,
{
    if lib.len() < 2 {
        return Ok((Vec::new(), Vec::new()));
    }
    let base_loss = loss(lib)?;
    let mut candidates = Vec::new();
    for (i, j) in coact.top_pairs(merge_cfg.max_candidates) {
        if lib.get(i).is_none() || lib.get(j).is_none() {
            continue;
        }
        let usage = merged_usage(lib, coact, i, j);
        let (merged, new_id) = match merged_library(lib, i, j, usage, step) {
            Ok(m) => m,
            Err(Error::DegenerateBasis(_)) | Err(Error::Numeric(_)) => continue,
            Err(e) => return Err(e),
        };
        let merged_loss = loss(&merged)?;
        let syn = merged_loss - base_loss;
        let omega_ij = concept_cost(merged.get(new_id).expect("merged"), spawn_cfg)?;
        let omega_i = concept_cost(lib.get(i).expect("live"), spawn_cfg)?;
        let omega_j = concept_cost(lib.get(j).expect("live"), spawn_cfg)?;
        let delta_omega = omega_ij - omega_i - omega_j;
        let mut without_i = lib.clone();
        without_i.remove_concept(i)?;
        let mut without_j = lib.clone();
        without_j.remove_concept(j)?;
        let joint_beats_parts = merged_loss < loss(&without_i)?.min(loss(&without_j)?);
        candidates.push(MergeCandidate {
            parents: (i, j),
            synergy: syn,
            delta_omega,
            qualifies: syn < -merge_cfg.lambda_m * delta_omega,
            joint_beats_parts,
        });
    }
    let mut order: Vec<&MergeCandidate> = candidates.iter().filter(|c| c.qualifies).collect();
    order.sort_by(|a, b| a.synergy.total_cmp(&b.synergy).then(a.parents.cmp(&b.parents)));
    let mut consumed: Vec<u64> = Vec::new();
    let mut executed = Vec::new();
    for c in order {
        let (i, j) = c.parents;
        if consumed.contains(&i) || consumed.contains(&j) {
            continue;
        }
        let usage = merged_usage(lib, coact, i, j);
        let level = 1 + lib.get(i).expect("live").level.max(lib.get(j).expect("live").level);
        let new_id = merge_concepts(lib, i, j, usage, step)?;
        coact.forget(i);
        coact.forget(j);
        consumed.extend([i, j]);
        executed.push(MergeRecord {
            parents: (i, j),
            new_id,
            synergy: c.synergy,
            delta_omega: c.delta_omega,
            level,
            joint_beats_parts: c.joint_beats_parts,
        });
    }
    Ok((executed, candidates))
}

// ---------------------------------------------------------------------------
// Pruning
// ---------------------------------------------------------------------------

/// Removes lowest-usage concepts (older first on ties) until at most
/// `n_keep` remain. Returns `(id, usage)` of each removed concept.
pub fn prune(lib: &mut ConceptLibrary, coact: &mut CoActivation, n_keep: usize) -> Result<Vec<(u64, f64)>> {
    if lib.len() <= n_keep {
        return Ok(Vec::new());
    }
    let mut order: Vec<(f64, u64, u64)> = lib
        .concepts
        .iter()
        .map(|c| (c.usage_ema, c.created_step, c.id))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let excess = lib.len() - n_keep;
    let mut removed = Vec::with_capacity(excess);
    for &(usage, _, id) in order.iter().take(excess) {
        lib.remove_concept(id)?;
        coact.forget(id);
        removed.push((id, usage));
    }
    Ok(removed)
}

// ---------------------------------------------------------------------------
// Event log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Spawn {
        step: u64,
        failure: f64,
        outcome: String,
        id: Option<u64>,
        delta_l: Option<f64>,
        omega: Option<f64>,
        size_after: usize,
    },
    Merge {
        step: u64,
        parents: (u64, u64),
        new_id: u64,
        synergy: f64,
        delta_omega: f64,
        level: u32,
        joint_beats_parts: bool,
        size_after: usize,
    },
    MergeCandidates {
        step: u64,
        evaluated: usize,
        qualifying: usize,
    },
    Prune {
        step: u64,
        removed: Vec<(u64, f64)>,
        size_after: usize,
    },
    Reorthogonalize {
        step: u64,
        ids: Vec<u64>,
    },
    SkippedStep {
        step: u64,
        reason: String,
    },
}

impl Event {
    pub fn step(&self) -> u64 {
        match self {
            Event::Spawn { step, .. }
            | Event::Merge { step, .. }
            | Event::MergeCandidates { step, .. }
            | Event::Prune { step, .. }
            | Event::Reorthogonalize { step, .. }
            | Event::SkippedStep { step, .. } => *step,
        }
    }

    /// Library size recorded after the event, for events that change it.
    pub fn size_after(&self) -> Option<usize> {
        match self {
            Event::Spawn { size_after, .. } | Event::Merge { size_after, .. } | Event::Prune { size_after, .. } => Some(*size_after),
            _ => None,
        }
    }
}

pub fn spawn_event(step: u64, failure: f64, outcome: &SpawnOutcome, size_after: usize) -> Option<Event> {
    let (name, id, dl, om) = match outcome {
        SpawnOutcome::None => return None,
        SpawnOutcome::Suppressed => ("suppressed", None, None, None),
        SpawnOutcome::Failed { .. } => ("failed", None, None, None),
        SpawnOutcome::Rejected { delta_l, omega, .. } => ("rejected", None, Some(*delta_l), Some(*omega)),
        SpawnOutcome::Accepted { id, delta_l, omega, .. } => ("accepted", Some(*id), Some(*delta_l), Some(*omega)),
    };
    Some(Event::Spawn {
        step,
        failure,
        outcome: name.to_string(),
        id,
        delta_l: dl,
        omega: om,
        size_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::LibraryConfig;
    use rand::{Rng, SeedableRng};

    fn rand_matrix(rows: usize, cols: usize, seed_value: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_value);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn basis(d: usize, r: usize, seed_value: u64) -> Matrix {
        numerics::householder_qr(&rand_matrix(d, r, seed_value)).unwrap()
    }

    fn small_lib() -> ConceptLibrary {
        ConceptLibrary::new(
            LibraryConfig {
                d_model: 8,
                rank: 2,
                k: 2,
                n_max: 6,
                n_keep: 4,
                gate_hidden: 4,
            },
            0,
        )
        .unwrap()
    }

    #[test]
    fn failure_score_examples() {
        let uniform = failure_score(&[0.0; 4], 1e-6).unwrap();
        assert!((uniform - 4f64.ln() / 1e-6).abs() / uniform < 1e-9);
        assert!(failure_score(&[50.0, 0.0, 0.0], 1e-6).unwrap() <= 1e-9);
        let logits: Vec<f64> = [0.7f64, 0.2, 0.1].iter().map(|p| p.ln()).collect();
        let f = failure_score(&logits, 1e-6).unwrap();
        assert!((f - 0.801819 / 0.500001).abs() < 1e-5, "{f}");
    }

    #[test]
    fn candidates_are_orthonormal_and_noise_dependent() {
        let g = GeneratorNet::init(8, 2, 16, 0);
        let h = vec![0.3; 8];
        let mut rng = seed::rng(1, Stream::Noise, 0);
        let same = generate_candidates(&g, &h, 4, 0.0, 5, &mut rng).unwrap();
        assert!(same.windows(2).all(|w| w[0] == w[1]));
        let noisy = generate_candidates(&g, &h, 4, 0.03, 5, &mut rng).unwrap();
        for c in &noisy {
            assert!(c.orthonormality_defect() <= 1e-10);
        }
        for a in 0..4 {
            for b in a + 1..4 {
                assert!(numerics::max_principal_angle(&noisy[a], &noisy[b]).unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn degenerate_generator_signals_failure() {
        let mut g = GeneratorNet::init(8, 2, 16, 0);
        for m in g.params.values_mut() {
            *m = Matrix::zeros(m.rows(), m.cols());
        }
        let mut rng = seed::rng(1, Stream::Noise, 0);
        assert!(matches!(
            generate_candidates(&g, &[0.0; 8], 2, 0.0, 5, &mut rng),
            Err(Error::DegenerateBasis(_))
        ));
    }

    #[test]
    fn reconstruction_examples() {
        let b = basis(8, 2, 3);
        let inside = numerics::matmul_nt(&rand_matrix(5, 2, 4), &b).unwrap();
        assert!(reconstruction_score(&b, &inside).unwrap() < 1e-20);
        let h = rand_matrix(5, 8, 5);
        let proj = numerics::matmul_nt(&numerics::matmul(&h, &b).unwrap(), &b).unwrap();
        let perp = h.sub(&proj).unwrap();
        let mean_sq = perp.frobenius_sq() / 5.0;
        assert!((reconstruction_score(&b, &perp).unwrap() - mean_sq).abs() < 1e-12);
        // Dense projector oracle.
        let mut oracle = 0.0;
        for t in 0..5 {
            for a in 0..8 {
                let mut r = h.get(t, a);
                for c in 0..8 {
                    let pac: f64 = (0..2).map(|q| b.get(a, q) * b.get(c, q)).sum();
                    r -= pac * h.get(t, c);
                }
                oracle += r * r;
            }
        }
        assert!((reconstruction_score(&b, &h).unwrap() - oracle / 5.0).abs() < 1e-10);
        let total = h.frobenius_sq() / 5.0;
        assert!((captured_energy(&b, &h).unwrap() + reconstruction_score(&b, &h).unwrap() - total).abs() < 1e-10);
    }

    #[test]
    fn mdl_examples() {
        let b = basis(32, 16, 1);
        assert!((mdl_cost(&b, 0.1, 1.0, 7.0, 0.1).unwrap() - 16.0).abs() < 1e-10);
        assert!((mdl_cost(&b, 0.3, 1.0, 0.0, 0.1).unwrap() - 16.0).abs() < 1e-10);
        let expect = 0.5 * 5f64.ln() + 0.5 * (0.5f64 / 0.9).ln();
        assert!((mdl_cost(&b, 0.5, 0.0, 1.0, 0.1).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.510826).abs() < 1e-6);
    }

    fn planted(d: usize, r: usize, n: usize) -> (Matrix, Matrix) {
        let b = basis(d, r, 11);
        let h = numerics::matmul_nt(&rand_matrix(n, r, 12).scale(3.0), &b).unwrap();
        (b, h)
    }

    #[test]
    fn spawn_threshold_and_boundary() {
        let mut lib = small_lib();
        let mut g = GeneratorNet::init(8, 2, 16, 0);
        let (_, h) = planted(8, 2, 20);
        let pool = h.mean_rows();
        let cfg = SpawnConfig {
            tau: 5.0,
            generator_hidden: 16,
            ..SpawnConfig::default()
        };
        let input = SpawnInput {
            failure: 1.0,
            hidden: &h,
            h_pool: &pool,
            step: 0,
            seed: 0,
            bypass_mdl: false,
            disc: None,
        };
        assert_eq!(try_spawn(&mut lib, &mut g, &input, &cfg).unwrap(), SpawnOutcome::None);
        assert!(lib.is_empty());
        // ΔL = 0.1, λ = 0.5, Ω = 0.3: 0.1 − 0.15 < 0.
        assert!(0.1 - 0.5 * 0.3 <= 0.0);
    }

    #[test]
    fn planted_subspace_is_accepted_and_beats_existing() {
        let mut lib = small_lib();
        let (b, h) = planted(8, 2, 30);
        // An existing concept orthogonal to the planted span.
        let raw = rand_matrix(8, 2, 13);
        let proj = numerics::matmul(&b, &numerics::matmul_tn(&b, &raw).unwrap()).unwrap();
        let off = numerics::householder_qr(&raw.sub(&proj).unwrap()).unwrap();
        lib.add_concept(off.clone(), 0, vec![], 0, 0.1, lib.zero_head()).unwrap();
        // Generator constructed to emit the planted basis.
        let mut g = GeneratorNet::init(8, 2, 16, 0);
        for n in ["w1", "w2", "w3"] {
            let m = &g.params[n];
            let z = Matrix::zeros(m.rows(), m.cols());
            g.params.insert(n.to_string(), z);
        }
        g.params.insert("b3".to_string(), Matrix::row_vector(b.data()));
        let pool = h.mean_rows();
        let cfg = SpawnConfig {
            tau: 0.5,
            alpha: 0.1,
            generator_hidden: 16,
            ..SpawnConfig::default()
        };
        let input = SpawnInput {
            failure: 1.0,
            hidden: &h,
            h_pool: &pool,
            step: 3,
            seed: 0,
            bypass_mdl: false,
            disc: None,
        };
        let out = try_spawn(&mut lib, &mut g, &input, &cfg).unwrap();
        let SpawnOutcome::Accepted { id, .. } = out else {
            panic!("expected acceptance, got {out:?}");
        };
        let new = lib.get(id).unwrap();
        assert_eq!(new.level, 0);
        assert!(new.lineage.is_empty());
        assert_eq!(new.usage_ema, 0.1);
        assert!(lib.gate.heads[&id].data().iter().all(|&x| x == 0.0));
        let score_new = reconstruction_score(&new.basis, &h).unwrap();
        assert!(score_new < reconstruction_score(&off, &h).unwrap());
    }

    #[test]
    fn mdl_rejects_and_bypass_accepts() {
        let (_, h) = planted(8, 2, 10);
        let pool = h.mean_rows();
        let cfg = SpawnConfig {
            tau: 0.5,
            alpha: 1e6,
            generator_hidden: 16,
            ..SpawnConfig::default()
        };
        let mut lib = small_lib();
        let mut g = GeneratorNet::init(8, 2, 16, 0);
        let mut input = SpawnInput {
            failure: 1.0,
            hidden: &h,
            h_pool: &pool,
            step: 0,
            seed: 0,
            bypass_mdl: false,
            disc: None,
        };
        assert!(matches!(try_spawn(&mut lib, &mut g, &input, &cfg).unwrap(), SpawnOutcome::Rejected { .. }));
        input.bypass_mdl = true;
        assert!(matches!(try_spawn(&mut lib, &mut g, &input, &cfg).unwrap(), SpawnOutcome::Accepted { .. }));
    }

    #[test]
    fn capacity_suppresses_spawn() {
        let mut lib = small_lib();
        for s in 0..6 {
            lib.add_concept(basis(8, 2, s), 0, vec![], 0, 0.1, lib.zero_head()).unwrap();
        }
        let (_, h) = planted(8, 2, 10);
        let pool = h.mean_rows();
        let mut g = GeneratorNet::init(8, 2, 16, 0);
        let input = SpawnInput {
            failure: 100.0,
            hidden: &h,
            h_pool: &pool,
            step: 0,
            seed: 0,
            bypass_mdl: true,
            disc: None,
        };
        assert_eq!(try_spawn(&mut lib, &mut g, &input, &SpawnConfig::default()).unwrap(), SpawnOutcome::Suppressed);
    }

    #[test]
    fn merge_geometry() {
        let b = basis(8, 2, 1);
        let m = merged_basis(&b, &b, 2).unwrap();
        assert!(numerics::max_principal_angle(&m, &b).unwrap() <= 1e-8);

        let e = |cols: &[usize]| Matrix::from_fn(8, 2, |i, j| f64::from(u8::from(i == cols[j])));
        let (bi, bj) = (e(&[0, 1]), e(&[2, 3]));
        let m1 = merged_basis(&bi, &bj, 2).unwrap();
        assert_eq!(m1, merged_basis(&bi, &bj, 2).unwrap());
        for i in 4..8 {
            assert!(m1.row(i).iter().all(|x| x.abs() < 1e-12));
        }

        for s in 0..5 {
            let (bi, bj) = (basis(8, 2, 100 + s), basis(8, 2, 200 + s));
            let m = merged_basis(&bi, &bj, 2).unwrap();
            let gram = numerics::matmul_nt(&bi, &bi).unwrap().add(&numerics::matmul_nt(&bj, &bj).unwrap()).unwrap();
            let eig = numerics::sym_eig(&gram).unwrap();
            let top = eig.eigenvectors.slice(0, 8, 0, 2);
            assert!(numerics::max_principal_angle(&m, &top).unwrap() <= 1e-8);
        }
    }

    #[test]
    fn merge_bookkeeping() {
        let mut lib = small_lib();
        let a = lib.add_concept(basis(8, 2, 1), 0, vec![], 0, 0.2, Matrix::row_vector(&[1.0, 0.0, 0.0, 0.0])).unwrap();
        let b = lib.add_concept(basis(8, 2, 2), 0, vec![], 1, 0.2, Matrix::row_vector(&[0.0, 1.0, 0.0, 0.0])).unwrap();
        let id = merge_concepts(&mut lib, a, b, 0.3, 5).unwrap();
        assert_eq!(lib.len(), 1);
        let c = lib.get(id).unwrap();
        assert_eq!(c.level, 2);
        assert_eq!(c.lineage, vec![a, b]);
        assert_eq!(lib.gate.heads[&id], Matrix::row_vector(&[0.5, 0.5, 0.0, 0.0]));
        assert!(merge_concepts(&mut lib, id, id, 0.1, 6).is_err());
    }

    #[test]
    fn merge_pass_is_greedy_over_shared_members() {
        let mut lib = small_lib();
        for s in 0..3 {
            lib.add_concept(basis(8, 2, s), 0, vec![], 0, 0.1, lib.zero_head()).unwrap();
        }
        let mut coact = CoActivation::default();
        coact.ema.insert((0, 1), 0.5);
        coact.ema.insert((1, 2), 0.4);
        // Loss favors removing concept 0 most strongly.
        let loss = |l: &ConceptLibrary| -> Result<f64> {
            Ok(if l.get(0).is_none() { 1.0 } else if l.get(2).is_none() { 2.0 } else { 3.0 })
        };
        let (done, cands) = merge_pass(&mut lib, &mut coact, &loss, &MergeConfig::default(), &SpawnConfig::default(), 10).unwrap();
        assert_eq!(cands.len(), 2);
        assert!(cands.iter().all(|c| c.qualifies));
        assert_eq!(done.len(), 1);
        assert_eq!(done[0].parents, (0, 1));
        assert_eq!(lib.len(), 2);
        assert!(lib.get(2).is_some());
    }

    #[test]
    fn merge_pass_without_qualifiers_is_noop() {
        let mut lib = small_lib();
        for s in 0..2 {
            lib.add_concept(basis(8, 2, s), 0, vec![], 0, 0.1, lib.zero_head()).unwrap();
        }
        let mut coact = CoActivation::default();
        coact.ema.insert((0, 1), 0.5);
        let before = lib.clone();
        let loss = |l: &ConceptLibrary| -> Result<f64> { Ok(10.0 - l.len() as f64) };
        let (done, _) = merge_pass(&mut lib, &mut coact, &loss, &MergeConfig::default(), &SpawnConfig::default(), 1).unwrap();
        assert!(done.is_empty());
        assert_eq!(lib, before);
    }

    #[test]
    fn prune_examples() {
        let mut lib = small_lib();
        let mut coact = CoActivation::default();
        for s in 0..4 {
            lib.add_concept(basis(8, 2, s), s, vec![], 0, 0.5, lib.zero_head()).unwrap();
        }
        assert!(prune(&mut lib, &mut coact, 4).unwrap().is_empty());
        lib.add_concept(basis(8, 2, 9), 9, vec![], 0, 0.5, lib.zero_head()).unwrap();
        lib.get_mut(2).unwrap().usage_ema = 0.0;
        assert_eq!(prune(&mut lib, &mut coact, 4).unwrap(), vec![(2, 0.0)]);

        let mut lib = small_lib();
        for s in 0..6 {
            lib.add_concept(basis(8, 2, s), s, vec![], 0, 0.3, lib.zero_head()).unwrap();
        }
        let removed: Vec<u64> = prune(&mut lib, &mut coact, 4).unwrap().into_iter().map(|x| x.0).collect();
        assert_eq!(removed, vec![0, 1]);
        assert_eq!(lib.gate.heads.len(), 4);
    }

    #[test]
    fn coactivation_ranking() {
        let mut c = CoActivation::default();
        let sel = |ids: &[u64]| GateSelection {
            ids: ids.to_vec(),
            weights: vec![0.5; ids.len()],
        };
        c.update(&[0, 1, 2], &[sel(&[0, 1]), sel(&[0, 1]), sel(&[1, 2])], 0.5);
        assert!((c.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((c.get(2, 1) - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(c.top_pairs(5), vec![(0, 1), (1, 2)]);
        c.forget(1);
        assert!(c.top_pairs(5).is_empty());
    }

    #[test]
    fn generator_step_reduces_reconstruction() {
        let mut g = GeneratorNet::init(8, 2, 16, 0);
        let (_, h) = planted(8, 2, 20);
        let pool = h.mean_rows();
        let l0 = g.reconstruction_step(&pool, &h, 1e-3).unwrap();
        let l1 = g.reconstruction_step(&pool, &h, 1e-3).unwrap();
        assert!(l1 < l0);
    }
}
