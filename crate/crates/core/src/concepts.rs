// SPDX-License-Identifier: MIT OR Apache-2.0

//! Concept library: low-rank subspaces, top-k gating, residual injection
//! and the library regularizers.

use std::collections::BTreeMap;
use std::ops::Range;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::{self, Matrix};
use crate::seed::{self, Stream};

/// Drift threshold on `‖BᵀB − I‖_F` that triggers re-orthogonalization.
pub const REORTH_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub id: u64,
    /// d×r with orthonormal columns.
    pub basis: Matrix,
    pub usage_ema: f64,
    pub created_step: u64,
    /// Parent ids; empty for spawned concepts.
    pub lineage: Vec<u64>,
    pub level: u32,
}

impl Concept {
    pub fn rank(&self) -> usize {
        self.basis.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LibraryConfig {
    pub d_model: usize,
    pub rank: usize,
    /// Active-set size.
    pub k: usize,
    pub n_max: usize,
    /// Prune watermark.
    pub n_keep: usize,
    pub gate_hidden: usize,
}

impl Default for LibraryConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            rank: 4,
            k: 2,
            n_max: 16,
            n_keep: 12,
            gate_hidden: 32,
        }
    }
}

impl LibraryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.rank > self.d_model {
            return Err(Error::Config(format!(
                "concept rank {} outside 1..={}",
                self.rank, self.d_model
            )));
        }
        if self.k == 0 || self.gate_hidden == 0 {
            return Err(Error::Config("k and gate_hidden must be >= 1".into()));
        }
        if self.n_keep == 0 || self.n_keep > self.n_max {
            return Err(Error::Config(format!(
                "need 1 <= n_keep ({}) <= n_max ({})",
                self.n_keep, self.n_max
            )));
        }
        Ok(())
    }
}

/// Gate: SiLU trunk over the pooled state, one score head per concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateNet {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    /// One 1×H row per live concept id.
    pub heads: BTreeMap<u64, Matrix>,
}

impl GateNet {
    pub fn init(d: usize, hidden: usize, seed_value: u64) -> Self {
        let mut rng = seed::rng(seed_value, Stream::Init, 1);
        let n1 = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("std");
        let n2 = Normal::new(0.0, 1.0 / (hidden as f64).sqrt()).expect("std");
        Self {
            w1: Matrix::from_fn(d, hidden, |_, _| n1.sample(&mut rng)),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::from_fn(hidden, hidden, |_, _| n2.sample(&mut rng)),
            b2: Matrix::zeros(1, hidden),
            heads: BTreeMap::new(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b1.cols()
    }
}

/// Active set and renormalized weights for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSelection {
    pub ids: Vec<u64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptLibrary {
    pub config: LibraryConfig,
    /// Ordered by id.
    pub concepts: Vec<Concept>,
    pub gate: GateNet,
    pub next_id: u64,
}

/// Library parameters placed on a tape.
#[derive(Debug, Clone)]
pub struct LibraryVars {
    pub bases: Vec<Var>,
    pub heads: Vec<Var>,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Gate output for a batch: score matrix plus per-sequence active sets.
#[derive(Debug, Clone)]
pub struct Routing {
    /// n_seq × N scores (absent for an empty library).
    pub scores: Option<Var>,
    /// Per sequence: library indices of the active set and their 1×|A|
    /// weight row.
    pub active: Vec<(Vec<usize>, Option<Var>)>,
    pub selections: Vec<GateSelection>,
}

pub fn basis_param(id: u64) -> String {
    format!("concept.{id:08}.basis")
}

pub fn head_param(id: u64) -> String {
    format!("gate.head.{id:08}")
}

/// Indices of the `k` largest scores; equal scores prefer the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k.min(scores.len()));
    idx.sort_unstable();
    idx
}

impl ConceptLibrary {
    pub fn new(config: LibraryConfig, seed_value: u64) -> Result<Self> {
        config.validate()?;
        let gate = GateNet::init(config.d_model, config.gate_hidden, seed_value);
        Ok(Self {
            config,
            concepts: Vec::new(),
            gate,
            next_id: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.concepts.iter().map(|c| c.id).collect()
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.concepts.binary_search_by_key(&id, |c| c.id).ok()
    }

    pub fn get(&self, id: u64) -> Option<&Concept> {
        self.index_of(id).map(|i| &self.concepts[i])
    }

    pub fn get_mut(&mut self, id: u64) -> Option<&mut Concept> {
        self.index_of(id).map(move |i| &mut self.concepts[i])
    }

    /// Adds a concept with a fresh id and the given gate head.
    pub fn add_concept(
        &mut self,
        basis: Matrix,
        created_step: u64,
        lineage: Vec<u64>,
        level: u32,
        usage_ema: f64,
        head: Matrix,
    ) -> Result<u64> {
        if self.len() >= self.config.n_max {
            return Err(Error::State(format!(
                "library at capacity ({})",
                self.config.n_max
            )));
        }
        if basis.shape() != (self.config.d_model, self.config.rank) {
            return Err(Error::Shape(format!(
                "basis {:?}, expected {}x{}",
                basis.shape(),
                self.config.d_model,
                self.config.rank
            )));
        }
        if basis.orthonormality_defect() > 1e-6 {
            return Err(Error::DegenerateBasis("basis columns are not orthonormal".into()));
        }
        if head.shape() != (1, self.gate.hidden()) {
            return Err(Error::Shape("gate head has wrong width".into()));
        }
        let id = self.next_id;
        self.next_id += 1;
        self.concepts.push(Concept {
            id,
            basis,
            usage_ema: usage_ema.clamp(0.0, 1.0),
            created_step,
            lineage,
            level,
        });
        self.gate.heads.insert(id, head);
        Ok(id)
    }

    pub fn remove_concept(&mut self, id: u64) -> Result<Concept> {
        let i = self
            .index_of(id)
            .ok_or_else(|| Error::Consistency(format!("concept {id} is not live")))?;
        self.gate.heads.remove(&id);
        Ok(self.concepts.remove(i))
    }

    pub fn zero_head(&self) -> Matrix {
        Matrix::zeros(1, self.gate.hidden())
    }

    /// Re-orthogonalizes drifted bases; returns the affected ids.
    pub fn reorthogonalize(&mut self) -> Result<Vec<u64>> {
        let mut fixed = Vec::new();
        for c in &mut self.concepts {
            if c.basis.orthonormality_defect() > REORTH_THRESHOLD {
                c.basis = numerics::householder_qr(&c.basis)?;
                fixed.push(c.id);
            }
        }
        Ok(fixed)
    }

    // -----------------------------------------------------------------------
    // Parameters
    // -----------------------------------------------------------------------

    /// Trainable parameters keyed by stable names.
    pub fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for c in &self.concepts {
            p.insert(basis_param(c.id), c.basis.clone(), true);
            p.insert(head_param(c.id), self.gate.heads[&c.id].clone(), true);
        }
        p.insert("gate.w1", self.gate.w1.clone(), true);
        p.insert("gate.b1", self.gate.b1.clone(), true);
        p.insert("gate.w2", self.gate.w2.clone(), true);
        p.insert("gate.b2", self.gate.b2.clone(), true);
        p
    }

    /// Writes values from `params` back into the library.
    pub fn set_params(&mut self, params: &ParamSet) -> Result<()> {
        let take = |name: &str| -> Result<Matrix> {
            params
                .get(name)
                .map(|p| p.value.clone())
                .ok_or_else(|| Error::Consistency(format!("missing library parameter `{name}`")))
        };
        for i in 0..self.concepts.len() {
            let id = self.concepts[i].id;
            self.concepts[i].basis = take(&basis_param(id))?;
            self.gate.heads.insert(id, take(&head_param(id))?);
        }
        self.gate.w1 = take("gate.w1")?;
        self.gate.b1 = take("gate.b1")?;
        self.gate.w2 = take("gate.w2")?;
        self.gate.b2 = take("gate.b2")?;
        Ok(())
    }

    /// Places the library on `tape`; `names` pairs each var with its
    /// parameter name.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> (LibraryVars, Vec<(String, Var)>) {
        let mut names = Vec::new();
        let mut leaf = |tape: &mut Tape, name: String, m: &Matrix| {
            let v = tape.leaf(m.clone(), trainable);
            names.push((name, v));
            v
        };
        let bases = self
            .concepts
            .iter()
            .map(|c| leaf(tape, basis_param(c.id), &c.basis))
            .collect();
        let heads = self
            .concepts
            .iter()
            .map(|c| leaf(tape, head_param(c.id), &self.gate.heads[&c.id]))
            .collect();
        let w1 = leaf(tape, "gate.w1".into(), &self.gate.w1);
        let b1 = leaf(tape, "gate.b1".into(), &self.gate.b1);
        let w2 = leaf(tape, "gate.w2".into(), &self.gate.w2);
        let b2 = leaf(tape, "gate.b2".into(), &self.gate.b2);
        (
            LibraryVars {
                bases,
                heads,
                w1,
                b1,
                w2,
                b2,
            },
            names,
        )
    }

    /// Library vars looked up by parameter name among already placed leaves.
    pub fn vars_from(&self, named: &BTreeMap<String, Var>) -> Result<LibraryVars> {
        let get = |name: &str| -> Result<Var> {
            named
                .get(name)
                .copied()
                .ok_or_else(|| Error::Consistency(format!("missing library parameter `{name}`")))
        };
        Ok(LibraryVars {
            bases: self.concepts.iter().map(|c| get(&basis_param(c.id))).collect::<Result<_>>()?,
            heads: self.concepts.iter().map(|c| get(&head_param(c.id))).collect::<Result<_>>()?,
            w1: get("gate.w1")?,
            b1: get("gate.b1")?,
            w2: get("gate.w2")?,
            b2: get("gate.b2")?,
        })
    }

    // -----------------------------------------------------------------------
    // Gating and injection
    // -----------------------------------------------------------------------

    /// Top-k routing for each row of `pooled` (n_seq × d).
    pub fn route(&self, tape: &mut Tape, vars: &LibraryVars, pooled: &Matrix) -> Result<Routing> {
        let n_seq = pooled.rows();
        if self.is_empty() {
            return Ok(Routing {
                scores: None,
                active: vec![(Vec::new(), None); n_seq],
                selections: vec![
                    GateSelection {
                        ids: Vec::new(),
                        weights: Vec::new(),
                    };
                    n_seq
                ],
            });
        }
        let p = tape.constant(pooled.clone());
        let z = tape.matmul(p, vars.w1)?;
        let z = tape.add_row(z, vars.b1)?;
        let z = tape.silu(z);
        let z = tape.matmul(z, vars.w2)?;
        let z = tape.add_row(z, vars.b2)?;
        let z = tape.silu(z);
        let u = tape.concat_rows(&vars.heads)?;
        let scores = tape.matmul_nt(z, u)?;

        let mut active = Vec::with_capacity(n_seq);
        let mut selections = Vec::with_capacity(n_seq);
        for s in 0..n_seq {
            let row = tape.value(scores).row(s).to_vec();
            let idx = top_k(&row, self.config.k);
            let srow = tape.slice(scores, s, s + 1, 0, self.len())?;
            let picked = tape.gather_cols(srow, &idx)?;
            let g = tape.softmax_rows(picked, false);
            selections.push(GateSelection {
                ids: idx.iter().map(|&i| self.concepts[i].id).collect(),
                weights: tape.value(g).row(0).to_vec(),
            });
            active.push((idx, Some(g)));
        }
        Ok(Routing {
            scores: Some(scores),
            active,
            selections,
        })
    }

    /// `h + Σ g_i B_i B_iᵀ h` per sequence on a packed batch.
    pub fn inject_var(
        &self,
        tape: &mut Tape,
        vars: &LibraryVars,
        h: Var,
        segs: &[Range<usize>],
        routing: &Routing,
    ) -> Result<Var> {
        if routing.active.iter().all(|(idx, _)| idx.is_empty()) {
            return Ok(h);
        }
        let d = tape.value(h).cols();
        let mut parts = Vec::with_capacity(segs.len());
        for (seg, (idx, g)) in segs.iter().zip(&routing.active) {
            let hs = tape.slice(h, seg.start, seg.end, 0, d)?;
            let mut acc = hs;
            if let Some(g) = g {
                for (a, &i) in idx.iter().enumerate() {
                    let gi = tape.slice(*g, 0, 1, a, a + 1)?;
                    let p = tape.matmul(hs, vars.bases[i])?;
                    let p = tape.matmul_nt(p, vars.bases[i])?;
                    let p = tape.scale_by(p, gi)?;
                    acc = tape.add(acc, p)?;
                }
            }
            parts.push(acc);
        }
        tape.concat_rows(&parts)
    }

    /// Active set and weights for one pooled state.
    pub fn gate_select(&self, h_pool: &[f64]) -> Result<GateSelection> {
        if self.is_empty() {
            return Err(Error::State("no concepts".into()));
        }
        let mut tape = Tape::no_grad();
        let (vars, _) = self.register(&mut tape, false);
        let pooled = Matrix::row_vector(h_pool);
        let r = self.route(&mut tape, &vars, &pooled)?;
        Ok(r.selections.into_iter().next().expect("one row"))
    }

    /// Gate scores for each row of `pooled`.
    pub fn gate_scores(&self, pooled: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::no_grad();
        let (vars, _) = self.register(&mut tape, false);
        let r = self.route(&mut tape, &vars, pooled)?;
        Ok(r.scores.map(|s| tape.value(s).clone()).unwrap_or_else(|| Matrix::zeros(pooled.rows(), 0)))
    }

    /// Per-sequence routing without gradients.
    pub fn select_batch(&self, pooled: &Matrix) -> Result<Vec<GateSelection>> {
        let mut tape = Tape::no_grad();
        let (vars, _) = self.register(&mut tape, false);
        Ok(self.route(&mut tape, &vars, pooled)?.selections)
    }

    /// Injected states for a packed batch without gradients.
    pub fn inject_batch(&self, h: &Matrix, segs: &[Range<usize>]) -> Result<(Matrix, Vec<GateSelection>)> {
        let pooled = pool_segments(h, segs);
        let mut tape = Tape::no_grad();
        let (vars, _) = self.register(&mut tape, false);
        let routing = self.route(&mut tape, &vars, &pooled)?;
        let hv = tape.constant(h.clone());
        let out = self.inject_var(&mut tape, &vars, hv, segs, &routing)?;
        Ok((tape.value(out).clone(), routing.selections))
    }

    /// `h + Σ_{i∈A} g_i B_i B_iᵀ h` for explicit ids and weights.
    pub fn inject(&self, h: &Matrix, active: &[u64], g: &[f64]) -> Result<Matrix> {
        if active.len() != g.len() {
            return Err(Error::Shape("active ids and weights differ in length".into()));
        }
        let mut out = h.clone();
        for (&id, &gi) in active.iter().zip(g) {
            let c = self
                .get(id)
                .ok_or_else(|| Error::Consistency(format!("concept {id} is not live")))?;
            let p = numerics::matmul(h, &c.basis)?;
            let p = numerics::matmul_nt(&p, &c.basis)?;
            out = out.add(&p.scale(gi))?;
        }
        if !out.is_finite() {
            return Err(Error::Numeric("injection produced non-finite states".into()));
        }
        Ok(out)
    }

    // -----------------------------------------------------------------------
    // Usage
    // -----------------------------------------------------------------------

    /// `u ← (1−ρ)u + ρ·[i ∈ A]`.
    pub fn update_usage(&mut self, active: &[u64], rho: f64) {
        for c in &mut self.concepts {
            let hit = if active.contains(&c.id) { 1.0 } else { 0.0 };
            c.usage_ema = (1.0 - rho) * c.usage_ema + rho * hit;
        }
    }

    /// Batch form: the indicator is replaced by the fraction of sequences in
    /// which each concept was active.
    pub fn update_usage_batch(&mut self, selections: &[GateSelection], rho: f64) {
        if selections.is_empty() {
            return;
        }
        let n = selections.len() as f64;
        for c in &mut self.concepts {
            let hits = selections.iter().filter(|s| s.ids.contains(&c.id)).count() as f64;
            c.usage_ema = ((1.0 - rho) * c.usage_ema + rho * hits / n).clamp(0.0, 1.0);
        }
    }
}

/// Mean over rows within each segment.
pub fn pool_segments(h: &Matrix, segs: &[Range<usize>]) -> Matrix {
    let d = h.cols();
    let mut out = Matrix::zeros(segs.len(), d);
    for (s, seg) in segs.iter().enumerate() {
        let row = out.row_mut(s);
        for t in seg.clone() {
            for (o, x) in row.iter_mut().zip(h.row(t)) {
                *o += x;
            }
        }
        let n = seg.len() as f64;
        for o in row.iter_mut() {
            *o /= n;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Regularizers
// ---------------------------------------------------------------------------

/// `Σ_{i≠j} ‖B_iᵀB_j‖_F²` over ordered pairs.
pub fn orthogonality_penalty(bases: &[&Matrix]) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..bases.len() {
        for j in i + 1..bases.len() {
            total += 2.0 * numerics::matmul_tn(bases[i], bases[j])?.frobenius_sq();
        }
    }
    Ok(total)
}

/// `(1/N) Σ_i ‖B_iᵀB_i − I‖_F²`; zero for an empty library.
pub fn overlap_penalty(bases: &[&Matrix]) -> Result<f64> {
    if bases.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for b in bases {
        let g = numerics::matmul_tn(b, b)?;
        total += g.sub(&Matrix::identity(b.cols()))?.frobenius_sq();
    }
    Ok(total / bases.len() as f64)
}

/// `−Σ g log g`.
pub fn gate_entropy(g: &[f64]) -> f64 {
    -g.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

pub fn orthogonality_penalty_var(tape: &mut Tape, bases: &[Var]) -> Result<Var> {
    let mut terms = Vec::new();
    for i in 0..bases.len() {
        for j in i + 1..bases.len() {
            let p = tape.matmul_tn(bases[i], bases[j])?;
            terms.push((tape.sum_squares(p), 2.0));
        }
    }
    if terms.is_empty() {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    tape.scalar_combine(&terms)
}

pub fn overlap_penalty_var(tape: &mut Tape, bases: &[Var]) -> Result<Var> {
    if bases.is_empty() {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let inv_n = 1.0 / bases.len() as f64;
    let mut terms = Vec::with_capacity(bases.len());
    for &b in bases {
        let r = tape.value(b).cols();
        let g = tape.matmul_tn(b, b)?;
        let eye = tape.constant(Matrix::identity(r));
        let diff = tape.sub(g, eye)?;
        terms.push((tape.sum_squares(diff), inv_n));
    }
    tape.scalar_combine(&terms)
}

/// Mean over sequences of the active-weight entropy.
pub fn gate_entropy_var(tape: &mut Tape, routing: &Routing) -> Result<Var> {
    let rows: Vec<Var> = routing.active.iter().filter_map(|(_, g)| *g).collect();
    if rows.is_empty() {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let inv = 1.0 / routing.active.len() as f64;
    let mut terms = Vec::with_capacity(rows.len());
    for g in rows {
        let lg = tape.log(g);
        let p = tape.mul(g, lg)?;
        terms.push((tape.sum(p), -inv));
    }
    tape.scalar_combine(&terms)
}
