// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end acceptance checks A1–A12.
//!
//! Prints one `PASS`/`FAIL` line per criterion followed by its measurements.
//! The process exits successfully unless `RCE_ACCEPTANCE_STRICT=1` is set
//! and a criterion failed, or a check could not be carried out at all.
//!
//! `RCE_ACCEPTANCE_CACHE=<dir>` stores pretrained bases between invocations;
//! A1's runtime figure is only meaningful without it.
//! `RCE_ACCEPTANCE_ONLY=A2,A3` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rce_core::analysis::{self, FlopModel, RceShape, RunSummary};
use rce_core::autodiff::{finite_diff_check, LeafCheck};
use rce_core::base_model::{ToyBaseModel, ToyModelConfig};
use rce_core::concepts::{ConceptLibrary, LibraryConfig};
use rce_core::evolution::{batch_failure, merged_basis, Event};
use rce_core::numerics::{self, Matrix};
use rce_core::persistence::{self, Checkpoint};
use rce_core::pipeline::{self, RunConfig, TrainedRun};
use rce_core::tasks::{base_specs, compositional_specs, gen_batch, ood_transform, Curriculum, OodKind};
use rce_core::training::{record_loss_from, FrozenPass, Recorder, TrainConfig, Trainer};
use rce_core::Result;

const A1_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    passed: bool,
    lines: Vec<String>,
}

impl Verdict {
    fn new(passed: bool) -> Self {
        Self { passed, lines: Vec::new() }
    }

    fn note(mut self, line: impl Into<String>) -> Self {
        self.lines.push(line.into());
        self
    }
}

struct Run {
    trained: TrainedRun,
    summary: RunSummary,
}

/// Shared bases and runs, each computed once.
struct Lab {
    cfg: RunConfig,
    cache: Option<PathBuf>,
    bases: BTreeMap<u64, ToyBaseModel>,
    runs: BTreeMap<(String, u64), Run>,
    pretrain_time: Duration,
    cached_bases: usize,
}

impl Lab {
    fn new() -> Self {
        Self {
            cfg: RunConfig::default().resolved(),
            cache: std::env::var_os("RCE_ACCEPTANCE_CACHE").map(PathBuf::from),
            bases: BTreeMap::new(),
            runs: BTreeMap::new(),
            pretrain_time: Duration::ZERO,
            cached_bases: 0,
        }
    }

    fn config(&self, seed: u64) -> RunConfig {
        self.cfg.clone().with_seed(seed)
    }

    fn base(&mut self, seed: u64) -> Result<ToyBaseModel> {
        if let Some(b) = self.bases.get(&seed) {
            return Ok(b.clone());
        }
        let cfg = self.config(seed);
        let path = self.cache.as_ref().map(|d| d.join(format!("base_seed{seed}.rce")));
        let base = match path.as_ref().filter(|p| p.exists()) {
            Some(p) => {
                self.cached_bases += 1;
                persistence::load_base(p)?.1
            }
            None => {
                let t = Instant::now();
                let (base, _) = pipeline::pretrain(&cfg)?;
                self.pretrain_time += t.elapsed();
                if let Some(p) = &path {
                    std::fs::create_dir_all(p.parent().expect("cache file has a parent")).ok();
                    persistence::save_base(&cfg, &base, p)?;
                }
                base
            }
        };
        self.bases.insert(seed, base.clone());
        Ok(base)
    }

    /// Trains (once) the variant `label` of `seed`, configured by `tweak`.
    fn run(&mut self, label: &str, seed: u64, tweak: impl Fn(&mut RunConfig)) -> Result<&Run> {
        let key = (label.to_string(), seed);
        if !self.runs.contains_key(&key) {
            let base = self.base(seed)?;
            let mut cfg = self.config(seed);
            tweak(&mut cfg);
            let trained = pipeline::train(&base, &cfg, None)?;
            let summary = pipeline::summarize(&base, &cfg, label, &trained)?;
            self.runs.insert(key.clone(), Run { trained, summary });
        }
        Ok(&self.runs[&key])
    }

    fn full(&mut self, seed: u64) -> Result<&Run> {
        self.run("full", seed, |_| {})
    }

    fn ablated(&mut self, name: &'static str, seed: u64) -> Result<&Run> {
        self.run(name, seed, |c| c.train.ablations.enable(name).expect("known ablation"))
    }

    fn summaries(&mut self, label: &str, seeds: &[u64], tweak: impl Fn(&mut RunConfig) + Copy) -> Result<Vec<RunSummary>> {
        seeds.iter().map(|&s| Ok(self.run(label, s, tweak)?.summary.clone())).collect()
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn mean_ood(s: &RunSummary) -> f64 {
    mean(s.ood_accuracy.values().copied())
}

/// Concept count after `step` steps.
fn size_at(run: &TrainedRun, step: u64) -> usize {
    if step == 0 {
        return 0;
    }
    run.metrics
        .iter()
        .find(|m| m.step == step - 1)
        .map(|m| m.n_concepts)
        .unwrap_or_else(|| run.state.library.len())
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

fn a1(lab: &mut Lab) -> Result<Verdict> {
    let t = Instant::now();
    let before = lab.pretrain_time;
    let mut rows = Vec::new();
    for seed in A1_SEEDS {
        rows.push(lab.full(seed)?.summary.clone());
    }
    let elapsed = t.elapsed();
    let loss_wins = rows.iter().filter(|s| s.aug_loss < s.base_loss).count();
    let gain = mean(rows.iter().map(|s| s.aug_accuracy - s.base_accuracy));
    let measured = lab.cached_bases == 0;
    let in_budget = !measured || elapsed < Duration::from_secs(15 * 60);
    let mut v = Verdict::new(loss_wins >= 4 && gain >= 0.10 && in_budget);
    for s in &rows {
        v = v.note(format!(
            "seed {}: loss base {:.4} aug {:.4} | accuracy base {:.4} aug {:.4} | N {}",
            s.seed, s.base_loss, s.aug_loss, s.base_accuracy, s.aug_accuracy, s.final_n
        ));
    }
    v = v.note(format!("loss lower in {loss_wins}/5 seeds (need 4); mean accuracy gain {gain:+.4} (need +0.10)"));
    Ok(if measured {
        v.note(format!(
            "runtime {:.0}s including {:.0}s pretraining (target < 900s)",
            elapsed.as_secs_f64(),
            (lab.pretrain_time - before).as_secs_f64()
        ))
    } else {
        v.note("bases loaded from cache; runtime not measured")
    })
}

fn a2() -> Result<Verdict> {
    let t = Instant::now();
    let model = ToyModelConfig {
        d_model: 32,
        n_layers: 4,
        n_heads: 2,
        d_ff: 64,
        inject_layer: 1,
        seed: 5,
        ..ToyModelConfig::default()
    };
    let mut base = ToyBaseModel::init(model)?;
    base.freeze();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let lib_cfg = LibraryConfig {
        d_model: 32,
        rank: 4,
        gate_hidden: 8,
        ..LibraryConfig::default()
    };
    let mut lib = ConceptLibrary::new(lib_cfg, 5)?;
    for _ in 0..3 {
        let raw = Matrix::from_fn(32, 4, |_, _| rng.gen_range(-1.0..1.0));
        let head = Matrix::from_fn(1, 8, |_, _| rng.gen_range(-1.0..1.0));
        lib.add_concept(numerics::householder_qr(&raw)?, 0, vec![], 0, 0.5, head)?;
    }
    let batch = gen_batch(&compositional_specs()[1], 3, 23)?;
    let pass = FrozenPass::new(&base, &batch)?;
    let coeffs = TrainConfig::default().coefficients(0.7);

    let mut params = lib.params();
    for (name, p) in base.params().iter() {
        params.insert(name.clone(), p.value.clone(), false);
    }
    let report = finite_diff_check(
        |tape, vars| Ok(record_loss_from(tape, &base, &lib, &pass, &coeffs, vars)?.total),
        &params,
        1e-5,
        1e-4,
    )?;
    let checked = report.leaves.values().filter(|c| matches!(c, LeafCheck::Checked { .. })).count();
    let frozen = report.leaves.len() - checked;
    let elapsed = t.elapsed();
    let mut v = Verdict::new(report.all_passed() && checked == lib.params().iter().count() && elapsed < Duration::from_secs(120))
        .note(format!(
            "{checked} trainable leaves checked, max relative error {:.2e} (rtol 1e-4)",
            report.max_rel_error()
        ))
        .note(format!("{frozen} frozen leaves, none received a gradient"))
        .note(format!("runtime {:.1}s (target < 120s)", elapsed.as_secs_f64()));
    for (name, c) in &report.leaves {
        if let LeafCheck::Checked { max_rel_error, passed: false } = c {
            v = v.note(format!("leaf {name}: {max_rel_error:.2e}"));
        }
    }
    Ok(v)
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

/// `sin θ_max` between two subspaces given orthonormal bases.
fn oracle_sin_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let diff = a * a.transpose() - b * b.transpose();
    diff.singular_values().max()
}

/// Top-`r` eigenvectors of `Σ B Bᵀ`.
fn oracle_merge(bi: &Matrix, bj: &Matrix, r: usize) -> DMatrix<f64> {
    let (a, b) = (to_na(bi), to_na(bj));
    let gram = &a * a.transpose() + &b * b.transpose();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    DMatrix::from_columns(&order[..r].iter().map(|&k| eig.eigenvectors.column(k).into_owned()).collect::<Vec<_>>())
}

fn a3() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut random = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
    let mut qr_worst = 0.0f64;
    for &(r, c) in [(64, 4), (64, 8), (32, 16), (12, 12), (100, 3)].iter().cycle().take(100) {
        qr_worst = qr_worst.max(numerics::householder_qr(&random(r, c))?.orthonormality_defect());
    }
    let mut angle_worst = 0.0f64;
    let mut nuclear_worst = 0.0f64;
    for _ in 0..100 {
        let bi = numerics::householder_qr(&random(64, 4))?;
        let bj = numerics::householder_qr(&random(64, 4))?;
        let merged = merged_basis(&bi, &bj, 4)?;
        let sin = oracle_sin_angle(&to_na(&merged), &oracle_merge(&bi, &bj, 4));
        angle_worst = angle_worst.max(sin.min(1.0).asin());
        for b in [&bi, &bj, &merged] {
            nuclear_worst = nuclear_worst.max((numerics::nuclear_norm(b)? - 4.0).abs());
        }
    }
    Ok(Verdict::new(qr_worst <= 1e-10 && angle_worst <= 1e-8 && nuclear_worst <= 1e-10)
        .note(format!("QR ‖QᵀQ − I‖_F max over 100 matrices: {qr_worst:.2e} (≤ 1e-10)"))
        .note(format!("merge span vs eigen oracle, max principal angle over 100 pairs: {angle_worst:.2e} (≤ 1e-8)"))
        .note(format!("|‖B‖_* − r| max: {nuclear_worst:.2e} (≤ 1e-10)")))
}

fn a4(lab: &mut Lab) -> Result<Verdict> {
    let base = lab.base(0)?;
    let cfg = lab.config(0);
    let specs = base_specs();
    let weights = vec![1.0 / specs.len() as f64; specs.len()];
    let curriculum = Curriculum::new(specs, weights, cfg.eval.seed ^ 0xA4, cfg.train.batch_size)?;
    let (tau, eps) = (cfg.train.spawn.tau, cfg.train.spawn.eps);
    let (mut clean, mut planted) = (0usize, 0usize);
    let n = 500u64;
    for t in 0..n {
        let batch = curriculum.batch_at(t)?;
        let novel = ood_transform(&batch, OodKind::Distractor, t)?;
        for (b, count) in [(&batch, &mut clean), (&novel, &mut planted)] {
            let pass = FrozenPass::new(&base, b)?;
            if batch_failure(&pass.base_logits, &pass.segs, eps)? > tau {
                *count += 1;
            }
        }
    }
    let (rc, rp) = (clean as f64 / n as f64, planted as f64 / n as f64);
    Ok(Verdict::new(rp > 0.0 && rp >= 3.0 * rc)
        .note(format!("trigger rate at τ = {tau}: in-distribution {rc:.3}, planted-novel {rp:.3} over {n} batches each"))
        .note("planted-novel: base-task batches with unseen distractor symbols inserted into the prompt"))
}

fn a5(lab: &mut Lab) -> Result<Verdict> {
    let n_max = lab.cfg.train.library.n_max;
    let run = &lab.full(0)?.trained;
    let (s0, s1, s2) = (size_at(run, 0), size_at(run, 1000), size_at(run, 2000));
    let merges = run.events.iter().filter(|e| matches!(e, Event::Merge { .. })).count();
    let final_n = run.state.library.len();
    let late = s2 as i64 - s1 as i64;
    let early = s1 as i64 - s0 as i64;
    Ok(Verdict::new(final_n < n_max && late < early && merges >= 1)
        .note(format!("seed 0: final N {final_n} (< {n_max}); size at 0/1000/2000 = {s0}/{s1}/{s2}"))
        .note(format!("growth second half {late} vs first half {early}; {merges} merge events")))
}

fn a6(lab: &mut Lab) -> Result<Verdict> {
    let mut v = Verdict::new(true);
    let (mut n_full, mut n_abl, mut acc_full, mut acc_abl) = (vec![], vec![], vec![], vec![]);
    for seed in ABLATION_SEEDS {
        let f = lab.full(seed)?.summary.clone();
        let a = lab.ablated("remove-mdl", seed)?.summary.clone();
        v = v.note(format!(
            "seed {seed}: N full {} remove-mdl {} | accuracy full {:.4} remove-mdl {:.4}",
            f.final_n, a.final_n, f.aug_accuracy, a.aug_accuracy
        ));
        n_full.push(f.final_n as f64);
        n_abl.push(a.final_n as f64);
        acc_full.push(f.aug_accuracy);
        acc_abl.push(a.aug_accuracy);
    }
    let (nf, na, af, aa) = (mean(n_full), mean(n_abl), mean(acc_full), mean(acc_abl));
    v.passed = na >= 2.0 * nf && aa < af;
    Ok(v.note(format!(
        "mean N full {nf:.2}, remove-mdl {na:.2} (need ≥ 2×); mean accuracy full {af:.4}, remove-mdl {aa:.4} (need strictly lower)"
    )))
}

fn a7(lab: &mut Lab) -> Result<Verdict> {
    let eps = lab.cfg.train.eps_kl;
    let mut v = Verdict::new(true);
    let mut worst = 0.0f64;
    for seed in A1_SEEDS {
        let s = &lab.full(seed)?.summary;
        worst = worst.max(s.kl_tail);
        v = v.note(format!("seed {seed}: trailing-100 KL {:.4}, peak {:.4}", s.kl_tail, s.kl_peak));
    }
    let ablated = lab.ablated("remove-kl", 0)?.summary.clone();
    v.passed = worst <= 1.1 * eps && ablated.kl_peak >= 2.0 * eps;
    Ok(v
        .note(format!("worst trailing KL {worst:.4} (≤ {:.4})", 1.1 * eps))
        .note(format!("remove-kl seed 0: peak KL {:.4} (need ≥ {:.4})", ablated.kl_peak, 2.0 * eps)))
}

fn a8(lab: &mut Lab) -> Result<Verdict> {
    let base = lab.base(0)?;
    let cfg = lab.config(0);
    let lib = lab.full(0)?.trained.state.library.clone();
    let (mut held, mut total) = (0usize, 0usize);
    let mut raised = 0usize;
    for suite in ["base", "compositional"] {
        for batch in pipeline::eval_batches(&cfg, suite)? {
            let pass = FrozenPass::new(&base, &batch)?;
            let r = analysis::injection_rank_report(&lib, &pass, None)?;
            total += 1;
            held += r.holds() as usize;
            raised += (r.after > r.before) as usize;
        }
    }
    let planted = analysis::planted_rank_scenario(cfg.model.d_model, 1e-3)?;
    Ok(Verdict::new(held == total && planted.after == planted.before + 1)
        .note(format!(
            "rank(after) ≥ rank(before) on {held}/{total} eval batches ({} concepts; {raised} batches gained rank)",
            lib.len()
        ))
        .note(format!("constructed scenario: effective rank {} -> {}", planted.before, planted.after)))
}

fn a9() -> Result<Verdict> {
    let m = FlopModel::mistral_7b();
    let s = RceShape {
        n_concepts: 128,
        rank: 16,
        k: 2,
        gate_hidden: 32,
    };
    let overhead = analysis::overhead_estimate(&m, &s);
    Ok(Verdict::new((overhead - 1.04).abs() <= 0.02)
        .note(format!(
            "base {:.3e} FLOP/token, concept library {:.3e} FLOP/token",
            m.base_flops_per_token(),
            analysis::rce_flops_per_token(&m, &s)
        ))
        .note(format!("overhead {overhead:.5}× (need 1.04 ± 0.02)")))
}

fn a10(lab: &mut Lab) -> Result<Verdict> {
    let base = lab.base(0)?;
    let mut cfg = lab.config(0);
    cfg.train.optim.total_steps = 1000;

    let straight = pipeline::train(&base, &cfg, None)?;
    let full_bytes = persistence::encode_checkpoint(&Checkpoint {
        config: cfg.clone(),
        base: base.clone(),
        state: straight.state.clone(),
    })?;

    let lib = ConceptLibrary::new(cfg.train.library.clone(), cfg.seed)?;
    let mut first = Trainer::new(&base, pipeline::training_curriculum(&cfg)?, cfg.train.clone(), lib)?;
    let mut rec = Recorder::default();
    first.run(500, &mut rec)?;
    let half = Checkpoint {
        config: cfg.clone(),
        base: base.clone(),
        state: first.state.clone(),
    };
    let dir = tempfile::tempdir().map_err(|e| rce_core::Error::io(std::env::temp_dir(), e))?;
    let path = dir.path().join("half.ckpt");
    persistence::save_checkpoint(&half, &path)?;
    let loaded = persistence::load_checkpoint(&path)?;
    let half_bytes = persistence::encode_checkpoint(&half)?;
    let round_trip = persistence::encode_checkpoint(&loaded)? == half_bytes
        && std::fs::read(&path).ok().as_deref() == Some(&half_bytes[..]);

    let resumed = pipeline::resume(&base, &loaded.config, loaded.state, 1000, None)?;
    let resumed_bytes = persistence::encode_checkpoint(&Checkpoint {
        config: cfg.clone(),
        base: base.clone(),
        state: resumed.state,
    })?;
    let metrics_equal = straight.metrics[500..] == resumed.metrics[..];
    let equal = resumed_bytes == full_bytes;
    Ok(Verdict::new(round_trip && equal && metrics_equal)
        .note(format!("checkpoint round trip bitwise equal: {round_trip} ({} bytes)", half_bytes.len()))
        .note(format!(
            "500 + 500 resumed vs 1000 straight: state bytes equal {equal}, steps 500..1000 metrics equal {metrics_equal}"
        )))
}

fn a11(lab: &mut Lab) -> Result<Verdict> {
    let mut v = Verdict::new(true);
    // (suite, transform) -> per-seed (base, rce) retention.
    let mut table: BTreeMap<(String, &str), Vec<(f64, f64)>> = BTreeMap::new();
    for seed in A1_SEEDS {
        let base = lab.base(seed)?;
        let cfg = lab.config(seed);
        let lib = lab.full(seed)?.trained.state.library.clone();
        let batches = pipeline::eval_batches(&cfg, "compositional")?;
        let standard = analysis::evaluate(&base, &lib, &batches)?;
        for kind in OodKind::ALL {
            let moved = analysis::evaluate(&base, &lib, &pipeline::shifted(&batches, kind, cfg.eval.seed)?)?;
            for (suite, s) in &standard {
                let m = &moved[suite];
                let (Some(rb), Some(ra)) = (
                    analysis::retention(&s.base, &m.base),
                    analysis::retention(&s.augmented, &m.augmented),
                ) else {
                    continue;
                };
                table.entry((suite.clone(), kind.name())).or_default().push((rb, ra));
            }
        }
    }
    let mut all_hold = !table.is_empty();
    for ((suite, kind), rows) in &table {
        let (rb, ra) = (mean(rows.iter().map(|r| r.0)), mean(rows.iter().map(|r| r.1)));
        let ok = ra >= rb;
        all_hold &= ok;
        v = v.note(format!(
            "{suite} / {kind}: retention base {rb:.4} rce {ra:.4} over {} seeds{}",
            rows.len(),
            if ok { "" } else { "  <- below base" }
        ));
    }
    let with = lab.summaries("full", &ABLATION_SEEDS, |_| {})?;
    let without = lab.summaries("no-augmentation", &ABLATION_SEEDS, |c| {
        c.train.ablations.enable("no-augmentation").expect("known ablation")
    })?;
    let (aw, an) = (mean(with.iter().map(mean_ood)), mean(without.iter().map(mean_ood)));
    v.passed = all_hold && aw > an;
    Ok(v.note(format!(
        "shifted-suite accuracy over {} seeds: with augmentation {aw:.4}, without {an:.4} (need strictly higher)",
        ABLATION_SEEDS.len()
    )))
}

fn a12(lab: &mut Lab) -> Result<Verdict> {
    let mut v = Verdict::new(true);
    let mut acc = Vec::new();
    let mut n = Vec::new();
    for tau in [2.0, 5.0, 10.0] {
        let label = if tau == lab.cfg.train.spawn.tau { "full".to_string() } else { format!("tau={tau}") };
        let runs = lab.summaries(&label, &ABLATION_SEEDS, move |c| c.train.spawn.tau = tau)?;
        let (a, m) = (mean(runs.iter().map(|s| s.aug_accuracy)), mean(runs.iter().map(|s| s.final_n as f64)));
        v = v.note(format!(
            "τ = {tau}: mean accuracy {a:.4}, mean final N {m:.2} (per seed N {:?})",
            runs.iter().map(|s| s.final_n).collect::<Vec<_>>()
        ));
        acc.push(a);
        n.push(m);
    }
    let interior = acc[1] > acc[0] && acc[1] > acc[2];
    let monotone = n[0] >= n[1] && n[1] >= n[2] && n[0] > n[2];
    v.passed = interior && monotone;
    Ok(v.note(format!("interior accuracy optimum at τ = 5: {interior}; final N decreasing in τ: {monotone}")))
}

// ---------------------------------------------------------------------------

fn main() {
    let mut lab = Lab::new();
    type Check = fn(&mut Lab) -> Result<Verdict>;
    let checks: [(&str, &str, Check); 12] = [
        ("A1", "end-to-end efficacy", a1),
        ("A2", "gradient fidelity", |_| a2()),
        ("A3", "linear-algebra oracles", |_| a3()),
        ("A4", "spawn selectivity", a4),
        ("A5", "sublinear growth and stability", a5),
        ("A6", "MDL gate ablation", a6),
        ("A7", "KL control", a7),
        ("A8", "injection never lowers effective rank", a8),
        ("A9", "inference overhead at 7B scale", |_| a9()),
        ("A10", "persistence and exact resume", a10),
        ("A11", "OOD retention and augmentation", a11),
        ("A12", "spawn-threshold sensitivity", a12),
    ];
    let start = Instant::now();
    let mut failed = Vec::new();
    let mut broken = false;
    let only: Option<Vec<String>> = std::env::var("RCE_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let mut ran = 0;
    for (id, name, check) in checks {
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == id)) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        match check(&mut lab) {
            Ok(v) => {
                println!("{id:<4} {} {name} ({:.1}s)", if v.passed { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
                for line in &v.lines {
                    println!("       {line}");
                }
                if !v.passed {
                    failed.push(id);
                }
            }
            Err(e) => {
                println!("{id:<4} FAIL {name}: error: {e}");
                failed.push(id);
                broken = true;
            }
        }
    }
    println!(
        "acceptance: {}/{ran} passed in {:.0}s{}",
        ran - failed.len(),
        start.elapsed().as_secs_f64(),
        if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
    );
    let strict = std::env::var("RCE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if broken || (strict && !failed.is_empty()) {
        std::process::exit(1);
    }
}
