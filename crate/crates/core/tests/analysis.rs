// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rce_core::analysis::{self, FlopModel, RankReport, RceShape, RunSummary, Summary};
use rce_core::base_model::{AnswerScore, ToyModelConfig};
use rce_core::concepts::{ConceptLibrary, LibraryConfig};
use rce_core::numerics::{self, Matrix};
use rce_core::pipeline;
use rce_core::training::FrozenPass;

fn library(d: usize, rank: usize) -> ConceptLibrary {
    let cfg = LibraryConfig {
        d_model: d,
        rank,
        k: 2,
        n_max: 4,
        n_keep: 4,
        gate_hidden: 4,
    };
    ConceptLibrary::new(cfg, 0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn injection_never_lowers_effective_rank(
        rows in 2usize..12,
        data in prop::collection::vec(-3.0f64..3.0, 12 * 8),
        raw in prop::collection::vec(-1.0f64..1.0, 16 * 2),
        split in 0.05f64..0.95,
        shrink in prop::collection::vec(prop::bool::ANY, 8),
    ) {
        let d = 8;
        // Some columns scaled near zero so the threshold actually bites.
        let h = Matrix::from_fn(rows, d, |i, j| data[i * d + j] * if shrink[j] { 1e-3 } else { 1.0 });
        let mut lib = library(d, 2);
        let head = lib.zero_head();
        let b1 = numerics::householder_qr(&Matrix::new(d, 2, raw[..16].to_vec()).unwrap()).unwrap();
        let b2 = numerics::householder_qr(&Matrix::new(d, 2, raw[16..].to_vec()).unwrap()).unwrap();
        let i = lib.add_concept(b1, 0, vec![], 0, 0.5, head.clone()).unwrap();
        let j = lib.add_concept(b2, 0, vec![], 0, 0.5, head).unwrap();
        let after = lib.inject(&h, &[i, j], &[split, 1.0 - split]).unwrap();
        let report = RankReport::measure(&h, &after, None).unwrap();
        prop_assert!(report.holds(), "{report:?}");
        // Amplification only: no eigenvalue of the second moment shrinks.
        for (a, b) in report.spectrum_after.iter().zip(&report.spectrum_before) {
            prop_assert!(*a >= *b - 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn planted_scenario_gains_exactly_one(d in 4usize..24, log_eps in -6.0f64..0.0) {
        let r = analysis::planted_rank_scenario(d, 10f64.powf(log_eps)).unwrap();
        prop_assert_eq!(r.before, 2);
        prop_assert_eq!(r.after, 3);
    }
}

#[test]
fn spectrum_matches_eigen_oracle() {
    let samples = Matrix::from_fn(20, 6, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0 + 0.1 * j as f64);
    let x = DMatrix::from_row_slice(20, 6, samples.data());
    let oracle = SymmetricEigen::new(x.transpose() * &x / 20.0);
    let mut expected: Vec<f64> = oracle.eigenvalues.iter().copied().collect();
    expected.sort_by(|a, b| b.total_cmp(a));
    let got = analysis::spectrum(&samples).unwrap();
    for (g, e) in got.iter().zip(&expected) {
        assert!((g - e).abs() < 1e-9, "{got:?} vs {expected:?}");
    }
    let eps = expected[2] * 0.999;
    assert_eq!(analysis::effective_rank(&samples, eps).unwrap(), 3);
    assert!(analysis::effective_rank(&samples.slice(0, 1, 0, 6), eps).is_err());
}

#[test]
fn toy_overhead_by_hand() {
    // d = 64, 6 layers, 4 heads without grouping, d_ff = 256, V = 32, T = 64.
    let cfg = ToyModelConfig::default();
    let m = FlopModel::toy(&cfg);
    assert_eq!((m.d_model, m.n_layers, m.d_ff, m.vocab_size, m.seq_len), (64, 6, 256, 32, 64));
    // Projections 2·4·64² = 32768; attention 4·32.5·64 = 8320;
    // feed-forward 2·2·64·256 = 65536; head 2·64·32 = 4096.
    let base = 6.0 * (32768.0 + 8320.0 + 65536.0) + 4096.0;
    assert_eq!(m.base_flops_per_token(), base);

    // 8 concepts of rank 4, k = 2, gate width 32: pooling 64, gate
    // (2·(64·32 + 32·32) + 2·32·8)/64 = 104, projections 2·2·(2·64·4) = 2048.
    let s = RceShape {
        n_concepts: 8,
        rank: 4,
        k: 2,
        gate_hidden: 32,
    };
    assert_eq!(analysis::rce_flops_per_token(&m, &s), 64.0 + 104.0 + 2048.0);
    assert_eq!(analysis::overhead_estimate(&m, &s), (base + 2216.0) / base);
    let empty = RceShape { n_concepts: 0, ..s };
    assert_eq!(analysis::overhead_estimate(&m, &empty), 1.0);
}

#[test]
fn library_stats_on_tiny_run() {
    let cfg = common::tiny();
    let base = common::tiny_base(&cfg);
    let run = pipeline::train(&base, &cfg, None).unwrap();
    let lib = &run.state.library;
    let mut suites: BTreeMap<String, Vec<FrozenPass>> = BTreeMap::new();
    for b in pipeline::eval_batches(&cfg, "compositional").unwrap() {
        suites.entry(b.spec.label()).or_default().push(FrozenPass::new(&base, &b).unwrap());
    }
    let stats = analysis::library_stats(lib, &suites, &cfg.train.spawn).unwrap();
    assert_eq!(stats.n, lib.len());
    assert_eq!(stats.counts_by_level.values().sum::<usize>(), lib.len());
    assert_eq!(stats.omega.len(), lib.len());
    let total: f64 = stats.omega.values().sum();
    assert!((total - stats.total_omega).abs() < 1e-9 * total.abs().max(1.0));
    for (id, rates) in &stats.activation_rate {
        assert_eq!(rates.len(), suites.len());
        assert!(rates.values().all(|r| (0.0..=1.0).contains(r)));
        assert!(stats.reuse[id] <= suites.len());
    }

    let one: BTreeMap<String, Vec<FrozenPass>> = suites.into_iter().take(1).collect();
    assert!(analysis::library_stats(lib, &one, &cfg.train.spawn).is_err());
}

#[test]
fn empty_library_scores_equal_base() {
    let cfg = common::tiny();
    let base = common::tiny_base(&cfg);
    let lib = ConceptLibrary::new(cfg.train.library.clone(), 0).unwrap();
    let batches = pipeline::eval_batches(&cfg, "base").unwrap();
    let scores = analysis::evaluate(&base, &lib, &batches).unwrap();
    for s in scores.values() {
        assert_eq!(s.base, s.augmented);
    }
    let pass = FrozenPass::new(&base, &batches[0]).unwrap();
    let r = analysis::injection_rank_report(&lib, &pass, None).unwrap();
    assert_eq!(r.before, r.after);
}

#[test]
fn retention_and_summaries() {
    let zero = AnswerScore::default();
    assert_eq!(analysis::retention(&zero, &zero), None);

    let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(s.mean, 2.5);
    assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(Summary::of(&[7.0]).std, 0.0);

    let run = |label: &str, acc: f64, n: usize| RunSummary {
        label: label.into(),
        seed: 0,
        base_loss: 1.0,
        aug_loss: 0.5,
        base_accuracy: 0.1,
        aug_accuracy: acc,
        final_n: n,
        spawns_accepted: n,
        merges: 0,
        kl_tail: 0.0,
        kl_peak: 0.0,
        ood_accuracy: BTreeMap::new(),
    };
    let rows = analysis::ablation_report(&[
        ("full".into(), vec![run("full", 0.4, 4), run("full", 0.6, 6)]),
        ("remove-mdl".into(), vec![run("remove-mdl", 0.3, 12)]),
    ]);
    assert_eq!(rows.len(), 2);
    assert!((rows[0].accuracy.mean - 0.5).abs() < 1e-15);
    assert_eq!(rows[0].final_n.mean, 5.0);
    assert_eq!(rows[1].final_n.n, 1);
    let table = analysis::format_table("ablation", &rows);
    assert!(table.contains("remove-mdl"));
}
