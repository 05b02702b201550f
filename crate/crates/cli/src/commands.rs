// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rce_core::analysis::{self, SuiteScores};
use rce_core::evolution::Event;
use rce_core::persistence::{self, Checkpoint, RunDir, RunWriter};
use rce_core::pipeline::{self, RunConfig};
use rce_core::tasks::OodKind;
use rce_core::training::replay_size;
use rce_core::{Error, Result};
use serde::Serialize;

use crate::ConfigArgs;

fn load_config(args: &ConfigArgs, fallback: Option<RunConfig>) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            RunConfig::from_toml(&text)?
        }
        None => fallback.unwrap_or_default(),
    };
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    persistence::write_atomic(path, text.as_bytes())
}

#[derive(Serialize)]
struct SuiteReport {
    suite: String,
    tasks: BTreeMap<String, SuiteScores>,
    pooled: SuiteScores,
    #[serde(skip_serializing_if = "Option::is_none")]
    shifted: Option<ShiftedReport>,
}

#[derive(Serialize)]
struct ShiftedReport {
    kind: String,
    pooled: SuiteScores,
    base_retention: Option<f64>,
    augmented_retention: Option<f64>,
}

fn score_suites(ckpt: &Checkpoint, suites: &[String], ood: Option<OodKind>) -> Result<Vec<SuiteReport>> {
    let mut out = Vec::new();
    for name in suites {
        let batches = pipeline::eval_batches(&ckpt.config, name)?;
        let tasks = analysis::evaluate(&ckpt.base, &ckpt.state.library, &batches)?;
        let pooled = analysis::pooled_scores(&tasks);
        let shifted = match ood {
            None => None,
            Some(kind) => {
                let moved = pipeline::shifted(&batches, kind, ckpt.config.eval.seed)?;
                let s = analysis::pooled_scores(&analysis::evaluate(&ckpt.base, &ckpt.state.library, &moved)?);
                Some(ShiftedReport {
                    kind: kind.name().to_string(),
                    base_retention: analysis::retention(&pooled.base, &s.base),
                    augmented_retention: analysis::retention(&pooled.augmented, &s.augmented),
                    pooled: s,
                })
            }
        };
        out.push(SuiteReport {
            suite: name.clone(),
            tasks,
            pooled,
            shifted,
        });
    }
    Ok(out)
}

fn print_scores(reports: &[SuiteReport]) {
    println!(
        "{:<20} {:>10} {:>10} {:>10} {:>10}",
        "suite", "base loss", "base acc", "rce loss", "rce acc"
    );
    for r in reports {
        let p = &r.pooled;
        println!(
            "{:<20} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            r.suite,
            p.base.loss(),
            p.base.accuracy(),
            p.augmented.loss(),
            p.augmented.accuracy()
        );
        if let Some(s) = &r.shifted {
            let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!(
                "  {:<18} {:>10.4} {:>10.4} {:>10.4} {:>10.4}   retention base {} rce {}",
                s.kind,
                s.pooled.base.loss(),
                s.pooled.base.accuracy(),
                s.pooled.augmented.loss(),
                s.pooled.augmented.accuracy(),
                fmt(s.base_retention),
                fmt(s.augmented_retention)
            );
        }
    }
}

pub fn pretrain_base(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = load_config(args, None)?;
    let dir = RunDir::create(out)?;
    dir.write_config(&cfg)?;
    let (base, report) = pipeline::pretrain(&cfg)?;
    let manifest = persistence::save_base(&cfg, &base, &out.join("base.rce"))?;
    let lib = rce_core::concepts::ConceptLibrary::new(cfg.train.library.clone(), cfg.seed)?;
    let ckpt = Checkpoint {
        state: rce_core::training::TrainState::new(&cfg.train, lib)?,
        config: cfg,
        base,
    };
    let suites = score_suites(&ckpt, &["base".to_string(), "compositional".to_string()], None)?;
    print_scores(&suites);
    #[derive(Serialize)]
    struct Report<'a> {
        base_param_hash: &'a str,
        final_loss: Option<f64>,
        skipped_steps: &'a [u64],
        suites: &'a [SuiteReport],
    }
    write_json(
        &dir.reports().join("pretrain.json"),
        &Report {
            base_param_hash: &manifest.base_param_hash,
            final_loss: report.losses.last().copied(),
            skipped_steps: &report.skipped_steps,
            suites: &suites,
        },
    )?;
    println!("base artifact {} ({})", out.join("base.rce").display(), manifest.base_param_hash);
    Ok(())
}

pub fn train(
    args: &ConfigArgs,
    base_path: Option<&Path>,
    out: &Path,
    steps: Option<u64>,
    resume: Option<&Path>,
    ablate: &[String],
) -> Result<()> {
    let dir = RunDir::create(out)?;
    if let Some(ckpt_path) = resume {
        if args.config.is_some() || !args.overrides.is_empty() || !ablate.is_empty() || args.seed.is_some() {
            return Err(Error::Config(
                "--resume continues the checkpoint's own configuration; drop --config/--set/--seed/--ablate".into(),
            ));
        }
        let ckpt = persistence::load_checkpoint(ckpt_path)?;
        let until = steps.unwrap_or(ckpt.config.train.optim.total_steps);
        dir.write_config(&ckpt.config)?;
        dir.truncate_logs(&ckpt.state)?;
        let mut writer = RunWriter::open(dir.clone(), &ckpt.base, ckpt.config.clone())?;
        let run = pipeline::resume(&ckpt.base, &ckpt.config, ckpt.state.clone(), until, Some(&mut writer))?;
        return finish(&dir, &writer, &ckpt.config, &run);
    }
    let artifact = base_path.ok_or_else(|| Error::Config("train needs --base or --resume".into()))?;
    let (base_cfg, base) = persistence::load_base(artifact)?;
    let mut cfg = load_config(args, Some(base_cfg.clone()))?;
    for a in ablate {
        cfg.train.ablations.enable(a)?;
    }
    if let Some(s) = steps {
        cfg.train.optim.total_steps = s;
    }
    // The frozen model comes from the artifact; only training settings vary.
    cfg.model = base.config().clone();
    cfg.validate()?;
    dir.write_config(&cfg)?;
    let mut writer = RunWriter::open(dir.clone(), &base, cfg.clone())?;
    if cfg.train.optim.total_steps == 0 {
        let lib = rce_core::concepts::ConceptLibrary::new(cfg.train.library.clone(), cfg.seed)?;
        writer.save(&rce_core::training::TrainState::new(&cfg.train, lib)?)?;
        println!("0 steps: initial checkpoint only");
        return Ok(());
    }
    let run = pipeline::train(&base, &cfg, Some(&mut writer))?;
    finish(&dir, &writer, &cfg, &run)
}

fn finish(dir: &RunDir, writer: &RunWriter<'_>, cfg: &RunConfig, run: &pipeline::TrainedRun) -> Result<()> {
    let path = dir.checkpoint(run.state.step);
    if !path.exists() {
        writer.save(&run.state)?;
    }
    let summary = pipeline::summarize(writer.base, cfg, "rce", run)?;
    write_json(&dir.reports().join("summary.json"), &summary)?;
    println!(
        "step {}  N = {}  accepted spawns {}  merges {}  compositional loss {:.4} -> {:.4}  acc {:.4} -> {:.4}",
        run.state.step,
        summary.final_n,
        summary.spawns_accepted,
        summary.merges,
        summary.base_loss,
        summary.aug_loss,
        summary.base_accuracy,
        summary.aug_accuracy
    );
    println!("checkpoint {}", path.display());
    Ok(())
}

pub fn eval(checkpoint: &Path, suites: &[String], ood: Option<&str>, out: Option<&Path>) -> Result<()> {
    let ckpt = persistence::load_checkpoint(checkpoint)?;
    let suites: Vec<String> = if suites.is_empty() {
        vec!["base".into(), "compositional".into()]
    } else {
        suites.to_vec()
    };
    for s in &suites {
        pipeline::suite_specs(s)?;
    }
    let ood = match ood {
        None => None,
        Some(name) => Some(OodKind::parse(name).ok_or_else(|| {
            let names: Vec<&str> = OodKind::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown --ood `{name}`; available: {}", names.join(", ")))
        })?),
    };
    let reports = score_suites(&ckpt, &suites, ood)?;
    print_scores(&reports);
    if let Some(p) = out {
        write_json(p, &reports)?;
    }
    Ok(())
}

fn default_events_path(checkpoint: &Path) -> Option<PathBuf> {
    let p = checkpoint.parent()?.parent()?.join("events.jsonl");
    p.exists().then_some(p)
}

pub fn inspect(checkpoint: &Path, events: Option<&Path>) -> Result<()> {
    let ckpt = persistence::load_checkpoint(checkpoint)?;
    let lib = &ckpt.state.library;
    let mut by_kind = BTreeMap::new();
    for name in ["copy", "identity-remap", "mirror-remap", "modular-chain", "nested-constraint"] {
        let batches = pipeline::eval_batches(&ckpt.config, name)?;
        let passes = batches
            .iter()
            .map(|b| rce_core::training::FrozenPass::new(&ckpt.base, b))
            .collect::<Result<Vec<_>>>()?;
        by_kind.insert(name.to_string(), passes);
    }
    let stats = analysis::library_stats(lib, &by_kind, &ckpt.config.train.spawn)?;
    let kinds: Vec<&String> = by_kind.keys().collect();
    print!("{:>6} {:>5} {:>14} {:>8} {:>8}", "id", "level", "lineage", "usage", "omega");
    for k in &kinds {
        print!(" {:>17}", k.as_str());
    }
    println!();
    for c in &lib.concepts {
        let lineage = if c.lineage.is_empty() {
            "-".to_string()
        } else {
            c.lineage.iter().map(u64::to_string).collect::<Vec<_>>().join("+")
        };
        print!(
            "{:>6} {:>5} {:>14} {:>8.4} {:>8.4}",
            c.id, c.level, lineage, c.usage_ema, stats.omega[&c.id]
        );
        for k in &kinds {
            print!(" {:>17.3}", stats.activation_rate[&c.id][k.as_str()]);
        }
        println!();
    }
    println!(
        "N = {}  total omega = {:.4}  mean reuse = {:.2} task kinds  levels {:?}",
        stats.n, stats.total_omega, stats.mean_reuse, stats.counts_by_level
    );
    let events_path = events.map(Path::to_path_buf).or_else(|| default_events_path(checkpoint));
    if let Some(p) = events_path {
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let events = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str::<Event>(l).map_err(|e| Error::integrity("events", e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let events: Vec<Event> = events.into_iter().filter(|e| e.step() < ckpt.state.step).collect();
        println!("growth (step: size)");
        let curve: Vec<String> = replay_size(0, &events).iter().map(|(s, n)| format!("{s}:{n}")).collect();
        println!("  {}", if curve.is_empty() { "-".to_string() } else { curve.join(" ") });
        println!("merge genealogy");
        for e in &events {
            if let Event::Merge {
                step,
                parents,
                new_id,
                synergy,
                level,
                ..
            } = e
            {
                println!(
                    "  step {step}: {} + {} -> {new_id} (level {level}, synergy {synergy:.5})",
                    parents.0, parents.1
                );
            }
        }
    }
    Ok(())
}

pub fn sweep(args: &ConfigArgs, key: &str, values: &[String], seeds: &[u64], out: &Path) -> Result<()> {
    pipeline::sweep_path(key)?;
    let cfg = load_config(args, None)?;
    let dir = RunDir::create(out)?;
    dir.write_config(&cfg)?;
    let bases_dir = out.join("bases");
    fs::create_dir_all(&bases_dir).map_err(|e| Error::io(&bases_dir, e))?;
    let mut bases = |seed: u64| {
        let path = bases_dir.join(format!("seed_{seed}.rce"));
        if path.exists() {
            return Ok(persistence::load_base(&path)?.1);
        }
        let c = cfg.clone().with_seed(seed);
        let (base, _) = pipeline::pretrain(&c)?;
        persistence::save_base(&c, &base, &path)?;
        Ok(base)
    };
    let groups = pipeline::sweep(&cfg, key, values, seeds, &mut bases)?;
    let rows = analysis::ablation_report(&groups);
    let table = analysis::format_table(key, &rows);
    print!("{table}");
    persistence::write_atomic(&dir.reports().join("sweep.txt"), table.as_bytes())?;
    write_json(&dir.reports().join("sweep.json"), &groups)?;
    Ok(())
}
