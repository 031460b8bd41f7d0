//! Pipeline stages behind the CLI subcommands, plus the all-in-one
//! `run_experiment` that strings them together on a fresh directory.
//!
//! Each stage leaves artifacts under the run directory; the evaluation
//! stages additionally drop a report fragment and refresh the merged CSV
//! and SVG outputs, so the report files are always current after any
//! subcommand. Fragment provenance (config hash, checkpoint hash, seed)
//! must agree before merging: retraining a model invalidates earlier
//! fragments instead of silently mixing runs.

use crate::artifacts::{
    checkpoint_hash, load_advdata, read_json, require, save_advdata, write_json, RunDirs,
};
use crate::bench::latency_bench;
use crate::config::{ExperimentConfig, LoadedConfig};
use crate::data::load_splits;
use crate::error::{CliError, Result};
use crate::experiment::{run_attack_stage, DefenseBank, Provenance, RunReport};
use crate::report::{emit_report, write_sidecar};
use patchpure_core::models::{train_classifier, AttackProblem, Classifier, NormKind};
use patchpure_core::purify::{adversarial_pairs, train_pool, Purifier, PurifierPool};
use patchpure_core::rng::{tags, Stream};
use patchpure_core::theory::{
    pool_slowdown_experiment, shrink_acceleration_experiment, theorem1_experiment,
    theorem2_experiment, TheoremReport,
};

const FRAGMENTS: [&str; 3] = ["attack", "theory", "bench"];

/// How many eval images feed diversity re-measurement of sub-pools.
const NU_PROBES: usize = 4;

/// Everything a stage needs: the effective config, its hash, and the paths.
pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub dirs: RunDirs,
}

impl Ctx {
    pub fn new(loaded: LoadedConfig) -> Self {
        let dirs = RunDirs::new(loaded.cfg.out.clone());
        Ctx {
            cfg: loaded.cfg,
            hash: loaded.hash,
            dirs,
        }
    }

    pub fn master(&self) -> Stream {
        Stream::master(self.cfg.seed)
    }

    pub fn provenance(&self) -> Result<Provenance> {
        Ok(Provenance {
            config_hash: self.hash.clone(),
            checkpoint_hash: checkpoint_hash(&self.dirs)?,
            master_seed: self.cfg.seed,
        })
    }
}

// ------------------------------------------------------------------ stages --

pub fn train_classifier_cmd(ctx: &Ctx) -> Result<()> {
    let splits = load_splits(&ctx.cfg, &ctx.master())?;
    let arch = ctx
        .cfg
        .classifier
        .architecture(ctx.cfg.dataset.image_shape(), ctx.cfg.dataset.classes())?;
    let (clf, report) = train_classifier(
        &splits.train,
        arch,
        &ctx.cfg.classifier.train_config(),
        &ctx.master().derive(tags::CLASSIFIER),
    )
    .map_err(CliError::Core)?;
    ctx.dirs.ensure()?;
    clf.save(&ctx.dirs.classifier()).map_err(CliError::Core)?;
    write_json(
        &ctx.dirs.classifier_report(),
        &serde_json::json!({
            "train_accuracy": report.train_accuracy,
            "holdout_accuracy": report.holdout_accuracy,
            "final_loss": report.final_loss,
        }),
    )?;
    println!(
        "trained classifier: train acc {:.3}, holdout acc {:.3}",
        report.train_accuracy, report.holdout_accuracy
    );
    Ok(())
}

fn load_classifier(ctx: &Ctx) -> Result<Classifier> {
    require(&ctx.dirs.classifier(), "train-classifier")?;
    let arch = ctx
        .cfg
        .classifier
        .architecture(ctx.cfg.dataset.image_shape(), ctx.cfg.dataset.classes())?;
    Classifier::load(arch, &ctx.dirs.classifier()).map_err(CliError::Core)
}

pub fn gen_advdata_cmd(ctx: &Ctx) -> Result<()> {
    let clf = load_classifier(ctx)?;
    let splits = load_splits(&ctx.cfg, &ctx.master())?;
    let pairs = adversarial_pairs(
        &clf,
        &splits.train.images,
        &splits.train.labels,
        &ctx.cfg.advdata.methods,
        &ctx.cfg.advdata.whitebox_config(),
        &ctx.master().derive(tags::ADVDATA),
    )
    .map_err(CliError::Core)?;
    ctx.dirs.ensure()?;
    save_advdata(&ctx.dirs, &pairs)?;
    println!(
        "generated adversarial pairs: {} images x {} methods",
        pairs.clean.len(),
        pairs.by_method.len()
    );
    Ok(())
}

pub fn train_pool_cmd(ctx: &Ctx) -> Result<()> {
    let pairs = load_advdata(&ctx.dirs)?;
    let factors = ctx.cfg.pool.factors(&ctx.cfg.advdata.methods);
    let (pool, reports) = train_pool(
        &factors,
        &pairs,
        &ctx.cfg.pool.train_config(),
        &ctx.master().derive(tags::POOL),
    )
    .map_err(CliError::Core)?;
    pool.save(&ctx.dirs.pool()).map_err(CliError::Core)?;
    write_json(
        &ctx.dirs.pool_report(),
        &serde_json::json!({
            "members": pool.len(),
            "nu_hat": pool.nu_hat(),
            "holdout_l1": reports.iter().map(|r| r.holdout_l1).collect::<Vec<_>>(),
        }),
    )?;
    println!("trained pool: {} members, nu_hat {:.4}", pool.len(), pool.nu_hat());
    Ok(())
}

fn load_pool(ctx: &Ctx) -> Result<PurifierPool> {
    require(&ctx.dirs.pool().join("manifest.json"), "train-pool")?;
    PurifierPool::load(&ctx.dirs.pool()).map_err(CliError::Core)
}

/// Runs the attack grid and refreshes the report files. Returns whether any
/// cell failed (partial-success exit).
pub fn attack_cmd(ctx: &Ctx) -> Result<bool> {
    let clf = load_classifier(ctx)?;
    let pool = if ctx.cfg.defenses.iter().any(|d| d.needs_pool()) {
        Some(load_pool(ctx)?)
    } else {
        None
    };
    let splits = load_splits(&ctx.cfg, &ctx.master())?;
    let probes = &splits.eval.images[..splits.eval.len().min(NU_PROBES)];
    let bank = DefenseBank::build(&ctx.cfg, pool.as_ref(), probes)?;
    let stage = run_attack_stage(&ctx.cfg, &clf, &bank, &splits.eval, &ctx.master())?;

    let mut fragment = RunReport::new(ctx.provenance()?);
    fragment.clean = stage.clean;
    fragment.accuracy = stage.accuracy;
    fragment.curves = stage.curves;
    fragment.traces = stage.traces;
    fragment.cell_errors = stage.cell_errors;
    let failed = fragment.cell_errors.len();
    let cells = fragment.accuracy.len();
    write_json(&ctx.dirs.fragment("attack"), &fragment)?;
    merge_and_emit(ctx)?;
    println!("attack grid: {cells} cells reported, {failed} image evaluations failed");
    Ok(failed > 0)
}

/// Theorem bound checks plus the queries-to-success experiments.
pub fn theory_cmd(ctx: &Ctx) -> Result<()> {
    let troot = ctx.master().derive(tags::THEORY);
    let t1 = theorem1_experiment(&ctx.cfg.theory.theorem1, &troot.derive(1))
        .map_err(CliError::Core)?;
    let t2 = theorem2_experiment(&ctx.cfg.theory.theorem2, &troot.derive(2))
        .map_err(CliError::Core)?;

    let clf = load_classifier(ctx)?;
    let pool = load_pool(ctx)?;
    let splits = load_splits(&ctx.cfg, &ctx.master())?;
    let problems: Vec<AttackProblem> = (0..ctx.cfg.theory.images)
        .map(|i| {
            AttackProblem::untargeted(
                splits.eval.images[i].clone(),
                splits.eval.labels[i],
                NormKind::Linf,
                ctx.cfg.theory.radius,
            )
        })
        .collect::<patchpure_core::error::Result<_>>()
        .map_err(CliError::Core)?;
    let slowdown = pool_slowdown_experiment(
        &clf,
        &pool,
        &ctx.cfg.theory.pool_sizes,
        &problems,
        &ctx.cfg.theory.convergence,
        &troot.derive(3),
    )
    .map_err(CliError::Core)?;
    let shrink = shrink_acceleration_experiment(
        &clf,
        &problems,
        &ctx.cfg.theory.convergence,
        &troot.derive(4),
    )
    .map_err(CliError::Core)?;

    let mut fragment = RunReport::new(ctx.provenance()?);
    let note = |report: &TheoremReport, name: &str| -> Vec<String> {
        report
            .skipped
            .iter()
            .map(|s| format!("{name} skipped: {s}"))
            .chain(report.notes.iter().map(|s| format!("{name}: {s}")))
            .collect()
    };
    fragment.notes.extend(note(&t1, "theorem1"));
    fragment.notes.extend(note(&t2, "theorem2"));
    println!(
        "theory: theorem1 pass rate {:.2}, theorem2 pass rate {:.2}, {} convergence rows",
        t1.pass_rate(),
        t2.pass_rate(),
        slowdown.len() + shrink.len()
    );
    fragment.theorem1 = t1.rows;
    fragment.theorem1.extend(slowdown);
    fragment.theorem1.extend(shrink);
    fragment.theorem2 = t2.rows;
    write_json(&ctx.dirs.fragment("theory"), &fragment)?;
    merge_and_emit(ctx)?;
    Ok(())
}

/// Measures inference latency. Uses the trained pool when it is big enough;
/// otherwise builds (and checkpoints) an untrained stand-in pool, since
/// latency depends on architecture and pool size, not on the weights.
pub fn bench_cmd(ctx: &Ctx) -> Result<()> {
    let max = *ctx
        .cfg
        .bench
        .sizes
        .iter()
        .max()
        .ok_or_else(|| CliError::config("bench sizes empty"))?;
    let trained = ctx.dirs.pool().join("manifest.json").exists();
    let pool = if trained {
        let pool = load_pool(ctx)?;
        if pool.len() >= max {
            pool
        } else {
            bench_pool(ctx, max)?
        }
    } else {
        bench_pool(ctx, max)?
    };
    let splits = load_splits(&ctx.cfg, &ctx.master())?;
    let rows = latency_bench(
        &pool,
        &ctx.cfg.bench,
        &splits.eval.images[0],
        &ctx.master().derive(tags::BENCH),
    )?;
    let mut fragment = RunReport::new(ctx.provenance()?);
    fragment.latency = rows;
    write_json(&ctx.dirs.fragment("bench"), &fragment)?;
    merge_and_emit(ctx)?;
    println!(
        "bench: {} rows over pool sizes up to {max} ({} reps each)",
        fragment.latency.len(),
        ctx.cfg.bench.reps
    );
    Ok(())
}

/// Loads or builds the untrained stand-in pool for the benchmark.
fn bench_pool(ctx: &Ctx, size: usize) -> Result<PurifierPool> {
    let dir = ctx.dirs.bench_pool();
    if dir.join("manifest.json").exists() {
        let pool = PurifierPool::load(&dir).map_err(CliError::Core)?;
        if pool.len() >= size {
            return Ok(pool);
        }
    }
    let stream = ctx.master().derive(tags::BENCH).derive(u64::MAX);
    let members: Vec<Purifier> = (0..size)
        .map(|i| {
            let family = ctx.cfg.pool.families[i % ctx.cfg.pool.families.len()];
            Purifier::build(family, ctx.cfg.pool.depths[0], &stream.derive(i as u64))
        })
        .collect::<patchpure_core::error::Result<_>>()
        .map_err(CliError::Core)?;
    let pool = PurifierPool::from_purifiers(members, &[], stream.id()).map_err(CliError::Core)?;
    ctx.dirs.ensure()?;
    pool.save(&dir).map_err(CliError::Core)?;
    Ok(pool)
}

/// Rebuilds every report file from the fragments on disk. Returns whether
/// the merged report carries recorded cell failures.
pub fn report_cmd(ctx: &Ctx) -> Result<bool> {
    if !FRAGMENTS.iter().any(|n| ctx.dirs.fragment(n).exists()) {
        return Err(CliError::MissingArtifact(format!(
            "no report fragments under {} (run `patchpure attack` first)",
            ctx.dirs.fragments().display()
        )));
    }
    let report = merge_and_emit(ctx)?;
    println!(
        "report: {} robust rows, {} clean rows, {} theorem rows, {} latency rows",
        report.accuracy.len(),
        report.clean.len(),
        report.theorem1.len() + report.theorem2.len(),
        report.latency.len()
    );
    Ok(!report.cell_errors.is_empty())
}

fn merge_and_emit(ctx: &Ctx) -> Result<RunReport> {
    let mut report = RunReport::new(ctx.provenance()?);
    for name in FRAGMENTS {
        let path = ctx.dirs.fragment(name);
        if path.exists() {
            report.merge(read_json(&path)?)?;
        }
    }
    emit_report(&ctx.dirs, &report)?;
    write_sidecar(&ctx.dirs)?;
    Ok(report)
}

/// The whole experiment as one call: reuses artifacts that already exist,
/// trains the missing ones, runs the attack grid and theory experiments,
/// and emits the merged report. The latency benchmark is deliberately not
/// part of this path so the produced files are bit-reproducible; run the
/// `bench` subcommand for timing rows.
pub fn run_experiment(ctx: &Ctx) -> Result<RunReport> {
    if !ctx.dirs.classifier().exists() {
        train_classifier_cmd(ctx)?;
    }
    // The theory stage always exercises the pool, so it is never optional here.
    if !ctx.dirs.pool().join("manifest.json").exists() {
        if !ctx.dirs.advdata_manifest().exists() {
            gen_advdata_cmd(ctx)?;
        }
        train_pool_cmd(ctx)?;
    }
    attack_cmd(ctx)?;
    theory_cmd(ctx)?;
    merge_and_emit(ctx)
}
