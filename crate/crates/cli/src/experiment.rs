//! The evaluation engine: runs the (defense x attack x budget) grid over the
//! eval images, measures clean accuracy under every defense, and collects
//! everything into a mergeable run report.
//!
//! Determinism contract: every random decision is keyed off the master seed
//! through derived streams indexed by grid position, never by scheduling, so
//! the same config and seed reproduce the same report whatever `--jobs` is.

use crate::config::{AttackConfig, DefenseConfig, ExperimentConfig};
use crate::error::{CliError, Result};
use patchpure_core::attacks::{
    boundary_attack, hopskipjump_attack, nes_attack, simba_attack, square_attack, AttackKind,
    AttackOutcome, BoundaryConfig, HsjConfig, NesConfig, SimbaConfig, SquareConfig,
};
use patchpure_core::dataset::Dataset;
use patchpure_core::models::{argmax, AttackProblem, Classifier};
use patchpure_core::oracle::{Defense, DefendedOracle, OutputMode};
use patchpure_core::purify::{PatchGrid, PurifierPool};
use patchpure_core::rng::{tags, Stream};
use patchpure_core::theory::TheoremRow;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Sub-tag under the oracle stream for clean-accuracy measurements.
const CLEAN_TAG: u64 = u64::MAX;

/// Enough to trace every report row back to its inputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub master_seed: u64,
}

/// One robust-accuracy (or clean-accuracy) table row. Clean rows use
/// `attack = "clean"` and `budget = 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub defense: String,
    pub attack: String,
    pub budget: usize,
    pub robust_accuracy: f64,
}

/// Robust accuracy as a function of spent queries for one defense, taken
/// from its largest-budget cell of the curve attack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveSeries {
    pub defense: String,
    pub attack: String,
    pub budget: usize,
    /// `points[q]` = fraction of eval images not yet successfully attacked
    /// after `q` queries; index 0 is the pre-attack defended accuracy.
    pub points: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub image_id: usize,
    pub query_index: usize,
    pub margin_or_distance: f64,
    pub accepted: bool,
    pub norm: f64,
}

/// Per-query traces of one attack on one defense cell, all eval images.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackTraceSet {
    pub attack: String,
    pub defense: String,
    pub budget: usize,
    pub rows: Vec<TraceRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyRow {
    pub mode: String,
    pub pool_size: usize,
    pub median_ns: u64,
    pub p90_ns: u64,
    /// Encoder-application counter: pixels pushed through an encoder per
    /// purified image. Deterministic, unlike the wall times.
    pub encoder_pixels: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellError {
    pub defense: String,
    pub attack: String,
    pub budget: usize,
    pub image_id: usize,
    pub message: String,
}

/// Everything a run produced, merged across pipeline stages. Clean-accuracy
/// rows are kept apart from the attacked rows so an attack-free run still
/// reports accuracies while `robust_accuracy.csv` stays header-only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub provenance: Provenance,
    pub clean: Vec<AccuracyRow>,
    pub accuracy: Vec<AccuracyRow>,
    pub curves: Vec<CurveSeries>,
    pub traces: Vec<AttackTraceSet>,
    pub latency: Vec<LatencyRow>,
    pub theorem1: Vec<TheoremRow>,
    pub theorem2: Vec<TheoremRow>,
    pub notes: Vec<String>,
    pub cell_errors: Vec<CellError>,
}

impl RunReport {
    pub fn new(provenance: Provenance) -> Self {
        RunReport {
            provenance,
            clean: Vec::new(),
            accuracy: Vec::new(),
            curves: Vec::new(),
            traces: Vec::new(),
            latency: Vec::new(),
            theorem1: Vec::new(),
            theorem2: Vec::new(),
            notes: Vec::new(),
            cell_errors: Vec::new(),
        }
    }

    /// Folds another stage's fragment in; the provenance must match, since
    /// rows from different configs or checkpoints must not share a report.
    pub fn merge(&mut self, other: RunReport) -> Result<()> {
        if other.provenance != self.provenance {
            return Err(CliError::config(format!(
                "fragment provenance mismatch: {:?} vs {:?}",
                other.provenance, self.provenance
            )));
        }
        self.clean.extend(other.clean);
        self.accuracy.extend(other.accuracy);
        self.curves.extend(other.curves);
        self.traces.extend(other.traces);
        self.latency.extend(other.latency);
        self.theorem1.extend(other.theorem1);
        self.theorem2.extend(other.theorem2);
        self.notes.extend(other.notes);
        self.cell_errors.extend(other.cell_errors);
        Ok(())
    }
}

// ------------------------------------------------------------ defense bank --

/// Owns the per-defense sub-pools so `Defense` values can borrow from one
/// place for the lifetime of the evaluation.
pub struct DefenseBank {
    entries: Vec<(DefenseConfig, Option<PurifierPool>)>,
    height: usize,
    width: usize,
}

impl DefenseBank {
    /// Builds every configured defense up front. `pool` is the trained pool,
    /// required only when some entry references it; sized-down entries take
    /// a prefix with diversity re-measured on `probes`.
    pub fn build(
        cfg: &ExperimentConfig,
        pool: Option<&PurifierPool>,
        probes: &[patchpure_core::tensor::Tensor],
    ) -> Result<Self> {
        let (_, height, width) = cfg.dataset.image_shape();
        let mut entries = Vec::with_capacity(cfg.defenses.len());
        for d in &cfg.defenses {
            let owned = if d.needs_pool() {
                let full = pool.ok_or_else(|| {
                    CliError::MissingArtifact(format!(
                        "defense {:?} needs the trained pool (run `patchpure train-pool` first)",
                        d.slug()
                    ))
                })?;
                let k = match d {
                    DefenseConfig::Patchwise { pool_size, .. }
                    | DefenseConfig::Ensemble { pool_size } => *pool_size,
                    _ => 0,
                };
                if k == 0 || k == full.len() {
                    Some(full.clone())
                } else {
                    Some(full.prefix(k, probes)?)
                }
            } else {
                None
            };
            entries.push((d.clone(), owned));
        }
        Ok(DefenseBank {
            entries,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn slug(&self, idx: usize) -> String {
        self.entries[idx].0.slug()
    }

    pub fn defense(&self, idx: usize) -> Result<Defense<'_>> {
        let (cfg, owned) = &self.entries[idx];
        Ok(match cfg {
            DefenseConfig::None => Defense::None,
            DefenseConfig::Deterministic { member } => {
                Defense::Deterministic(owned.as_ref().expect("built with pool").at(*member))
            }
            DefenseConfig::Patchwise { grid, .. } => Defense::Patchwise {
                pool: owned.as_ref().expect("built with pool"),
                grid: PatchGrid::new(grid[0], grid[1], self.height, self.width)
                    .map_err(CliError::Core)?,
            },
            DefenseConfig::Ensemble { .. } => Defense::Ensemble {
                pool: owned.as_ref().expect("built with pool"),
            },
            transform => Defense::Transform(
                transform
                    .transform()
                    .expect("non-pool defenses are transforms"),
            ),
        })
    }
}

// ------------------------------------------------------------- attack cells --

fn run_attack(
    kind: AttackKind,
    oracle: &mut DefendedOracle,
    problem: &AttackProblem,
    cfg: &AttackConfig,
    stream: &Stream,
) -> patchpure_core::error::Result<AttackOutcome> {
    match kind {
        AttackKind::Nes => {
            let mut c = NesConfig::default();
            if let Some(v) = cfg.samples {
                c.samples = v;
            }
            if let Some(v) = cfg.lr {
                c.lr = v;
            }
            if let Some(v) = cfg.mu {
                c.mu = v;
            }
            nes_attack(oracle, problem, &c, stream)
        }
        AttackKind::Simba => {
            let mut c = SimbaConfig::default();
            if let Some(v) = cfg.step {
                c.step = v;
            }
            simba_attack(oracle, problem, &c, stream)
        }
        AttackKind::Square => {
            let mut c = SquareConfig::default();
            if let Some(v) = cfg.p_init {
                c.p_init = v;
            }
            square_attack(oracle, problem, &c, stream)
        }
        AttackKind::Boundary => boundary_attack(oracle, problem, &BoundaryConfig::default(), stream),
        AttackKind::Hsj => {
            let mut c = HsjConfig::default();
            if let Some(v) = cfg.n_est {
                c.n_est = v;
            }
            hopskipjump_attack(oracle, problem, &c, stream)
        }
    }
}

struct CellTask {
    defense_idx: usize,
    attack_idx: usize,
    budget_idx: usize,
    image_idx: usize,
}

struct CellResult {
    task: CellTask,
    outcome: std::result::Result<AttackOutcome, String>,
}

/// What the attack stage contributes to the report.
pub struct AttackStage {
    pub clean: Vec<AccuracyRow>,
    pub accuracy: Vec<AccuracyRow>,
    pub curves: Vec<CurveSeries>,
    pub traces: Vec<AttackTraceSet>,
    pub cell_errors: Vec<CellError>,
}

/// Runs clean accuracy plus the full attack grid. With an empty attack list
/// only the clean rows are produced. Per-image failures are recorded and the
/// run continues; an image is counted robust when the attack finished
/// without success, which by construction covers failed-init decision
/// attacks (they return unsuccessfully after spending their init budget).
pub fn run_attack_stage(
    cfg: &ExperimentConfig,
    clf: &Classifier,
    bank: &DefenseBank,
    eval: &Dataset,
    master: &Stream,
) -> Result<AttackStage> {
    let oracle_root = master.derive(tags::ORACLE);
    let attack_root = master.derive(tags::ATTACK);

    let clean = clean_accuracy_rows(clf, bank, eval, &oracle_root)?;
    let mut accuracy = Vec::new();

    let mut tasks = Vec::new();
    for d in 0..bank.len() {
        for (a, atk) in cfg.attacks.iter().enumerate() {
            for (b, _) in atk.budgets.iter().enumerate() {
                for i in 0..eval.len() {
                    tasks.push(CellTask {
                        defense_idx: d,
                        attack_idx: a,
                        budget_idx: b,
                        image_idx: i,
                    });
                }
            }
        }
    }

    let mut results: Vec<CellResult> = tasks
        .into_par_iter()
        .map(|task| {
            let atk = &cfg.attacks[task.attack_idx];
            let budget = atk.budgets[task.budget_idx];
            let key = [
                task.defense_idx as u64,
                task.attack_idx as u64,
                task.budget_idx as u64,
                task.image_idx as u64,
            ];
            let chain = |root: &Stream| {
                key.iter().fold(root.clone(), |s, &t| s.derive(t))
            };
            let outcome = (|| -> Result<AttackOutcome> {
                let problem = AttackProblem::untargeted(
                    eval.images[task.image_idx].clone(),
                    eval.labels[task.image_idx],
                    atk.norm,
                    atk.radius,
                )
                .map_err(CliError::Core)?;
                let mut oracle = DefendedOracle::new(
                    clf,
                    bank.defense(task.defense_idx)?,
                    atk.kind.oracle_mode(),
                    budget,
                    &chain(&oracle_root),
                );
                run_attack(atk.kind, &mut oracle, &problem, atk, &chain(&attack_root))
                    .map_err(CliError::Core)
            })()
            .map_err(|e| e.to_string());
            CellResult { task, outcome }
        })
        .collect();
    // Parallel collection preserves task order, but sort anyway so report
    // assembly never depends on the scheduler.
    results.sort_by_key(|r| {
        (
            r.task.defense_idx,
            r.task.attack_idx,
            r.task.budget_idx,
            r.task.image_idx,
        )
    });

    let mut curves = Vec::new();
    let mut traces = Vec::new();
    let mut cell_errors = Vec::new();

    for d in 0..bank.len() {
        let slug = bank.slug(d);
        let mut curve_pick: Option<(usize, usize)> = None; // (attack_idx, budget)
        for (a, atk) in cfg.attacks.iter().enumerate() {
            for (b, &budget) in atk.budgets.iter().enumerate() {
                let cell: Vec<&CellResult> = results
                    .iter()
                    .filter(|r| {
                        r.task.defense_idx == d
                            && r.task.attack_idx == a
                            && r.task.budget_idx == b
                    })
                    .collect();
                let mut ok = 0usize;
                let mut robust = 0usize;
                for r in &cell {
                    match &r.outcome {
                        Ok(out) => {
                            ok += 1;
                            if !out.success {
                                robust += 1;
                            }
                        }
                        Err(msg) => cell_errors.push(CellError {
                            defense: slug.clone(),
                            attack: atk.kind.name().into(),
                            budget,
                            image_id: r.task.image_idx,
                            message: msg.clone(),
                        }),
                    }
                }
                if ok > 0 {
                    accuracy.push(AccuracyRow {
                        defense: slug.clone(),
                        attack: atk.kind.name().into(),
                        budget,
                        robust_accuracy: robust as f64 / ok as f64,
                    });
                    if curve_pick.is_none_or(|(_, best)| budget > best) {
                        curve_pick = Some((a, budget));
                    }
                }
            }
        }
        if let Some((a, budget)) = curve_pick {
            let atk = &cfg.attacks[a];
            let b = atk
                .budgets
                .iter()
                .position(|&x| x == budget)
                .expect("picked from this list");
            let outcomes: Vec<&AttackOutcome> = results
                .iter()
                .filter(|r| {
                    r.task.defense_idx == d && r.task.attack_idx == a && r.task.budget_idx == b
                })
                .filter_map(|r| r.outcome.as_ref().ok())
                .collect();
            curves.push(CurveSeries {
                defense: slug,
                attack: atk.kind.name().into(),
                budget,
                points: robustness_curve(&outcomes, budget),
            });
        }
    }

    // Per-query traces: first configured defense, largest budget per attack.
    if bank.len() > 0 {
        let d = 0usize;
        for (a, atk) in cfg.attacks.iter().enumerate() {
            let Some((b, &budget)) = atk
                .budgets
                .iter()
                .enumerate()
                .max_by_key(|(_, &v)| v)
            else {
                continue;
            };
            let mut rows = Vec::new();
            for r in results.iter().filter(|r| {
                r.task.defense_idx == d && r.task.attack_idx == a && r.task.budget_idx == b
            }) {
                if let Ok(out) = &r.outcome {
                    rows.extend(out.trace.iter().map(|p| TraceRow {
                        image_id: r.task.image_idx,
                        query_index: p.query_index,
                        margin_or_distance: p.value as f64,
                        accepted: p.accepted,
                        norm: p.norm as f64,
                    }));
                }
            }
            traces.push(AttackTraceSet {
                attack: atk.kind.name().into(),
                defense: bank.slug(d),
                budget,
                rows,
            });
        }
    }

    Ok(AttackStage {
        clean,
        accuracy,
        curves,
        traces,
        cell_errors,
    })
}

/// Fraction of outcomes not yet successful after q queries, for q in
/// 0..=budget. Failed runs are excluded by the caller.
fn robustness_curve(outcomes: &[&AttackOutcome], budget: usize) -> Vec<f64> {
    if outcomes.is_empty() {
        return Vec::new();
    }
    let n = outcomes.len() as f64;
    (0..=budget)
        .map(|q| {
            let broken = outcomes
                .iter()
                .filter(|o| o.success && o.first_success.is_some_and(|s| s <= q))
                .count();
            (outcomes.len() - broken) as f64 / n
        })
        .collect()
}

/// One defended label query per image, keyed under a reserved sub-tag so
/// clean measurements never share draws with attack cells.
fn clean_accuracy_rows(
    clf: &Classifier,
    bank: &DefenseBank,
    eval: &Dataset,
    oracle_root: &Stream,
) -> Result<Vec<AccuracyRow>> {
    let mut rows = Vec::with_capacity(bank.len());
    for d in 0..bank.len() {
        let correct: usize = (0..eval.len())
            .map(|i| -> Result<usize> {
                let stream = oracle_root.derive(CLEAN_TAG).derive(d as u64).derive(i as u64);
                let mut oracle =
                    DefendedOracle::new(clf, bank.defense(d)?, OutputMode::Scores, 1, &stream);
                match oracle.query(&eval.images[i]).map_err(CliError::Core)? {
                    patchpure_core::oracle::OracleReply::Scores(s) => {
                        Ok((argmax(&s) == eval.labels[i]) as usize)
                    }
                    other => Err(CliError::config(format!(
                        "unexpected oracle reply {other:?} for a clean query"
                    ))),
                }
            })
            .sum::<Result<usize>>()?;
        rows.push(AccuracyRow {
            defense: bank.slug(d),
            attack: "clean".into(),
            budget: 0,
            robust_accuracy: correct as f64 / eval.len() as f64,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::data::load_splits;
    use patchpure_core::models::{train_classifier, Architecture, TrainConfig};

    fn small_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.defenses = vec![
            DefenseConfig::None,
            DefenseConfig::Shrink { factor: 0.5 },
        ];
        cfg.attacks = vec![AttackConfig {
            budgets: vec![10, 30],
            ..AttackConfig::new(AttackKind::Square, patchpure_core::models::NormKind::Linf, 0.15)
        }];
        cfg.eval.images = 2;
        cfg
    }

    fn fixture(cfg: &ExperimentConfig) -> (Classifier, Dataset) {
        let master = Stream::master(cfg.seed);
        let splits = load_splits(cfg, &master).unwrap();
        let (clf, _) = train_classifier(
            &splits.train,
            Architecture::linear((3, 6, 6), 2),
            &TrainConfig {
                epochs: 6,
                ..TrainConfig::default()
            },
            &master.derive(tags::CLASSIFIER),
        )
        .unwrap();
        (clf, splits.eval)
    }

    #[test]
    fn stage_is_deterministic_and_fills_every_cell() {
        let cfg = small_cfg();
        let (clf, eval) = fixture(&cfg);
        let bank = DefenseBank::build(&cfg, None, &[]).unwrap();
        let master = Stream::master(cfg.seed);
        let a = run_attack_stage(&cfg, &clf, &bank, &eval, &master).unwrap();
        let b = run_attack_stage(&cfg, &clf, &bank, &eval, &master).unwrap();
        assert_eq!(a.clean.len(), 2);
        // 2 defenses x 1 attack x 2 budgets.
        assert_eq!(a.accuracy.len(), 4);
        assert!(a.cell_errors.is_empty());
        let key = |rows: &[AccuracyRow]| {
            rows.iter()
                .map(|r| (r.defense.clone(), r.attack.clone(), r.budget, r.robust_accuracy))
                .collect::<Vec<_>>()
        };
        assert_eq!(key(&a.accuracy), key(&b.accuracy));
        assert_eq!(key(&a.clean), key(&b.clean));
        assert_eq!(a.curves.len(), 2);
        for c in &a.curves {
            assert_eq!(c.budget, 30);
            assert_eq!(c.points.len(), 31);
            // Monotone non-increasing in spent queries.
            for w in c.points.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
        }
        assert_eq!(a.traces.len(), 1);
        assert_eq!(a.traces[0].defense, "none");
        assert_eq!(a.traces[0].budget, 30);
    }

    #[test]
    fn empty_attack_list_yields_clean_rows_only() {
        let mut cfg = small_cfg();
        cfg.attacks.clear();
        let (clf, eval) = fixture(&cfg);
        let bank = DefenseBank::build(&cfg, None, &[]).unwrap();
        let stage =
            run_attack_stage(&cfg, &clf, &bank, &eval, &Stream::master(cfg.seed)).unwrap();
        assert_eq!(stage.clean.len(), 2);
        assert!(stage.clean.iter().all(|r| r.attack == "clean" && r.budget == 0));
        assert!(stage.accuracy.is_empty());
        assert!(stage.curves.is_empty());
        assert!(stage.traces.is_empty());
    }

    #[test]
    fn pool_defense_without_pool_is_a_missing_artifact() {
        let mut cfg = small_cfg();
        cfg.defenses.push(DefenseConfig::Ensemble { pool_size: 0 });
        let err = match DefenseBank::build(&cfg, None, &[]) {
            Err(e) => e,
            Ok(_) => panic!("bank built without a pool"),
        };
        assert!(matches!(err, CliError::MissingArtifact(_)));
    }

    #[test]
    fn merge_rejects_mismatched_provenance() {
        let p = |seed| Provenance {
            config_hash: "c".into(),
            checkpoint_hash: "k".into(),
            master_seed: seed,
        };
        let mut a = RunReport::new(p(1));
        assert!(a.merge(RunReport::new(p(2))).is_err());
        assert!(a.merge(RunReport::new(p(1))).is_ok());
    }
}
