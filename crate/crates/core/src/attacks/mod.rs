//! Query-based black-box attacks.
//!
//! Every attack runs against a [`DefendedOracle`], owns it exclusively for
//! the duration of the run, and reports an [`AttackOutcome`] whose trace has
//! exactly one entry per consumed query. Success means an in-ball, in-box
//! point that the oracle misclassified at a recorded query index; nothing
//! outside the threat model ever counts.

mod boundary;
mod hsj;
mod nes;
mod simba;
mod square;

pub use boundary::{boundary_attack, BoundaryConfig};
pub use hsj::{estimate_normal, hopskipjump_attack, HsjConfig};
pub use nes::{nes_attack, NesConfig};
pub use simba::{simba_attack, SimbaConfig};
pub use square::{square_attack, SquareConfig};

use crate::error::{Error, Result};
use crate::models::{AttackProblem, NormKind};
use crate::oracle::{DefendedOracle, OracleReply, OutputMode};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// The five attacks, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Nes,
    Simba,
    Square,
    Boundary,
    Hsj,
}

impl AttackKind {
    pub const ALL: [AttackKind; 5] = [
        AttackKind::Nes,
        AttackKind::Simba,
        AttackKind::Square,
        AttackKind::Boundary,
        AttackKind::Hsj,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Nes => "nes",
            AttackKind::Simba => "simba",
            AttackKind::Square => "square",
            AttackKind::Boundary => "boundary",
            AttackKind::Hsj => "hsj",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::arg(format!("unknown attack '{name}'")))
    }

    /// Decision-based attacks query labels; the rest need scores.
    pub fn oracle_mode(&self) -> OutputMode {
        match self {
            AttackKind::Boundary | AttackKind::Hsj => OutputMode::Label,
            _ => OutputMode::Scores,
        }
    }
}

/// One oracle query as the attack saw it. `value` is the margin in scores
/// mode and the l2 distance to the clean image in label mode; `accepted`
/// marks queries whose point the attack adopted as its current iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub query_index: usize,
    pub value: f32,
    pub accepted: bool,
    pub norm: f32,
}

/// What a finished attack hands back.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub success: bool,
    pub queries_used: usize,
    /// Perturbation norm of `best` under the problem's norm.
    pub final_norm: f32,
    /// One entry per consumed query, in order.
    pub trace: Vec<TracePoint>,
    /// Lowest-norm in-ball point the oracle misclassified; the clean image
    /// when the attack never succeeded.
    pub best: Tensor,
    /// Query index at which `best` was observed misclassified.
    pub success_query: Option<usize>,
    /// Earliest query index with an in-ball misclassification.
    pub first_success: Option<usize>,
    /// Decision-based attacks set this when no adversarial starting point
    /// was found inside the initialization sub-budget.
    pub failed_init: bool,
    /// Query counts per attack phase; sums to `queries_used`.
    pub phases: Vec<(String, usize)>,
}

impl AttackOutcome {
    pub fn queries_to_success(&self) -> Option<usize> {
        self.first_success
    }
}

// ------------------------------------------------------------- geometry --

pub fn linf_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

pub fn l2_norm(v: &[f32]) -> f32 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt() as f32
}

pub fn l2_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt() as f32
}

pub fn perturbation_norm(norm: NormKind, x: &[f32], origin: &[f32]) -> f32 {
    match norm {
        NormKind::Linf => linf_dist(x, origin),
        NormKind::L2 => l2_dist(x, origin),
    }
}

/// Projects onto the l2 ball around `origin`, then the unit box. For an
/// origin inside the box the clamp can only shrink per-coordinate distance,
/// so ball membership survives the second step.
pub fn project_l2(x: &mut [f32], origin: &[f32], radius: f32) {
    let n = l2_dist(x, origin);
    if n > radius {
        let s = radius / n;
        for (v, &o) in x.iter_mut().zip(origin) {
            *v = o + (*v - o) * s;
        }
    }
    for v in x.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Projection onto the problem's ball intersected with the unit box.
pub fn project(norm: NormKind, x: &mut [f32], origin: &[f32], radius: f32) {
    match norm {
        NormKind::Linf => crate::whitebox::project_linf(x, origin, radius),
        NormKind::L2 => project_l2(x, origin, radius),
    }
}

/// Ball membership with a little relative slack for projection rounding.
pub fn fits_ball(problem: &AttackProblem, x: &[f32]) -> bool {
    let n = perturbation_norm(problem.norm, x, problem.image.data());
    n <= problem.radius * (1.0 + 1e-4)
}

// -------------------------------------------------------------- session --

/// What one query told the attack.
pub(crate) enum Probe {
    /// Margin under the problem's goal (scores mode).
    Margin(f32),
    /// Whether the reply label meets the problem's goal (label mode).
    Decision(bool),
    Exhausted,
}

/// Per-run bookkeeping shared by all attacks: the trace, the success
/// witness, and phase accounting. Witness updates happen inside `probe`, so
/// an attack cannot claim a success the oracle never saw.
pub(crate) struct Session<'s, 'o> {
    oracle: &'s mut DefendedOracle<'o>,
    problem: &'s AttackProblem,
    trace: Vec<TracePoint>,
    best: Option<(Tensor, usize, f32)>,
    first_success: Option<usize>,
    phases: Vec<(String, usize)>,
    phase_start: usize,
    start_used: usize,
}

impl<'s, 'o> Session<'s, 'o> {
    pub fn new(
        oracle: &'s mut DefendedOracle<'o>,
        problem: &'s AttackProblem,
        mode: OutputMode,
    ) -> Result<Self> {
        if oracle.mode() != mode {
            return Err(Error::arg(format!(
                "attack needs a {mode:?}-mode oracle, got {:?}",
                oracle.mode()
            )));
        }
        let start_used = oracle.used();
        Ok(Session {
            oracle,
            problem,
            trace: Vec::new(),
            best: None,
            first_success: None,
            phases: Vec::new(),
            phase_start: start_used,
            start_used,
        })
    }

    pub fn remaining(&self) -> usize {
        self.oracle.remaining()
    }

    pub fn used(&self) -> usize {
        self.oracle.used() - self.start_used
    }

    pub fn succeeded(&self) -> bool {
        self.first_success.is_some()
    }

    /// Trace index of the most recent probe.
    pub fn last_index(&self) -> usize {
        self.trace.len() - 1
    }

    pub fn accept_at(&mut self, idx: usize) {
        self.trace[idx].accepted = true;
    }

    pub fn accept_last(&mut self) {
        let idx = self.last_index();
        self.accept_at(idx);
    }

    /// Closes the current phase under `name`.
    pub fn end_phase(&mut self, name: &str) {
        let used = self.oracle.used();
        self.phases.push((name.to_string(), used - self.phase_start));
        self.phase_start = used;
    }

    /// Sends one query, records the trace point, and checks it as a success
    /// witness. Points are recorded as not accepted; the attack flips that
    /// once it adopts one.
    pub fn probe(&mut self, x: &Tensor) -> Result<Probe> {
        let reply = self.oracle.query(x)?;
        let (value, hit) = match &reply {
            OracleReply::Exhausted => return Ok(Probe::Exhausted),
            OracleReply::Scores(s) => {
                let m = self.problem.margin(s)?;
                (m, m < 0.0)
            }
            OracleReply::Label(l) => {
                let hit = match self.problem.target {
                    None => *l != self.problem.label,
                    Some(t) => *l == t,
                };
                (l2_dist(x.data(), self.problem.image.data()), hit)
            }
        };
        let norm = perturbation_norm(self.problem.norm, x.data(), self.problem.image.data());
        let query_index = self.used();
        self.trace.push(TracePoint {
            query_index,
            value,
            accepted: false,
            norm,
        });
        if hit && fits_ball(self.problem, x.data()) {
            self.first_success.get_or_insert(query_index);
            if self.best.as_ref().is_none_or(|(_, _, n)| norm < *n) {
                self.best = Some((x.clone(), query_index, norm));
            }
        }
        Ok(match reply {
            OracleReply::Scores(_) => Probe::Margin(value),
            OracleReply::Label(_) => Probe::Decision(hit),
            OracleReply::Exhausted => unreachable!(),
        })
    }

    pub fn finish(mut self, failed_init: bool) -> AttackOutcome {
        if self.oracle.used() > self.phase_start {
            self.end_phase("tail");
        }
        let queries_used = self.used();
        let (success, best, success_query, final_norm) = match self.best {
            Some((img, q, n)) => (true, img, Some(q), n),
            None => (false, self.problem.image.clone(), None, 0.0),
        };
        AttackOutcome {
            success,
            queries_used,
            final_norm,
            trace: self.trace,
            best,
            success_query,
            first_success: self.first_success,
            failed_init,
            phases: self.phases,
        }
    }
}

/// Builds a tensor with the same shape as `like`.
pub(crate) fn tensor_like(like: &Tensor, data: Vec<f32>) -> Result<Tensor> {
    Tensor::new(like.shape(), data)
}

/// Fixed-probe bisection between a known-adversarial point and the clean
/// image: each probe moves one end to the midpoint, keeping the invariant
/// that the far end answers adversarial. Returns the adversarial end plus
/// the trace index of the query that produced it (`None` when it is still
/// the starting point). `accept_hits` marks every kept midpoint as adopted;
/// successive hits only ever move closer, so that keeps accepted distance
/// traces monotone. Stops early on exhaustion.
pub(crate) fn bisect_toward(
    session: &mut Session,
    far: &[f32],
    probes: usize,
    accept_hits: bool,
) -> Result<(Vec<f32>, Option<usize>)> {
    let clean = session.problem.image.data().to_vec();
    let mut lo = clean;
    let mut hi = far.to_vec();
    let mut hi_idx = None;
    for _ in 0..probes {
        let mid: Vec<f32> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
        let t = tensor_like(&session.problem.image, mid.clone())?;
        match session.probe(&t)? {
            Probe::Decision(true) => {
                hi = mid;
                hi_idx = Some(session.last_index());
                if accept_hits {
                    session.accept_last();
                }
            }
            Probe::Decision(false) => lo = mid,
            Probe::Exhausted => break,
            Probe::Margin(_) => unreachable!("bisection runs in label mode"),
        }
    }
    Ok((hi, hi_idx))
}

/// Shared decision-attack opener: probe the clean image, then spend the
/// initialization sub-budget on uniform random draws until one is
/// misclassified, then bisect it toward the clean image. The found draw and
/// every bisection hit are marked adopted. Returns the starting iterate, or
/// `None` for failed init / instant success (told apart by
/// `session.succeeded()`).
pub(crate) fn decision_init(
    session: &mut Session,
    init_fraction: f32,
    bisect_probes: usize,
    stream: &crate::rng::Stream,
) -> Result<Option<Vec<f32>>> {
    let budget = session.oracle.budget();
    let sub = ((budget as f32 * init_fraction).ceil() as usize).max(2);

    let clean = session.problem.image.clone();
    if matches!(session.probe(&clean)?, Probe::Decision(true) | Probe::Exhausted) {
        session.end_phase("probe");
        return Ok(None);
    }
    session.end_phase("probe");

    let draws = sub.saturating_sub(1 + bisect_probes).max(1);
    let mut found = None;
    let s = stream.derive(1);
    for i in 0..draws {
        let mut buf = vec![0f32; session.problem.dim()];
        s.derive(i as u64).fill_uniform(&mut buf, 0.0, 1.0);
        let t = tensor_like(&session.problem.image, buf.clone())?;
        match session.probe(&t)? {
            Probe::Decision(true) => {
                session.accept_last();
                found = Some(buf);
                break;
            }
            Probe::Decision(false) => {}
            Probe::Exhausted => break,
            Probe::Margin(_) => unreachable!(),
        }
    }
    session.end_phase("init-search");
    let Some(far) = found else {
        return Ok(None);
    };

    let (start, _) = bisect_toward(session, &far, bisect_probes, true)?;
    session.end_phase("init-bisect");
    Ok(Some(start))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthetic_textures, TextureSpec};
    use crate::models::{train_classifier, Architecture, Classifier, NormKind, TrainConfig};
    use crate::oracle::Defense;
    use crate::rng::Stream;

    /// A trained two-class toy model plus an image it classifies correctly.
    fn toy() -> (Classifier, Tensor, usize) {
        let data = synthetic_textures(&TextureSpec::new(24, 2, 6, 6), &Stream::master(11)).unwrap();
        let cfg = TrainConfig {
            epochs: 8,
            ..TrainConfig::default()
        };
        let (clf, _) = train_classifier(
            &data,
            Architecture::linear((3, 6, 6), 2),
            &cfg,
            &Stream::master(12),
        )
        .unwrap();
        let pick = (0..data.images.len())
            .find(|&i| clf.classify(&data.images[i]).unwrap() == data.labels[i])
            .expect("some image classifies correctly");
        (clf, data.images[pick].clone(), data.labels[pick])
    }

    /// Linear model whose every score is 0.5, so margins vanish everywhere.
    fn flat_classifier() -> Classifier {
        let mut clf = Classifier::init(Architecture::linear((3, 6, 6), 2), &Stream::master(1))
            .unwrap();
        for slot in 0..clf.params().len() {
            let t = clf.params_mut().at_mut(slot);
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        clf
    }

    fn check_bookkeeping(outcome: &AttackOutcome, oracle_used: usize, problem: &AttackProblem) {
        assert_eq!(outcome.queries_used, oracle_used);
        assert_eq!(outcome.trace.len(), outcome.queries_used);
        let phase_sum: usize = outcome.phases.iter().map(|(_, n)| n).sum();
        assert_eq!(phase_sum, outcome.queries_used);
        assert!(fits_ball(problem, outcome.best.data()));
        assert!(outcome
            .best
            .data()
            .iter()
            .all(|v| (0.0..=1.0).contains(v)));
        if outcome.success {
            assert!(outcome.success_query.is_some());
            assert!(outcome.first_success.is_some());
            assert!(outcome.first_success <= outcome.success_query);
        } else {
            assert_eq!(outcome.final_norm, 0.0);
        }
    }

    fn accepted_values(outcome: &AttackOutcome) -> Vec<f32> {
        outcome
            .trace
            .iter()
            .filter(|p| p.accepted)
            .map(|p| p.value)
            .collect()
    }

    fn assert_non_increasing(vals: &[f32]) {
        for w in vals.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-6,
                "accepted trace must not increase: {} then {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn nes_zero_gradient_means_zero_steps() {
        let clf = flat_classifier();
        let (_, image, label) = toy();
        let problem = AttackProblem::untargeted(image, label, NormKind::Linf, 8.0 / 255.0).unwrap();
        let mut oracle = DefendedOracle::new(
            &clf,
            Defense::None,
            OutputMode::Scores,
            40,
            &Stream::master(2),
        );
        let cfg = NesConfig {
            samples: 4,
            ..NesConfig::default()
        };
        let out = nes_attack(&mut oracle, &problem, &cfg, &Stream::master(3)).unwrap();
        assert!(!out.success);
        for p in out.trace.iter().filter(|p| p.accepted) {
            assert_eq!(p.norm, 0.0, "iterate moved despite zero gradient");
        }
        check_bookkeeping(&out, oracle.used(), &problem);
    }

    #[test]
    fn nes_books_every_query_and_stays_in_ball() {
        let (clf, image, label) = toy();
        let problem = AttackProblem::untargeted(image, label, NormKind::Linf, 0.1).unwrap();
        let mut oracle = DefendedOracle::new(
            &clf,
            Defense::None,
            OutputMode::Scores,
            150,
            &Stream::master(4),
        );
        let cfg = NesConfig {
            samples: 10,
            ..NesConfig::default()
        };
        let out = nes_attack(&mut oracle, &problem, &cfg, &Stream::master(5)).unwrap();
        check_bookkeeping(&out, oracle.used(), &problem);
        assert!(out.queries_used <= 150);
    }

    #[test]
    fn nes_rejects_odd_sample_counts() {
        let (clf, image, label) = toy();
        let problem = AttackProblem::untargeted(image, label, NormKind::Linf, 0.1).unwrap();
        let mut oracle = DefendedOracle::new(
            &clf,
            Defense::None,
            OutputMode::Scores,
            10,
            &Stream::master(4),
        );
        let cfg = NesConfig {
            samples: 5,
            ..NesConfig::default()
        };
        assert!(nes_attack(&mut oracle, &problem, &cfg, &Stream::master(5)).is_err());
    }

    #[test]
    fn simba_accepted_margins_strictly_decrease() {
        let (clf, image, label) = toy();
        let problem = AttackProblem::untargeted(image, label, NormKind::L2, 2.0).unwrap();
        let mut oracle = DefendedOracle::new(
            &clf,
            Defense::None,
            OutputMode::Scores,
            300,
            &Stream::master(6),
        );
        let out =
            simba_attack(&mut oracle, &problem, &SimbaConfig::default(), &Stream::master(7))
                .unwrap();
        let vals = accepted_values(&out);
        assert!(vals.len() >= 2, "expected some accepted moves");
        for w in vals.windows(2) {
            assert!(w[1] < w[0], "accepts must strictly improve the margin");
        }
        check_bookkeeping(&out, oracle.used(), &problem);
    }

    #[test]
    fn simba_wants_l2_problems() {
        let (clf, image, label) = toy();
        let problem = AttackProblem::untargeted(image, label, NormKind::Linf, 0.1).unwrap();
        let mut oracle = DefendedOracle::new(
            &clf,
            Defense::None,
            OutputMode::Scores,
            10,
            &Stream::master(6),
        );
        assert!(
            simba_attack(&mut oracle, &problem, &SimbaConfig::default(), &Stream::master(7))
                .is_err()
        );
    }

    #[test]
    fn square_keeps_perturbations_pegged_at_epsilon() {
        let clf = flat_classifier();
        let eps = 0.2;
        let image = Tensor::full(&[3, 6, 6], 0.5);
        let problem = AttackProblem::untargeted(image, 0, NormKind::Linf, eps).unwrap();
        let mut oracle = DefendedOracle::new(
            &clf,
            Defense::None,
            OutputMode::Scores,
            60,
            &Stream::master(8),
        );
        let out =
            square_attack(&mut oracle, &problem, &SquareConfig::default(), &Stream::master(9))
                .unwrap();
        // Interior image: nothing clamps, so every candidate after the
        // clean probe sits exactly on the ball surface.
        for p in &out.trace[1..] {
            assert!((p.norm - eps).abs() < 1e-6, "expected |delta| == eps");
        }
        check_bookkeeping(&out, oracle.used(), &problem);
    }

    #[test]
    fn square_accepted_margins_never_increase() {
        let (clf, image, label) = toy();
        let problem = AttackProblem::untargeted(image, label, NormKind::Linf, 0.3).unwrap();
        let mut oracle = DefendedOracle::new(
            &clf,
            Defense::None,
            OutputMode::Scores,
            200,
            &Stream::master(10),
        );
        let out =
            square_attack(&mut oracle, &problem, &SquareConfig::default(), &Stream::master(11))
                .unwrap();
        assert_non_increasing(&accepted_values(&out));
        check_bookkeeping(&out, oracle.used(), &problem);
    }

    #[test]
    fn boundary_accepted_distances_never_increase() {
        let (clf, image, label) = toy();
        let problem = AttackProblem::untargeted(image, label, NormKind::L2, 4.0).unwrap();
        let mut oracle = DefendedOracle::new(
            &clf,
            Defense::None,
            OutputMode::Label,
            400,
            &Stream::master(12),
        );
        let out = boundary_attack(
            &mut oracle,
            &problem,
            &BoundaryConfig::default(),
            &Stream::master(13),
        )
        .unwrap();
        assert!(!out.failed_init, "toy model should yield a starting point");
        let vals = accepted_values(&out);
        assert!(!vals.is_empty());
        assert_non_increasing(&vals);
        check_bookkeeping(&out, oracle.used(), &problem);
    }

    #[test]
    fn boundary_flags_failed_init() {
        let clf = flat_classifier();
        // Ties resolve to label 0, so label-0 problems never see a flip.
        let problem =
            AttackProblem::untargeted(Tensor::full(&[3, 6, 6], 0.5), 0, NormKind::L2, 1.0)
                .unwrap();
        let mut oracle = DefendedOracle::new(
            &clf,
            Defense::None,
            OutputMode::Label,
            100,
            &Stream::master(14),
        );
        let out = boundary_attack(
            &mut oracle,
            &problem,
            &BoundaryConfig::default(),
            &Stream::master(15),
        )
        .unwrap();
        assert!(out.failed_init);
        assert!(!out.success);
        check_bookkeeping(&out, oracle.used(), &problem);
    }

    #[test]
    fn hsj_full_iterations_cost_exactly_their_budget() {
        let (clf, image, label) = toy();
        let problem = AttackProblem::untargeted(image, label, NormKind::L2, 4.0).unwrap();
        let mut oracle = DefendedOracle::new(
            &clf,
            Defense::None,
            OutputMode::Label,
            400,
            &Stream::master(16),
        );
        let cfg = HsjConfig {
            n_est: 20,
            ..HsjConfig::default()
        };
        let out = hopskipjump_attack(&mut oracle, &problem, &cfg, &Stream::master(17)).unwrap();
        assert!(!out.failed_init);
        let per_iter = cfg.n_est + 1 + cfg.bisect_probes;
        let iters: Vec<usize> = out
            .phases
            .iter()
            .filter(|(name, _)| name == "iter")
            .map(|(_, n)| *n)
            .collect();
        assert!(!iters.is_empty(), "expected at least one full iteration");
        for n in iters {
            assert_eq!(n, per_iter);
        }
        assert_non_increasing(&accepted_values(&out));
        check_bookkeeping(&out, oracle.used(), &problem);
    }

    #[test]
    fn hsj_normal_estimate_aligns_with_a_linear_boundary() {
        // Hand-built antisymmetric linear head: logit0 = a.x, logit1 = -a.x,
        // so the boundary normal into class 1 is exactly -a.
        let dim = 27;
        let mut clf =
            Classifier::init(Architecture::linear((3, 3, 3), 2), &Stream::master(18)).unwrap();
        let mut a = vec![0f32; dim];
        Stream::master(19).fill_normal(&mut a);
        {
            let w = clf.params_mut().at_mut(0);
            for (i, ai) in a.iter().enumerate() {
                w.data_mut()[i * 2] = *ai;
                w.data_mut()[i * 2 + 1] = -*ai;
            }
        }
        let x = Tensor::full(&[3, 3, 3], 0.5);
        let label = clf.classify(&x).unwrap();
        // Walk toward the other side, then bisect offline to the boundary.
        let dir: Vec<f32> = a
            .iter()
            .map(|&ai| if label == 0 { -ai } else { ai })
            .collect();
        let dn = l2_norm(&dir);
        let mut far: Vec<f32>;
        let mut t = 0.05;
        loop {
            far = x
                .data()
                .iter()
                .zip(&dir)
                .map(|(v, d)| (v + t * d / dn).clamp(0.0, 1.0))
                .collect();
            if clf.classify(&tensor_like(&x, far.clone()).unwrap()).unwrap() != label {
                break;
            }
            t *= 2.0;
            assert!(t < 100.0, "no boundary crossing found");
        }
        let mut lo = x.data().to_vec();
        let mut hi = far;
        for _ in 0..40 {
            let mid: Vec<f32> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
            if clf.classify(&tensor_like(&x, mid.clone()).unwrap()).unwrap() != label {
                hi = mid;
            } else {
                lo = mid;
            }
        }

        let problem = AttackProblem::untargeted(x.clone(), label, NormKind::L2, 10.0).unwrap();
        let mut oracle = DefendedOracle::new(
            &clf,
            Defense::None,
            OutputMode::Label,
            1000,
            &Stream::master(20),
        );
        let v = estimate_normal(&mut oracle, &problem, &hi, 0.05, 400, &Stream::master(21))
            .unwrap()
            .expect("budget covers the estimate");
        let cos: f32 = v
            .iter()
            .zip(&dir)
            .map(|(vi, di)| vi * di / dn)
            .sum();
        assert!(cos > 0.5, "estimate should align with the true normal, cos={cos}");
    }

    #[test]
    fn attacks_replay_identically_for_a_seed() {
        let (clf, image, label) = toy();
        let run = |which: AttackKind| -> (AttackOutcome, AttackOutcome) {
            let norm = match which.oracle_mode() {
                OutputMode::Scores if which == AttackKind::Square => NormKind::Linf,
                OutputMode::Scores if which == AttackKind::Nes => NormKind::Linf,
                _ => NormKind::L2,
            };
            let radius = if norm == NormKind::Linf { 0.15 } else { 3.0 };
            let problem = AttackProblem::untargeted(image.clone(), label, norm, radius).unwrap();
            let go = || {
                let mut oracle = DefendedOracle::new(
                    &clf,
                    Defense::None,
                    which.oracle_mode(),
                    160,
                    &Stream::master(22),
                );
                let s = Stream::master(23);
                match which {
                    AttackKind::Nes => nes_attack(
                        &mut oracle,
                        &problem,
                        &NesConfig {
                            samples: 10,
                            ..NesConfig::default()
                        },
                        &s,
                    ),
                    AttackKind::Simba => {
                        simba_attack(&mut oracle, &problem, &SimbaConfig::default(), &s)
                    }
                    AttackKind::Square => {
                        square_attack(&mut oracle, &problem, &SquareConfig::default(), &s)
                    }
                    AttackKind::Boundary => {
                        boundary_attack(&mut oracle, &problem, &BoundaryConfig::default(), &s)
                    }
                    AttackKind::Hsj => hopskipjump_attack(
                        &mut oracle,
                        &problem,
                        &HsjConfig {
                            n_est: 10,
                            ..HsjConfig::default()
                        },
                        &s,
                    ),
                }
                .unwrap()
            };
            (go(), go())
        };
        for kind in AttackKind::ALL {
            let (a, b) = run(kind);
            assert_eq!(a.trace, b.trace, "{} trace diverged across replays", kind.name());
            assert_eq!(a.best.data(), b.best.data());
            assert_eq!(a.phases, b.phases);
            assert_eq!(a.success, b.success);
        }
    }

    #[test]
    fn randomized_defense_keeps_attacks_reproducible() {
        use crate::purify::{EncoderFamily, PatchGrid, Purifier, PurifierPool};
        let (clf, image, label) = toy();
        let members: Vec<Purifier> = (0..2)
            .map(|i| Purifier::build(EncoderFamily::EdsrLite, 32, &Stream::master(30 + i)).unwrap())
            .collect();
        let pool = PurifierPool::from_purifiers(members, &[], 0).unwrap();
        let grid = PatchGrid::new(2, 2, 6, 6).unwrap();
        let problem = AttackProblem::untargeted(image, label, NormKind::Linf, 0.15).unwrap();
        let go = || {
            let mut oracle = DefendedOracle::new(
                &clf,
                Defense::Patchwise {
                    pool: &pool,
                    grid: grid.clone(),
                },
                OutputMode::Scores,
                120,
                &Stream::master(31),
            );
            square_attack(&mut oracle, &problem, &SquareConfig::default(), &Stream::master(32))
                .unwrap()
        };
        let (a, b) = (go(), go());
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.best.data(), b.best.data());
    }

    #[test]
    fn l2_projection_lands_in_ball_and_box() {
        let origin = vec![0.1, 0.9, 0.5, 0.0];
        let mut x = vec![1.4, -0.6, 0.5, 0.9];
        project_l2(&mut x, &origin, 0.7);
        assert!(l2_dist(&x, &origin) <= 0.7 * 1.0001);
        assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn l2_projection_inside_ball_only_clamps() {
        let origin = vec![0.5, 0.5];
        let mut x = vec![0.6, 0.45];
        project_l2(&mut x, &origin, 1.0);
        assert_eq!(x, vec![0.6, 0.45]);
    }

    #[test]
    fn norms_match_hand_values() {
        let a = vec![0.0, 0.3, 1.0];
        let b = vec![0.4, 0.3, 0.0];
        assert!((linf_dist(&a, &b) - 1.0).abs() < 1e-7);
        assert!((l2_dist(&a, &b) - (0.16f32 + 1.0).sqrt()).abs() < 1e-6);
        assert_eq!(perturbation_norm(NormKind::Linf, &a, &b), 1.0);
    }

    #[test]
    fn attack_kind_names_roundtrip() {
        for k in AttackKind::ALL {
            assert_eq!(AttackKind::from_name(k.name()).unwrap(), k);
        }
        assert!(AttackKind::from_name("zoo").is_err());
    }
}
