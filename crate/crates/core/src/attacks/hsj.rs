//! Decision-based attack with an estimated boundary normal: binary-search
//! to the boundary, estimate the normal from label flips around it, jump
//! along it, repeat.

use super::{
    bisect_toward, decision_init, l2_dist, l2_norm, tensor_like, AttackOutcome, Probe, Session,
};
use crate::error::{Error, Result};
use crate::models::AttackProblem;
use crate::oracle::{DefendedOracle, OutputMode};
use crate::rng::Stream;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HsjConfig {
    /// Label queries per normal estimate.
    pub n_est: usize,
    /// Scale of the binary-search tolerance and sampling radius.
    pub gamma: f32,
    /// Queries per boundary binary search.
    pub bisect_probes: usize,
    /// Fraction of the budget reserved for finding a starting point.
    pub init_fraction: f32,
}

impl Default for HsjConfig {
    fn default() -> Self {
        HsjConfig {
            n_est: 100,
            gamma: 1.0,
            bisect_probes: 10,
            init_fraction: 0.1,
        }
    }
}

/// Sign-weighted Monte Carlo estimate of the boundary normal at `at`,
/// pointing into the adversarial region. Each probe asks the label of
/// `at + radius * u` for a uniform unit `u`; the mean decision acts as a
/// control variate. Returns `None` when the budget dies mid-estimate.
fn estimate_with(
    session: &mut Session,
    problem: &AttackProblem,
    at: &[f32],
    radius: f32,
    n_est: usize,
    draws: &mut Stream,
) -> Result<Option<Vec<f32>>> {
    let d = at.len();
    let mut dirs: Vec<Vec<f32>> = Vec::with_capacity(n_est);
    let mut phis: Vec<f32> = Vec::with_capacity(n_est);
    for _ in 0..n_est {
        let u: Vec<f32> = draws.unit_vector(d).iter().map(|&v| v as f32).collect();
        let cand: Vec<f32> = at
            .iter()
            .zip(&u)
            .map(|(a, ui)| (a + radius * ui).clamp(0.0, 1.0))
            .collect();
        match session.probe(&tensor_like(&problem.image, cand)?)? {
            Probe::Decision(hit) => {
                phis.push(if hit { 1.0 } else { -1.0 });
                dirs.push(u);
            }
            Probe::Exhausted => return Ok(None),
            Probe::Margin(_) => unreachable!(),
        }
    }
    let mean = phis.iter().sum::<f32>() / n_est as f32;
    let mut v = vec![0f32; d];
    // All probes agreeing means the baseline removes everything; fall back
    // to the raw mean direction with the shared sign.
    let weights: Vec<f32> = if mean.abs() >= 1.0 {
        phis
    } else {
        phis.iter().map(|p| p - mean).collect()
    };
    for (u, w) in dirs.iter().zip(&weights) {
        for (vi, ui) in v.iter_mut().zip(u) {
            *vi += w * ui / n_est as f32;
        }
    }
    let n = l2_norm(&v);
    if n > 1e-12 {
        for vi in v.iter_mut() {
            *vi /= n;
        }
    }
    Ok(Some(v))
}

/// Standalone normal estimate against an arbitrary label oracle, for
/// inspecting estimator quality. Returns the unit direction, or `None` if
/// the budget ran out.
pub fn estimate_normal(
    oracle: &mut DefendedOracle,
    problem: &AttackProblem,
    at: &[f32],
    radius: f32,
    n_est: usize,
    stream: &Stream,
) -> Result<Option<Vec<f32>>> {
    let mut session = Session::new(oracle, problem, OutputMode::Label)?;
    let mut draws = stream.clone();
    estimate_with(&mut session, problem, at, radius, n_est, &mut draws)
}

pub fn hopskipjump_attack(
    oracle: &mut DefendedOracle,
    problem: &AttackProblem,
    cfg: &HsjConfig,
    stream: &Stream,
) -> Result<AttackOutcome> {
    if cfg.n_est < 2 {
        return Err(Error::arg("hsj needs at least two estimation queries"));
    }
    if cfg.gamma <= 0.0 {
        return Err(Error::arg("hsj gamma must be positive"));
    }
    let mut session = Session::new(oracle, problem, OutputMode::Label)?;
    let origin = problem.image.data().to_vec();

    let Some(start) = decision_init(&mut session, cfg.init_fraction, cfg.bisect_probes, &stream.derive(1))?
    else {
        let failed = !session.succeeded();
        return Ok(session.finish(failed));
    };
    let mut cur = start;
    let mut dist = l2_dist(&cur, &origin);

    let d = problem.dim();
    let theta = cfg.gamma / (d as f32).powf(1.5);
    let full_iteration = cfg.n_est + 1 + cfg.bisect_probes;
    let s = stream.derive(2);
    for t in 0u64.. {
        if session.remaining() == 0 || dist < 1e-9 {
            break;
        }
        let before = session.used();
        let mut draws = s.derive(t);

        let radius = (d as f32).sqrt() * theta * dist;
        let Some(v) = estimate_with(&mut session, problem, &cur, radius, cfg.n_est, &mut draws)?
        else {
            break;
        };

        // Geometric jump along the estimated normal, shrinking over time.
        let xi = dist / ((t + 1) as f32).sqrt();
        let jump: Vec<f32> = cur
            .iter()
            .zip(&v)
            .map(|(c, vi)| (c + xi * vi).clamp(0.0, 1.0))
            .collect();
        let (jump_hit, jump_idx) =
            match session.probe(&tensor_like(&problem.image, jump.clone())?)? {
                Probe::Decision(h) => (h, session.last_index()),
                Probe::Exhausted => break,
                Probe::Margin(_) => unreachable!(),
            };

        // Pull the best known adversarial point back to the boundary.
        let from = if jump_hit { &jump } else { &cur };
        let (next, hit_idx) = bisect_toward(&mut session, from, cfg.bisect_probes, false)?;
        let nd = l2_dist(&next, &origin);
        if nd <= dist {
            // Adopt; the accepted query is the one that produced the point.
            let idx = hit_idx.or(if jump_hit { Some(jump_idx) } else { None });
            if let Some(i) = idx {
                session.accept_at(i);
            }
            cur = next;
            dist = nd;
        }
        if session.used() - before == full_iteration {
            session.end_phase("iter");
        } else {
            break;
        }
    }
    Ok(session.finish(false))
}
