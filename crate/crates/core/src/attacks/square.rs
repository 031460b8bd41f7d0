//! Random-search attack with square patches: stripes at the corners of the
//! linf ball to start, then ever-smaller squares rewritten to +-eps, keeping
//! a candidate only when the margin drops.

use super::{tensor_like, AttackOutcome, Probe, Session};
use crate::error::{Error, Result};
use crate::models::{AttackProblem, NormKind};
use crate::oracle::{DefendedOracle, OutputMode};
use crate::rng::Stream;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SquareConfig {
    /// Starting fraction of pixels one square covers.
    pub p_init: f32,
}

impl Default for SquareConfig {
    fn default() -> Self {
        SquareConfig { p_init: 0.05 }
    }
}

/// Iteration thresholds (on a 10k-query scale) after which the square
/// shrinks by another halving of `p`.
const SCHEDULE: [usize; 8] = [10, 50, 200, 1000, 2000, 4000, 6000, 8000];

/// `p` for the given iteration, with the schedule stretched to the actual
/// query budget.
fn p_for(it: usize, budget: usize, p_init: f32) -> f32 {
    let scaled = it.saturating_mul(10_000) / budget.max(1);
    let halvings = SCHEDULE.iter().filter(|&&b| scaled >= b).count();
    p_init / (1u32 << halvings) as f32
}

fn side_for(p: f32, h: usize, w: usize) -> usize {
    let s = (p * (h * w) as f32).sqrt().round() as usize;
    s.clamp(1, h.min(w))
}

pub fn square_attack(
    oracle: &mut DefendedOracle,
    problem: &AttackProblem,
    cfg: &SquareConfig,
    stream: &Stream,
) -> Result<AttackOutcome> {
    if !(cfg.p_init > 0.0 && cfg.p_init <= 1.0) {
        return Err(Error::arg("square p_init must lie in (0, 1]"));
    }
    if problem.norm != NormKind::Linf {
        return Err(Error::arg("square is an linf attack"));
    }
    let shape = problem.image.shape();
    if shape.len() != 3 {
        return Err(Error::arg("square expects a [channels, h, w] image"));
    }
    let (channels, h, w) = (shape[0], shape[1], shape[2]);
    let eps = problem.radius;
    let mut session = Session::new(oracle, problem, OutputMode::Scores)?;
    let origin = problem.image.data().to_vec();

    match session.probe(&problem.image)? {
        Probe::Margin(_) => {}
        Probe::Exhausted => return Ok(session.finish(false)),
        Probe::Decision(_) => unreachable!(),
    }
    session.end_phase("probe");
    if session.succeeded() {
        return Ok(session.finish(false));
    }

    // Vertical-stripe start: one sign per channel and column, the whole
    // column pushed to a ball corner.
    let mut delta = vec![0f32; origin.len()];
    let mut s_init = stream.derive(1);
    for c in 0..channels {
        for col in 0..w {
            let sgn = s_init.sign() as f32;
            for r in 0..h {
                delta[c * h * w + r * w + col] = sgn * eps;
            }
        }
    }
    let candidate = |delta: &[f32]| -> Vec<f32> {
        origin
            .iter()
            .zip(delta)
            .map(|(o, d)| (o + d).clamp(0.0, 1.0))
            .collect()
    };

    let mut margin = match session.probe(&tensor_like(&problem.image, candidate(&delta))?)? {
        Probe::Margin(m) => {
            session.accept_last();
            m
        }
        Probe::Exhausted => return Ok(session.finish(false)),
        Probe::Decision(_) => unreachable!(),
    };
    session.end_phase("init");

    let budget = session.oracle.budget();
    let s_iter = stream.derive(2);
    for it in 0u64.. {
        if session.remaining() == 0 || session.succeeded() {
            break;
        }
        let mut draws = s_iter.derive(it);
        let side = side_for(p_for(it as usize, budget, cfg.p_init), h, w);
        let r0 = draws.index(h - side + 1);
        let c0 = draws.index(w - side + 1);
        let mut next = delta.clone();
        for c in 0..channels {
            let sgn = draws.sign() as f32;
            for r in r0..r0 + side {
                for col in c0..c0 + side {
                    next[c * h * w + r * w + col] = sgn * eps;
                }
            }
        }
        match session.probe(&tensor_like(&problem.image, candidate(&next))?)? {
            Probe::Margin(m) if m < margin => {
                session.accept_last();
                delta = next;
                margin = m;
            }
            Probe::Margin(_) => {}
            Probe::Exhausted => break,
            Probe::Decision(_) => unreachable!(),
        }
    }
    session.end_phase("search");
    Ok(session.finish(false))
}
