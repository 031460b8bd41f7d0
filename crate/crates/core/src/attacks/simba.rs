//! Random-search attack over the pixel basis: try a signed step along one
//! coordinate at a time and keep whichever sign lowers the margin.

use super::{project_l2, tensor_like, AttackOutcome, Probe, Session};
use crate::error::{Error, Result};
use crate::models::{AttackProblem, NormKind};
use crate::oracle::{DefendedOracle, OutputMode};
use crate::rng::Stream;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimbaConfig {
    /// Coordinate step size.
    pub step: f32,
}

impl Default for SimbaConfig {
    fn default() -> Self {
        SimbaConfig { step: 0.2 }
    }
}

pub fn simba_attack(
    oracle: &mut DefendedOracle,
    problem: &AttackProblem,
    cfg: &SimbaConfig,
    stream: &Stream,
) -> Result<AttackOutcome> {
    if cfg.step <= 0.0 {
        return Err(Error::arg("simba step must be positive"));
    }
    if problem.norm != NormKind::L2 {
        return Err(Error::arg("simba is an l2 attack"));
    }
    let mut session = Session::new(oracle, problem, OutputMode::Scores)?;
    let origin = problem.image.data().to_vec();
    let mut current = origin.clone();

    let mut margin = match session.probe(&problem.image)? {
        Probe::Margin(m) => {
            session.accept_last();
            m
        }
        Probe::Exhausted => return Ok(session.finish(false)),
        Probe::Decision(_) => unreachable!(),
    };
    session.end_phase("probe");

    // Walk a fresh random permutation of the pixel basis each cycle.
    let mut order: Vec<usize> = (0..problem.dim()).collect();
    let mut cycle = 0u64;
    stream.derive(1).derive(cycle).shuffle(&mut order);
    let mut pos = 0;

    'search: while session.remaining() > 0 && !session.succeeded() {
        if pos == order.len() {
            cycle += 1;
            stream.derive(1).derive(cycle).shuffle(&mut order);
            pos = 0;
        }
        let coord = order[pos];
        pos += 1;
        for sign in [1.0f32, -1.0] {
            let mut cand = current.clone();
            cand[coord] += sign * cfg.step;
            project_l2(&mut cand, &origin, problem.radius);
            match session.probe(&tensor_like(&problem.image, cand.clone())?)? {
                Probe::Margin(m) if m < margin => {
                    session.accept_last();
                    current = cand;
                    margin = m;
                    break;
                }
                Probe::Margin(_) => {}
                Probe::Exhausted => break 'search,
                Probe::Decision(_) => unreachable!(),
            }
        }
    }
    session.end_phase("search");
    Ok(session.finish(false))
}
