//! Decision-based attack walking along the class boundary: a random step on
//! the sphere around the clean image, then a contraction toward it, with
//! both step sizes adapted from their recent success rates.

use super::{decision_init, l2_dist, l2_norm, tensor_like, AttackOutcome, Probe, Session};
use crate::error::{Error, Result};
use crate::models::AttackProblem;
use crate::oracle::{DefendedOracle, OutputMode};
use crate::rng::Stream;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundaryConfig {
    /// Relative size of the orthogonal step on the sphere.
    pub spherical_step: f32,
    /// Relative size of the contraction toward the clean image.
    pub source_step: f32,
    /// Multiplier applied when a step succeeds or fails too often.
    pub step_adaptation: f32,
    /// Stop once the source step shrinks below this.
    pub converge: f32,
    /// Fraction of the budget reserved for finding a starting point.
    pub init_fraction: f32,
    /// Queries spent bisecting the starting point toward the clean image.
    pub bisect_probes: usize,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        BoundaryConfig {
            spherical_step: 0.01,
            source_step: 0.01,
            step_adaptation: 1.5,
            converge: 1e-7,
            init_fraction: 0.1,
            bisect_probes: 10,
        }
    }
}

/// Success counts over a sliding window, driving one step size.
struct Adapt {
    hits: usize,
    tries: usize,
}

impl Adapt {
    const WINDOW: usize = 10;

    fn new() -> Self {
        Adapt { hits: 0, tries: 0 }
    }

    /// Records one try; once the window fills, nudges `step` and resets.
    fn record(&mut self, hit: bool, step: &mut f32, factor: f32) {
        self.tries += 1;
        self.hits += hit as usize;
        if self.tries == Self::WINDOW {
            let rate = self.hits as f32 / self.tries as f32;
            if rate > 0.5 {
                *step *= factor;
            } else if rate < 0.2 {
                *step /= factor;
            }
            self.hits = 0;
            self.tries = 0;
        }
    }
}

pub fn boundary_attack(
    oracle: &mut DefendedOracle,
    problem: &AttackProblem,
    cfg: &BoundaryConfig,
    stream: &Stream,
) -> Result<AttackOutcome> {
    if !(cfg.spherical_step > 0.0 && cfg.source_step > 0.0) {
        return Err(Error::arg("boundary step sizes must be positive"));
    }
    if cfg.step_adaptation <= 1.0 {
        return Err(Error::arg("boundary step adaptation must exceed 1"));
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

    let mut sph = cfg.spherical_step;
    let mut src = cfg.source_step;
    let mut orth_stats = Adapt::new();
    let mut src_stats = Adapt::new();
    let s = stream.derive(2);
    for t in 0u64.. {
        if session.remaining() == 0 || src < cfg.converge || dist < 1e-9 {
            break;
        }
        let mut draws = s.derive(t);

        // Orthogonal move: perturb, reproject onto the sphere of the
        // current distance, clamp to the box.
        let mut eta = vec![0f32; origin.len()];
        draws.fill_normal(&mut eta);
        let en = l2_norm(&eta);
        if en == 0.0 {
            break;
        }
        let scale = sph * dist / en;
        let shifted: Vec<f32> = cur.iter().zip(&eta).map(|(c, e)| c + e * scale).collect();
        let dir: Vec<f32> = shifted.iter().zip(&origin).map(|(s, o)| s - o).collect();
        let dn = l2_norm(&dir);
        if dn == 0.0 {
            break;
        }
        let orth: Vec<f32> = origin
            .iter()
            .zip(&dir)
            .map(|(o, d)| (o + d * dist / dn).clamp(0.0, 1.0))
            .collect();
        let orth_hit = match session.probe(&tensor_like(&problem.image, orth.clone())?)? {
            Probe::Decision(h) => h,
            Probe::Exhausted => break,
            Probe::Margin(_) => unreachable!(),
        };
        orth_stats.record(orth_hit, &mut sph, cfg.step_adaptation);
        if !orth_hit {
            continue;
        }

        // Source move: contract the surviving point toward the clean image.
        let cand: Vec<f32> = origin
            .iter()
            .zip(&orth)
            .map(|(o, p)| (o + (p - o) * (1.0 - src)).clamp(0.0, 1.0))
            .collect();
        let cand_hit = match session.probe(&tensor_like(&problem.image, cand.clone())?)? {
            Probe::Decision(h) => h,
            Probe::Exhausted => break,
            Probe::Margin(_) => unreachable!(),
        };
        src_stats.record(cand_hit, &mut src, cfg.step_adaptation);
        let nd = l2_dist(&cand, &origin);
        if cand_hit && nd <= dist {
            session.accept_last();
            cur = cand;
            dist = nd;
        }
    }
    session.end_phase("search");
    Ok(session.finish(false))
}
