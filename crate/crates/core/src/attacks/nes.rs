//! Gradient-estimation attack: antithetic Gaussian sampling around the
//! iterate, then a projected sign (or normalized) descent step on the
//! margin.

use super::{l2_norm, project, tensor_like, AttackOutcome, Probe, Session};
use crate::error::{Error, Result};
use crate::models::{AttackProblem, NormKind};
use crate::oracle::{DefendedOracle, OutputMode};
use crate::rng::Stream;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NesConfig {
    /// Step size of the descent update.
    pub lr: f32,
    /// Queries per gradient estimate; must be even (antithetic pairs).
    pub samples: usize,
    /// Smoothing radius of the Gaussian samples.
    pub mu: f32,
}

impl Default for NesConfig {
    fn default() -> Self {
        NesConfig {
            lr: 0.01,
            samples: 100,
            mu: 0.01,
        }
    }
}

fn clamp01(v: &mut [f32]) {
    for x in v.iter_mut() {
        *x = x.clamp(0.0, 1.0);
    }
}

/// Estimates the margin gradient at `at` from antithetic pairs. Sample
/// points are box-clamped but not ball-projected; only iterates live in the
/// ball. Returns `None` when the budget dies mid-estimate (the partial
/// queries stay counted) or a sample point already turned out adversarial.
fn estimate_gradient(
    session: &mut Session,
    problem: &AttackProblem,
    at: &[f32],
    cfg: &NesConfig,
    stream: &mut Stream,
) -> Result<Option<Vec<f32>>> {
    let d = at.len();
    let mut g = vec![0f32; d];
    let pairs = cfg.samples / 2;
    for _ in 0..pairs {
        let mut u = vec![0f32; d];
        stream.fill_normal(&mut u);
        let mut plus: Vec<f32> = at.iter().zip(&u).map(|(x, z)| x + cfg.mu * z).collect();
        let mut minus: Vec<f32> = at.iter().zip(&u).map(|(x, z)| x - cfg.mu * z).collect();
        clamp01(&mut plus);
        clamp01(&mut minus);
        let m_plus = match session.probe(&tensor_like(&problem.image, plus)?)? {
            Probe::Margin(m) => m,
            Probe::Exhausted => return Ok(None),
            Probe::Decision(_) => unreachable!(),
        };
        let m_minus = match session.probe(&tensor_like(&problem.image, minus)?)? {
            Probe::Margin(m) => m,
            Probe::Exhausted => return Ok(None),
            Probe::Decision(_) => unreachable!(),
        };
        let w = (m_plus - m_minus) / (2.0 * cfg.mu * pairs as f32);
        for (gi, zi) in g.iter_mut().zip(&u) {
            *gi += w * zi;
        }
        if session.succeeded() {
            return Ok(None);
        }
    }
    Ok(Some(g))
}

pub fn nes_attack(
    oracle: &mut DefendedOracle,
    problem: &AttackProblem,
    cfg: &NesConfig,
    stream: &Stream,
) -> Result<AttackOutcome> {
    if cfg.samples < 2 || cfg.samples % 2 != 0 {
        return Err(Error::arg("nes sample count must be even and positive"));
    }
    if !(cfg.lr > 0.0 && cfg.mu > 0.0) {
        return Err(Error::arg("nes lr and mu must be positive"));
    }
    let mut session = Session::new(oracle, problem, OutputMode::Scores)?;
    let origin = problem.image.data().to_vec();
    let mut x = origin.clone();

    match session.probe(&problem.image)? {
        Probe::Margin(_) => session.accept_last(),
        Probe::Exhausted => return Ok(session.finish(false)),
        Probe::Decision(_) => unreachable!(),
    }
    session.end_phase("probe");

    let s = stream.derive(2);
    for t in 0u64.. {
        if session.remaining() == 0 || session.succeeded() {
            break;
        }
        let mut draws = s.derive(t);
        let Some(g) = estimate_gradient(&mut session, problem, &x, cfg, &mut draws)? else {
            break;
        };
        match problem.norm {
            NormKind::Linf => {
                for (xi, gi) in x.iter_mut().zip(&g) {
                    if *gi > 0.0 {
                        *xi -= cfg.lr;
                    } else if *gi < 0.0 {
                        *xi += cfg.lr;
                    }
                }
            }
            NormKind::L2 => {
                let n = l2_norm(&g);
                if n > 0.0 {
                    for (xi, gi) in x.iter_mut().zip(&g) {
                        *xi -= cfg.lr * gi / n;
                    }
                }
            }
        }
        project(problem.norm, &mut x, &origin, problem.radius);
        match session.probe(&tensor_like(&problem.image, x.clone())?)? {
            Probe::Margin(_) => session.accept_last(),
            Probe::Exhausted => break,
            Probe::Decision(_) => unreachable!(),
        }
    }
    session.end_phase("search");
    Ok(session.finish(false))
}
