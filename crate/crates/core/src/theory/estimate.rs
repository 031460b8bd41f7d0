//! Monte Carlo estimators: Gaussian smoothing, the randomized two-point
//! gradient sample, pool diversity, Lipschitz constants, and norm moments.

use super::{PointMap, ScalarField};
use crate::rng::Stream;
use crate::{Error, Result};

/// How to smooth: radius, sample count, and the stream that makes repeated
/// calls reproducible. `capped` enforces the bounded-radius regime the
/// convergence proof assumes.
#[derive(Debug, Clone)]
pub struct SmoothingSpec {
    mu: f64,
    samples: usize,
    stream: Stream,
}

impl SmoothingSpec {
    pub fn new(mu: f64, samples: usize, stream: &Stream) -> Result<SmoothingSpec> {
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::arg(format!(
                "smoothing radius must be positive and finite, got {mu}"
            )));
        }
        if samples == 0 {
            return Err(Error::arg("smoothing needs at least one sample"));
        }
        Ok(SmoothingSpec {
            mu,
            samples,
            stream: stream.clone(),
        })
    }

    /// Like `new`, but additionally requires `mu <= cap`.
    pub fn capped(mu: f64, samples: usize, cap: f64, stream: &Stream) -> Result<SmoothingSpec> {
        if mu > cap {
            return Err(Error::arg(format!(
                "smoothing radius {mu} exceeds the cap {cap}"
            )));
        }
        SmoothingSpec::new(mu, samples, stream)
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn samples(&self) -> usize {
        self.samples
    }
}

/// Monte Carlo mean of f(x + mu*u) over standard-normal u, with its
/// standard error (zero when only one sample was asked for).
pub fn gaussian_smooth<F: ScalarField + ?Sized>(
    f: &F,
    x: &[f64],
    spec: &SmoothingSpec,
) -> Result<(f64, f64)> {
    if x.len() != f.dim() {
        return Err(Error::arg(format!(
            "point has {} coordinates, field expects {}",
            x.len(),
            f.dim()
        )));
    }
    let mut s = spec.stream.clone();
    let mut probe = vec![0.0; x.len()];
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..spec.samples {
        for (p, &xi) in probe.iter_mut().zip(x) {
            *p = xi + spec.mu * s.normal();
        }
        let v = f.eval(&probe);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "gaussian_smooth",
            });
        }
        sum += v;
        sumsq += v * v;
    }
    let n = spec.samples as f64;
    let mean = sum / n;
    let stderr = if spec.samples > 1 {
        let var = ((sumsq - sum * sum / n) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok((mean, stderr))
}

/// One sample of the pool gradient estimator: draws u ~ N(0, I) and an
/// independent purifier pair (k1, k2), then returns
/// [f(m_k1(x + mu*u)) - f(m_k2(x))] / mu * u.
pub fn grad_estimator_g<F: ScalarField + ?Sized, M: PointMap>(
    f: &F,
    pool: &[M],
    x: &[f64],
    mu: f64,
    draws: &mut Stream,
) -> Result<Vec<f64>> {
    if pool.is_empty() {
        return Err(Error::arg("gradient estimator needs a non-empty pool"));
    }
    if !(mu > 0.0) {
        return Err(Error::arg(format!(
            "smoothing radius must be positive, got {mu}"
        )));
    }
    if x.len() != f.dim() {
        return Err(Error::arg(format!(
            "point has {} coordinates, field expects {}",
            x.len(),
            f.dim()
        )));
    }
    let u: Vec<f64> = (0..x.len()).map(|_| draws.normal()).collect();
    let k1 = draws.index(pool.len());
    let k2 = draws.index(pool.len());
    let shifted: Vec<f64> = x.iter().zip(&u).map(|(xi, ui)| xi + mu * ui).collect();
    let hi = f.eval(&pool[k1].apply(&shifted));
    let lo = f.eval(&pool[k2].apply(x));
    if !hi.is_finite() || !lo.is_finite() {
        return Err(Error::NonFinite {
            op: "grad_estimator_g",
        });
    }
    let w = (hi - lo) / mu;
    Ok(u.into_iter().map(|ui| w * ui).collect())
}

/// Largest pairwise l2 distance between pool outputs over the probe
/// points. A lower bound of the true diversity: more probes only raise it.
pub fn estimate_nu<M: PointMap>(pool: &[M], probes: &[Vec<f64>]) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::arg("diversity needs a non-empty pool"));
    }
    if probes.is_empty() {
        return Err(Error::arg("diversity needs at least one probe"));
    }
    let mut nu = 0.0f64;
    for x in probes {
        let outs: Vec<Vec<f64>> = pool.iter().map(|m| m.apply(x)).collect();
        for i in 0..outs.len() {
            for j in i + 1..outs.len() {
                let d = l2_between(&outs[i], &outs[j]);
                nu = nu.max(d);
            }
        }
    }
    Ok(nu)
}

/// Sampled first- and second-order Lipschitz constants. Both are maxima
/// over pairs, hence lower bounds of the true constants.
#[derive(Debug, Clone)]
pub struct LipschitzEstimate {
    pub l0_hat: f64,
    pub l1_hat: f64,
    /// Pairs that actually contributed; coincident draws are skipped.
    pub pairs: usize,
    /// The pair attaining `l0_hat`.
    pub witness: (Vec<f64>, Vec<f64>),
}

const FD_STEP: f64 = 1e-4;

/// Estimates L0 and L1 of a (possibly vector-valued) black box from pair
/// quotients drawn by `sampler`. For vector outputs the quotient is the
/// per-output-dimension max, matching how the pool's constant is defined.
pub fn estimate_lipschitz<G, S>(g: G, mut sampler: S, pairs: usize) -> Result<LipschitzEstimate>
where
    G: Fn(&[f64]) -> Vec<f64>,
    S: FnMut() -> (Vec<f64>, Vec<f64>),
{
    if pairs == 0 {
        return Err(Error::arg("lipschitz estimation needs at least one pair"));
    }
    let mut l0 = 0.0f64;
    let mut l1 = 0.0f64;
    let mut used = 0usize;
    let mut witness: Option<(Vec<f64>, Vec<f64>)> = None;
    for _ in 0..pairs {
        let (x, y) = sampler();
        let dist = l2_between(&x, &y);
        if dist < 1e-12 {
            continue;
        }
        used += 1;
        let (gx, gy) = (g(&x), g(&y));
        let q = gx
            .iter()
            .zip(&gy)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / dist;
        if q > l0 {
            l0 = q;
            witness = Some((x.clone(), y.clone()));
        }
        let (jx, jy) = (fd_gradients(&g, &x), fd_gradients(&g, &y));
        for (rx, ry) in jx.iter().zip(&jy) {
            l1 = l1.max(l2_between(rx, ry) / dist);
        }
    }
    Ok(LipschitzEstimate {
        l0_hat: l0,
        l1_hat: l1,
        pairs: used,
        witness: witness.unwrap_or_default(),
    })
}

/// Central-difference gradient of every output dimension: one row per
/// output.
fn fd_gradients<G: Fn(&[f64]) -> Vec<f64>>(g: &G, x: &[f64]) -> Vec<Vec<f64>> {
    let out_dim = g(x).len();
    let mut rows = vec![vec![0.0; x.len()]; out_dim];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + FD_STEP;
        let hi = g(&probe);
        probe[i] = x[i] - FD_STEP;
        let lo = g(&probe);
        probe[i] = x[i];
        for (j, row) in rows.iter_mut().enumerate() {
            row[i] = (hi[j] - lo[j]) / (2.0 * FD_STEP);
        }
    }
    rows
}

/// Monte Carlo estimate of E‖u‖^p for standard-normal u in the given
/// dimension, with standard error.
pub fn moment_mc(dim: usize, p: f64, samples: usize, stream: &Stream) -> Result<(f64, f64)> {
    if dim == 0 {
        return Err(Error::arg("moment check needs at least one dimension"));
    }
    if samples < 2 {
        return Err(Error::arg("moment check needs at least two samples"));
    }
    let mut s = stream.clone();
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..samples {
        let norm_sq: f64 = (0..dim).map(|_| s.normal().powi(2)).sum();
        let v = norm_sq.sqrt().powf(p);
        sum += v;
        sumsq += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = ((sumsq - sum * sum / n) / (n - 1.0)).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

fn l2_between(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
