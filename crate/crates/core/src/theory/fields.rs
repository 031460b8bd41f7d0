//! Synthetic objective functions and purifier stand-ins with known
//! Lipschitz constants, so estimator output can be checked against hand
//! arithmetic.

use serde::{Deserialize, Serialize};

use super::{PointMap, ScalarField};
use crate::rng::Stream;
use crate::{Error, Result};

/// Objective families the experiment configs can name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldKind {
    Linear,
    Quadratic,
    MarginToy,
}

impl FieldKind {
    pub const ALL: [FieldKind; 3] = [FieldKind::Linear, FieldKind::Quadratic, FieldKind::MarginToy];

    pub fn name(self) -> &'static str {
        match self {
            FieldKind::Linear => "linear",
            FieldKind::Quadratic => "quadratic",
            FieldKind::MarginToy => "margin-toy",
        }
    }

    pub fn from_name(name: &str) -> Option<FieldKind> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }
}

/// Builds a field of the requested family with coefficients drawn from
/// `stream`, so experiments stay reproducible from the seed alone.
pub fn make_field(kind: FieldKind, dim: usize, stream: &Stream) -> Box<dyn ScalarField> {
    let mut s = stream.derive(kind as u64 + 1);
    match kind {
        FieldKind::Linear => {
            let a = (0..dim).map(|_| s.normal()).collect();
            Box::new(LinearField::new(a))
        }
        FieldKind::Quadratic => Box::new(QuadraticField::new(dim)),
        FieldKind::MarginToy => {
            let w: Vec<f64> = (0..dim).map(|_| s.normal() * 0.5).collect();
            let b = s.normal() * 0.1;
            Box::new(MarginToyField::new(w, b))
        }
    }
}

/// f(x) = a . x, the one field whose smoothed gradient is exact.
#[derive(Debug, Clone)]
pub struct LinearField {
    a: Vec<f64>,
}

impl LinearField {
    pub fn new(a: Vec<f64>) -> LinearField {
        LinearField { a }
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.a
    }

    /// The exact first-order constant, for comparing estimates against.
    pub fn l0(&self) -> f64 {
        self.a.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl ScalarField for LinearField {
    fn dim(&self) -> usize {
        self.a.len()
    }

    fn eval(&self, x: &[f64]) -> f64 {
        self.a.iter().zip(x).map(|(a, v)| a * v).sum()
    }
}

/// f(x) = ||x||^2. Smoothing shifts it by exactly mu^2 d.
#[derive(Debug, Clone, Copy)]
pub struct QuadraticField {
    dim: usize,
}

impl QuadraticField {
    pub fn new(dim: usize) -> QuadraticField {
        QuadraticField { dim }
    }
}

impl ScalarField for QuadraticField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }
}

/// f(x) = tanh(w . x + b): a bounded, saturating margin surrogate with
/// L0 <= ||w|| and nonzero gradient everywhere.
#[derive(Debug, Clone)]
pub struct MarginToyField {
    w: Vec<f64>,
    b: f64,
}

impl MarginToyField {
    pub fn new(w: Vec<f64>, b: f64) -> MarginToyField {
        MarginToyField { w, b }
    }

    pub fn l0(&self) -> f64 {
        self.w.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Analytic gradient, used by experiments to measure what the bound
    /// constrains without extra estimation noise.
    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        let z: f64 = self.w.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b;
        let sech2 = 1.0 - z.tanh().powi(2);
        self.w.iter().map(|w| w * sech2).collect()
    }
}

impl ScalarField for MarginToyField {
    fn dim(&self) -> usize {
        self.w.len()
    }

    fn eval(&self, x: &[f64]) -> f64 {
        let z: f64 = self.w.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b;
        z.tanh()
    }
}

/// m(x) = factor * x. Both per-coordinate constants equal `factor`.
#[derive(Debug, Clone, Copy)]
pub struct ScaleMap {
    dim: usize,
    pub factor: f64,
}

impl ScaleMap {
    pub fn new(dim: usize, factor: f64) -> ScaleMap {
        ScaleMap { dim, factor }
    }

    /// The identity, the canonical "no purifier" member.
    pub fn identity(dim: usize) -> ScaleMap {
        ScaleMap { dim, factor: 1.0 }
    }
}

impl PointMap for ScaleMap {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v * self.factor).collect()
    }
}

/// A planar rotation about `center`. Isometric, so smoothing and the map
/// commute exactly; the workhorse for estimator bias checks.
#[derive(Debug, Clone)]
pub struct RotationMap {
    cos: f64,
    sin: f64,
    shift: [f64; 2],
}

impl RotationMap {
    pub fn new(theta: f64, center: [f64; 2]) -> RotationMap {
        let (sin, cos) = theta.sin_cos();
        // c = (I - A) center keeps the fixed point at `center`.
        let shift = [
            center[0] - (cos * center[0] - sin * center[1]),
            center[1] - (sin * center[0] + cos * center[1]),
        ];
        RotationMap { cos, sin, shift }
    }
}

impl PointMap for RotationMap {
    fn dim(&self) -> usize {
        2
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        vec![
            self.cos * x[0] - self.sin * x[1] + self.shift[0],
            self.sin * x[0] + self.cos * x[1] + self.shift[1],
        ]
    }
}

/// m(x) = A x + c with a dense matrix, the generic non-isometric member.
#[derive(Debug, Clone)]
pub struct AffineMap {
    dim: usize,
    a: Vec<f64>,
    c: Vec<f64>,
}

impl AffineMap {
    pub fn new(a: Vec<f64>, c: Vec<f64>) -> Result<AffineMap> {
        let dim = c.len();
        if a.len() != dim * dim {
            return Err(Error::arg(format!(
                "affine map needs a {dim}x{dim} matrix, got {} entries",
                a.len()
            )));
        }
        Ok(AffineMap { dim, a, c })
    }

    /// Spectral-norm upper bound via the Frobenius norm. Cheap and valid
    /// as an L0 stand-in for small matrices.
    pub fn l0_upper(&self) -> f64 {
        self.a.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl PointMap for AffineMap {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| {
                self.a[i * self.dim..(i + 1) * self.dim]
                    .iter()
                    .zip(x)
                    .map(|(a, v)| a * v)
                    .sum::<f64>()
                    + self.c[i]
            })
            .collect()
    }
}

/// A pool of `count` near-identity affine maps. Member 0 is the exact
/// identity; the rest perturb both the matrix and the offset by
/// `strength`, so a single-member pool has zero diversity and larger
/// pools have more.
pub fn jitter_pool(dim: usize, count: usize, strength: f64, stream: &Stream) -> Vec<AffineMap> {
    (0..count)
        .map(|k| {
            let mut a = vec![0.0; dim * dim];
            for (i, v) in a.iter_mut().enumerate() {
                if i % (dim + 1) == 0 {
                    *v = 1.0;
                }
            }
            let mut c = vec![0.0; dim];
            if k > 0 {
                let mut s = stream.derive(k as u64);
                for v in a.iter_mut() {
                    *v += s.normal() * strength / (dim as f64).sqrt();
                }
                for v in c.iter_mut() {
                    *v += s.normal() * strength;
                }
            }
            AffineMap::new(a, c).expect("square by construction")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn linear_field_is_its_dot_product() {
        let f = LinearField::new(vec![1.0, -2.0, 0.5]);
        assert_eq!(f.eval(&[2.0, 1.0, 4.0]), 2.0);
        assert!((f.l0() - (1.0f64 + 4.0 + 0.25).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn margin_toy_gradient_matches_finite_differences() {
        let f = MarginToyField::new(vec![0.7, -0.3, 0.2], 0.1);
        let x = [0.4, -0.8, 0.15];
        let g = f.grad(&x);
        let h = 1e-6;
        for i in 0..3 {
            let mut hi = x;
            let mut lo = x;
            hi[i] += h;
            lo[i] -= h;
            let fd = (f.eval(&hi) - f.eval(&lo)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7, "coord {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn rotation_fixes_its_center_and_preserves_distances() {
        let center = [0.3, -0.7];
        let m = RotationMap::new(1.1, center);
        let at_center = m.apply(&center);
        assert!((at_center[0] - center[0]).abs() < 1e-12);
        assert!((at_center[1] - center[1]).abs() < 1e-12);

        let p = [1.5, 2.0];
        let q = [-0.4, 0.9];
        let (mp, mq) = (m.apply(&p), m.apply(&q));
        let before = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        let after = ((mp[0] - mq[0]).powi(2) + (mp[1] - mq[1]).powi(2)).sqrt();
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn affine_map_multiplies_and_shifts() {
        let m = AffineMap::new(vec![2.0, 0.0, 0.0, 3.0], vec![1.0, -1.0]).unwrap();
        assert_eq!(m.apply(&[1.0, 1.0]), vec![3.0, 2.0]);
        assert!(AffineMap::new(vec![1.0, 2.0, 3.0], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn jitter_pool_leads_with_the_identity() {
        let stream = Stream::master(9).derive(1);
        let pool = jitter_pool(4, 3, 0.05, &stream);
        let x = vec![0.2, -0.4, 0.8, 0.1];
        assert_eq!(pool[0].apply(&x), x);
        for m in &pool[1..] {
            let y = m.apply(&x);
            let dist: f64 = y
                .iter()
                .zip(&x)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(dist > 0.0 && dist < 0.5, "jitter moved the point by {dist}");
        }
    }

    #[test]
    fn field_kinds_roundtrip_their_names() {
        for kind in FieldKind::ALL {
            assert_eq!(FieldKind::from_name(kind.name()), Some(kind));
        }
        assert_eq!(FieldKind::from_name("cubic"), None);
    }

    #[test]
    fn make_field_is_deterministic_per_seed() {
        let s = Stream::master(5).derive(2);
        let f1 = make_field(FieldKind::Linear, 6, &s);
        let f2 = make_field(FieldKind::Linear, 6, &s);
        let x = vec![0.3; 6];
        assert_eq!(f1.eval(&x), f2.eval(&x));
    }
}
