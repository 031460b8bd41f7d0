//! Gradient-based attacks used to manufacture purifier training data.
//!
//! All three attacks maximize cross-entropy of the true label inside an
//! l-inf ball intersected with the pixel box. The iterated variants differ
//! only in their starting point: one starts at the clean image, the other at
//! a uniform draw inside the ball.

use crate::error::{Error, Result};
use crate::models::{cross_entropy, Classifier};
use crate::rng::Stream;
use crate::tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WhiteBoxMethod {
    /// Basic iterative method: iterated FGSM from the clean image.
    Bim,
    /// One signed gradient step.
    Fgsm,
    /// Iterated signed steps from a random start in the ball.
    Pgd,
}

impl WhiteBoxMethod {
    pub fn name(&self) -> &'static str {
        match self {
            WhiteBoxMethod::Bim => "bim",
            WhiteBoxMethod::Fgsm => "fgsm",
            WhiteBoxMethod::Pgd => "pgd",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "bim" => Ok(WhiteBoxMethod::Bim),
            "fgsm" => Ok(WhiteBoxMethod::Fgsm),
            "pgd" => Ok(WhiteBoxMethod::Pgd),
            other => Err(Error::arg(format!("unknown white-box method {other:?}"))),
        }
    }

    pub const ALL: [WhiteBoxMethod; 3] = [
        WhiteBoxMethod::Bim,
        WhiteBoxMethod::Fgsm,
        WhiteBoxMethod::Pgd,
    ];
}

#[derive(Debug, Clone)]
pub struct WhiteBoxConfig {
    pub epsilon: f32,
    /// Per-iteration step for the iterated methods.
    pub step: f32,
    pub steps: usize,
}

impl Default for WhiteBoxConfig {
    fn default() -> Self {
        WhiteBoxConfig {
            epsilon: 8.0 / 255.0,
            step: 2.0 / 255.0,
            steps: 8,
        }
    }
}

/// d(cross-entropy)/d(input) for a single image.
fn input_gradient(clf: &Classifier, image: &Tensor, label: usize) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let x = tape.leaf(Tensor::new(&shape, image.data().to_vec())?.with_grad());
    let params = clf.param_leaves(&mut tape);
    let logits = clf.forward_on_tape(&mut tape, &params, x)?;
    let loss = cross_entropy(&mut tape, logits, &[label], clf.arch().classes)?;
    let grads = tape.backward(loss)?;
    Ok(grads.grad(x).expect("input is tracked").to_vec())
}

/// sign with sign(0) = 0.
fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects `x` onto the l-inf ball around `origin`, then onto the pixel box.
pub fn project_linf(x: &mut [f32], origin: &[f32], epsilon: f32) {
    for (v, &o) in x.iter_mut().zip(origin) {
        *v = v.clamp(o - epsilon, o + epsilon).clamp(0.0, 1.0);
    }
}

fn ascend(clf: &Classifier, image: &Tensor, label: usize, start: Vec<f32>, step: f32, steps: usize, epsilon: f32) -> Result<Tensor> {
    let mut cur = Tensor::new(image.shape(), start)?;
    for _ in 0..steps {
        let g = input_gradient(clf, &cur, label)?;
        let mut next: Vec<f32> = cur
            .data()
            .iter()
            .zip(&g)
            .map(|(&v, &gv)| v + step * sign(gv))
            .collect();
        project_linf(&mut next, image.data(), epsilon);
        cur = Tensor::new(image.shape(), next)?;
    }
    Ok(cur)
}

/// One signed gradient step of size epsilon.
pub fn fgsm(clf: &Classifier, image: &Tensor, label: usize, epsilon: f32) -> Result<Tensor> {
    ascend(clf, image, label, image.data().to_vec(), epsilon, 1, epsilon)
}

/// Iterated signed steps from the clean image.
pub fn bim(clf: &Classifier, image: &Tensor, label: usize, cfg: &WhiteBoxConfig) -> Result<Tensor> {
    ascend(
        clf,
        image,
        label,
        image.data().to_vec(),
        cfg.step,
        cfg.steps,
        cfg.epsilon,
    )
}

/// Iterated signed steps from a uniform start inside the ball.
pub fn pgd(
    clf: &Classifier,
    image: &Tensor,
    label: usize,
    cfg: &WhiteBoxConfig,
    stream: &Stream,
) -> Result<Tensor> {
    let mut s = stream.clone();
    let mut start: Vec<f32> = image
        .data()
        .iter()
        .map(|&v| v + s.uniform_in(-cfg.epsilon as f64, cfg.epsilon as f64) as f32)
        .collect();
    project_linf(&mut start, image.data(), cfg.epsilon);
    ascend(clf, image, label, start, cfg.step, cfg.steps, cfg.epsilon)
}

/// Runs one method over a whole set, seeded per image.
pub fn attack_set(
    clf: &Classifier,
    images: &[Tensor],
    labels: &[usize],
    method: WhiteBoxMethod,
    cfg: &WhiteBoxConfig,
    stream: &Stream,
) -> Result<Vec<Tensor>> {
    images
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (img, &label))| match method {
            WhiteBoxMethod::Fgsm => fgsm(clf, img, label, cfg.epsilon),
            WhiteBoxMethod::Bim => bim(clf, img, label, cfg),
            WhiteBoxMethod::Pgd => pgd(clf, img, label, cfg, &stream.derive(i as u64)),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthetic_textures, TextureSpec};
    use crate::models::{train_classifier, Architecture, TrainConfig};

    fn fixture() -> (Classifier, crate::dataset::Dataset) {
        let data = synthetic_textures(&TextureSpec::new(40, 2, 6, 6), &Stream::master(11)).unwrap();
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
        (clf, data)
    }

    fn linf(a: &Tensor, b: &Tensor) -> f32 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max)
    }

    #[test]
    fn zero_epsilon_returns_the_image() {
        let (clf, data) = fixture();
        let adv = fgsm(&clf, &data.images[0], data.labels[0], 0.0).unwrap();
        assert_eq!(adv.data(), data.images[0].data());
    }

    #[test]
    fn outputs_stay_in_ball_and_box() {
        let (clf, data) = fixture();
        let cfg = WhiteBoxConfig::default();
        for (i, img) in data.images.iter().take(6).enumerate() {
            for method in WhiteBoxMethod::ALL {
                let adv = match method {
                    WhiteBoxMethod::Fgsm => fgsm(&clf, img, data.labels[i], cfg.epsilon).unwrap(),
                    WhiteBoxMethod::Bim => bim(&clf, img, data.labels[i], &cfg).unwrap(),
                    WhiteBoxMethod::Pgd => {
                        pgd(&clf, img, data.labels[i], &cfg, &Stream::master(3)).unwrap()
                    }
                };
                assert!(linf(&adv, img) <= cfg.epsilon + 1e-6);
                assert!(adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn single_step_pgd_without_random_start_is_fgsm() {
        let (clf, data) = fixture();
        let img = &data.images[1];
        let label = data.labels[1];
        let cfg = WhiteBoxConfig {
            epsilon: 0.05,
            step: 0.05,
            steps: 1,
        };
        // bim is pgd without the random start.
        let b = bim(&clf, img, label, &cfg).unwrap();
        let f = fgsm(&clf, img, label, 0.05).unwrap();
        assert_eq!(b.data(), f.data());
    }

    #[test]
    fn pgd_start_depends_on_seed() {
        let (clf, data) = fixture();
        let img = &data.images[2];
        let label = data.labels[2];
        // One small step: long saturating runs hide the start in corners.
        let cfg = WhiteBoxConfig {
            steps: 1,
            ..WhiteBoxConfig::default()
        };
        let a = pgd(&clf, img, label, &cfg, &Stream::master(1)).unwrap();
        let b = pgd(&clf, img, label, &cfg, &Stream::master(2)).unwrap();
        let c = pgd(&clf, img, label, &cfg, &Stream::master(1)).unwrap();
        assert_eq!(a.data(), c.data());
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn projection_is_idempotent() {
        let mut s = Stream::master(77);
        for _ in 0..50 {
            let origin: Vec<f32> = (0..12).map(|_| s.uniform() as f32).collect();
            let mut x: Vec<f32> = origin
                .iter()
                .map(|&o| o + s.uniform_in(-0.5, 0.5) as f32)
                .collect();
            project_linf(&mut x, &origin, 0.1);
            let once = x.clone();
            project_linf(&mut x, &origin, 0.1);
            assert_eq!(once, x);
        }
    }
}
