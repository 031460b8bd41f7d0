//! Toy image classifiers, the margin loss, and the attack problem statement.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::params::{ParamSet, Sgd};
use crate::rng::Stream;
use crate::tensor::{Op, Tape, Tensor, TensorId};
use serde::{Deserialize, Serialize};
use std::path::Path;

// ----------------------------------------------------------- architecture --

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv { out: usize, kernel: usize },
    Relu,
    /// 2x2 average pooling, stride 2. Needs even spatial extents.
    AvgPool2,
    Flatten,
    Linear { out: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Input image shape `(C, H, W)`.
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// conv3x3(8) - relu - conv3x3(8) - relu - flatten - linear.
    pub fn tiny_cnn(input: (usize, usize, usize), classes: usize) -> Self {
        Architecture {
            input,
            classes,
            layers: vec![
                LayerSpec::Conv { out: 8, kernel: 3 },
                LayerSpec::Relu,
                LayerSpec::Conv { out: 8, kernel: 3 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Linear { out: classes },
            ],
        }
    }

    /// Single linear layer on the flattened image.
    pub fn linear(input: (usize, usize, usize), classes: usize) -> Self {
        Architecture {
            input,
            classes,
            layers: vec![LayerSpec::Flatten, LayerSpec::Linear { out: classes }],
        }
    }

    pub fn from_name(name: &str, input: (usize, usize, usize), classes: usize) -> Result<Self> {
        match name {
            "tiny-cnn" => Ok(Self::tiny_cnn(input, classes)),
            "linear" => Ok(Self::linear(input, classes)),
            other => Err(Error::arg(format!("unknown architecture {other:?}"))),
        }
    }

    /// Walks the layer list and returns the final feature count, rejecting
    /// inconsistent stacks.
    pub fn validate(&self) -> Result<usize> {
        let (mut c, mut h, mut w) = self.input;
        let mut flat: Option<usize> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv { out, kernel } => {
                    if flat.is_some() {
                        return Err(Error::arg(format!("layer {i}: conv after flatten")));
                    }
                    if kernel % 2 == 0 {
                        return Err(Error::arg(format!("layer {i}: even conv kernel")));
                    }
                    c = *out;
                }
                LayerSpec::Relu => {}
                LayerSpec::AvgPool2 => {
                    if flat.is_some() {
                        return Err(Error::arg(format!("layer {i}: pool after flatten")));
                    }
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::arg(format!(
                            "layer {i}: avg pool needs even extents, got {h}x{w}"
                        )));
                    }
                    h /= 2;
                    w /= 2;
                }
                LayerSpec::Flatten => {
                    if flat.is_some() {
                        return Err(Error::arg(format!("layer {i}: repeated flatten")));
                    }
                    flat = Some(c * h * w);
                }
                LayerSpec::Linear { out } => {
                    let dim = flat.ok_or_else(|| {
                        Error::arg(format!("layer {i}: linear before flatten"))
                    })?;
                    let _ = dim;
                    flat = Some(*out);
                }
            }
        }
        let out = flat.ok_or_else(|| Error::arg("architecture produced no features"))?;
        if out != self.classes {
            return Err(Error::arg(format!(
                "architecture emits {} features for {} classes",
                out, self.classes
            )));
        }
        Ok(out)
    }
}

// -------------------------------------------------------------- classifier --

#[derive(Debug, Clone)]
pub struct Classifier {
    arch: Architecture,
    params: ParamSet,
}

impl Classifier {
    /// Builds a classifier with seeded He-uniform weights and zero biases.
    pub fn init(arch: Architecture, stream: &Stream) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamSet::new();
        let (mut c, mut h, mut w) = arch.input;
        let mut flat: Option<usize> = None;
        for (i, layer) in arch.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv { out, kernel } => {
                    let fan_in = c * kernel * kernel;
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let mut init = stream.derive(i as u64);
                    let mut wdata = vec![0.0f32; out * c * kernel * kernel];
                    init.fill_uniform(&mut wdata, -bound as f32, bound as f32);
                    params.push(
                        format!("l{i}.w"),
                        Tensor::new(&[*out, c, *kernel, *kernel], wdata)?,
                    );
                    params.push(format!("l{i}.b"), Tensor::zeros(&[*out]));
                    c = *out;
                }
                LayerSpec::AvgPool2 => {
                    h /= 2;
                    w /= 2;
                }
                LayerSpec::Flatten => flat = Some(c * h * w),
                LayerSpec::Linear { out } => {
                    let dim = flat.expect("validated");
                    let bound = (6.0 / dim as f64).sqrt();
                    let mut init = stream.derive(i as u64);
                    let mut wdata = vec![0.0f32; dim * out];
                    init.fill_uniform(&mut wdata, -bound as f32, bound as f32);
                    params.push(format!("l{i}.w"), Tensor::new(&[dim, *out], wdata)?);
                    params.push(format!("l{i}.b"), Tensor::zeros(&[*out]));
                    flat = Some(*out);
                }
                LayerSpec::Relu => {}
            }
        }
        Ok(Classifier { arch, params })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(arch: Architecture, path: &Path) -> Result<Self> {
        let template = Classifier::init(arch.clone(), &Stream::master(0))?;
        let params = ParamSet::load_into(path, &template.params)?;
        Ok(Classifier { arch, params })
    }

    /// Runs the layer stack on a tape. `params` maps parameter slots to tape
    /// leaves; `x` is a `[B, C, H, W]` batch. Returns logits `[B, classes]`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        param_ids: &[TensorId],
        x: TensorId,
    ) -> Result<TensorId> {
        let mut cur = x;
        let mut slot = 0;
        let batch = tape.value(x).shape()[0];
        let (mut c, mut h, mut w) = self.arch.input;
        let mut flat = false;
        for layer in &self.arch.layers {
            match layer {
                LayerSpec::Conv { out, .. } => {
                    let wid = param_ids[slot];
                    let bid = param_ids[slot + 1];
                    slot += 2;
                    cur = tape.apply(Op::Conv2d, &[cur, wid, bid])?;
                    c = *out;
                }
                LayerSpec::Relu => cur = tape.apply(Op::Relu, &[cur])?,
                LayerSpec::AvgPool2 => {
                    cur = avg_pool2(tape, cur, batch, c, h, w)?;
                    h /= 2;
                    w /= 2;
                }
                LayerSpec::Flatten => {
                    cur = tape.apply(
                        Op::Reshape {
                            shape: vec![batch, c * h * w],
                        },
                        &[cur],
                    )?;
                    flat = true;
                }
                LayerSpec::Linear { .. } => {
                    debug_assert!(flat);
                    let wid = param_ids[slot];
                    let bid = param_ids[slot + 1];
                    slot += 2;
                    cur = tape.apply(Op::Matmul, &[cur, wid])?;
                    cur = tape.apply(Op::Add, &[cur, bid])?;
                }
            }
        }
        Ok(cur)
    }

    /// Loads parameters onto a tape as untracked leaves.
    pub fn param_leaves(&self, tape: &mut Tape) -> Vec<TensorId> {
        self.params
            .entries()
            .iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect()
    }

    /// Logits for a batch of `[C, H, W]` images.
    pub fn logits_batch(&self, images: &[&Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(stack(images)?);
        let ids = self.param_leaves(&mut tape);
        let out = self.forward_on_tape(&mut tape, &ids, x)?;
        Ok(tape.value(out).clone())
    }

    /// Softmax confidence vector for one image.
    pub fn predict(&self, image: &Tensor) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let x = tape.leaf(stack(&[image])?);
        let ids = self.param_leaves(&mut tape);
        let logits = self.forward_on_tape(&mut tape, &ids, x)?;
        let probs = tape.apply(Op::Softmax, &[logits])?;
        Ok(tape.value(probs).data().to_vec())
    }

    /// Predicted class; ties break to the lowest index.
    pub fn classify(&self, image: &Tensor) -> Result<usize> {
        Ok(argmax(&self.predict(image)?))
    }
}

/// Stacks `[C, H, W]` images into a `[B, C, H, W]` batch.
pub fn stack(images: &[&Tensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::arg("cannot stack an empty batch"));
    }
    let shape = images[0].shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        if img.shape() != shape {
            return Err(Error::shape(
                "stack",
                format!("{:?} vs {:?}", img.shape(), shape),
            ));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend_from_slice(&shape);
    Tensor::new(&full, data)
}

/// 2x2/stride-2 average pooling out of reshape, slice, add and a constant
/// multiply, so it differentiates like any other composite.
fn avg_pool2(
    tape: &mut Tape,
    x: TensorId,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Result<TensorId> {
    let (hh, ww) = (h / 2, w / 2);
    let grouped = tape.apply(
        Op::Reshape {
            shape: vec![b, c, hh, 2, ww, 2],
        },
        &[x],
    )?;
    let mut corners = Vec::with_capacity(4);
    for p in 0..2 {
        for q in 0..2 {
            let s = tape.apply(
                Op::Slice {
                    start: vec![0, 0, 0, p, 0, q],
                    len: vec![b, c, hh, 1, ww, 1],
                },
                &[grouped],
            )?;
            corners.push(tape.apply(
                Op::Reshape {
                    shape: vec![b, c, hh, ww],
                },
                &[s],
            )?);
        }
    }
    let s01 = tape.apply(Op::Add, &[corners[0], corners[1]])?;
    let s23 = tape.apply(Op::Add, &[corners[2], corners[3]])?;
    let total = tape.apply(Op::Add, &[s01, s23])?;
    let quarter = tape.leaf(Tensor::full(&[b, c, hh, ww], 0.25));
    tape.apply(Op::Mul, &[total, quarter])
}

/// Mean cross-entropy between logits `[B, K]` and labels, built from
/// primitives (softmax, clamp, log, mask, sum).
pub fn cross_entropy(
    tape: &mut Tape,
    logits: TensorId,
    labels: &[usize],
    classes: usize,
) -> Result<TensorId> {
    let b = labels.len();
    let probs = tape.apply(Op::Softmax, &[logits])?;
    let safe = tape.apply(
        Op::Clamp {
            lo: 1e-7,
            hi: 1.0,
        },
        &[probs],
    )?;
    let logp = tape.apply(Op::Log, &[safe])?;
    let mut mask = vec![0.0f32; b * classes];
    for (i, &l) in labels.iter().enumerate() {
        mask[i * classes + l] = 1.0;
    }
    let mask = tape.leaf(Tensor::new(&[b, classes], mask)?);
    let picked = tape.apply(Op::Mul, &[logp, mask])?;
    let total = tape.apply(Op::Sum, &[picked])?;
    let scale = tape.leaf(Tensor::scalar(-1.0 / b as f32));
    tape.apply(Op::Mul, &[total, scale])
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

/// Margin of the true class over the strongest rival (untargeted), or over
/// the target class (targeted). Negative means misclassified, respectively
/// target reached.
pub fn margin_loss(scores: &[f32], label: usize, target: Option<usize>) -> Result<f32> {
    if label >= scores.len() {
        return Err(Error::arg(format!(
            "label {} out of range for {} scores",
            label,
            scores.len()
        )));
    }
    match target {
        None => {
            let mut rival = f32::NEG_INFINITY;
            for (j, &s) in scores.iter().enumerate() {
                if j != label && s > rival {
                    rival = s;
                }
            }
            if rival == f32::NEG_INFINITY {
                return Err(Error::arg("margin needs at least two classes"));
            }
            Ok(scores[label] - rival)
        }
        Some(t) => {
            if t == label {
                return Err(Error::arg("targeted margin with target == label"));
            }
            if t >= scores.len() {
                return Err(Error::arg(format!(
                    "target {} out of range for {} scores",
                    t,
                    scores.len()
                )));
            }
            Ok(scores[label] - scores[t])
        }
    }
}

// ------------------------------------------------------------ attack setup --

/// Which ball the perturbation must stay inside.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Linf,
    L2,
}

/// A single attack instance: the clean image, its label, and the threat
/// model.
#[derive(Debug, Clone)]
pub struct AttackProblem {
    pub image: Tensor,
    pub label: usize,
    pub norm: NormKind,
    pub radius: f32,
    /// `Some(class)` for targeted attacks.
    pub target: Option<usize>,
}

impl AttackProblem {
    pub fn untargeted(image: Tensor, label: usize, norm: NormKind, radius: f32) -> Result<Self> {
        if radius <= 0.0 {
            return Err(Error::arg("attack radius must be positive"));
        }
        if image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::arg("attack image must lie in [0,1]"));
        }
        Ok(AttackProblem {
            image,
            label,
            norm,
            radius,
            target: None,
        })
    }

    /// Margin of a score vector under this problem's goal.
    pub fn margin(&self, scores: &[f32]) -> Result<f32> {
        margin_loss(scores, self.label, self.target)
    }

    pub fn dim(&self) -> usize {
        self.image.numel()
    }
}

// -------------------------------------------------------------- training --

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    pub momentum: f32,
    pub holdout_frac: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr: 0.08,
            batch: 16,
            momentum: 0.9,
            holdout_frac: 0.25,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub train_accuracy: f32,
    pub holdout_accuracy: f32,
    pub final_loss: f32,
}

/// Accuracy of the classifier over a labeled set.
pub fn accuracy(clf: &Classifier, data: &Dataset) -> Result<f32> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (img, &label) in data.images.iter().zip(&data.labels) {
        if clf.classify(img)? == label {
            hits += 1;
        }
    }
    Ok(hits as f32 / data.len() as f32)
}

/// Minibatch SGD on mean cross-entropy. Deterministic in the stream: the
/// same seed gives bit-identical parameters.
pub fn train_classifier(
    data: &Dataset,
    arch: Architecture,
    cfg: &TrainConfig,
    stream: &Stream,
) -> Result<(Classifier, TrainReport)> {
    if data.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    let (train, holdout) = data.split(cfg.holdout_frac, stream);
    let mut clf = Classifier::init(arch, &stream.derive(0x11))?;
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum);
    let mut last_loss = f32::NAN;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut es = stream.derive(0x22).derive(epoch as u64);
        es.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let images: Vec<&Tensor> = chunk.iter().map(|&i| &train.images[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();

            let mut tape = Tape::new();
            let x = tape.leaf(stack(&images)?);
            let param_ids: Vec<TensorId> = clf
                .params
                .entries()
                .iter()
                .map(|(_, t)| tape.leaf(t.clone().with_grad()))
                .collect();
            let logits = clf.forward_on_tape(&mut tape, &param_ids, x)?;
            let loss = cross_entropy(&mut tape, logits, &labels, train.classes)?;
            last_loss = tape.value(loss).item();
            if !last_loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch}"
                )));
            }
            let grads = tape.backward(loss).map_err(|e| match e {
                Error::NonFinite { op } => {
                    Error::Diverged(format!("non-finite gradient in {op} at epoch {epoch}"))
                }
                other => other,
            })?;
            for (slot, id) in param_ids.iter().enumerate() {
                let g = grads.grad(*id).expect("tracked parameter");
                sgd.step(slot, clf.params.at_mut(slot), g);
            }
        }
    }

    let report = TrainReport {
        train_accuracy: accuracy(&clf, &train)?,
        holdout_accuracy: accuracy(&clf, &holdout)?,
        final_loss: last_loss,
    };
    Ok((clf, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn margin_examples() {
        // Uniform scores: margin 0.
        assert_eq!(margin_loss(&[0.25; 4], 1, None).unwrap(), 0.0);
        // One-hot on the label: margin 1.
        assert_eq!(margin_loss(&[0.0, 1.0, 0.0], 1, None).unwrap(), 1.0);
        // Strongest rival wins.
        let m = margin_loss(&[0.2, 0.5, 0.3], 0, None).unwrap();
        assert!((m - (0.2 - 0.5)).abs() < 1e-6);
    }

    #[test]
    fn targeted_margin_rejects_self_target() {
        assert!(margin_loss(&[0.5, 0.5], 1, Some(1)).is_err());
        let m = margin_loss(&[0.7, 0.3], 0, Some(1)).unwrap();
        assert!((m - 0.4).abs() < 1e-6);
    }

    #[test]
    fn margin_sign_matches_argmax() {
        let mut s = Stream::master(3);
        for _ in 0..200 {
            let scores: Vec<f32> = (0..5).map(|_| s.uniform() as f32).collect();
            let label = s.index(5);
            let m = margin_loss(&scores, label, None).unwrap();
            let pred = argmax(&scores);
            if m > 0.0 {
                assert_eq!(pred, label);
            }
            if pred != label {
                assert!(m <= 0.0);
            }
        }
    }

    #[test]
    fn margin_invariant_under_rival_permutation() {
        let scores = vec![0.1, 0.4, 0.2, 0.3];
        let m = margin_loss(&scores, 0, None).unwrap();
        let permuted = vec![0.1, 0.2, 0.3, 0.4];
        assert_eq!(m, margin_loss(&permuted, 0, None).unwrap());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0);
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
    }

    #[test]
    fn predict_sums_to_one() {
        let arch = Architecture::tiny_cnn((3, 8, 8), 4);
        let clf = Classifier::init(arch, &Stream::master(1)).unwrap();
        let img = Tensor::full(&[3, 8, 8], 0.3);
        let p = clf.predict(&img).unwrap();
        assert_eq!(p.len(), 4);
        let sum: f32 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-5);
    }

    #[test]
    fn zero_weights_give_uniform_confidence() {
        let arch = Architecture::linear((1, 2, 2), 4);
        let mut clf = Classifier::init(arch, &Stream::master(1)).unwrap();
        for slot in 0..clf.params().len() {
            clf.params_mut().at_mut(slot).data_mut().fill(0.0);
        }
        let img = Tensor::full(&[1, 2, 2], 0.7);
        let p = clf.predict(&img).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn init_is_deterministic() {
        let arch = Architecture::tiny_cnn((3, 8, 8), 2);
        let a = Classifier::init(arch.clone(), &Stream::master(9)).unwrap();
        let b = Classifier::init(arch, &Stream::master(9)).unwrap();
        for (x, y) in a.params().entries().iter().zip(b.params().entries()) {
            assert_eq!(x.1.data(), y.1.data());
        }
    }

    #[test]
    fn architecture_validation_catches_mismatch() {
        let mut arch = Architecture::linear((1, 2, 2), 3);
        arch.layers = vec![LayerSpec::Flatten, LayerSpec::Linear { out: 2 }];
        assert!(arch.validate().is_err());
        assert!(Architecture::from_name("resnet", (3, 8, 8), 2).is_err());
    }

    #[test]
    fn avg_pool_halves_and_averages() {
        let arch = Architecture {
            input: (1, 2, 2),
            classes: 1,
            layers: vec![
                LayerSpec::AvgPool2,
                LayerSpec::Flatten,
                LayerSpec::Linear { out: 1 },
            ],
        };
        let mut clf = Classifier::init(arch, &Stream::master(1)).unwrap();
        // Weight 1, bias 0: logit equals the pooled pixel.
        clf.params_mut().at_mut(0).data_mut().fill(1.0);
        clf.params_mut().at_mut(1).data_mut().fill(0.0);
        let img = Tensor::new(&[1, 2, 2], vec![0.0, 0.4, 0.8, 0.4]).unwrap();
        let logits = clf.logits_batch(&[&img]).unwrap();
        assert!((logits.data()[0] - 0.4).abs() < 1e-6);
    }
}
