//! Purifier training: single models and attack-by-family factor grids.

use super::{purify_full, EncoderFamily, Purifier, PurifierPool};
use crate::error::{Error, Result};
use crate::models::{stack, Classifier};
use crate::params::Sgd;
use crate::rng::Stream;
use crate::tensor::{Op, Tape, Tensor, TensorId};
use crate::whitebox::{attack_set, WhiteBoxConfig, WhiteBoxMethod};
use rayon::prelude::*;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct PurifyTrainConfig {
    /// Weight of the clean-reconstruction term. Zero drops the term.
    pub lambda: f32,
    /// Reconstruction norm; only p = 1 is supported.
    pub p_norm: u32,
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    pub momentum: f32,
    pub holdout_frac: f32,
}

impl Default for PurifyTrainConfig {
    fn default() -> Self {
        PurifyTrainConfig {
            lambda: 0.0,
            p_norm: 1,
            epochs: 40,
            lr: 0.04,
            batch: 8,
            momentum: 0.9,
            holdout_frac: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PurifierTrainReport {
    /// Mean absolute reconstruction error per value on held-out pairs.
    pub holdout_l1: f32,
    pub final_loss: f32,
}

/// Mean absolute difference between two same-shape tape values.
fn l1_term(tape: &mut Tape, a: TensorId, b: TensorId) -> Result<TensorId> {
    let d = tape.apply(Op::Sub, &[a, b])?;
    let d = tape.apply(Op::Abs, &[d])?;
    tape.apply(Op::Mean, &[d])
}

/// Trains one purifier on aligned (clean, adversarial) pairs, minimizing
/// mean |clean - m(adv)| plus lambda * mean |clean - m(clean)|.
pub fn train_purifier(
    mut p: Purifier,
    clean: &[Tensor],
    adv: &[Tensor],
    cfg: &PurifyTrainConfig,
    stream: &Stream,
) -> Result<(Purifier, PurifierTrainReport)> {
    if clean.is_empty() {
        return Err(Error::arg("no training pairs"));
    }
    if clean.len() != adv.len() {
        return Err(Error::arg(format!(
            "{} clean images vs {} adversarial",
            clean.len(),
            adv.len()
        )));
    }
    for (c, a) in clean.iter().zip(adv) {
        if c.shape() != a.shape() {
            return Err(Error::shape(
                "train_purifier",
                format!("{:?} vs {:?}", c.shape(), a.shape()),
            ));
        }
    }
    if !(cfg.lambda >= 0.0) || !cfg.lambda.is_finite() {
        return Err(Error::arg("lambda must be finite and non-negative"));
    }
    if cfg.p_norm != 1 {
        return Err(Error::arg("only the p = 1 reconstruction norm is supported"));
    }

    let mut idx: Vec<usize> = (0..clean.len()).collect();
    let mut hs = stream.derive(0x41);
    hs.shuffle(&mut idx);
    let mut k = ((clean.len() as f32) * cfg.holdout_frac).round() as usize;
    if k >= clean.len() {
        k = clean.len() - 1;
    }
    let (train_idx, hold_idx) = idx.split_at(clean.len() - k);

    let mut sgd = Sgd::new(cfg.lr, cfg.momentum);
    let mut last_loss = f32::NAN;
    for epoch in 0..cfg.epochs {
        // The l1 objective stalls at a floor proportional to the step size,
        // so anneal toward lr/10 over the run.
        let progress = epoch as f32 / cfg.epochs.max(1) as f32;
        sgd.set_lr(cfg.lr / (1.0 + 9.0 * progress));
        let mut order = train_idx.to_vec();
        let mut es = stream.derive(0x42).derive(epoch as u64);
        es.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let xs: Vec<&Tensor> = chunk.iter().map(|&i| &clean[i]).collect();
            let xas: Vec<&Tensor> = chunk.iter().map(|&i| &adv[i]).collect();

            let mut tape = Tape::new();
            let x = tape.leaf(stack(&xs)?);
            let xa = tape.leaf(stack(&xas)?);
            let param_ids: Vec<TensorId> = p
                .params
                .entries()
                .iter()
                .map(|(_, t)| tape.leaf(t.clone().with_grad()))
                .collect();
            let y = p.forward_on_tape(&mut tape, &param_ids, xa)?;
            let mut loss = l1_term(&mut tape, x, y)?;
            if cfg.lambda > 0.0 {
                let y0 = p.forward_on_tape(&mut tape, &param_ids, x)?;
                let term = l1_term(&mut tape, x, y0)?;
                let lam = tape.leaf(Tensor::scalar(cfg.lambda));
                let scaled = tape.apply(Op::Mul, &[term, lam])?;
                loss = tape.apply(Op::Add, &[loss, scaled])?;
            }
            last_loss = tape.value(loss).item();
            if !last_loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite purifier loss at epoch {epoch}"
                )));
            }
            let grads = tape.backward(loss).map_err(|e| match e {
                Error::NonFinite { op } => Error::Diverged(format!(
                    "non-finite gradient in {op} at epoch {epoch}"
                )),
                other => other,
            })?;
            for (slot, id) in param_ids.iter().enumerate() {
                let g = grads.grad(*id).expect("tracked parameter");
                sgd.step(slot, p.params.at_mut(slot), g);
            }
        }
    }

    let eval_idx = if hold_idx.is_empty() { train_idx } else { hold_idx };
    let mut err = 0.0f64;
    let mut count = 0usize;
    for &i in eval_idx {
        let out = purify_full(&p, &adv[i])?;
        for (o, c) in out.data().iter().zip(clean[i].data()) {
            err += (o - c).abs() as f64;
        }
        count += out.numel();
    }
    let report = PurifierTrainReport {
        holdout_l1: (err / count.max(1) as f64) as f32,
        final_loss: last_loss,
    };
    Ok((p, report))
}

/// Clean images with per-attack adversarial counterparts, aligned by index.
#[derive(Debug, Clone)]
pub struct AdvPairs {
    pub clean: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub by_method: BTreeMap<WhiteBoxMethod, Vec<Tensor>>,
}

impl AdvPairs {
    pub fn pairs_for(&self, method: WhiteBoxMethod) -> Result<(&[Tensor], &[Tensor])> {
        let adv = self.by_method.get(&method).ok_or_else(|| {
            Error::arg(format!("no adversarial examples for {}", method.name()))
        })?;
        Ok((&self.clean, adv))
    }
}

/// Runs each white-box method over the images, seeded per method and image.
pub fn adversarial_pairs(
    clf: &Classifier,
    images: &[Tensor],
    labels: &[usize],
    methods: &[WhiteBoxMethod],
    cfg: &WhiteBoxConfig,
    stream: &Stream,
) -> Result<AdvPairs> {
    if images.len() != labels.len() {
        return Err(Error::arg("images and labels differ in length"));
    }
    let mut by_method = BTreeMap::new();
    for &m in methods {
        let adv = attack_set(clf, images, labels, m, cfg, &stream.derive(m as u64))?;
        by_method.insert(m, adv);
    }
    Ok(AdvPairs {
        clean: images.to_vec(),
        labels: labels.to_vec(),
        by_method,
    })
}

/// The training factor grid: one purifier per (attack, family, depth)
/// combination, attacks outermost.
#[derive(Debug, Clone)]
pub struct PoolFactors {
    pub attacks: Vec<WhiteBoxMethod>,
    pub families: Vec<EncoderFamily>,
    pub depths: Vec<usize>,
}

impl PoolFactors {
    /// Desk-scale default: three attacks by two families at one depth,
    /// giving the six-member pool p0..p5.
    pub fn desk_default() -> Self {
        PoolFactors {
            attacks: vec![
                WhiteBoxMethod::Bim,
                WhiteBoxMethod::Fgsm,
                WhiteBoxMethod::Pgd,
            ],
            families: vec![EncoderFamily::EdsrLite, EncoderFamily::RcanLite],
            depths: vec![32],
        }
    }

    pub fn combos(&self) -> Vec<(WhiteBoxMethod, EncoderFamily, usize)> {
        let mut out = Vec::new();
        for &a in &self.attacks {
            for &f in &self.families {
                for &d in &self.depths {
                    out.push((a, f, d));
                }
            }
        }
        out
    }
}

/// Trains one purifier per factor combination, each on its own attack's
/// pairs, then measures pool diversity on the clean probe images.
pub fn train_pool(
    factors: &PoolFactors,
    pairs: &AdvPairs,
    cfg: &PurifyTrainConfig,
    stream: &Stream,
) -> Result<(PurifierPool, Vec<PurifierTrainReport>)> {
    let combos = factors.combos();
    if combos.is_empty() {
        return Err(Error::arg("factor grid is empty"));
    }
    let trained: Vec<(Purifier, PurifierTrainReport)> = combos
        .par_iter()
        .enumerate()
        .map(|(i, &(attack, family, depth))| {
            let (clean, adv) = pairs.pairs_for(attack)?;
            let s = stream.derive(i as u64);
            let model = Purifier::build(family, depth, &s.derive(0x01))?;
            let (mut model, report) = train_purifier(model, clean, adv, cfg, &s.derive(0x02))?;
            model.set_attack(attack);
            Ok((model, report))
        })
        .collect::<Result<_>>()?;
    let (purifiers, reports): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
    let pool = PurifierPool::from_purifiers(purifiers, &pairs.clean, stream.id())?;
    Ok((pool, reports))
}
