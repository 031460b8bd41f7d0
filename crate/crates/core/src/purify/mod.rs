//! Purifier models, pools of them, and randomized patch-wise inference.
//!
//! A purifier is a small image-to-image network: a spatial-size-preserving
//! encoder followed by a per-pixel decoder. A pool is an ordered set of
//! independently trained purifiers. The patch-wise mode splits the frame
//! into a grid and routes every patch to a uniformly drawn pool member, so
//! the total encoder work stays that of a single pass regardless of pool
//! size. The ensemble mode runs every member on the whole frame and mixes
//! per pixel, which is the linear-cost baseline.

mod encoder;
mod train;
mod transform;

pub use train::{
    adversarial_pairs, train_pool, train_purifier, AdvPairs, PoolFactors, PurifierTrainReport,
    PurifyTrainConfig,
};
pub use transform::{
    bit_reduce, gaussian_noise, median_smooth, shrink, TransformKind, DEFAULT_BITS,
    DEFAULT_MEDIAN_K, DEFAULT_NOISE_SIGMA,
};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::Stream;
use crate::tensor::{Tape, Tensor, TensorId};
use crate::whitebox::WhiteBoxMethod;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Purifiers map RGB in, RGB out.
pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EncoderFamily {
    #[serde(rename = "edsr-lite")]
    EdsrLite,
    #[serde(rename = "rcan-lite")]
    RcanLite,
}

impl EncoderFamily {
    pub fn name(&self) -> &'static str {
        match self {
            EncoderFamily::EdsrLite => "edsr-lite",
            EncoderFamily::RcanLite => "rcan-lite",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "edsr-lite" => Ok(EncoderFamily::EdsrLite),
            "rcan-lite" => Ok(EncoderFamily::RcanLite),
            other => Err(Error::arg(format!("unknown encoder family {other:?}"))),
        }
    }
}

/// One encoder-decoder purification model.
#[derive(Debug, Clone)]
pub struct Purifier {
    family: EncoderFamily,
    depth: usize,
    /// The attack whose examples trained this model, once known.
    attack: Option<WhiteBoxMethod>,
    params: ParamSet,
}

impl Purifier {
    pub fn build(family: EncoderFamily, depth: usize, stream: &Stream) -> Result<Self> {
        if depth != 32 && depth != 64 {
            return Err(Error::arg(format!(
                "feature depth must be 32 or 64, got {depth}"
            )));
        }
        Ok(Purifier {
            family,
            depth,
            attack: None,
            params: encoder::init_params(family, depth, CHANNELS, stream),
        })
    }

    pub fn family(&self) -> EncoderFamily {
        self.family
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn attack(&self) -> Option<WhiteBoxMethod> {
        self.attack
    }

    pub fn set_attack(&mut self, attack: WhiteBoxMethod) {
        self.attack = Some(attack);
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Loads parameters onto a tape as untracked leaves.
    pub fn param_leaves(&self, tape: &mut Tape) -> Vec<TensorId> {
        self.params
            .entries()
            .iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect()
    }

    /// Full encode-decode graph on a `[B, C, H, W]` batch. The output is
    /// unclamped so training losses see raw values; inference entry points
    /// clamp afterwards.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        param_ids: &[TensorId],
        x: TensorId,
    ) -> Result<TensorId> {
        let feats = encoder::encode_graph(tape, self.family, param_ids, x)?;
        encoder::decode_graph(tape, self.family, param_ids, feats)
    }

    /// Feature map `[B, D, H, W]` for a `[B, C, H, W]` batch.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 4 {
            return Err(Error::shape("encode", format!("want [B,C,H,W], got {:?}", x.shape())));
        }
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let ids = self.param_leaves(&mut tape);
        let feats = encoder::encode_graph(&mut tape, self.family, &ids, xid)?;
        Ok(tape.value(feats).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }
}

/// Unclamped single-image pass; `x` is `[C, H, W]`.
fn run_single(p: &Purifier, x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 3 || x.shape()[0] != CHANNELS {
        return Err(Error::shape(
            "purify",
            format!("want [{CHANNELS},H,W], got {:?}", x.shape()),
        ));
    }
    let mut tape = Tape::new();
    let mut bshape = vec![1];
    bshape.extend_from_slice(x.shape());
    let xid = tape.leaf(Tensor::new(&bshape, x.data().to_vec())?);
    let ids = p.param_leaves(&mut tape);
    let out = p.forward_on_tape(&mut tape, &ids, xid)?;
    Tensor::new(x.shape(), tape.value(out).data().to_vec())
}

fn clamp01(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    t
}

/// Deterministic whole-image purification, clamped to the pixel box.
pub fn purify_full(p: &Purifier, x: &Tensor) -> Result<Tensor> {
    Ok(clamp01(run_single(p, x)?))
}

/// One rectangle of a patch grid, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

/// A rows-by-cols partition of an H-by-W frame. Base patch size is the
/// integer quotient; the last row and column absorb any remainder.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    rows: usize,
    cols: usize,
    height: usize,
    width: usize,
    rects: Vec<PatchRect>,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize, height: usize, width: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::arg("patch grid needs at least one row and column"));
        }
        if rows > height || cols > width {
            return Err(Error::arg(format!(
                "{rows}x{cols} grid does not fit a {height}x{width} frame"
            )));
        }
        let ph = height / rows;
        let pw = width / cols;
        let mut rects = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let y = r * ph;
            let h = if r + 1 == rows { height - y } else { ph };
            for c in 0..cols {
                let x = c * pw;
                let w = if c + 1 == cols { width - x } else { pw };
                rects.push(PatchRect { y, x, h, w });
            }
        }
        Ok(PatchGrid {
            rows,
            cols,
            height,
            width,
            rects,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rects(&self) -> &[PatchRect] {
        &self.rects
    }

    pub fn len(&self) -> usize {
        self.rects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rects.is_empty()
    }
}

/// Instrumentation for the constant-cost property: how many pixels passed
/// through an encoder. A single whole-image pass counts H*W.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PurifyStats {
    pub encoder_pixels: u64,
}

/// An ordered set of trained purifiers with a measured diversity bound.
#[derive(Debug, Clone)]
pub struct PurifierPool {
    purifiers: Vec<Purifier>,
    nu_hat: f32,
    seed_id: u64,
}

impl PurifierPool {
    /// Wraps trained purifiers, measuring diversity on the probe images.
    pub fn from_purifiers(
        purifiers: Vec<Purifier>,
        probes: &[Tensor],
        seed_id: u64,
    ) -> Result<Self> {
        if purifiers.is_empty() {
            return Err(Error::arg("purifier pool cannot be empty"));
        }
        let nu_hat = estimate_nu(&purifiers, probes)?;
        Ok(PurifierPool {
            purifiers,
            nu_hat,
            seed_id,
        })
    }

    pub fn len(&self) -> usize {
        self.purifiers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.purifiers.is_empty()
    }

    pub fn at(&self, i: usize) -> &Purifier {
        &self.purifiers[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Purifier> {
        self.purifiers.iter()
    }

    pub fn nu_hat(&self) -> f32 {
        self.nu_hat
    }

    pub fn seed_id(&self) -> u64 {
        self.seed_id
    }

    /// A pool of the first `k` members, with diversity re-measured.
    pub fn prefix(&self, k: usize, probes: &[Tensor]) -> Result<PurifierPool> {
        if k == 0 || k > self.len() {
            return Err(Error::arg(format!(
                "prefix size {k} out of range for pool of {}",
                self.len()
            )));
        }
        PurifierPool::from_purifiers(self.purifiers[..k].to_vec(), probes, self.seed_id)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.len());
        for (i, p) in self.purifiers.iter().enumerate() {
            let checkpoint = format!("p{i}.pdt");
            p.save(&dir.join(&checkpoint))?;
            entries.push(ManifestEntry {
                id: format!("p{i}"),
                family: p.family,
                depth: p.depth,
                attack: p.attack,
                checkpoint,
            });
        }
        let manifest = PoolManifest {
            seed_id: self.seed_id,
            nu_hat: self.nu_hat,
            purifiers: entries,
        };
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path)?;
        let manifest: PoolManifest = serde_json::from_str(&text)?;
        if manifest.purifiers.is_empty() {
            return Err(Error::Malformed {
                path: path.display().to_string(),
                detail: "manifest lists no purifiers".into(),
            });
        }
        let mut purifiers = Vec::with_capacity(manifest.purifiers.len());
        for entry in &manifest.purifiers {
            let template = Purifier::build(entry.family, entry.depth, &Stream::master(0))?;
            let params = ParamSet::load_into(&dir.join(&entry.checkpoint), &template.params)?;
            purifiers.push(Purifier {
                family: entry.family,
                depth: entry.depth,
                attack: entry.attack,
                params,
            });
        }
        Ok(PurifierPool {
            purifiers,
            nu_hat: manifest.nu_hat,
            seed_id: manifest.seed_id,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct PoolManifest {
    seed_id: u64,
    nu_hat: f32,
    purifiers: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    family: EncoderFamily,
    depth: usize,
    attack: Option<WhiteBoxMethod>,
    checkpoint: String,
}

/// Largest pairwise l2 output distance over the probe set. A lower bound of
/// the true pool diversity: more probes can only raise it.
pub fn estimate_nu(purifiers: &[Purifier], probes: &[Tensor]) -> Result<f32> {
    let mut nu = 0.0f32;
    for probe in probes {
        let outs: Vec<Tensor> = purifiers
            .iter()
            .map(|p| purify_full(p, probe))
            .collect::<Result<_>>()?;
        for i in 0..outs.len() {
            for j in i + 1..outs.len() {
                let d2: f32 = outs[i]
                    .data()
                    .iter()
                    .zip(outs[j].data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                nu = nu.max(d2.sqrt());
            }
        }
    }
    Ok(nu)
}

fn copy_patch(dst: &mut [f32], src: &[f32], rect: &PatchRect, width: usize, height: usize) {
    // dst is the patch buffer [C, rect.h, rect.w], src the frame [C, H, W].
    let area = width * height;
    for ch in 0..CHANNELS {
        for dy in 0..rect.h {
            let srow = ch * area + (rect.y + dy) * width + rect.x;
            let drow = ch * rect.h * rect.w + dy * rect.w;
            dst[drow..drow + rect.w].copy_from_slice(&src[srow..srow + rect.w]);
        }
    }
}

fn paste_patch(dst: &mut [f32], src: &[f32], rect: &PatchRect, width: usize, height: usize) {
    let area = width * height;
    for ch in 0..CHANNELS {
        for dy in 0..rect.h {
            let drow = ch * area + (rect.y + dy) * width + rect.x;
            let srow = ch * rect.h * rect.w + dy * rect.w;
            dst[drow..drow + rect.w].copy_from_slice(&src[srow..srow + rect.w]);
        }
    }
}

/// Randomized patch-wise purification. Every patch gets an independent
/// uniform draw from the pool and is purified standalone, so the encoder
/// work summed over patches equals exactly one whole-image pass.
pub fn purify_patchwise(
    pool: &PurifierPool,
    x: &Tensor,
    grid: &PatchGrid,
    stream: &Stream,
) -> Result<(Tensor, PurifyStats)> {
    if pool.is_empty() {
        return Err(Error::arg("purifier pool cannot be empty"));
    }
    let shape = x.shape();
    if shape.len() != 3 || shape[1] != grid.height || shape[2] != grid.width {
        return Err(Error::shape(
            "purify_patchwise",
            format!("grid {}x{} vs image {:?}", grid.height, grid.width, shape),
        ));
    }
    let area = (grid.height * grid.width) as u64;
    if pool.len() == 1 {
        // Every draw lands on the same member and stitching standalone
        // patches of one model equals its whole-image pass bit for bit,
        // so skip the patch bookkeeping.
        return Ok((
            purify_full(pool.at(0), x)?,
            PurifyStats {
                encoder_pixels: area,
            },
        ));
    }
    let mut s = stream.clone();
    let mut out = vec![0.0f32; x.numel()];
    let mut pixels = 0u64;
    for rect in grid.rects() {
        let k = s.index(pool.len());
        let mut buf = vec![0.0f32; CHANNELS * rect.h * rect.w];
        copy_patch(&mut buf, x.data(), rect, grid.width, grid.height);
        let patch = Tensor::new(&[CHANNELS, rect.h, rect.w], buf)?;
        let purified = purify_full(pool.at(k), &patch)?;
        paste_patch(&mut out, purified.data(), rect, grid.width, grid.height);
        pixels += (rect.h * rect.w) as u64;
    }
    Ok((
        Tensor::new(shape, out)?,
        PurifyStats {
            encoder_pixels: pixels,
        },
    ))
}

/// Ensemble baseline: every member encodes the full frame, then each pixel
/// takes the decoded value of a uniformly drawn member. Encoder work grows
/// linearly with pool size.
pub fn purify_ensemble(
    pool: &PurifierPool,
    x: &Tensor,
    stream: &Stream,
) -> Result<(Tensor, PurifyStats)> {
    if pool.is_empty() {
        return Err(Error::arg("purifier pool cannot be empty"));
    }
    let shape = x.shape();
    if shape.len() != 3 || shape[0] != CHANNELS {
        return Err(Error::shape(
            "purify_ensemble",
            format!("want [{CHANNELS},H,W], got {shape:?}"),
        ));
    }
    let area = shape[1] * shape[2];
    let mut s = stream.clone();
    let draws: Vec<usize> = (0..area).map(|_| s.index(pool.len())).collect();
    let outs: Vec<Tensor> = pool
        .iter()
        .map(|p| run_single(p, x))
        .collect::<Result<_>>()?;
    let mut data = vec![0.0f32; x.numel()];
    for (px, &k) in draws.iter().enumerate() {
        for ch in 0..CHANNELS {
            data[ch * area + px] = outs[k].data()[ch * area + px];
        }
    }
    Ok((
        clamp01(Tensor::new(shape, data)?),
        PurifyStats {
            encoder_pixels: (pool.len() * area) as u64,
        },
    ))
}
