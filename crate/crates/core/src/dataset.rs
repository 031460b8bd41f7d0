//! Labeled image sets: a procedural texture generator and a reader for the
//! CIFAR-10 binary layout.

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;
use std::path::Path;

/// Images are `[C, H, W]` tensors with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `[C, H, W]` of the first image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images[0].shape();
        (s[0], s[1], s[2])
    }

    /// Deterministic split into `(train, holdout)`.
    pub fn split(&self, holdout_frac: f32, stream: &Stream) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut s = stream.derive(0x591f);
        s.shuffle(&mut idx);
        let k = ((self.len() as f32) * holdout_frac).round() as usize;
        let k = k.min(self.len());
        let pick = |ids: &[usize]| Dataset {
            images: ids.iter().map(|&i| self.images[i].clone()).collect(),
            labels: ids.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        };
        (pick(&idx[..self.len() - k]), pick(&idx[self.len() - k..]))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Shape and texture statistics for the synthetic set.
#[derive(Debug, Clone)]
pub struct TextureSpec {
    pub n: usize,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Amplitude of the class grating around mid-gray.
    pub contrast: f32,
    /// Per-pixel Gaussian noise level.
    pub noise: f32,
}

impl TextureSpec {
    pub fn new(n: usize, classes: usize, height: usize, width: usize) -> Self {
        TextureSpec {
            n,
            classes,
            channels: 3,
            height,
            width,
            contrast: 0.05,
            noise: 0.05,
        }
    }
}

/// Frequency pairs assigned to class indices. Distinct pairs give distinct
/// gratings, so classes stay apart by construction.
const CLASS_FREQS: [(f32, f32); 10] = [
    (1.0, 0.0),
    (0.0, 1.0),
    (1.0, 1.0),
    (2.0, 1.0),
    (1.0, 2.0),
    (2.0, 2.0),
    (2.0, 0.0),
    (0.0, 2.0),
    (3.0, 1.0),
    (1.0, 3.0),
];

/// Class-dependent sinusoidal gratings plus Gaussian pixel noise.
/// Deterministic in the stream; balanced across classes.
pub fn synthetic_textures(spec: &TextureSpec, stream: &Stream) -> Result<Dataset> {
    if spec.n == 0 || spec.classes == 0 {
        return Err(Error::arg("texture set needs n > 0 and classes > 0"));
    }
    if spec.classes > CLASS_FREQS.len() {
        return Err(Error::arg(format!(
            "at most {} texture classes are supported",
            CLASS_FREQS.len()
        )));
    }
    if spec.n % spec.classes != 0 {
        return Err(Error::arg(format!(
            "cannot balance {} images over {} classes",
            spec.n, spec.classes
        )));
    }
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::arg("texture images need positive extents"));
    }

    // One grating per class, fixed for the whole set.
    let mut bases = Vec::with_capacity(spec.classes);
    for class in 0..spec.classes {
        let mut ps = stream.derive(0xba5e).derive(class as u64);
        let (fx, fy) = CLASS_FREQS[class];
        let phase = ps.uniform_in(0.0, std::f64::consts::TAU) as f32;
        let chshift = ps.uniform_in(0.0, std::f64::consts::TAU / 3.0) as f32;
        let mut base = vec![0.0f32; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let t = std::f32::consts::TAU
                        * (fx * x as f32 / w as f32 + fy * y as f32 / h as f32)
                        + phase
                        + chshift * ch as f32;
                    base[(ch * h + y) * w + x] = 0.5 + spec.contrast * t.sin();
                }
            }
        }
        bases.push(base);
    }

    let mut images = Vec::with_capacity(spec.n);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let class = i % spec.classes;
        let mut ps = stream.derive(0x1297).derive(i as u64);
        let mut data = bases[class].clone();
        for v in data.iter_mut() {
            *v = (*v + spec.noise * ps.normal() as f32).clamp(0.0, 1.0);
        }
        images.push(Tensor::new(&[c, h, w], data)?);
        labels.push(class);
    }
    Ok(Dataset {
        images,
        labels,
        classes: spec.classes,
    })
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Reads CIFAR-10 binary batches: each record is one label byte followed by
/// a 3x32x32 plane-ordered image. Takes the first `subset` records, or a
/// balanced per-class quota when `balanced` is set.
pub fn cifar10_binary(paths: &[impl AsRef<Path>], subset: usize, balanced: bool) -> Result<Dataset> {
    if subset == 0 {
        return Err(Error::arg("cifar10 subset must be positive"));
    }
    if balanced && subset % 10 != 0 {
        return Err(Error::arg(format!(
            "balanced cifar10 subset must divide by 10, got {subset}"
        )));
    }
    let quota = subset / 10;
    let mut counts = vec![0usize; 10];
    let mut images = Vec::with_capacity(subset);
    let mut labels = Vec::with_capacity(subset);

    'files: for path in paths {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Malformed {
                path: path.display().to_string(),
                detail: format!(
                    "file length {} is not a multiple of the {}-byte record",
                    bytes.len(),
                    CIFAR_RECORD
                ),
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            let label = rec[0] as usize;
            if label > 9 {
                return Err(Error::Malformed {
                    path: path.display().to_string(),
                    detail: format!("label byte {} out of range", rec[0]),
                });
            }
            if balanced && counts[label] >= quota {
                continue;
            }
            counts[label] += 1;
            let data: Vec<f32> = rec[1..].iter().map(|&b| b as f32 / 255.0).collect();
            images.push(Tensor::new(&[3, 32, 32], data)?);
            labels.push(label);
            if images.len() == subset {
                break 'files;
            }
        }
    }

    if images.len() != subset {
        return Err(Error::arg(format!(
            "requested {} cifar10 images ({}), found {}",
            subset,
            if balanced { "balanced" } else { "in order" },
            images.len()
        )));
    }
    Ok(Dataset {
        images,
        labels,
        classes: 10,
    })
}
