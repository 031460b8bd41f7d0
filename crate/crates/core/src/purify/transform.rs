//! Fixed preprocessing baselines the randomized defense is compared against.

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const DEFAULT_BITS: u32 = 3;
pub const DEFAULT_MEDIAN_K: usize = 3;
pub const DEFAULT_NOISE_SIGMA: f32 = 0.041;

/// Quantize to 2^bits levels: round(x * (2^bits - 1)) / (2^bits - 1).
pub fn bit_reduce(x: &Tensor, bits: u32) -> Result<Tensor> {
    if !(1..=8).contains(&bits) {
        return Err(Error::arg(format!("bit depth must be in 1..=8, got {bits}")));
    }
    let levels = ((1u32 << bits) - 1) as f32;
    let data = x.data().iter().map(|&v| (v * levels).round() / levels).collect();
    Tensor::new(x.shape(), data)
}

/// Per-channel k-by-k median filter with edge replication on a `[C, H, W]`
/// image.
pub fn median_smooth(x: &Tensor, k: usize) -> Result<Tensor> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::arg(format!("median kernel must be odd, got {k}")));
    }
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::shape(
            "median_smooth",
            format!("want [C,H,W], got {shape:?}"),
        ));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let r = (k / 2) as isize;
    let src = x.data();
    let mut out = vec![0.0f32; src.len()];
    let mut window = Vec::with_capacity(k * k);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                window.clear();
                for dy in -r..=r {
                    let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -r..=r {
                        let sx = (xx as isize + dx).clamp(0, w as isize - 1) as usize;
                        window.push(plane[sy * w + sx]);
                    }
                }
                window.sort_by(f32::total_cmp);
                out[ch * h * w + y * w + xx] = window[window.len() / 2];
            }
        }
    }
    Tensor::new(shape, out)
}

/// Adds i.i.d. Gaussian noise and clamps back to the pixel box.
pub fn gaussian_noise(x: &Tensor, sigma: f32, stream: &Stream) -> Result<Tensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::arg("sigma must be finite and non-negative"));
    }
    let mut s = stream.clone();
    let data = x
        .data()
        .iter()
        .map(|&v| (v + sigma * s.normal() as f32).clamp(0.0, 1.0))
        .collect();
    Tensor::new(x.shape(), data)
}

/// Scales pixel values by the given factor. A deterministic contraction:
/// it shrinks the input-space Lipschitz constant of whatever runs
/// downstream to `factor` times its undefended value.
pub fn shrink(x: &Tensor, factor: f32) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&factor) {
        return Err(Error::arg(format!(
            "shrink factor must be in [0,1], got {factor}"
        )));
    }
    let data = x.data().iter().map(|&v| factor * v).collect();
    Tensor::new(x.shape(), data)
}

/// A configured transform, usable as a drop-in deterministic (or noise)
/// defense.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformKind {
    BitReduce { bits: u32 },
    MedianSmooth { k: usize },
    GaussianNoise { sigma: f32 },
    Shrink { factor: f32 },
}

impl TransformKind {
    pub fn apply(&self, x: &Tensor, stream: &Stream) -> Result<Tensor> {
        match *self {
            TransformKind::BitReduce { bits } => bit_reduce(x, bits),
            TransformKind::MedianSmooth { k } => median_smooth(x, k),
            TransformKind::GaussianNoise { sigma } => gaussian_noise(x, sigma, stream),
            TransformKind::Shrink { factor } => shrink(x, factor),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            TransformKind::BitReduce { bits } => format!("bit_reduce({bits})"),
            TransformKind::MedianSmooth { k } => format!("median_smooth({k})"),
            TransformKind::GaussianNoise { sigma } => format!("gaussian_noise({sigma})"),
            TransformKind::Shrink { factor } => format!("shrink({factor})"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(vals: &[f32], h: usize, w: usize) -> Tensor {
        let mut data = Vec::new();
        for _ in 0..3 {
            data.extend_from_slice(vals);
        }
        Tensor::new(&[3, h, w], data).unwrap()
    }

    #[test]
    fn bit_reduce_examples() {
        // 8 bits is the identity on any 8-bit-quantized value.
        let vals: Vec<f32> = (0..=255).map(|v| v as f32 / 255.0).collect();
        let x = Tensor::new(&[1, 16, 16], vals.clone()).unwrap();
        let y = bit_reduce(&x, 8).unwrap();
        for (a, b) in y.data().iter().zip(&vals) {
            assert!((a - b).abs() < 1e-6);
        }
        // 3 bits snaps 0.3 to 2/7.
        let x = Tensor::new(&[1], vec![0.3]).unwrap();
        let y = bit_reduce(&x, 3).unwrap();
        assert!((y.data()[0] - 2.0 / 7.0).abs() < 1e-6);
        assert!(bit_reduce(&x, 0).is_err());
        assert!(bit_reduce(&x, 9).is_err());
    }

    #[test]
    fn median_of_constant_is_constant() {
        let x = image(&[0.42; 20], 4, 5);
        let y = median_smooth(&x, 3).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.42));
        assert!(median_smooth(&x, 2).is_err());
        assert!(median_smooth(&x, 0).is_err());
    }

    #[test]
    fn median_replicates_edges() {
        // A single bright pixel in a corner: replication puts it in the
        // corner window 4 times out of 9, still a minority, so the median
        // stays dark.
        #[rustfmt::skip]
        let plane = [
            1.0, 0.0, 0.0,
            0.0, 0.0, 0.0,
            0.0, 0.0, 0.0,
        ];
        let x = image(&plane, 3, 3);
        let y = median_smooth(&x, 3).unwrap();
        assert_eq!(y.data()[0], 0.0);
        // Center pixel: one bright value among nine, filtered out.
        assert_eq!(y.data()[4], 0.0);
    }

    #[test]
    fn noise_is_seeded_and_clamped() {
        let x = image(&[0.9; 16], 4, 4);
        let a = gaussian_noise(&x, 0.5, &Stream::master(1)).unwrap();
        let b = gaussian_noise(&x, 0.5, &Stream::master(1)).unwrap();
        let c = gaussian_noise(&x, 0.5, &Stream::master(2)).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let zero = gaussian_noise(&x, 0.0, &Stream::master(3)).unwrap();
        assert_eq!(zero.data(), x.data());
        assert!(gaussian_noise(&x, -1.0, &Stream::master(0)).is_err());
    }

    #[test]
    fn shrink_scales_pixels_down() {
        let x = image(&[0.0, 1.0, 0.5, 0.75], 2, 2);
        let y = shrink(&x, 0.5).unwrap();
        assert_eq!(&y.data()[..4], &[0.0, 0.5, 0.25, 0.375]);
        let id = shrink(&x, 1.0).unwrap();
        assert_eq!(id.data(), x.data());
        assert!(shrink(&x, 1.5).is_err());
    }

    #[test]
    fn kinds_apply_and_label() {
        let x = image(&[0.3; 9], 3, 3);
        let k = TransformKind::BitReduce { bits: 3 };
        let y = k.apply(&x, &Stream::master(0)).unwrap();
        assert!((y.data()[0] - 2.0 / 7.0).abs() < 1e-6);
        assert_eq!(k.label(), "bit_reduce(3)");
        assert_eq!(
            TransformKind::MedianSmooth { k: 3 }.label(),
            "median_smooth(3)"
        );
    }
}
