//! Wall-clock inference benchmark: patch-wise routing versus whole-frame
//! ensembling across pool sizes, batch size 1.
//!
//! Protocol: for each pool size, run `reps` single-image purifications and
//! keep the wall time of the last `reps - warmup`; report the median and
//! p90, plus the deterministic encoder-pixel counter. The times are the one
//! intentionally non-reproducible output of the harness; everything else in
//! each row is fixed by the configuration.

use crate::config::BenchConfig;
use crate::error::{CliError, Result};
use crate::experiment::LatencyRow;
use patchpure_core::purify::{purify_ensemble, purify_patchwise, PatchGrid, PurifierPool};
use patchpure_core::rng::Stream;
use patchpure_core::tensor::Tensor;
use std::time::Instant;

const MODES: [&str; 2] = ["patchwise", "ensemble"];

pub fn latency_bench(
    pool: &PurifierPool,
    cfg: &BenchConfig,
    image: &Tensor,
    stream: &Stream,
) -> Result<Vec<LatencyRow>> {
    let max = *cfg.sizes.iter().max().expect("validated non-empty");
    if pool.len() < max {
        return Err(CliError::config(format!(
            "benchmark needs a pool of at least {max}, got {}",
            pool.len()
        )));
    }
    if image.shape().len() != 3 {
        return Err(CliError::config(format!(
            "benchmark image must be [C,H,W], got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let grid = PatchGrid::new(cfg.grid[0], cfg.grid[1], h, w).map_err(CliError::Core)?;

    let mut rows = Vec::with_capacity(MODES.len() * cfg.sizes.len());
    for (m, mode) in MODES.iter().enumerate() {
        for &size in &cfg.sizes {
            let sub = pool.prefix(size, &[]).map_err(CliError::Core)?;
            let mode_stream = stream.derive(m as u64).derive(size as u64);
            let mut times = Vec::with_capacity(cfg.reps);
            let mut encoder_pixels = None;
            for rep in 0..cfg.reps {
                let qs = mode_stream.derive(rep as u64);
                let start = Instant::now();
                let (_, stats) = match *mode {
                    "patchwise" => purify_patchwise(&sub, image, &grid, &qs),
                    _ => purify_ensemble(&sub, image, &qs),
                }
                .map_err(CliError::Core)?;
                times.push(start.elapsed().as_nanos() as u64);
                match encoder_pixels {
                    None => encoder_pixels = Some(stats.encoder_pixels),
                    Some(prev) => {
                        // The counter is a pure function of mode, size, and
                        // image shape; any drift is a bug worth failing on.
                        if prev != stats.encoder_pixels {
                            return Err(CliError::config(format!(
                                "encoder counter drifted: {prev} vs {}",
                                stats.encoder_pixels
                            )));
                        }
                    }
                }
            }
            let kept = &mut times[cfg.warmup..];
            kept.sort_unstable();
            rows.push(LatencyRow {
                mode: (*mode).into(),
                pool_size: size,
                median_ns: median(kept),
                p90_ns: percentile(kept, 0.90),
                encoder_pixels: encoder_pixels.expect("reps > 0"),
            });
        }
    }
    Ok(rows)
}

fn median(sorted: &[u64]) -> u64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2
    }
}

/// Nearest-rank percentile on a sorted slice.
fn percentile(sorted: &[u64], p: f64) -> u64 {
    let n = sorted.len();
    let rank = (p * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}
