//! Timing of the sequential and chunked scans over growing sequence lengths.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vadet_core::ssm::{selective_scan_fast, selective_scan_naive};
use vadet_tensor::Tensor;

use crate::error::CliResult;

/// Doubling grid; the fast scan should take about twice as long per step up.
pub const DEFAULT_LENGTHS: [usize; 5] = [256, 512, 1024, 2048, 4096];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub batch: usize,
    pub channels: usize,
    pub state: usize,
    /// Timed repetitions per length; the fastest is kept.
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch: 1,
            channels: 16,
            state: 16,
            reps: 40,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub len: usize,
    pub naive_seconds: f64,
    pub fast_seconds: f64,
    /// Seconds per (batch · length · channel) element, in nanoseconds.
    pub naive_ns_per_elem: f64,
    pub fast_ns_per_elem: f64,
}

struct Inputs {
    u: Tensor<f32>,
    delta: Tensor<f32>,
    b: Tensor<f32>,
    c: Tensor<f32>,
}

/// Shortest wall time of one timed sample; short scans are repeated within a
/// sample until it lasts this long, so timer and scheduler jitter stay small.
pub const MIN_SAMPLE_SECONDS: f64 = 5e-3;

/// Lengths are interleaved within every repetition so that slow phases of the
/// machine hit all of them alike; the fastest repetition is kept.
pub fn bench_scan(lengths: &[usize], cfg: &BenchConfig) -> CliResult<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (nb, nd, ns) = (cfg.batch, cfg.channels, cfg.state);
    let a_log = Tensor::<f32>::uniform(&[nd, ns], -1.0, 1.0, &mut rng);
    let d_skip = Tensor::<f32>::randn(&[nd], 1.0, &mut rng);
    let inputs: Vec<Inputs> = lengths
        .iter()
        .map(|&len| Inputs {
            u: Tensor::randn(&[nb, len, nd], 1.0, &mut rng),
            delta: Tensor::uniform(&[nb, len, nd], 0.01, 0.5, &mut rng),
            b: Tensor::randn(&[nb, len, ns], 1.0, &mut rng),
            c: Tensor::randn(&[nb, len, ns], 1.0, &mut rng),
        })
        .collect();
    let run = |x: &Inputs, fast: bool| -> CliResult<()> {
        let y = if fast {
            selective_scan_fast(&x.u, &x.delta, &a_log, &x.b, &x.c, &d_skip)?
        } else {
            selective_scan_naive(&x.u, &x.delta, &a_log, &x.b, &x.c, &d_skip)?
        };
        std::hint::black_box(y);
        Ok(())
    };
    // warm-up round, which also sizes the inner loop of every sample
    let mut iters = vec![[1usize; 2]; lengths.len()];
    for (x, n) in inputs.iter().zip(iters.iter_mut()) {
        for (fast, n) in [false, true].into_iter().zip(n.iter_mut()) {
            let t = Instant::now();
            run(x, fast)?;
            let once = t.elapsed().as_secs_f64().max(1e-9);
            *n = (MIN_SAMPLE_SECONDS / once).ceil().max(1.0) as usize;
        }
    }
    let mut best = vec![[f64::INFINITY; 2]; lengths.len()];
    for _ in 0..cfg.reps.max(1) {
        for ((x, slot), n) in inputs.iter().zip(best.iter_mut()).zip(&iters) {
            for ((fast, time), &n) in [false, true].into_iter().zip(slot.iter_mut()).zip(n) {
                let t = Instant::now();
                for _ in 0..n {
                    run(x, fast)?;
                }
                *time = time.min(t.elapsed().as_secs_f64() / n as f64);
            }
        }
    }
    Ok(lengths
        .iter()
        .zip(best)
        .map(|(&len, [naive, fast])| {
            let elems = (nb * len * nd) as f64;
            BenchRow {
                len,
                naive_seconds: naive,
                fast_seconds: fast,
                naive_ns_per_elem: naive * 1e9 / elems,
                fast_ns_per_elem: fast * 1e9 / elems,
            }
        })
        .collect())
}

/// `fast_seconds[i + 1] / fast_seconds[i]`.
pub fn fast_ratios(rows: &[BenchRow]) -> Vec<f64> {
    rows.windows(2).map(|w| w[1].fast_seconds / w[0].fast_seconds).collect()
}

pub fn write_csv(path: &std::path::Path, rows: &[BenchRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
