//! Wall-clock benchmark of the adaptive convolution kernels.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adc::{adaptive_conv, adaptive_conv_backward, KernelPath};
use crate::drm::DilationRates;
use crate::error::{AdcError, Result};
use crate::stats::median;
use crate::tensor::{Matrix, Tensor4};

/// Largest blocked-vs-naive difference tolerated before timing.
pub const FAST_PATH_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub shape: [usize; 4],
    pub kernel: usize,
    pub groups: usize,
    pub path: KernelPath,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            shape: [1, 64, 64, 64],
            kernel: 3,
            groups: 4,
            path: KernelPath::Blocked,
            reps: 30,
            warmup: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Timing {
    pub median_ms: f64,
    pub p95_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub shape: [usize; 4],
    pub path: KernelPath,
    pub reps: usize,
    /// Largest blocked-vs-naive difference over outputs and all gradients.
    pub fast_path_diff: f64,
    pub forward: Timing,
    pub backward: Timing,
}

pub struct BenchInputs {
    pub x: Tensor4,
    pub weight: Tensor4,
    pub rates: DilationRates,
    pub grad_y: Tensor4,
}

/// Random input, kernel and fractional rates in `[1, 3]`.
pub fn bench_inputs(cfg: &BenchConfig) -> Result<BenchInputs> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let [n, c, _, _] = cfg.shape;
    crate::drm::check_groups(c, cfg.groups)?;
    let x = Tensor4::random_uniform(cfg.shape, -1.0, 1.0, &mut rng);
    let weight = Tensor4::random_uniform([c, c, cfg.kernel, cfg.kernel], -0.1, 0.1, &mut rng);
    let rates = DilationRates::new(Matrix::random_uniform(n, cfg.groups, 1.0, 3.0, &mut rng))?;
    let grad_y = Tensor4::random_uniform(cfg.shape, -1.0, 1.0, &mut rng);
    Ok(BenchInputs { x, weight, rates, grad_y })
}

/// Max difference between the two kernel paths over forward and backward.
pub fn fast_path_diff(inputs: &BenchInputs) -> Result<f64> {
    let BenchInputs { x, weight, rates, grad_y } = inputs;
    let yn = adaptive_conv(x, weight, rates, KernelPath::Naive)?;
    let yb = adaptive_conv(x, weight, rates, KernelPath::Blocked)?;
    let gn = adaptive_conv_backward(x, weight, rates, grad_y, KernelPath::Naive)?;
    let gb = adaptive_conv_backward(x, weight, rates, grad_y, KernelPath::Blocked)?;
    Ok(yn
        .max_abs_diff(&yb)?
        .max(gn.x.max_abs_diff(&gb.x)?)
        .max(gn.weight.max_abs_diff(&gb.weight)?)
        .max(gn.rates.max_abs_diff(&gb.rates)?))
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let k = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[k - 1]
}

fn time(reps: usize, warmup: usize, mut f: impl FnMut() -> Result<()>) -> Result<Timing> {
    for _ in 0..warmup {
        f()?;
    }
    let mut ms = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    ms.sort_by(f64::total_cmp);
    Ok(Timing {
        median_ms: median(&ms),
        p95_ms: percentile(&ms, 0.95),
    })
}

/// Checks the fast path against the naive one, then times `cfg.path`.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.reps < 30 {
        return Err(AdcError::Config("bench needs at least 30 repetitions".into()));
    }
    let inputs = bench_inputs(cfg)?;
    let diff = fast_path_diff(&inputs)?;
    if !(diff <= FAST_PATH_TOL) {
        return Err(AdcError::FastPathMismatch(diff));
    }
    let BenchInputs { x, weight, rates, grad_y } = &inputs;
    let forward = time(cfg.reps, cfg.warmup, || adaptive_conv(x, weight, rates, cfg.path).map(drop))?;
    let backward = time(cfg.reps, cfg.warmup, || {
        adaptive_conv_backward(x, weight, rates, grad_y, cfg.path).map(drop)
    })?;
    Ok(BenchReport {
        shape: cfg.shape,
        path: cfg.path,
        reps: cfg.reps,
        fast_path_diff: diff,
        forward,
        backward,
    })
}
