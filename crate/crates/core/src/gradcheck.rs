//! Finite-difference checks of every analytic gradient: the sampler, the
//! DRM, a single ADC layer, one bottleneck block and two stacked blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::adc::{adc_backward, adc_forward_with, AdcParams, KernelPath};
use crate::drm::{drm_backward, drm_forward, DrmParams};
use crate::error::Result;
use crate::model::{BottleneckBlock, SpatialConv, SpatialKind};
use crate::sampler::{sample, sample_backward, SamplePoint};
use crate::tape::Tape;
use crate::tensor::{Matrix, Tensor4};

/// Denominator floor for the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub tol: f64,
    pub step: f64,
    pub seed: u64,
    /// Input shapes for the ADC, block and stacked-block checks.
    pub sizes: Vec<[usize; 4]>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            step: 1e-5,
            seed: 0,
            sizes: vec![[1, 4, 8, 8]],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Mismatch {
    pub coordinate: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComponentReport {
    pub component: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
    /// Coordinates over tolerance, worst first, at most ten.
    pub failures: Vec<Mismatch>,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn line(&self) -> String {
        format!(
            "{}: max rel err {:.1e} at {} over {} coords {}",
            self.component,
            self.max_rel_err,
            self.worst,
            self.checked,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn labels(parts: &[(String, usize)]) -> Vec<String> {
    parts
        .iter()
        .flat_map(|(name, n)| (0..*n).map(move |k| format!("{name}[{k}]")))
        .collect()
}

/// Central differences of `loss` at `base` against `analytic`.
fn compare<F>(component: String, names: Vec<String>, base: &[f64], analytic: &[f64], loss: F, cfg: &GradCheckConfig) -> Result<ComponentReport>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    assert_eq!(base.len(), analytic.len());
    assert_eq!(base.len(), names.len());
    let h = cfg.step;
    let numeric: Vec<f64> = (0..base.len())
        .into_par_iter()
        .map(|k| {
            let mut v = base.to_vec();
            v[k] = base[k] + h;
            let plus = loss(&v)?;
            v[k] = base[k] - h;
            let minus = loss(&v)?;
            Ok((plus - minus) / (2.0 * h))
        })
        .collect::<Result<_>>()?;
    let mut all: Vec<Mismatch> = names
        .into_iter()
        .zip(analytic.iter().zip(&numeric))
        .map(|(coordinate, (&a, &n))| Mismatch {
            coordinate,
            analytic: a,
            numeric: n,
            rel_err: rel_err(a, n),
        })
        .collect();
    all.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    let (max_rel_err, worst) = all.first().map(|m| (m.rel_err, m.coordinate.clone())).unwrap_or((0.0, "-".into()));
    Ok(ComponentReport {
        component,
        checked: base.len(),
        max_rel_err,
        worst,
        failures: all.into_iter().filter(|m| !(m.rel_err < cfg.tol)).take(10).collect(),
    })
}

/// DRM parameters moved away from their initial values so rates are
/// fractional and input-dependent.
fn perturbed_drm(c_in: usize, groups: usize, rng: &mut ChaCha8Rng) -> Result<DrmParams> {
    let mut p = DrmParams::new(c_in, groups, rng)?;
    p.w2 = Matrix::random_uniform(p.hidden(), groups, -0.3, 0.3, rng);
    p.b1 = (0..p.hidden()).map(|_| rng.random_range(0.05..0.3)).collect();
    p.b2 = (0..groups).map(|_| rng.random_range(1.2..2.3)).collect();
    Ok(p)
}

fn set_drm(p: &mut DrmParams, values: &[f64]) {
    for (slot, v) in p.flat_mut().into_iter().zip(values) {
        *slot = *v;
    }
}

fn check_sampler(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<ComponentReport> {
    let x = Tensor4::random_uniform([1, 2, 5, 6], -1.0, 1.0, rng);
    let points: Vec<SamplePoint> = (0..12)
        .map(|k| SamplePoint {
            n: 0,
            c: k % 2,
            i: rng.random_range(-1.5..5.5),
            j: rng.random_range(-1.5..6.5),
        })
        .collect();
    let coef: Vec<f64> = points.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
    let n_px = x.len();
    let mut base = x.data().to_vec();
    for p in &points {
        base.extend([p.i, p.j]);
    }
    let mut analytic = vec![0.0; base.len()];
    for (k, (p, &c)) in points.iter().zip(&coef).enumerate() {
        let g = sample_backward(&x, p, c)?;
        for (i, j, v) in g.pixels {
            analytic[x.index(0, p.c, i, j)] += v;
        }
        analytic[n_px + 2 * k] = g.grad_i;
        analytic[n_px + 2 * k + 1] = g.grad_j;
    }
    let dims = x.dims();
    let loss = |v: &[f64]| -> Result<f64> {
        let xt = Tensor4::new(dims, v[..n_px].to_vec())?;
        let mut s = 0.0;
        for (k, (p, &c)) in points.iter().zip(&coef).enumerate() {
            let q = SamplePoint {
                i: v[n_px + 2 * k],
                j: v[n_px + 2 * k + 1],
                ..*p
            };
            s += c * sample(&xt, &q)?;
        }
        Ok(s)
    };
    let names = labels(&[("x".into(), n_px), ("coord".into(), 2 * points.len())]);
    compare("sampler".into(), names, &base, &analytic, loss, cfg)
}

fn check_drm(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<ComponentReport> {
    let (c_in, groups) = (8, 4);
    let x = Tensor4::random_uniform([2, c_in, 5, 5], -1.0, 1.0, rng);
    let params = perturbed_drm(c_in, groups, rng)?;
    let coef = Matrix::random_uniform(2, groups, -1.0, 1.0, rng);
    let (_, cache) = drm_forward(&x, &params)?;
    let g = drm_backward(&params, &cache, &coef)?;
    let mut base = x.data().to_vec();
    base.extend(params.flat());
    let mut analytic = g.x.data().to_vec();
    analytic.extend(g.flat());
    let n_px = x.len();
    let loss = |v: &[f64]| -> Result<f64> {
        let xt = Tensor4::new(x.dims(), v[..n_px].to_vec())?;
        let mut p = params.clone();
        set_drm(&mut p, &v[n_px..]);
        let (rates, _) = drm_forward(&xt, &p)?;
        Ok(rates.matrix().data().iter().zip(coef.data()).map(|(r, c)| r * c).sum())
    };
    let names = labels(&[
        ("x".into(), n_px),
        ("w1".into(), params.w1.data().len()),
        ("b1".into(), params.b1.len()),
        ("w2".into(), params.w2.data().len()),
        ("b2".into(), params.b2.len()),
    ]);
    compare("DRM".into(), names, &base, &analytic, loss, cfg)
}

fn squared_error(y: &Tensor4, target: &Tensor4) -> f64 {
    y.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64
}

fn check_adc(cfg: &GradCheckConfig, dims: [usize; 4], path: KernelPath, rng: &mut ChaCha8Rng) -> Result<ComponentReport> {
    let c = dims[1];
    let groups = if c % 2 == 0 { 2 } else { 1 };
    let x = Tensor4::random_uniform(dims, -1.0, 1.0, rng);
    let mut params = AdcParams::new(c, c, 3, groups, rng)?;
    params.drm = perturbed_drm(c, groups, rng)?;
    let (y, cache) = adc_forward_with(&x, &params, path)?;
    let target = Tensor4::random_uniform(y.dims(), -1.0, 1.0, rng);
    let grad_y = Tensor4::from_fn(y.dims(), |n, ch, i, j| 2.0 * (y.get(n, ch, i, j) - target.get(n, ch, i, j)) / y.len() as f64);
    let g = adc_backward(&params, &cache, &grad_y)?;
    let mut base = x.data().to_vec();
    base.extend_from_slice(params.weight.data());
    base.extend(params.drm.flat());
    let mut analytic = g.x.data().to_vec();
    analytic.extend_from_slice(g.weight.data());
    analytic.extend(g.drm.flat());
    let (n_px, n_w) = (x.len(), params.weight.len());
    let loss = |v: &[f64]| -> Result<f64> {
        let xt = Tensor4::new(x.dims(), v[..n_px].to_vec())?;
        let mut p = params.clone();
        p.weight = Tensor4::new(p.weight.dims(), v[n_px..n_px + n_w].to_vec())?;
        set_drm(&mut p.drm, &v[n_px + n_w..]);
        Ok(squared_error(&adc_forward_with(&xt, &p, path)?.0, &target))
    };
    let names = labels(&[
        ("x".into(), n_px),
        ("weight".into(), n_w),
        ("drm".into(), params.drm.param_count()),
    ]);
    compare(format!("ADC {path:?} {dims:?}").replace("Naive", "naive").replace("Blocked", "blocked"), names, &base, &analytic, loss, cfg)
}

fn perturbed_block(width: usize, bottleneck: usize, groups: usize, rng: &mut ChaCha8Rng) -> Result<BottleneckBlock> {
    let mut drm_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut b = BottleneckBlock::new(width, bottleneck, 3, SpatialKind::Adc { groups }, rng, &mut drm_rng)?;
    for a in [&mut b.affine1, &mut b.affine2, &mut b.affine3] {
        a.scale.iter_mut().for_each(|s| *s = rng.random_range(0.8..1.2));
        a.shift.iter_mut().for_each(|s| *s = rng.random_range(-0.1..0.1));
    }
    if let SpatialConv::Adc(p) = &mut b.spatial {
        p.drm = perturbed_drm(bottleneck, groups, rng)?;
    }
    Ok(b)
}

fn stack_loss(x: &Tensor4, blocks: &[BottleneckBlock], target: &Tensor4, path: KernelPath) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let xn = tape.leaf(x.clone());
    let mut h = xn;
    let mut params = Vec::new();
    for b in blocks {
        let nodes = b.build(&mut tape, h, path)?;
        params.push(nodes.params);
        h = nodes.output;
    }
    let t = tape.leaf(target.clone());
    let loss = tape.mse(h, t)?;
    let grads = tape.backward(loss)?;
    let mut flat = grads.flat_or_zeros(xn, x.len());
    for (b, ids) in blocks.iter().zip(params) {
        for (id, view) in ids.into_iter().zip(b.param_views("")) {
            flat.extend(grads.flat_or_zeros(id, view.data.len()));
        }
    }
    Ok((tape.value(loss)?.as_scalar()?, flat))
}

fn check_blocks(cfg: &GradCheckConfig, dims: [usize; 4], count: usize, rng: &mut ChaCha8Rng) -> Result<ComponentReport> {
    let width = dims[1];
    let bottleneck = width.max(2);
    let groups = if bottleneck % 2 == 0 { 2 } else { 1 };
    let x = Tensor4::random_uniform(dims, -1.0, 1.0, rng);
    let blocks: Vec<BottleneckBlock> = (0..count)
        .map(|_| perturbed_block(width, bottleneck, groups, rng))
        .collect::<Result<_>>()?;
    let target = Tensor4::random_uniform(dims, -1.0, 1.0, rng);
    let path = KernelPath::Blocked;
    let (_, analytic) = stack_loss(&x, &blocks, &target, path)?;
    let mut base = x.data().to_vec();
    let mut parts = vec![("x".to_string(), x.len())];
    for (k, b) in blocks.iter().enumerate() {
        base.extend(b.flat_params());
        parts.extend(b.param_views(&format!("block{k}")).into_iter().map(|v| (v.name, v.data.len())));
    }
    let loss = |v: &[f64]| -> Result<f64> {
        let xt = Tensor4::new(x.dims(), v[..x.len()].to_vec())?;
        let mut offset = x.len();
        let mut bs = blocks.clone();
        for b in &mut bs {
            let n = b.flat_params().len();
            b.set_flat_params(&v[offset..offset + n])?;
            offset += n;
        }
        let mut h = xt;
        for b in &bs {
            h = b.forward(&h, path)?;
        }
        Ok(squared_error(&h, &target))
    };
    let name = if count == 1 { format!("block {dims:?}") } else { format!("{count} stacked blocks {dims:?}") };
    compare(name, labels(&parts), &base, &analytic, loss, cfg)
}

/// Runs every component check. The report is a pure function of `cfg`.
pub fn run_suite(cfg: &GradCheckConfig) -> Result<Vec<ComponentReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = vec![check_sampler(cfg, &mut rng)?, check_drm(cfg, &mut rng)?];
    for &dims in &cfg.sizes {
        for path in [KernelPath::Naive, KernelPath::Blocked] {
            out.push(check_adc(cfg, dims, path, &mut rng)?);
        }
        out.push(check_blocks(cfg, dims, 1, &mut rng)?);
        out.push(check_blocks(cfg, dims, 2, &mut rng)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GradCheckConfig {
        GradCheckConfig {
            sizes: vec![[1, 2, 5, 5]],
            ..GradCheckConfig::default()
        }
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(1e-9, 0.0), 1e-6);
        assert_eq!(rel_err(2.0, 1.0), 0.5);
    }

    #[test]
    fn small_suite_passes_and_is_repeatable() {
        let a = run_suite(&small()).unwrap();
        assert!(a.iter().all(|r| r.passed()), "{:?}", a.iter().map(|r| r.line()).collect::<Vec<_>>());
        assert_eq!(a, run_suite(&small()).unwrap());
    }

    #[test]
    fn tolerance_below_noise_floor_fails() {
        let cfg = GradCheckConfig { tol: 1e-12, ..small() };
        assert!(run_suite(&cfg).unwrap().iter().any(|r| !r.passed()));
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let cfg = small();
        let r = compare(
            "square".into(),
            labels(&[("v".into(), 2)]),
            &[1.0, 2.0],
            &[2.0, 4.4],
            |v| Ok(v[0] * v[0] + v[1] * v[1]),
            &cfg,
        )
        .unwrap();
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.failures[0].coordinate, "v[1]");
    }
}
