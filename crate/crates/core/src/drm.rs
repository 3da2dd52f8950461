//! Dilation-rates regression: global average pooling, a ReLU hidden layer and
//! a linear output layer, clamped to a positive range. One rate per sample
//! per dilation group.

use rand::Rng;

use crate::error::{AdcError, Result};
use crate::tensor::{
    global_avg_pool, global_avg_pool_backward, matmul_bias, matmul_bias_backward, relu,
    relu_backward, shape_err, Matrix, Tensor4,
};

/// Smallest rate the regressor may emit.
pub const RATE_MIN: f64 = 0.05;

/// `max(C_in / 4, 4)`.
pub fn hidden_width(c_in: usize) -> usize {
    (c_in / 4).max(4)
}

/// Contiguous equal-size groups: channel `c` belongs to `⌊c·g / C_in⌋`.
#[inline]
pub fn group_of_channel(c: usize, c_in: usize, groups: usize) -> usize {
    c * groups / c_in
}

pub fn check_groups(c_in: usize, groups: usize) -> Result<()> {
    if groups == 0 || c_in == 0 || c_in % groups != 0 {
        return Err(AdcError::BadGroups {
            groups,
            channels: c_in,
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DrmParams {
    /// `C_in × hidden`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `hidden × g`
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl DrmParams {
    /// Fresh parameters: uniform first layer, zero output weights and unit
    /// output bias, so every rate starts at exactly 1.
    pub fn new(c_in: usize, groups: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::with_hidden(c_in, hidden_width(c_in), groups, rng)
    }

    pub fn with_hidden(c_in: usize, hidden: usize, groups: usize, rng: &mut impl Rng) -> Result<Self> {
        check_groups(c_in, groups)?;
        if hidden == 0 {
            return Err(AdcError::Config("DRM hidden width must be at least 1".into()));
        }
        let bound = 1.0 / (c_in as f64).sqrt();
        Ok(Self {
            w1: Matrix::random_uniform(c_in, hidden, -bound, bound, rng),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, groups),
            b2: vec![1.0; groups],
        })
    }

    pub fn c_in(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn groups(&self) -> usize {
        self.w2.cols()
    }

    pub fn param_count(&self) -> usize {
        self.w1.data().len() + self.b1.len() + self.w2.data().len() + self.b2.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_groups(self.c_in(), self.groups())?;
        if self.b1.len() != self.hidden() || self.w2.rows() != self.hidden() || self.b2.len() != self.groups() {
            return Err(shape_err(
                "DrmParams",
                (self.w1.shape(), self.b1.len()),
                (self.w2.shape(), self.b2.len()),
            ));
        }
        Ok(())
    }

    /// Every parameter in a fixed order: w1, b1, w2, b2.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend_from_slice(self.w1.data());
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(self.w2.data());
        v.extend_from_slice(&self.b2);
        v
    }

    /// Mutable references to every parameter in [`DrmParams::flat`] order.
    pub fn flat_mut(&mut self) -> Vec<&mut f64> {
        self.w1
            .data_mut()
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.data_mut().iter_mut())
            .chain(self.b2.iter_mut())
            .collect()
    }
}

/// Per-sample, per-group dilation rates (`N × g`).
#[derive(Clone, Debug, PartialEq)]
pub struct DilationRates {
    values: Matrix,
}

impl DilationRates {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.data().iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(AdcError::BadRate(
                values.data().iter().copied().find(|r| !(*r > 0.0)).unwrap_or(f64::NAN),
            ));
        }
        Ok(Self { values })
    }

    /// The same rate for every sample and group.
    pub fn constant(batch: usize, groups: usize, rate: f64) -> Result<Self> {
        Self::new(Matrix::filled(batch, groups, rate))
    }

    pub fn batch(&self) -> usize {
        self.values.rows()
    }

    pub fn groups(&self) -> usize {
        self.values.cols()
    }

    #[inline]
    pub fn get(&self, n: usize, group: usize) -> f64 {
        self.values.get(n, group)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.values
    }

    /// Rate used by input channel `c`.
    pub fn for_channel(&self, n: usize, c: usize, c_in: usize) -> f64 {
        self.get(n, group_of_channel(c, c_in, self.groups()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateBounds {
    pub min: f64,
    pub max: f64,
}

impl RateBounds {
    /// `[RATE_MIN, max(H, W)]`.
    pub fn for_input(h: usize, w: usize) -> Self {
        Self {
            min: RATE_MIN,
            max: h.max(w) as f64,
        }
    }

    /// Gradient passes only strictly inside the interval.
    #[inline]
    pub fn passes(&self, pre: f64) -> bool {
        pre > self.min && pre < self.max
    }
}

#[derive(Clone, Debug)]
pub struct DrmCache {
    input_dims: [usize; 4],
    pooled: Matrix,
    hidden_pre: Matrix,
    hidden: Matrix,
    rates_pre: Matrix,
    bounds: RateBounds,
}

impl DrmCache {
    /// Output-layer values before the clamp.
    pub fn unclamped(&self) -> &Matrix {
        &self.rates_pre
    }
}

pub fn drm_forward(x: &Tensor4, params: &DrmParams) -> Result<(DilationRates, DrmCache)> {
    params.validate()?;
    if x.channels() != params.c_in() {
        return Err(shape_err("drm_forward", x.dims(), params.w1.shape()));
    }
    let bounds = RateBounds::for_input(x.height(), x.width());
    let pooled = global_avg_pool(x);
    let hidden_pre = matmul_bias(&pooled, &params.w1, &params.b1)?;
    let hidden = relu(&hidden_pre);
    let rates_pre = matmul_bias(&hidden, &params.w2, &params.b2)?;
    let mut clamped = rates_pre.clone();
    for v in clamped.data_mut() {
        *v = v.clamp(bounds.min, bounds.max);
    }
    let rates = DilationRates::new(clamped)?;
    Ok((
        rates,
        DrmCache {
            input_dims: x.dims(),
            pooled,
            hidden_pre,
            hidden,
            rates_pre,
            bounds,
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DrmGrads {
    pub x: Tensor4,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl DrmGrads {
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend_from_slice(self.w1.data());
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(self.w2.data());
        v.extend_from_slice(&self.b2);
        v
    }
}

pub fn drm_backward(params: &DrmParams, cache: &DrmCache, grad_rates: &Matrix) -> Result<DrmGrads> {
    if grad_rates.shape() != cache.rates_pre.shape() {
        return Err(shape_err("drm_backward", grad_rates.shape(), cache.rates_pre.shape()));
    }
    let mut grad_pre = grad_rates.clone();
    for (g, &pre) in grad_pre.data_mut().iter_mut().zip(cache.rates_pre.data()) {
        if !cache.bounds.passes(pre) {
            *g = 0.0;
        }
    }
    let (grad_hidden, w2, b2) = matmul_bias_backward(&cache.hidden, &params.w2, &grad_pre)?;
    let grad_hidden_pre = relu_backward(&cache.hidden_pre, &grad_hidden)?;
    let (grad_pooled, w1, b1) = matmul_bias_backward(&cache.pooled, &params.w1, &grad_hidden_pre)?;
    let x = global_avg_pool_backward(&grad_pooled, cache.input_dims)?;
    Ok(DrmGrads { x, w1, b1, w2, b2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn perturbed(c_in: usize, groups: usize, seed: u64) -> DrmParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = DrmParams::new(c_in, groups, &mut rng).unwrap();
        p.w2 = Matrix::random_uniform(p.hidden(), groups, -1.0, 1.0, &mut rng);
        p.b1 = (0..p.hidden()).map(|_| rng.random_range(-0.2..0.5)).collect();
        p.b2 = (0..groups).map(|_| rng.random_range(1.2..1.8)).collect();
        p
    }

    #[test]
    fn fresh_params_give_unit_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = DrmParams::new(8, 4, &mut rng).unwrap();
        for _ in 0..100 {
            let x = Tensor4::random_uniform([2, 8, 5, 5], -3.0, 3.0, &mut rng);
            let (rates, _) = drm_forward(&x, &p).unwrap();
            assert!(rates.matrix().data().iter().all(|&r| r == 1.0));
        }
    }

    #[test]
    fn zero_weights_pass_bias_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = DrmParams::new(4, 2, &mut rng).unwrap();
        p.b2 = vec![0.5, 0.5];
        let x = Tensor4::random_uniform([3, 4, 4, 4], -1.0, 1.0, &mut rng);
        let (rates, _) = drm_forward(&x, &p).unwrap();
        assert!(rates.matrix().data().iter().all(|&r| r == 0.5));
    }

    #[test]
    fn matches_composed_oracle() {
        let p = perturbed(4, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor4::random_uniform([2, 4, 3, 5], -1.0, 1.0, &mut rng);
        let (rates, _) = drm_forward(&x, &p).unwrap();
        for n in 0..2 {
            let pooled: Vec<f64> = (0..4)
                .map(|c| {
                    let mut s = 0.0;
                    for i in 0..3 {
                        for j in 0..5 {
                            s += x.get(n, c, i, j);
                        }
                    }
                    s / 15.0
                })
                .collect();
            let hidden: Vec<f64> = (0..p.hidden())
                .map(|h| {
                    let v: f64 = p.b1[h] + (0..4).map(|c| pooled[c] * p.w1.get(c, h)).sum::<f64>();
                    v.max(0.0)
                })
                .collect();
            for g in 0..2 {
                let v: f64 = p.b2[g] + (0..p.hidden()).map(|h| hidden[h] * p.w2.get(h, g)).sum::<f64>();
                let expected = v.clamp(RATE_MIN, 5.0);
                assert!((rates.get(n, g) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bad_group_count_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            DrmParams::new(6, 4, &mut rng),
            Err(AdcError::BadGroups { groups: 4, channels: 6 })
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let p = perturbed(4, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor4::random_uniform([2, 4, 4, 4], -1.0, 1.0, &mut rng);
        let (_, cache) = drm_forward(&x, &p).unwrap();
        let g = drm_backward(&p, &cache, &Matrix::zeros(2, 4)).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
        assert!(g.x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clamped_rate_blocks_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = DrmParams::new(4, 2, &mut rng).unwrap();
        p.w2 = Matrix::random_uniform(p.hidden(), 2, -1.0, 1.0, &mut rng);
        // Group 0 pinned below the floor, group 1 above the ceiling.
        p.b2 = vec![-10.0, 100.0];
        let x = Tensor4::random_uniform([1, 4, 4, 4], 0.0, 1.0, &mut rng);
        let (rates, cache) = drm_forward(&x, &p).unwrap();
        assert_eq!(rates.get(0, 0), RATE_MIN);
        assert_eq!(rates.get(0, 1), 4.0);
        let g = drm_backward(&p, &cache, &Matrix::filled(1, 2, 1.0)).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
        assert!(g.x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grads_match_finite_differences() {
        let p = perturbed(4, 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor4::random_uniform([2, 4, 3, 3], -1.0, 1.0, &mut rng);
        let loss = |x: &Tensor4, p: &DrmParams| -> f64 {
            let (r, _) = drm_forward(x, p).unwrap();
            r.matrix().data().iter().map(|v| v * v).sum()
        };
        let (rates, cache) = drm_forward(&x, &p).unwrap();
        let mut grad_rates = rates.matrix().clone();
        for v in grad_rates.data_mut() {
            *v *= 2.0;
        }
        let g = drm_backward(&p, &cache, &grad_rates).unwrap();
        let h = 1e-5;
        let analytic = g.flat();
        for k in 0..p.param_count() {
            let (mut a, mut b) = (p.clone(), p.clone());
            *a.flat_mut()[k] += h;
            *b.flat_mut()[k] -= h;
            let fd = (loss(&x, &a) - loss(&x, &b)) / (2.0 * h);
            let rel = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-3);
            assert!(rel < 1e-4, "param {k}: {} vs {fd}", analytic[k]);
        }
        for k in 0..x.len() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a.data_mut()[k] += h;
            b.data_mut()[k] -= h;
            let fd = (loss(&a, &p) - loss(&b, &p)) / (2.0 * h);
            let rel = (fd - g.x.data()[k]).abs() / fd.abs().max(g.x.data()[k].abs()).max(1e-3);
            assert!(rel < 1e-4, "x {k}");
        }
    }

    #[test]
    fn group_assignment_examples() {
        for c in 0..6 {
            assert_eq!(group_of_channel(c, 6, 6), c);
            assert_eq!(group_of_channel(c, 6, 1), 0);
        }
        assert_eq!(group_of_channel(5, 8, 4), 2);
    }

    #[test]
    fn rates_follow_input_after_perturbation() {
        let p = perturbed(4, 2, 10);
        let a = Tensor4::filled([1, 4, 4, 4], 0.2);
        let b = Tensor4::from_fn([1, 4, 4, 4], |_, c, _, _| 0.5 + c as f64);
        let (ra, _) = drm_forward(&a, &p).unwrap();
        let (rb, _) = drm_forward(&b, &p).unwrap();
        assert_ne!(ra, rb);
    }

    proptest! {
        #[test]
        fn group_partition_is_monotone_and_balanced(g_exp in 0u32..4, mult in 1usize..5) {
            let g = 1usize << g_exp;
            let c_in = g * mult;
            let mut counts = vec![0usize; g];
            let mut prev = 0;
            for c in 0..c_in {
                let grp = group_of_channel(c, c_in, g);
                prop_assert!(grp >= prev && grp < g);
                prev = grp;
                counts[grp] += 1;
            }
            prop_assert!(counts.iter().all(|&n| n == c_in / g));
        }
    }
}
