//! Adaptive dilated convolution.
//!
//! Input channels are split into `g` contiguous dilation groups. For sample
//! `n`, the taps of a channel in group `q` sit at `(i + a·r, j + b·r)` with
//! `r = rates[n][q]` and `a, b ∈ ⌊-k/2⌋..=⌊k/2⌋`; fractional positions are
//! read with the bilinear sampler. Rates come from the DRM applied to the
//! same input.
//!
//! Two kernel paths exist. `Naive` loops over output pixels and samples every
//! tap in place. `Blocked` gathers the sampled taps of one sample into a
//! column buffer (on a zero-padded copy of each plane) and reduces it against
//! the kernel. Both accumulate each output pixel in the same tap order.

use rand::Rng;
use rayon::prelude::*;

use crate::drm::{check_groups, drm_backward, drm_forward, group_of_channel, DilationRates, DrmCache, DrmGrads, DrmParams};
use crate::error::{AdcError, Result};
use crate::reference::{check_kernel, tap_range};
use crate::sampler::{blend, blend_slopes, corners, scatter_plane, Corner};
use crate::tensor::{shape_err, Matrix, Tensor4};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelPath {
    #[default]
    Naive,
    Blocked,
}

impl std::str::FromStr for KernelPath {
    type Err = AdcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Self::Naive),
            "blocked" => Ok(Self::Blocked),
            other => Err(AdcError::Config(format!("unknown kernel path '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdcParams {
    /// `C_out × C_in × k × k`
    pub weight: Tensor4,
    pub drm: DrmParams,
}

impl AdcParams {
    /// He-uniform kernel and a freshly initialized DRM.
    pub fn new(c_in: usize, c_out: usize, k: usize, groups: usize, rng: &mut impl Rng) -> Result<Self> {
        check_kernel(k)?;
        let bound = (6.0 / (c_in * k * k) as f64).sqrt();
        let weight = Tensor4::random_uniform([c_out, c_in, k, k], -bound, bound, rng);
        let drm = DrmParams::new(c_in, groups, rng)?;
        Ok(Self { weight, drm })
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn c_in(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn groups(&self) -> usize {
        self.drm.groups()
    }

    pub fn validate(&self) -> Result<()> {
        let [_, c_in, k, k2] = self.weight.dims();
        check_kernel(k)?;
        if k != k2 {
            return Err(shape_err("AdcParams kernel", k, k2));
        }
        if self.drm.c_in() != c_in {
            return Err(shape_err("AdcParams drm", self.drm.w1.shape(), self.weight.dims()));
        }
        self.drm.validate()
    }
}

/// Number of scalars in the kernel plus the DRM.
pub fn adc_param_count(params: &AdcParams) -> usize {
    params.weight.len() + params.drm.param_count()
}

fn check_inputs(x: &Tensor4, weight: &Tensor4, rates: &DilationRates) -> Result<()> {
    let [_, c_in, k, k2] = weight.dims();
    check_kernel(k)?;
    if k != k2 {
        return Err(shape_err("adaptive conv kernel", k, k2));
    }
    if x.channels() != c_in {
        return Err(shape_err("adaptive conv input channels", x.dims(), weight.dims()));
    }
    if rates.batch() != x.batch() {
        return Err(shape_err("adaptive conv rates", rates.matrix().shape(), x.dims()));
    }
    check_groups(c_in, rates.groups())
}

/// Tap offset multipliers as floats, in index-set order.
fn taps(k: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(k * k);
    for a in tap_range(k) {
        for b in tap_range(k) {
            out.push((a as f64, b as f64));
        }
    }
    out
}

/// Convolution with the given rates; no DRM involved.
pub fn adaptive_conv(x: &Tensor4, weight: &Tensor4, rates: &DilationRates, path: KernelPath) -> Result<Tensor4> {
    check_inputs(x, weight, rates)?;
    let [n, _, h, w] = x.dims();
    let c_out = weight.dims()[0];
    let stride = c_out * h * w;
    let parts: Vec<Vec<f64>> = match path {
        KernelPath::Naive => {
            let planes: Vec<Vec<f64>> = (0..n * c_out)
                .into_par_iter()
                .map(|t| naive_forward_plane(x, weight, rates, t / c_out, t % c_out))
                .collect();
            planes.chunks(c_out).map(|c| c.concat()).collect()
        }
        KernelPath::Blocked => (0..n)
            .into_par_iter()
            .map(|s| {
                let cols = gather_columns(x, weight, rates, s);
                reduce_columns(&cols, weight, h * w)
            })
            .collect(),
    };
    let mut data = Vec::with_capacity(n * stride);
    for p in parts {
        data.extend_from_slice(&p);
    }
    Tensor4::new([n, c_out, h, w], data)
}

fn naive_forward_plane(x: &Tensor4, weight: &Tensor4, rates: &DilationRates, s: usize, co: usize) -> Vec<f64> {
    let [_, c_in, h, w] = x.dims();
    let k = weight.dims()[2];
    let taps = taps(k);
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for c in 0..c_in {
                let r = rates.for_channel(s, c, c_in);
                let plane = x.plane(s, c);
                for (t, &(a, b)) in taps.iter().enumerate() {
                    let corner = Corner::of(i as f64 + a * r, j as f64 + b * r);
                    let v = blend(&corners(plane, h, w, &corner), &corner);
                    acc += weight.data()[(co * c_in + c) * k * k + t] * v;
                }
            }
            out[i * w + j] = acc;
        }
    }
    out
}

/// A plane copied into a zero border wide enough for every tap position.
struct PaddedPlane {
    data: Vec<f64>,
    pad: usize,
    width: usize,
}

impl PaddedPlane {
    fn zeros(h: usize, w: usize, pad: usize) -> Self {
        let width = w + 2 * pad;
        Self {
            data: vec![0.0; (h + 2 * pad) * width],
            pad,
            width,
        }
    }

    fn from_plane(plane: &[f64], h: usize, w: usize, pad: usize) -> Self {
        let mut p = Self::zeros(h, w, pad);
        for i in 0..h {
            let start = (i + pad) * p.width + pad;
            p.data[start..start + w].copy_from_slice(&plane[i * w..(i + 1) * w]);
        }
        p
    }

    #[inline]
    fn base(&self, i0: isize, j0: isize) -> usize {
        (i0 + self.pad as isize) as usize * self.width + (j0 + self.pad as isize) as usize
    }

    fn interior(&self, h: usize, w: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(h * w);
        for i in 0..h {
            let start = (i + self.pad) * self.width + self.pad;
            out.extend_from_slice(&self.data[start..start + w]);
        }
        out
    }
}

/// Border needed so that every corner of every tap lands in the padded plane.
fn padding_for(k: usize, rate: f64) -> usize {
    ((k / 2) as f64 * rate).ceil() as usize + 2
}

/// Integer and fractional parts of a tap offset. Every pixel of a plane
/// shares them because the rate is constant over the plane.
fn split(off: f64) -> (isize, f64) {
    let f = off.floor();
    (f as isize, off - f)
}

/// Sampled taps of sample `s`, laid out `[c][tap][pixel]`.
fn gather_columns(x: &Tensor4, weight: &Tensor4, rates: &DilationRates, s: usize) -> Vec<f64> {
    let [_, c_in, h, w] = x.dims();
    let k = weight.dims()[2];
    let taps = taps(k);
    let hw = h * w;
    let mut cols = vec![0.0; c_in * taps.len() * hw];
    for c in 0..c_in {
        let r = rates.for_channel(s, c, c_in);
        let padded = PaddedPlane::from_plane(x.plane(s, c), h, w, padding_for(k, r));
        let width = padded.width;
        for (t, &(a, b)) in taps.iter().enumerate() {
            let (di, fi) = split(a * r);
            let (dj, fj) = split(b * r);
            let dst = &mut cols[(c * taps.len() + t) * hw..(c * taps.len() + t + 1) * hw];
            for i in 0..h {
                let base = padded.base(i as isize + di, dj);
                let top = &padded.data[base..base + w + 1];
                let bot = &padded.data[base + width..base + width + w + 1];
                let out = &mut dst[i * w..(i + 1) * w];
                for j in 0..w {
                    let t0 = top[j] + (top[j + 1] - top[j]) * fj;
                    let b0 = bot[j] + (bot[j + 1] - bot[j]) * fj;
                    out[j] = t0 + (b0 - t0) * fi;
                }
            }
        }
    }
    cols
}

/// `y[co][p] = Σ_{c,tap} w[co][c,tap] · cols[c,tap][p]`, accumulated in tap order.
fn reduce_columns(cols: &[f64], weight: &Tensor4, hw: usize) -> Vec<f64> {
    let c_out = weight.dims()[0];
    let per_out = weight.len() / c_out;
    let mut y = vec![0.0; c_out * hw];
    for co in 0..c_out {
        let out = &mut y[co * hw..(co + 1) * hw];
        let wrow = &weight.data()[co * per_out..(co + 1) * per_out];
        for (ct, &wv) in wrow.iter().enumerate() {
            let col = &cols[ct * hw..(ct + 1) * hw];
            for (o, v) in out.iter_mut().zip(col) {
                *o += wv * v;
            }
        }
    }
    y
}

/// Gradients of [`adaptive_conv`] with respect to the input, the kernel and the rates.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub x: Tensor4,
    pub weight: Tensor4,
    /// `N × g`
    pub rates: Matrix,
}

pub fn adaptive_conv_backward(
    x: &Tensor4,
    weight: &Tensor4,
    rates: &DilationRates,
    grad_y: &Tensor4,
    path: KernelPath,
) -> Result<ConvGrads> {
    check_inputs(x, weight, rates)?;
    let [n, _, h, w] = x.dims();
    let c_out = weight.dims()[0];
    if grad_y.dims() != [n, c_out, h, w] {
        return Err(shape_err("adaptive_conv_backward", grad_y.dims(), [n, c_out, h, w]));
    }
    let per_sample: Vec<SampleGrads> = (0..n)
        .into_par_iter()
        .map(|s| match path {
            KernelPath::Naive => naive_backward_sample(x, weight, rates, grad_y, s),
            KernelPath::Blocked => blocked_backward_sample(x, weight, rates, grad_y, s),
        })
        .collect();
    let mut grad_x = Vec::with_capacity(x.len());
    let mut grad_w = vec![0.0; weight.len()];
    let mut grad_r = Matrix::zeros(n, rates.groups());
    for (s, part) in per_sample.into_iter().enumerate() {
        grad_x.extend_from_slice(&part.x);
        for (a, b) in grad_w.iter_mut().zip(&part.weight) {
            *a += b;
        }
        for (q, v) in part.rates.into_iter().enumerate() {
            grad_r.set(s, q, v);
        }
    }
    Ok(ConvGrads {
        x: Tensor4::new(x.dims(), grad_x)?,
        weight: Tensor4::new(weight.dims(), grad_w)?,
        rates: grad_r,
    })
}

struct SampleGrads {
    x: Vec<f64>,
    weight: Vec<f64>,
    rates: Vec<f64>,
}

/// Loop order: output channel, row, column, tap.
fn naive_backward_sample(x: &Tensor4, weight: &Tensor4, rates: &DilationRates, grad_y: &Tensor4, s: usize) -> SampleGrads {
    let [_, c_in, h, w] = x.dims();
    let c_out = weight.dims()[0];
    let k = weight.dims()[2];
    let kk = k * k;
    let taps = taps(k);
    let groups = rates.groups();
    let mut gx = vec![0.0; c_in * h * w];
    let mut gw = vec![0.0; weight.len()];
    let mut gr = vec![0.0; groups];
    for co in 0..c_out {
        let gy = grad_y.plane(s, co);
        for i in 0..h {
            for j in 0..w {
                let g = gy[i * w + j];
                for c in 0..c_in {
                    let q = group_of_channel(c, c_in, groups);
                    let r = rates.get(s, q);
                    let plane = x.plane(s, c);
                    for (t, &(a, b)) in taps.iter().enumerate() {
                        let widx = (co * c_in + c) * kk + t;
                        let wv = weight.data()[widx];
                        let corner = Corner::of(i as f64 + a * r, j as f64 + b * r);
                        let v = corners(plane, h, w, &corner);
                        gw[widx] += g * blend(&v, &corner);
                        let gs = g * wv;
                        scatter_plane(&mut gx[c * h * w..(c + 1) * h * w], h, w, &corner, gs);
                        let (d_i, d_j) = blend_slopes(&v, &corner);
                        gr[q] += gs * (a * d_i + b * d_j);
                    }
                }
            }
        }
    }
    SampleGrads { x: gx, weight: gw, rates: gr }
}

fn blocked_backward_sample(x: &Tensor4, weight: &Tensor4, rates: &DilationRates, grad_y: &Tensor4, s: usize) -> SampleGrads {
    let [_, c_in, h, w] = x.dims();
    let hw = h * w;
    let c_out = weight.dims()[0];
    let k = weight.dims()[2];
    let taps = taps(k);
    let kk = taps.len();
    let per_out = c_in * kk;
    let groups = rates.groups();
    let gy = grad_y.sample(s);
    let cols = gather_columns(x, weight, rates, s);

    let mut gw = vec![0.0; weight.len()];
    for co in 0..c_out {
        let g = &gy[co * hw..(co + 1) * hw];
        for ct in 0..per_out {
            let col = &cols[ct * hw..(ct + 1) * hw];
            gw[co * per_out + ct] = g.iter().zip(col).map(|(a, b)| a * b).sum();
        }
    }

    let mut gcol = vec![0.0; hw];
    let mut gx = Vec::with_capacity(c_in * hw);
    let mut gr = vec![0.0; groups];
    for c in 0..c_in {
        let q = group_of_channel(c, c_in, groups);
        let r = rates.get(s, q);
        let pad = padding_for(k, r);
        let padded = PaddedPlane::from_plane(x.plane(s, c), h, w, pad);
        let mut gpad = PaddedPlane::zeros(h, w, pad);
        let width = gpad.width;
        let mut rate_acc = 0.0;
        for (t, &(a, b)) in taps.iter().enumerate() {
            gcol.fill(0.0);
            for co in 0..c_out {
                let wv = weight.data()[co * per_out + c * kk + t];
                for (o, gv) in gcol.iter_mut().zip(&gy[co * hw..(co + 1) * hw]) {
                    *o += wv * gv;
                }
            }
            let (di, fi) = split(a * r);
            let (dj, fj) = split(b * r);
            let (w00, w01, w10, w11) = ((1.0 - fi) * (1.0 - fj), (1.0 - fi) * fj, fi * (1.0 - fj), fi * fj);
            for i in 0..h {
                let g = &gcol[i * w..(i + 1) * w];
                let base = padded.base(i as isize + di, dj);
                let top = &padded.data[base..base + w + 1];
                let bot = &padded.data[base + width..base + width + w + 1];
                rate_acc += row_rate_grad(g, top, bot, a, b, fi, fj);
                let row = &mut gpad.data[base..base + w + 1];
                for j in 0..w {
                    row[j] += g[j] * w00;
                    row[j + 1] += g[j] * w01;
                }
                let row = &mut gpad.data[base + width..base + width + w + 1];
                for j in 0..w {
                    row[j] += g[j] * w10;
                    row[j + 1] += g[j] * w11;
                }
            }
        }
        gr[q] += rate_acc;
        gx.extend_from_slice(&gpad.interior(h, w));
    }
    SampleGrads { x: gx, weight: gw, rates: gr }
}

/// `Σ_j g[j]·(a·∂_i + b·∂_j)` of the bilinear blend along one output row,
/// with four interleaved partial sums combined in a fixed order.
#[inline]
fn row_rate_grad(g: &[f64], top: &[f64], bot: &[f64], a: f64, b: f64, fi: f64, fj: f64) -> f64 {
    let w = g.len();
    let (top, bot) = (&top[..w + 1], &bot[..w + 1]);
    let mut acc = [0.0; 4];
    for j in 0..w {
        let d_i = (1.0 - fj) * (bot[j] - top[j]) + fj * (bot[j + 1] - top[j + 1]);
        let d_j = (1.0 - fi) * (top[j + 1] - top[j]) + fi * (bot[j + 1] - bot[j]);
        acc[j % 4] += g[j] * (a * d_i + b * d_j);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// Everything the backward pass needs from a forward call.
#[derive(Clone, Debug)]
pub struct AdcCache {
    x: Tensor4,
    rates: DilationRates,
    drm: DrmCache,
    path: KernelPath,
}

impl AdcCache {
    pub fn rates(&self) -> &DilationRates {
        &self.rates
    }
}

/// DRM, then the adaptive convolution with the regressed rates.
pub fn adc_forward(x: &Tensor4, params: &AdcParams) -> Result<(Tensor4, AdcCache)> {
    adc_forward_with(x, params, KernelPath::Naive)
}

pub fn adc_forward_with(x: &Tensor4, params: &AdcParams, path: KernelPath) -> Result<(Tensor4, AdcCache)> {
    params.validate()?;
    let (rates, drm) = drm_forward(x, &params.drm)?;
    let y = adaptive_conv(x, &params.weight, &rates, path)?;
    Ok((
        y,
        AdcCache {
            x: x.clone(),
            rates,
            drm,
            path,
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdcGrads {
    /// Total input gradient: sampling path plus the DRM pooling path.
    pub x: Tensor4,
    pub weight: Tensor4,
    /// Gradient at the (clamped) rates, before it enters the DRM.
    pub rates: Matrix,
    pub drm: DrmGrads,
}

pub fn adc_backward(params: &AdcParams, cache: &AdcCache, grad_y: &Tensor4) -> Result<AdcGrads> {
    let conv = adaptive_conv_backward(&cache.x, &params.weight, &cache.rates, grad_y, cache.path)?;
    let drm = drm_backward(&params.drm, &cache.drm, &conv.rates)?;
    let x = conv.x.add(&drm.x)?;
    Ok(AdcGrads {
        x,
        weight: conv.weight,
        rates: conv.rates,
        drm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{dilated_conv_forward, ConvSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rigged(params: &mut AdcParams, rate: f64) {
        params.drm.w2 = Matrix::zeros(params.drm.hidden(), params.groups());
        params.drm.b2 = vec![rate; params.groups()];
    }

    #[test]
    fn param_count_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = AdcParams::new(4, 4, 3, 4, &mut rng).unwrap();
        assert_eq!(adc_param_count(&p), 184);
        let p1 = AdcParams::new(4, 4, 3, 1, &mut rng).unwrap();
        assert_eq!(adc_param_count(&p) - adc_param_count(&p1), 3 * 4 + 3);
        let pk1 = AdcParams::new(4, 6, 1, 2, &mut rng).unwrap();
        assert_eq!(adc_param_count(&pk1), 6 * 4 + pk1.drm.param_count());
    }

    #[test]
    fn fresh_layer_equals_rate_one_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AdcParams::new(3, 2, 3, 3, &mut rng).unwrap();
        let x = Tensor4::random_uniform([2, 3, 6, 7], -1.0, 1.0, &mut rng);
        let (y, cache) = adc_forward(&x, &p).unwrap();
        assert!(cache.rates().matrix().data().iter().all(|&r| r == 1.0));
        let spec = ConvSpec::new(3, 1, 3, 2).unwrap();
        let reference = dilated_conv_forward(&x, &p.weight, &spec).unwrap();
        assert!(y.max_abs_diff(&reference).unwrap() < 1e-12);
    }

    #[test]
    fn integer_rates_match_reference_on_both_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = AdcParams::new(2, 3, 3, 2, &mut rng).unwrap();
        let x = Tensor4::random_uniform([1, 2, 9, 8], -1.0, 1.0, &mut rng);
        for r in 1..=3 {
            rigged(&mut p, r as f64);
            let spec = ConvSpec::new(3, r, 2, 3).unwrap();
            let reference = dilated_conv_forward(&x, &p.weight, &spec).unwrap();
            for path in [KernelPath::Naive, KernelPath::Blocked] {
                let (y, _) = adc_forward_with(&x, &p, path).unwrap();
                assert!(y.max_abs_diff(&reference).unwrap() < 1e-12, "r={r} {path:?}");
            }
        }
    }

    #[test]
    fn fractional_impulse_footprint() {
        // Rate 2.5 puts taps at offsets -2.5, 0, 2.5. An impulse at (7, 7)
        // reaches output row i when some i + offset lies strictly within one
        // pixel of 7: rows 4, 5 (via +2.5), 7 (via 0) and 9, 10 (via -2.5).
        // The support's bounding box is the 7×7 block [4, 10]², and each
        // output pixel's taps span 5 pixels, i.e. a receptive field of side
        // k·r − r + 1 = 6.
        let (h, w) = (15, 15);
        let x = Tensor4::from_fn([1, 1, h, w], |_, _, i, j| if i == 7 && j == 7 { 1.0 } else { 0.0 });
        let weight = Tensor4::filled([1, 1, 3, 3], 1.0);
        let rates = DilationRates::constant(1, 1, 2.5).unwrap();
        let y = adaptive_conv(&x, &weight, &rates, KernelPath::Naive).unwrap();
        let hit = [4usize, 5, 7, 9, 10];
        for i in 0..h {
            for j in 0..w {
                let v = y.get(0, 0, i, j);
                if hit.contains(&i) && hit.contains(&j) {
                    assert!(v > 0.0, "({i},{j}) should respond");
                } else {
                    assert_eq!(v, 0.0, "({i},{j}) should be silent");
                }
            }
        }
        // Each of the 9 taps deposits unit mass through its bilinear weights.
        assert!((y.sum() - 9.0).abs() < 1e-12);
        assert_eq!(crate::reference::receptive_field_area(3, 2.5).unwrap(), 36.0);
    }

    #[test]
    fn blocked_matches_naive_fractional() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor4::random_uniform([2, 4, 7, 9], -1.0, 1.0, &mut rng);
        let weight = Tensor4::random_uniform([3, 4, 3, 3], -1.0, 1.0, &mut rng);
        let rates = DilationRates::new(Matrix::new(2, 2, vec![0.7, 2.3, 4.9, 1.0]).unwrap()).unwrap();
        let a = adaptive_conv(&x, &weight, &rates, KernelPath::Naive).unwrap();
        let b = adaptive_conv(&x, &weight, &rates, KernelPath::Blocked).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
        let gy = Tensor4::random_uniform([2, 3, 7, 9], -1.0, 1.0, &mut rng);
        let ga = adaptive_conv_backward(&x, &weight, &rates, &gy, KernelPath::Naive).unwrap();
        let gb = adaptive_conv_backward(&x, &weight, &rates, &gy, KernelPath::Blocked).unwrap();
        assert!(ga.x.max_abs_diff(&gb.x).unwrap() < 1e-10);
        assert!(ga.weight.max_abs_diff(&gb.weight).unwrap() < 1e-10);
        assert!(ga.rates.max_abs_diff(&gb.rates).unwrap() < 1e-10);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = AdcParams::new(2, 2, 3, 2, &mut rng).unwrap();
        p.drm.w2 = Matrix::random_uniform(p.drm.hidden(), 2, -1.0, 1.0, &mut rng);
        let x = Tensor4::random_uniform([1, 2, 5, 5], -1.0, 1.0, &mut rng);
        let (y, cache) = adc_forward(&x, &p).unwrap();
        let g = adc_backward(&p, &cache, &Tensor4::zeros(y.dims())).unwrap();
        assert!(g.x.data().iter().all(|&v| v == 0.0));
        assert!(g.weight.data().iter().all(|&v| v == 0.0));
        assert!(g.drm.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_kernel_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor4::random_uniform([1, 2, 5, 5], -1.0, 1.0, &mut rng);
        let weight = Tensor4::zeros([2, 2, 3, 3]);
        let rates = DilationRates::new(Matrix::new(1, 2, vec![1.3, 0.6]).unwrap()).unwrap();
        let gy = Tensor4::random_uniform([1, 2, 5, 5], -1.0, 1.0, &mut rng);
        for path in [KernelPath::Naive, KernelPath::Blocked] {
            let g = adaptive_conv_backward(&x, &weight, &rates, &gy, path).unwrap();
            assert!(g.x.data().iter().all(|&v| v == 0.0));
            assert!(g.rates.data().iter().all(|&v| v == 0.0));
            // grad_w[co][c][t] = Σ_p gy[co][p] · sampled[c][t][p]
            let cols = gather_columns(&x, &weight, &rates, 0);
            for co in 0..2 {
                for ct in 0..18 {
                    let expected: f64 = (0..25).map(|p| gy.plane(0, co)[p] * cols[ct * 25 + p]).sum();
                    assert!((g.weight.data()[co * 18 + ct] - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn wrong_channel_count_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = AdcParams::new(2, 2, 3, 2, &mut rng).unwrap();
        let x = Tensor4::zeros([1, 3, 4, 4]);
        assert!(matches!(adc_forward(&x, &p), Err(AdcError::ShapeMismatch { .. })));
    }

    #[test]
    fn sampling_pattern_is_translated_index_set() {
        // Impulse responses at two positions with constant fractional rates
        // differ only by the translation.
        let weight = {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            Tensor4::random_uniform([1, 1, 3, 3], -1.0, 1.0, &mut rng)
        };
        let rates = DilationRates::constant(1, 1, 1.7).unwrap();
        let impulse = |ci: usize, cj: usize| {
            Tensor4::from_fn([1, 1, 16, 16], move |_, _, i, j| if i == ci && j == cj { 1.0 } else { 0.0 })
        };
        let y1 = adaptive_conv(&impulse(6, 6), &weight, &rates, KernelPath::Naive).unwrap();
        let y2 = adaptive_conv(&impulse(8, 9), &weight, &rates, KernelPath::Naive).unwrap();
        for i in 2..11 {
            for j in 2..11 {
                assert!((y1.get(0, 0, i, j) - y2.get(0, 0, i + 2, j + 3)).abs() < 1e-15);
            }
        }
    }
}
