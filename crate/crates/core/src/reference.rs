//! Integer-dilation convolution, written as sampling over an index set
//! followed by a weighted sum. Serves as the ground truth for the adaptive
//! operator and as the plain convolution inside the model.

use crate::error::{AdcError, Result};
use crate::tensor::{shape_err, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub rate: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize, rate: usize, c_in: usize, c_out: usize) -> Result<Self> {
        check_kernel(kernel)?;
        if rate == 0 {
            return Err(AdcError::BadRate(0.0));
        }
        if c_in == 0 || c_out == 0 {
            return Err(AdcError::ZeroDim(vec![c_out, c_in, kernel, kernel]));
        }
        Ok(Self {
            kernel,
            rate,
            c_in,
            c_out,
        })
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kernel, self.kernel]
    }
}

pub(crate) fn check_kernel(k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(AdcError::EvenKernel(k));
    }
    Ok(())
}

/// One sampling position relative to the output pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Offset {
    pub di: isize,
    pub dj: isize,
    pub c: usize,
}

/// Tap multipliers `⌊-k/2⌋ ..= ⌊k/2⌋` for an odd kernel.
pub fn tap_range(k: usize) -> std::ops::RangeInclusive<isize> {
    let half = (k / 2) as isize;
    -half..=half
}

/// Sampling offsets of a `k×k` kernel at dilation `r` over `c_in` channels,
/// ordered channel-major, then row, then column.
pub fn index_set(k: usize, r: usize, c_in: usize) -> Result<Vec<Offset>> {
    check_kernel(k)?;
    if r == 0 {
        return Err(AdcError::BadRate(0.0));
    }
    let r = r as isize;
    let mut out = Vec::with_capacity(k * k * c_in);
    for c in 0..c_in {
        for a in tap_range(k) {
            for b in tap_range(k) {
                out.push(Offset {
                    di: a * r,
                    dj: b * r,
                    c,
                });
            }
        }
    }
    Ok(out)
}

/// Area of the square covered by the index set: `(k·r − r + 1)²`.
/// Fractional rates are allowed.
pub fn receptive_field_area(k: usize, r: f64) -> Result<f64> {
    check_kernel(k)?;
    if !(r > 0.0) || !r.is_finite() {
        return Err(AdcError::BadRate(r));
    }
    let side = k as f64 * r - r + 1.0;
    Ok(side * side)
}

fn check_conv_shapes(x: &Tensor4, w: &Tensor4, spec: &ConvSpec) -> Result<()> {
    ConvSpec::new(spec.kernel, spec.rate, spec.c_in, spec.c_out)?;
    if w.dims() != spec.weight_dims() {
        return Err(shape_err("dilated_conv weights", w.dims(), spec.weight_dims()));
    }
    if x.channels() != spec.c_in {
        return Err(shape_err("dilated_conv input channels", x.dims(), spec.weight_dims()));
    }
    Ok(())
}

/// Valid output rows for a tap offset `d` on an axis of length `len`:
/// those `i` with `0 <= i + d < len`.
#[inline]
pub(crate) fn valid_span(d: isize, len: usize) -> (usize, usize) {
    let len = len as isize;
    let lo = (-d).clamp(0, len);
    let hi = (len - d).clamp(0, len);
    (lo as usize, hi.max(lo) as usize)
}

/// Same-size, stride-1, zero-padded dilated convolution. Each output pixel
/// accumulates its taps in index-set order.
pub fn dilated_conv_forward(x: &Tensor4, w: &Tensor4, spec: &ConvSpec) -> Result<Tensor4> {
    check_conv_shapes(x, w, spec)?;
    let [n, _, h, wd] = x.dims();
    let k = spec.kernel;
    let r = spec.rate as isize;
    let mut y = Tensor4::zeros([n, spec.c_out, h, wd]);
    for s in 0..n {
        for co in 0..spec.c_out {
            let out = y.plane_mut(s, co);
            for c in 0..spec.c_in {
                let plane = x.plane(s, c);
                for (a_idx, a) in tap_range(k).enumerate() {
                    let di = a * r;
                    let (i_lo, i_hi) = valid_span(di, h);
                    for (b_idx, b) in tap_range(k).enumerate() {
                        let dj = b * r;
                        let (j_lo, j_hi) = valid_span(dj, wd);
                        let wv = w.get(co, c, a_idx, b_idx);
                        for i in i_lo..i_hi {
                            let src_row = (i as isize + di) as usize * wd;
                            let dst = &mut out[i * wd + j_lo..i * wd + j_hi];
                            let src_start = (src_row as isize + j_lo as isize + dj) as usize;
                            let src = &plane[src_start..src_start + (j_hi - j_lo)];
                            for (o, v) in dst.iter_mut().zip(src) {
                                *o += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Returns `(grad_x, grad_w)` for [`dilated_conv_forward`].
pub fn dilated_conv_backward(
    x: &Tensor4,
    w: &Tensor4,
    spec: &ConvSpec,
    grad_y: &Tensor4,
) -> Result<(Tensor4, Tensor4)> {
    check_conv_shapes(x, w, spec)?;
    let [n, _, h, wd] = x.dims();
    if grad_y.dims() != [n, spec.c_out, h, wd] {
        return Err(shape_err("dilated_conv_backward", grad_y.dims(), [n, spec.c_out, h, wd]));
    }
    let k = spec.kernel;
    let r = spec.rate as isize;
    let mut grad_x = Tensor4::zeros(x.dims());
    let mut grad_w = Tensor4::zeros(w.dims());
    for s in 0..n {
        for co in 0..spec.c_out {
            let gy = grad_y.plane(s, co);
            for c in 0..spec.c_in {
                for (a_idx, a) in tap_range(k).enumerate() {
                    let di = a * r;
                    let (i_lo, i_hi) = valid_span(di, h);
                    for (b_idx, b) in tap_range(k).enumerate() {
                        let dj = b * r;
                        let (j_lo, j_hi) = valid_span(dj, wd);
                        let wv = w.get(co, c, a_idx, b_idx);
                        let mut gw = 0.0;
                        {
                            let plane = x.plane(s, c);
                            for i in i_lo..i_hi {
                                let src_start =
                                    ((i as isize + di) as usize * wd) as isize + j_lo as isize + dj;
                                let src = &plane[src_start as usize..src_start as usize + (j_hi - j_lo)];
                                let g = &gy[i * wd + j_lo..i * wd + j_hi];
                                for (gv, v) in g.iter().zip(src) {
                                    gw += gv * v;
                                }
                            }
                        }
                        let gx = grad_x.plane_mut(s, c);
                        for i in i_lo..i_hi {
                            let dst_start =
                                ((i as isize + di) as usize * wd) as isize + j_lo as isize + dj;
                            let dst = &mut gx[dst_start as usize..dst_start as usize + (j_hi - j_lo)];
                            let g = &gy[i * wd + j_lo..i * wd + j_hi];
                            for (o, gv) in dst.iter_mut().zip(g) {
                                *o += wv * gv;
                            }
                        }
                        let k_idx = grad_w.index(co, c, a_idx, b_idx);
                        grad_w.data_mut()[k_idx] += gw;
                    }
                }
            }
        }
    }
    Ok((grad_x, grad_w))
}
