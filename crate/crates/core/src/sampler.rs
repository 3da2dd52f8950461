//! Bilinear sampling at fractional coordinates, with gradients for both the
//! feature map and the coordinates.
//!
//! Pixels outside `[0, H) × [0, W)` read as zero. At integer coordinates the
//! coordinate derivative is the right-handed one (the slope towards the next
//! pixel), which falls out of using `floor` to pick the base corner.

use crate::error::{AdcError, Result};
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePoint {
    pub n: usize,
    pub c: usize,
    pub i: f64,
    pub j: f64,
}

/// Base corner and fractional parts of a coordinate pair.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Corner {
    pub i0: isize,
    pub j0: isize,
    pub fi: f64,
    pub fj: f64,
}

impl Corner {
    #[inline]
    pub fn of(i: f64, j: f64) -> Self {
        let fi0 = i.floor();
        let fj0 = j.floor();
        Self {
            i0: fi0 as isize,
            j0: fj0 as isize,
            fi: i - fi0,
            fj: j - fj0,
        }
    }

    /// Neighbor offsets with their bilinear weights, in fixed order.
    #[inline]
    pub fn weights(&self) -> [(isize, isize, f64); 4] {
        let (fi, fj) = (self.fi, self.fj);
        [
            (0, 0, (1.0 - fi) * (1.0 - fj)),
            (0, 1, (1.0 - fi) * fj),
            (1, 0, fi * (1.0 - fj)),
            (1, 1, fi * fj),
        ]
    }
}

#[inline]
fn read(plane: &[f64], h: usize, w: usize, i: isize, j: isize) -> f64 {
    if i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w {
        plane[i as usize * w + j as usize]
    } else {
        0.0
    }
}

/// The four corner values `[v00, v01, v10, v11]`.
#[inline]
pub(crate) fn corners(plane: &[f64], h: usize, w: usize, c: &Corner) -> [f64; 4] {
    let (i0, j0) = (c.i0, c.j0);
    if i0 >= 0 && j0 >= 0 && ((i0 + 1) as usize) < h && ((j0 + 1) as usize) < w {
        let base = i0 as usize * w + j0 as usize;
        [plane[base], plane[base + 1], plane[base + w], plane[base + w + 1]]
    } else {
        [
            read(plane, h, w, i0, j0),
            read(plane, h, w, i0, j0 + 1),
            read(plane, h, w, i0 + 1, j0),
            read(plane, h, w, i0 + 1, j0 + 1),
        ]
    }
}

#[inline]
pub(crate) fn blend(v: &[f64; 4], c: &Corner) -> f64 {
    let top = v[0] + (v[1] - v[0]) * c.fj;
    let bottom = v[2] + (v[3] - v[2]) * c.fj;
    top + (bottom - top) * c.fi
}

/// Derivatives of the blend with respect to the row and column coordinate.
#[inline]
pub(crate) fn blend_slopes(v: &[f64; 4], c: &Corner) -> (f64, f64) {
    let d_i = (1.0 - c.fj) * (v[2] - v[0]) + c.fj * (v[3] - v[1]);
    let d_j = (1.0 - c.fi) * (v[1] - v[0]) + c.fi * (v[3] - v[2]);
    (d_i, d_j)
}

/// Samples one `H×W` plane at `(i, j)`.
#[inline]
pub fn sample_plane(plane: &[f64], h: usize, w: usize, i: f64, j: f64) -> f64 {
    let c = Corner::of(i, j);
    blend(&corners(plane, h, w, &c), &c)
}

/// Adds `grad · weight` onto each in-bounds neighbor of `(i, j)`.
#[inline]
pub(crate) fn scatter_plane(plane: &mut [f64], h: usize, w: usize, c: &Corner, grad: f64) {
    for (a, b, wt) in c.weights() {
        let (ii, jj) = (c.i0 + a, c.j0 + b);
        if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
            plane[ii as usize * w + jj as usize] += grad * wt;
        }
    }
}

fn check_point(x: &Tensor4, p: &SamplePoint) -> Result<()> {
    if p.i.is_nan() || p.j.is_nan() {
        return Err(AdcError::NanCoordinate);
    }
    if !p.i.is_finite() || !p.j.is_finite() {
        return Err(AdcError::NonFinite("sample coordinate"));
    }
    if p.n >= x.batch() || p.c >= x.channels() {
        return Err(crate::tensor::shape_err("sample index", (p.n, p.c), x.dims()));
    }
    Ok(())
}

pub fn sample(x: &Tensor4, p: &SamplePoint) -> Result<f64> {
    check_point(x, p)?;
    Ok(sample_plane(x.plane(p.n, p.c), x.height(), x.width(), p.i, p.j))
}

/// Gradient of one sample: up to four pixel contributions plus the
/// coordinate derivatives, each already multiplied by `grad_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrad {
    /// `(row, col, value)` for in-bounds neighbors only.
    pub pixels: Vec<(usize, usize, f64)>,
    pub grad_i: f64,
    pub grad_j: f64,
}

pub fn sample_backward(x: &Tensor4, p: &SamplePoint, grad_out: f64) -> Result<SampleGrad> {
    check_point(x, p)?;
    let (h, w) = (x.height(), x.width());
    let c = Corner::of(p.i, p.j);
    let v = corners(x.plane(p.n, p.c), h, w, &c);
    let (d_i, d_j) = blend_slopes(&v, &c);
    let pixels = c
        .weights()
        .iter()
        .filter_map(|&(a, b, wt)| {
            let (ii, jj) = (c.i0 + a, c.j0 + b);
            (ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w)
                .then(|| (ii as usize, jj as usize, grad_out * wt))
        })
        .collect();
    Ok(SampleGrad {
        pixels,
        grad_i: grad_out * d_i,
        grad_j: grad_out * d_j,
    })
}
