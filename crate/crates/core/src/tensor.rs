//! Dense rank-4 and rank-2 arrays of `f64`.
//!
//! `Tensor4` is laid out batch, channel, row, column with the column index
//! fastest. There are no views or strides; every operation returns a fresh
//! owned value.

use std::fmt;
use std::io::{Read, Write};

use rand::Rng;

use crate::error::{AdcError, Result};

const MAGIC: &[u8; 4] = b"ADCT";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl fmt::Debug for Tensor4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor4{:?}", self.dims)
    }
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.iter().any(|&d| d == 0) {
        return Err(AdcError::ZeroDim(dims.to_vec()));
    }
    Ok(dims.iter().product())
}

impl Tensor4 {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len = check_dims(&dims)?;
        if data.len() != len {
            return Err(AdcError::LengthMismatch {
                len: data.len(),
                dims: dims.to_vec(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AdcError::NonFinite("Tensor4::new"));
        }
        Ok(Self { dims, data })
    }

    /// Panics if any dimension is zero.
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: [usize; 4], value: f64) -> Self {
        let len = check_dims(&dims).expect("tensor dimensions must be non-zero");
        assert!(value.is_finite(), "fill value must be finite");
        Self {
            dims,
            data: vec![value; len],
        }
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(dims);
        let [n, c, h, w] = dims;
        let mut k = 0;
        for a in 0..n {
            for b in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        t.data[k] = f(a, b, i, j);
                        k += 1;
                    }
                }
            }
        }
        t
    }

    pub fn random_uniform(dims: [usize; 4], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let mut t = Self::zeros(dims);
        for v in &mut t.data {
            *v = rng.random_range(lo..hi);
        }
        t
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        let [_, cs, h, w] = self.dims;
        ((n * cs + c) * h + i) * w + j
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.index(n, c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, i: usize, j: usize, value: f64) {
        let k = self.index(n, c, i, j);
        self.data[k] = value;
    }

    /// One `H×W` channel plane of sample `n`.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    /// All channels of sample `n`.
    pub fn sample(&self, n: usize) -> &[f64] {
        let stride = self.dims[1] * self.dims[2] * self.dims[3];
        &self.data[n * stride..(n + 1) * stride]
    }

    /// Copies sample `n` out as a batch of one.
    pub fn batch_item(&self, n: usize) -> Tensor4 {
        Tensor4 {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.sample(n).to_vec(),
        }
    }

    /// Concatenates equally shaped tensors along the batch axis.
    pub fn stack(items: &[Tensor4]) -> Result<Tensor4> {
        let first = items
            .first()
            .ok_or_else(|| AdcError::Config("cannot stack zero tensors".into()))?;
        let [_, c, h, w] = first.dims;
        let mut data = Vec::with_capacity(items.len() * first.len());
        let mut n = 0;
        for t in items {
            if t.dims[1..] != first.dims[1..] {
                return Err(shape_err("stack", first.dims, t.dims));
            }
            data.extend_from_slice(&t.data);
            n += t.dims[0];
        }
        Ok(Tensor4 {
            dims: [n, c, h, w],
            data,
        })
    }

    pub fn require_same_shape(&self, other: &Tensor4, op: &'static str) -> Result<()> {
        if self.dims != other.dims {
            return Err(shape_err(op, self.dims, other.dims));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor4) -> Result<Tensor4> {
        self.require_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor4 {
            dims: self.dims,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        self.require_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> Tensor4 {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> Result<f64> {
        self.require_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        write_record(&mut out, self.dims, &self.data)
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Tensor4> {
        let (dims, data) = read_record(&mut input)?;
        Tensor4::new(dims, data)
    }
}

pub(crate) fn shape_err(op: &'static str, lhs: impl fmt::Debug, rhs: impl fmt::Debug) -> AdcError {
    AdcError::ShapeMismatch {
        op,
        lhs: format!("{lhs:?}"),
        rhs: format!("{rhs:?}"),
    }
}

fn write_record<W: Write>(out: &mut W, dims: [usize; 4], data: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(40 + data.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_record<R: Read>(input: &mut R) -> Result<([usize; 4], Vec<f64>)> {
    let mut header = [0u8; 40];
    input.read_exact(&mut header)?;
    if &header[..4] != MAGIC {
        return Err(AdcError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(AdcError::Format(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 4];
    for (k, d) in dims.iter_mut().enumerate() {
        let start = 8 + k * 8;
        let raw = u64::from_le_bytes(header[start..start + 8].try_into().unwrap());
        *d = usize::try_from(raw).map_err(|_| AdcError::Format("dimension overflow".into()))?;
    }
    let len = check_dims(&dims)?;
    let mut payload = vec![0u8; len * 8];
    input.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, data))
}

/// Row-major `rows × cols` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let len = check_dims(&[rows, cols])?;
        if data.len() != len {
            return Err(AdcError::LengthMismatch {
                len: data.len(),
                dims: vec![rows, cols],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AdcError::NonFinite("Matrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        let len = check_dims(&[rows, cols]).expect("matrix dimensions must be non-zero");
        Self {
            rows,
            cols,
            data: vec![value; len],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for k in 0..n {
            m.set(k, k, 1.0);
        }
        m
    }

    pub fn random_uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let mut m = Self::zeros(rows, cols);
        for v in &mut m.data {
            *v = rng.random_range(lo..hi);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(shape_err("matrix add", self.shape(), other.shape()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(shape_err("max_abs_diff", self.shape(), other.shape()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        write_record(&mut out, [1, 1, self.rows, self.cols], &self.data)
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Matrix> {
        let (dims, data) = read_record(&mut input)?;
        if dims[0] != 1 || dims[1] != 1 {
            return Err(AdcError::Format(format!("expected a matrix record, got {dims:?}")));
        }
        Matrix::new(dims[2], dims[3], data)
    }
}

/// Writes a vector as a `1×1×1×len` record.
pub fn write_vector<W: Write>(values: &[f64], mut out: W) -> Result<()> {
    write_record(&mut out, [1, 1, 1, values.len()], values)
}

pub fn read_vector<R: Read>(mut input: R) -> Result<Vec<f64>> {
    let (dims, data) = read_record(&mut input)?;
    if dims[..3] != [1, 1, 1] {
        return Err(AdcError::Format(format!("expected a vector record, got {dims:?}")));
    }
    Ok(data)
}

/// Mean over the spatial axes: `N×C×H×W -> N×C`.
pub fn global_avg_pool(x: &Tensor4) -> Matrix {
    let [n, c, h, w] = x.dims();
    let inv = 1.0 / (h * w) as f64;
    let mut out = Matrix::zeros(n, c);
    for a in 0..n {
        for b in 0..c {
            let s: f64 = x.plane(a, b).iter().sum();
            out.set(a, b, s * inv);
        }
    }
    out
}

/// Adjoint of [`global_avg_pool`]: spreads each pooled gradient uniformly.
pub fn global_avg_pool_backward(grad: &Matrix, dims: [usize; 4]) -> Result<Tensor4> {
    let [n, c, h, w] = dims;
    if grad.shape() != (n, c) {
        return Err(shape_err("global_avg_pool_backward", grad.shape(), dims));
    }
    let inv = 1.0 / (h * w) as f64;
    let mut out = Tensor4::zeros(dims);
    for a in 0..n {
        for b in 0..c {
            let g = grad.get(a, b) * inv;
            out.plane_mut(a, b).fill(g);
        }
    }
    Ok(out)
}

/// `m·w + b`, with `b` added to every row.
pub fn matmul_bias(m: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    if m.cols != w.rows {
        return Err(shape_err("matmul_bias", m.shape(), w.shape()));
    }
    if b.len() != w.cols {
        return Err(shape_err("matmul_bias bias", w.shape(), b.len()));
    }
    let mut out = Matrix::zeros(m.rows, w.cols);
    for r in 0..m.rows {
        let row = &mut out.data[r * w.cols..(r + 1) * w.cols];
        row.copy_from_slice(b);
        for k in 0..m.cols {
            let a = m.get(r, k);
            for (o, wv) in row.iter_mut().zip(w.row(k)) {
                *o += a * wv;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`matmul_bias`]: `(grad_m, grad_w, grad_b)`.
pub fn matmul_bias_backward(
    m: &Matrix,
    w: &Matrix,
    grad_out: &Matrix,
) -> Result<(Matrix, Matrix, Vec<f64>)> {
    if grad_out.shape() != (m.rows, w.cols) || m.cols != w.rows {
        return Err(shape_err("matmul_bias_backward", m.shape(), grad_out.shape()));
    }
    let mut grad_m = Matrix::zeros(m.rows, m.cols);
    let mut grad_w = Matrix::zeros(w.rows, w.cols);
    let mut grad_b = vec![0.0; w.cols];
    for r in 0..m.rows {
        let g = grad_out.row(r);
        for (gb, gv) in grad_b.iter_mut().zip(g) {
            *gb += gv;
        }
        for k in 0..m.cols {
            let a = m.get(r, k);
            let wr = w.row(k);
            let mut acc = 0.0;
            for (col, gv) in g.iter().enumerate() {
                acc += gv * wr[col];
                grad_w.data[k * w.cols + col] += a * gv;
            }
            grad_m.set(r, k, acc);
        }
    }
    Ok((grad_m, grad_w, grad_b))
}

pub fn relu(m: &Matrix) -> Matrix {
    Matrix {
        rows: m.rows,
        cols: m.cols,
        data: m.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Passes the gradient where the input was strictly positive; the kink at 0 gets 0.
pub fn relu_backward(input: &Matrix, grad_out: &Matrix) -> Result<Matrix> {
    if input.shape() != grad_out.shape() {
        return Err(shape_err("relu_backward", input.shape(), grad_out.shape()));
    }
    Ok(Matrix {
        rows: input.rows,
        cols: input.cols,
        data: input
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(m: &Matrix, w: &Matrix, b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; m.rows() * w.cols()];
        for r in 0..m.rows() {
            for c in 0..w.cols() {
                let mut s = b[c];
                for k in 0..m.cols() {
                    s += m.get(r, k) * w.get(k, c);
                }
                out[r * w.cols() + c] = s;
            }
        }
        out
    }

    #[test]
    fn gap_small_example() {
        let x = Tensor4::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).data(), &[2.5]);
        let z = Tensor4::zeros([2, 3, 4, 4]);
        assert!(global_avg_pool(&z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gap_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor4::random_uniform([2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let pooled = global_avg_pool(&x);
        for n in 0..2 {
            for c in 0..3 {
                let mut s = 0.0;
                for i in 0..4 {
                    for j in 0..4 {
                        s += x.get(n, c, i, j);
                    }
                }
                assert!((pooled.get(n, c) - s / 16.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_identity_and_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Matrix::random_uniform(3, 4, -1.0, 1.0, &mut rng);
        let out = matmul_bias(&m, &Matrix::identity(4), &[0.0; 4]).unwrap();
        assert_eq!(out, m);
        let ones = matmul_bias(&m, &Matrix::zeros(4, 2), &[1.0, 1.0]).unwrap();
        assert!(ones.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Matrix::random_uniform(2, 3, -1.0, 1.0, &mut rng);
        let w = Matrix::random_uniform(3, 2, -1.0, 1.0, &mut rng);
        let b = vec![0.3, -0.7];
        let out = matmul_bias(&m, &w, &b).unwrap();
        for (a, e) in out.data().iter().zip(naive_matmul(&m, &w, &b)) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul_bias(&Matrix::zeros(2, 3), &Matrix::zeros(4, 2), &[0.0; 2]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)") && msg.contains("(4, 2)"), "{msg}");
    }

    #[test]
    fn relu_forward_and_kink() {
        let m = Matrix::new(1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&m).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&m, &Matrix::filled(1, 3, 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = Matrix::random_uniform(4, 4, -1.0, 1.0, &mut rng);
        for v in m.data_mut() {
            if v.abs() < 1e-3 {
                *v = 0.5;
            }
        }
        let weights = Matrix::random_uniform(4, 4, -1.0, 1.0, &mut rng);
        let loss = |m: &Matrix| -> f64 {
            relu(m)
                .data()
                .iter()
                .zip(weights.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let analytic = relu_backward(&m, &weights).unwrap();
        let h = 1e-5;
        for k in 0..16 {
            let mut p = m.clone();
            p.data_mut()[k] += h;
            let mut q = m.clone();
            q.data_mut()[k] -= h;
            let fd = (loss(&p) - loss(&q)) / (2.0 * h);
            let a = analytic.data()[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            assert!(rel < 1e-4, "k={k}: {a} vs {fd}");
        }
    }

    #[test]
    fn tensor_new_rejects_bad_input() {
        assert!(matches!(
            Tensor4::new([1, 0, 2, 2], vec![]),
            Err(AdcError::ZeroDim(_))
        ));
        assert!(matches!(
            Tensor4::new([1, 1, 2, 2], vec![0.0; 3]),
            Err(AdcError::LengthMismatch { .. })
        ));
        assert!(matches!(
            Tensor4::new([1, 1, 1, 1], vec![f64::NAN]),
            Err(AdcError::NonFinite(_))
        ));
    }

    #[test]
    fn serialization_header_layout() {
        let t = Tensor4::new([1, 1, 1, 2], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"ADCT");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[32..40].try_into().unwrap()), 2);
        assert_eq!(buf.len(), 40 + 16);
        assert_eq!(f64::from_le_bytes(buf[40..48].try_into().unwrap()), 1.5);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Tensor4::read_from(&bad[..]).is_err());
    }

    proptest! {
        #[test]
        fn indexing_round_trips(n in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5,
                                v in -1e6f64..1e6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = Tensor4::zeros([n, c, h, w]);
            let (a, b, i, j) = (rng.random_range(0..n), rng.random_range(0..c),
                                rng.random_range(0..h), rng.random_range(0..w));
            t.set(a, b, i, j, v);
            prop_assert_eq!(t.get(a, b, i, j), v);
        }

        #[test]
        fn gap_of_constant_is_constant(v in -100.0f64..100.0, h in 1usize..6, w in 1usize..6) {
            let t = Tensor4::filled([2, 3, h, w], v);
            for &p in global_avg_pool(&t).data() {
                prop_assert!((p - v).abs() <= 1e-12 * v.abs().max(1.0));
            }
        }

        #[test]
        fn matmul_bias_is_affine(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m1 = Matrix::random_uniform(3, 4, -2.0, 2.0, &mut rng);
            let m2 = Matrix::random_uniform(3, 4, -2.0, 2.0, &mut rng);
            let w = Matrix::random_uniform(4, 5, -2.0, 2.0, &mut rng);
            let b: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f12 = matmul_bias(&m1.add(&m2).unwrap(), &w, &b).unwrap();
            let f1 = matmul_bias(&m1, &w, &b).unwrap();
            let f2 = matmul_bias(&m2, &w, &b).unwrap();
            for r in 0..3 {
                for c in 0..5 {
                    let d = f12.get(r, c) - f1.get(r, c) - f2.get(r, c) + b[c];
                    prop_assert!(d.abs() < 1e-10);
                }
            }
        }

        #[test]
        fn tensor_serialization_round_trips(seed in any::<u64>(), n in 1usize..3, c in 1usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor4::random_uniform([n, c, 3, 2], -1e3, 1e3, &mut rng);
            let mut buf = Vec::new();
            t.write_to(&mut buf).unwrap();
            prop_assert_eq!(Tensor4::read_from(&buf[..]).unwrap(), t);
        }
    }
}
