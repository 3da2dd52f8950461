//! A small reverse-mode tape covering exactly the operations the toy network
//! uses. Nodes are appended in evaluation order, so walking the node list
//! backwards is a reverse topological order.

use crate::adc::{adc_backward, adc_forward_with, AdcCache, AdcParams, KernelPath};
use crate::drm::{DilationRates, DrmParams};
use crate::error::{AdcError, Result};
use crate::reference::{dilated_conv_backward, dilated_conv_forward, ConvSpec};
use crate::tensor::{
    global_avg_pool, global_avg_pool_backward, matmul_bias, matmul_bias_backward, relu, relu_backward,
    shape_err, Matrix, Tensor4,
};

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Tensor(Tensor4),
    Matrix(Matrix),
    Vector(Vec<f64>),
    Scalar(f64),
}

impl Value {
    pub fn describe(&self) -> String {
        match self {
            Value::Tensor(t) => format!("tensor {:?}", t.dims()),
            Value::Matrix(m) => format!("matrix {:?}", m.shape()),
            Value::Vector(v) => format!("vector [{}]", v.len()),
            Value::Scalar(_) => "scalar".into(),
        }
    }

    pub fn as_tensor(&self) -> Result<&Tensor4> {
        match self {
            Value::Tensor(t) => Ok(t),
            other => Err(shape_err("expected tensor", other.describe(), "tensor")),
        }
    }

    pub fn as_matrix(&self) -> Result<&Matrix> {
        match self {
            Value::Matrix(m) => Ok(m),
            other => Err(shape_err("expected matrix", other.describe(), "matrix")),
        }
    }

    pub fn as_vector(&self) -> Result<&[f64]> {
        match self {
            Value::Vector(v) => Ok(v),
            other => Err(shape_err("expected vector", other.describe(), "vector")),
        }
    }

    pub fn as_scalar(&self) -> Result<f64> {
        match self {
            Value::Scalar(s) => Ok(*s),
            other => Err(AdcError::NonScalarLoss(other.describe())),
        }
    }

    /// Flat view of the underlying numbers.
    pub fn data(&self) -> &[f64] {
        match self {
            Value::Tensor(t) => t.data(),
            Value::Matrix(m) => m.data(),
            Value::Vector(v) => v,
            Value::Scalar(s) => std::slice::from_ref(s),
        }
    }

    fn accumulate(&mut self, other: Value) -> Result<()> {
        match (self, other) {
            (Value::Tensor(a), Value::Tensor(b)) => a.add_assign(&b),
            (Value::Matrix(a), Value::Matrix(b)) => {
                *a = a.add(&b)?;
                Ok(())
            }
            (Value::Vector(a), Value::Vector(b)) if a.len() == b.len() => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                Ok(())
            }
            (Value::Scalar(a), Value::Scalar(b)) => {
                *a += b;
                Ok(())
            }
            (a, b) => Err(shape_err("gradient accumulation", a.describe(), b.describe())),
        }
    }
}

impl From<Tensor4> for Value {
    fn from(t: Tensor4) -> Self {
        Value::Tensor(t)
    }
}

impl From<Matrix> for Value {
    fn from(m: Matrix) -> Self {
        Value::Matrix(m)
    }
}

impl From<Vec<f64>> for Value {
    fn from(v: Vec<f64>) -> Self {
        Value::Vector(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    Leaf,
    /// `[x, weight]`
    Conv(ConvSpec),
    /// `[x, weight, w1, b1, w2, b2]`
    Adc(KernelPath),
    /// Per-channel `x·scale + shift`: `[x, scale, shift]`
    Affine,
    Relu,
    Add,
    /// `[x]` to an `N × C` matrix.
    Gap,
    /// `[m, w, b]`
    Fc,
    /// Mean squared error `[prediction, target]` over tensors or matrices.
    Mse,
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Value,
    adc: Option<Box<AdcCache>>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: impl Into<Value>) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value.into(), None)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Value, adc: Option<Box<AdcCache>>) -> NodeId {
        self.nodes.push(Node { op, inputs, value, adc });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(AdcError::UnknownNode(id.0))
    }

    pub fn value(&self, id: NodeId) -> Result<&Value> {
        Ok(&self.node(id)?.value)
    }

    /// Rates produced by an ADC node.
    pub fn adc_rates(&self, id: NodeId) -> Option<&DilationRates> {
        self.nodes.get(id.0)?.adc.as_ref().map(|c| c.rates())
    }

    fn arity(op: Op) -> usize {
        match op {
            Op::Leaf => 0,
            Op::Relu | Op::Gap => 1,
            Op::Conv(_) | Op::Add | Op::Mse => 2,
            Op::Affine | Op::Fc => 3,
            Op::Adc(_) => 6,
        }
    }

    /// Evaluates `op` on the given input nodes and appends the result.
    pub fn record(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != Self::arity(op) {
            return Err(shape_err("tape arity", format!("{op:?}"), inputs.len()));
        }
        for &id in inputs {
            self.node(id)?;
        }
        let val = |k: usize| &self.nodes[inputs[k].0].value;
        let mut adc = None;
        let value = match op {
            Op::Leaf => return Err(AdcError::Config("use Tape::leaf for leaves".into())),
            Op::Conv(spec) => Value::Tensor(dilated_conv_forward(val(0).as_tensor()?, val(1).as_tensor()?, &spec)?),
            Op::Adc(path) => {
                let params = adc_params_from(val(1), val(2), val(3), val(4), val(5))?;
                let (y, cache) = adc_forward_with(val(0).as_tensor()?, &params, path)?;
                adc = Some(Box::new(cache));
                Value::Tensor(y)
            }
            Op::Affine => Value::Tensor(affine(val(0).as_tensor()?, val(1).as_vector()?, val(2).as_vector()?)?),
            Op::Relu => match val(0) {
                Value::Tensor(t) => Value::Tensor(t.map(|v| v.max(0.0))),
                Value::Matrix(m) => Value::Matrix(relu(m)),
                other => return Err(shape_err("relu", other.describe(), "tensor or matrix")),
            },
            Op::Add => match (val(0), val(1)) {
                (Value::Tensor(a), Value::Tensor(b)) => Value::Tensor(a.add(b)?),
                (Value::Matrix(a), Value::Matrix(b)) => Value::Matrix(a.add(b)?),
                (a, b) => return Err(shape_err("add", a.describe(), b.describe())),
            },
            Op::Gap => Value::Matrix(global_avg_pool(val(0).as_tensor()?)),
            Op::Fc => Value::Matrix(matmul_bias(val(0).as_matrix()?, val(1).as_matrix()?, val(2).as_vector()?)?),
            Op::Mse => {
                let (p, t) = (val(0), val(1));
                check_same_kind(p, t)?;
                let s: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                Value::Scalar(s / p.data().len() as f64)
            }
        };
        Ok(self.push(op, inputs.to_vec(), value, adc))
    }

    pub fn conv(&mut self, x: NodeId, weight: NodeId, spec: ConvSpec) -> Result<NodeId> {
        self.record(Op::Conv(spec), &[x, weight])
    }

    pub fn adc(&mut self, x: NodeId, params: &AdcNodes, path: KernelPath) -> Result<NodeId> {
        self.record(
            Op::Adc(path),
            &[x, params.weight, params.w1, params.b1, params.w2, params.b2],
        )
    }

    pub fn affine(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        self.record(Op::Affine, &[x, scale, shift])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Relu, &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add, &[a, b])
    }

    pub fn gap(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Gap, &[x])
    }

    pub fn fc(&mut self, m: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Fc, &[m, w, b])
    }

    pub fn mse(&mut self, prediction: NodeId, target: NodeId) -> Result<NodeId> {
        self.record(Op::Mse, &[prediction, target])
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.node(loss)?.value.as_scalar()?;
        let mut grads: Vec<Option<Value>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Value::Scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if node.op == Op::Leaf {
                continue;
            }
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let contributions = self.local_backward(node, &grad)?;
            grads[idx] = Some(grad);
            for (input, g) in node.inputs.iter().zip(contributions) {
                if let Some(g) = g {
                    match &mut grads[input.0] {
                        Some(acc) => acc.accumulate(g)?,
                        slot @ None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn local_backward(&self, node: &Node, grad: &Value) -> Result<Vec<Option<Value>>> {
        let val = |k: usize| &self.nodes[node.inputs[k].0].value;
        Ok(match node.op {
            Op::Leaf => Vec::new(),
            Op::Conv(spec) => {
                let (gx, gw) = dilated_conv_backward(val(0).as_tensor()?, val(1).as_tensor()?, &spec, grad.as_tensor()?)?;
                vec![Some(gx.into()), Some(gw.into())]
            }
            Op::Adc(_) => {
                let params = adc_params_from(val(1), val(2), val(3), val(4), val(5))?;
                let cache = node.adc.as_ref().expect("ADC node carries its cache");
                let g = adc_backward(&params, cache, grad.as_tensor()?)?;
                vec![
                    Some(g.x.into()),
                    Some(g.weight.into()),
                    Some(g.drm.w1.into()),
                    Some(g.drm.b1.into()),
                    Some(g.drm.w2.into()),
                    Some(g.drm.b2.into()),
                ]
            }
            Op::Affine => {
                let (x, scale) = (val(0).as_tensor()?, val(1).as_vector()?);
                let g = grad.as_tensor()?;
                let [n, c, _, _] = x.dims();
                let mut gx = Tensor4::zeros(x.dims());
                let mut gscale = vec![0.0; c];
                let mut gshift = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let (gp, xp) = (g.plane(s, ch), x.plane(s, ch));
                        let mut a = 0.0;
                        let mut b = 0.0;
                        for (gv, xv) in gp.iter().zip(xp) {
                            a += gv * xv;
                            b += gv;
                        }
                        gscale[ch] += a;
                        gshift[ch] += b;
                        for (o, gv) in gx.plane_mut(s, ch).iter_mut().zip(gp) {
                            *o = gv * scale[ch];
                        }
                    }
                }
                vec![Some(gx.into()), Some(gscale.into()), Some(gshift.into())]
            }
            Op::Relu => match (val(0), grad) {
                (Value::Tensor(x), Value::Tensor(g)) => {
                    let data = x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    vec![Some(Tensor4::new(x.dims(), data)?.into())]
                }
                (Value::Matrix(x), Value::Matrix(g)) => vec![Some(relu_backward(x, g)?.into())],
                (a, b) => return Err(shape_err("relu backward", a.describe(), b.describe())),
            },
            Op::Add => vec![Some(grad.clone()), Some(grad.clone())],
            Op::Gap => {
                let dims = val(0).as_tensor()?.dims();
                vec![Some(global_avg_pool_backward(grad.as_matrix()?, dims)?.into())]
            }
            Op::Fc => {
                let (gm, gw, gb) = matmul_bias_backward(val(0).as_matrix()?, val(1).as_matrix()?, grad.as_matrix()?)?;
                vec![Some(gm.into()), Some(gw.into()), Some(gb.into())]
            }
            Op::Mse => {
                let (p, t) = (val(0), val(1));
                let scale = 2.0 * grad.as_scalar()? / p.data().len() as f64;
                let gp: Vec<f64> = p.data().iter().zip(t.data()).map(|(a, b)| scale * (a - b)).collect();
                let gt: Vec<f64> = gp.iter().map(|v| -v).collect();
                vec![Some(same_kind(p, gp)?), Some(same_kind(t, gt)?)]
            }
        })
    }
}

/// Leaf ids holding one ADC layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct AdcNodes {
    pub weight: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl AdcNodes {
    pub fn register(tape: &mut Tape, params: &AdcParams) -> Self {
        Self {
            weight: tape.leaf(params.weight.clone()),
            w1: tape.leaf(params.drm.w1.clone()),
            b1: tape.leaf(params.drm.b1.clone()),
            w2: tape.leaf(params.drm.w2.clone()),
            b2: tape.leaf(params.drm.b2.clone()),
        }
    }
}

fn adc_params_from(weight: &Value, w1: &Value, b1: &Value, w2: &Value, b2: &Value) -> Result<AdcParams> {
    Ok(AdcParams {
        weight: weight.as_tensor()?.clone(),
        drm: DrmParams {
            w1: w1.as_matrix()?.clone(),
            b1: b1.as_vector()?.to_vec(),
            w2: w2.as_matrix()?.clone(),
            b2: b2.as_vector()?.to_vec(),
        },
    })
}

fn check_same_kind(a: &Value, b: &Value) -> Result<()> {
    let ok = match (a, b) {
        (Value::Tensor(p), Value::Tensor(q)) => p.dims() == q.dims(),
        (Value::Matrix(p), Value::Matrix(q)) => p.shape() == q.shape(),
        _ => false,
    };
    if !ok {
        return Err(shape_err("mse", a.describe(), b.describe()));
    }
    Ok(())
}

/// Wraps `data` in a value shaped like `like`.
fn same_kind(like: &Value, data: Vec<f64>) -> Result<Value> {
    Ok(match like {
        Value::Tensor(t) => Value::Tensor(Tensor4::new(t.dims(), data)?),
        Value::Matrix(m) => Value::Matrix(Matrix::new(m.rows(), m.cols(), data)?),
        Value::Vector(_) => Value::Vector(data),
        Value::Scalar(_) => Value::Scalar(data[0]),
    })
}

fn affine(x: &Tensor4, scale: &[f64], shift: &[f64]) -> Result<Tensor4> {
    let [n, c, _, _] = x.dims();
    if scale.len() != c || shift.len() != c {
        return Err(shape_err("affine", x.dims(), (scale.len(), shift.len())));
    }
    let mut out = x.clone();
    for s in 0..n {
        for ch in 0..c {
            for v in out.plane_mut(s, ch) {
                *v = *v * scale[ch] + shift[ch];
            }
        }
    }
    Ok(out)
}

#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Value>>,
}

impl Gradients {
    /// `None` when the node does not influence the loss.
    pub fn get(&self, id: NodeId) -> Option<&Value> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient data, or zeros of length `len` when the node was unreachable.
    pub fn flat_or_zeros(&self, id: NodeId, len: usize) -> Vec<f64> {
        match self.get(id) {
            Some(v) => v.data().to_vec(),
            None => vec![0.0; len],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adc::adc_forward;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_like_loss_gives_ones() {
        // mse(x, x - 1) = mean(1) and its gradient w.r.t. x is 2/len everywhere;
        // scaled by len/2 this is the all-ones gradient of a plain sum.
        let mut tape = Tape::new();
        let x = Tensor4::from_fn([1, 1, 2, 3], |_, _, i, j| (i * 3 + j) as f64);
        let target = x.map(|v| v - 1.0);
        let xn = tape.leaf(x);
        let tn = tape.leaf(target);
        let loss = tape.mse(xn, tn).unwrap();
        let g = tape.backward(loss).unwrap();
        let gx = g.get(xn).unwrap().data().iter().map(|v| v * 3.0).collect::<Vec<_>>();
        assert!(gx.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor4::zeros([1, 1, 2, 2]));
        let r = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(r), Err(AdcError::NonScalarLoss(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = mse(relu(x) + x, 0): x feeds two ops.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor4::random_uniform([1, 1, 3, 3], -1.0, 1.0, &mut rng);
        let loss_of = |x: &Tensor4| {
            let mut tape = Tape::new();
            let xn = tape.leaf(x.clone());
            let zero = tape.leaf(Tensor4::zeros(x.dims()));
            let r = tape.relu(xn).unwrap();
            let s = tape.add(r, xn).unwrap();
            let l = tape.mse(s, zero).unwrap();
            let v = tape.value(l).unwrap().as_scalar().unwrap();
            (v, tape.backward(l).unwrap().get(xn).unwrap().data().to_vec())
        };
        let (_, g) = loss_of(&x);
        let h = 1e-5;
        for k in 0..9 {
            let (mut a, mut b) = (x.clone(), x.clone());
            a.data_mut()[k] += h;
            b.data_mut()[k] -= h;
            let fd = (loss_of(&a).0 - loss_of(&b).0) / (2.0 * h);
            assert!((fd - g[k]).abs() / fd.abs().max(1e-3) < 1e-4);
        }
    }

    #[test]
    fn adc_node_matches_hand_chained_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = AdcParams::new(2, 2, 3, 2, &mut rng).unwrap();
        params.drm.w2 = Matrix::random_uniform(params.drm.hidden(), 2, -0.5, 0.5, &mut rng);
        params.drm.b2 = vec![1.4, 0.8];
        let x = Tensor4::random_uniform([1, 2, 5, 5], 0.0, 1.0, &mut rng);
        let target = Tensor4::random_uniform([1, 2, 5, 5], -1.0, 1.0, &mut rng);

        let mut tape = Tape::new();
        let xn = tape.leaf(x.clone());
        let nodes = AdcNodes::register(&mut tape, &params);
        let tn = tape.leaf(target.clone());
        let y = tape.adc(xn, &nodes, KernelPath::Naive).unwrap();
        let loss = tape.mse(y, tn).unwrap();
        let g = tape.backward(loss).unwrap();

        let (yv, cache) = adc_forward(&x, &params).unwrap();
        let scale = 2.0 / yv.len() as f64;
        let gy = Tensor4::new(
            yv.dims(),
            yv.data().iter().zip(target.data()).map(|(a, b)| scale * (a - b)).collect(),
        )
        .unwrap();
        let hand = adc_backward(&params, &cache, &gy).unwrap();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-12);
        assert!(close(g.get(xn).unwrap().data(), hand.x.data()));
        assert!(close(g.get(nodes.weight).unwrap().data(), hand.weight.data()));
        assert!(close(g.get(nodes.w1).unwrap().data(), hand.drm.w1.data()));
        assert!(close(g.get(nodes.b1).unwrap().data(), &hand.drm.b1));
        assert!(close(g.get(nodes.w2).unwrap().data(), hand.drm.w2.data()));
        assert!(close(g.get(nodes.b2).unwrap().data(), &hand.drm.b2));
    }

    #[test]
    fn gap_fc_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor4::random_uniform([2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let w = Matrix::random_uniform(3, 2, -1.0, 1.0, &mut rng);
        let target = Matrix::random_uniform(2, 2, -1.0, 1.0, &mut rng);
        let b = vec![0.3, 0.2];
        let run = |x: &Tensor4, w: &Matrix| {
            let mut tape = Tape::new();
            let xn = tape.leaf(x.clone());
            let wn = tape.leaf(w.clone());
            let bn = tape.leaf(b.clone());
            let tn = tape.leaf(target.clone());
            let p = tape.gap(xn).unwrap();
            let f = tape.fc(p, wn, bn).unwrap();
            let r = tape.relu(f).unwrap();
            let l = tape.mse(r, tn).unwrap();
            let v = tape.value(l).unwrap().as_scalar().unwrap();
            let g = tape.backward(l).unwrap();
            (v, g.get(xn).unwrap().data().to_vec(), g.get(wn).unwrap().data().to_vec())
        };
        let (_, gx, gw) = run(&x, &w);
        let h = 1e-5;
        for k in 0..w.data().len() {
            let (mut a, mut c) = (w.clone(), w.clone());
            a.data_mut()[k] += h;
            c.data_mut()[k] -= h;
            let fd = (run(&x, &a).0 - run(&x, &c).0) / (2.0 * h);
            assert!((fd - gw[k]).abs() / fd.abs().max(gw[k].abs()).max(1e-3) < 1e-4);
        }
        for k in 0..x.len() {
            let (mut a, mut c) = (x.clone(), x.clone());
            a.data_mut()[k] += h;
            c.data_mut()[k] -= h;
            let fd = (run(&a, &w).0 - run(&c, &w).0) / (2.0 * h);
            assert!((fd - gx[k]).abs() / fd.abs().max(gx[k].abs()).max(1e-3) < 1e-4);
        }
    }

    #[test]
    fn determinism_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = AdcParams::new(2, 2, 3, 1, &mut rng).unwrap();
        params.drm.w2 = Matrix::random_uniform(params.drm.hidden(), 1, -0.5, 0.5, &mut rng);
        let x = Tensor4::random_uniform([2, 2, 6, 6], 0.0, 1.0, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let xn = tape.leaf(x.clone());
            let nodes = AdcNodes::register(&mut tape, &params);
            let zero = tape.leaf(Tensor4::zeros([2, 2, 6, 6]));
            let y = tape.adc(xn, &nodes, KernelPath::Blocked).unwrap();
            let l = tape.mse(y, zero).unwrap();
            let g = tape.backward(l).unwrap();
            [xn, nodes.weight, nodes.w1, nodes.b2]
                .iter()
                .flat_map(|&n| g.get(n).unwrap().data().to_vec())
                .collect::<Vec<_>>()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
