//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly: values are computed when a node is
//! pushed, and [`Graph::backward`] walks the tape in reverse. Parameters are read
//! from a borrowed [`ParamStore`]; only trainable entries receive gradients.

use std::collections::HashMap;

use indexmap::IndexMap;

use super::{NumericsError, ParamStore, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Max(Var, Var),
    Min(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Softplus(Var),
    Powf(Var, f64),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    GatherRows { src: Var, index: Vec<usize> },
    Gather { src: Var, index: Vec<usize> },
    Reshape(Var),
    L1(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Shift(_) => "shift",
            Op::Max(..) => "max",
            Op::Min(..) => "min",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Abs(_) => "abs",
            Op::Softplus(_) => "softplus",
            Op::Powf(..) => "powf",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::GatherRows { .. } => "gather_rows",
            Op::Gather { .. } => "gather",
            Op::Reshape(_) => "reshape",
            Op::L1(..) => "l1",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of a scalar with respect to every trainable parameter, in store order.
pub type Gradients = IndexMap<String, Tensor>;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// A single forward computation recorded for differentiation.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<String, Var>,
}

fn shape_err(op: &str, detail: String) -> NumericsError {
    NumericsError::Shape(format!("{op}: {detail}"))
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_raw(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite {
                op: op.name().to_string(),
                location: format!("node {}", self.nodes.len()),
            });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Loads a named parameter; repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var, NumericsError> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let p = self
            .params
            .get(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self
            .value(a)
            .matmul(self.value(b))
            .map_err(|e| shape_err("matmul", e.to_string()))?;
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let bt = self.value(b).transpose();
        let out = self
            .value(a)
            .matmul(&bt)
            .map_err(|e| shape_err("matmul_t", e.to_string()))?;
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("div", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x / y);
        self.push(out, Op::Div(a, b))
    }

    /// Adds a vector to every row of a matrix (last-axis broadcast).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.len() != av.cols() {
            return Err(shape_err(
                "add_row",
                format!("{:?} + {:?}", av.shape(), rv.shape()),
            ));
        }
        let c = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + rv.data()[i % c])
            .collect();
        let out = Tensor::from_raw(av.shape().to_vec(), data);
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::Shift(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.scale(a, -1.0)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("max", a, b)?;
        let out = zip_map(self.value(a), self.value(b), f64::max);
        self.push(out, Op::Max(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("min", a, b)?;
        let out = zip_map(self.value(a), self.value(b), f64::min);
        self.push(out, Op::Min(a, b))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a))
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    /// `xᵖ` for non-negative inputs.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| x.powf(p));
        self.push(out, Op::Powf(a, p))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let av = self.value(a);
        let c = av.cols();
        let mut data = Vec::with_capacity(av.len());
        for r in 0..av.rows() {
            let row = av.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            data.extend(exps.into_iter().map(|e| e / z));
        }
        debug_assert_eq!(data.len(), av.rows() * c);
        let out = Tensor::from_raw(av.shape().to_vec(), data);
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let out = Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64);
        self.push(out, Op::Mean(a))
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NumericsError> {
        if parts.is_empty() || axis > 1 {
            return Err(shape_err("concat", "need parts and axis 0 or 1".into()));
        }
        let shapes: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| (self.value(p).rows(), self.value(p).cols()))
            .collect();
        let out = if axis == 0 {
            let c = shapes[0].1;
            if shapes.iter().any(|s| s.1 != c) {
                return Err(shape_err("concat", format!("column mismatch {shapes:?}")));
            }
            let data: Vec<f64> = parts
                .iter()
                .flat_map(|&p| self.value(p).data().iter().copied())
                .collect();
            Tensor::from_raw(vec![data.len() / c.max(1), c], data)
        } else {
            let r = shapes[0].0;
            if shapes.iter().any(|s| s.0 != r) {
                return Err(shape_err("concat", format!("row mismatch {shapes:?}")));
            }
            let total: usize = shapes.iter().map(|s| s.1).sum();
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::from_raw(vec![r, total], data)
        };
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Contiguous slice `[start, start+len)` of a 2-D tensor along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, NumericsError> {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start + len > extent {
            return Err(shape_err(
                "slice",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, av.shape()),
            ));
        }
        let out = if axis == 0 {
            Tensor::from_raw(vec![len, c], av.data()[start * c..(start + len) * c].to_vec())
        } else {
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&av.row(i)[start..start + len]);
            }
            Tensor::from_raw(vec![r, len], data)
        };
        self.push(out, Op::Slice { src: a, axis, start })
    }

    /// Splits along `axis` into consecutive chunks of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>, NumericsError> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(a, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, NumericsError> {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", format!("row {bad} of {r}")));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(av.row(i));
        }
        let out = Tensor::from_raw(vec![index.len(), c], data);
        self.push(
            out,
            Op::GatherRows {
                src: a,
                index: index.to_vec(),
            },
        )
    }

    /// Selects flat (row-major) entries into a vector.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= av.len()) {
            return Err(shape_err("gather", format!("entry {bad} of {}", av.len())));
        }
        let out = Tensor::vector(index.iter().map(|&i| av.data()[i]).collect());
        self.push(
            out,
            Op::Gather {
                src: a,
                index: index.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let out = self
            .value(a)
            .reshape(shape.to_vec())
            .map_err(|e| shape_err("reshape", e.to_string()))?;
        self.push(out, Op::Reshape(a))
    }

    /// `Σ |a − b|` as a scalar.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("l1", a, b)?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        self.push(Tensor::scalar(s), Op::L1(a, b))
    }

    /// Mean of several same-shaped tensors.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let mut acc = *parts
            .first()
            .ok_or_else(|| shape_err("mean_of", "no parts".into()))?;
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        if parts.len() == 1 {
            Ok(acc)
        } else {
            self.scale(acc, 1.0 / parts.len() as f64)
        }
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients, NumericsError> {
        if self.value(out).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("output must be scalar, got {:?}", self.value(out).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Tensor::filled(self.value(out).shape(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = g.matmul(&bv.transpose())?;
                    let gb = av.transpose().matmul(&g)?;
                    acc(&mut grads, *a, ga.reshape(av.shape().to_vec())?);
                    acc(&mut grads, *b, gb.reshape(bv.shape().to_vec())?);
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = g.matmul(bv)?;
                    let gb = g.transpose().matmul(av)?;
                    acc(&mut grads, *a, ga.reshape(av.shape().to_vec())?);
                    acc(&mut grads, *b, gb.reshape(bv.shape().to_vec())?);
                }
                Op::Transpose(a) => {
                    let av = self.value(*a);
                    acc(&mut grads, *a, g.transpose().reshape(av.shape().to_vec())?);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|x| -x));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = zip_map(&g, self.value(*b), |x, y| x * y);
                    let gb = zip_map(&g, self.value(*a), |x, y| x * y);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Div(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = zip_map(&g, bv, |x, y| x / y);
                    let num = zip_map(&g, av, |x, y| x * y);
                    let gb = zip_map(&num, bv, |x, y| -x / (y * y));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let rv = self.value(*row);
                    let c = rv.len();
                    let mut gr = vec![0.0; c];
                    for (i, x) in g.data().iter().enumerate() {
                        gr[i % c] += x;
                    }
                    acc(&mut grads, *row, Tensor::from_raw(rv.shape().to_vec(), gr));
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.map(|x| x * c)),
                Op::Shift(a) => acc(&mut grads, *a, g),
                Op::Max(a, b) | Op::Min(a, b) => {
                    let is_max = matches!(node.op, Op::Max(..));
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = vec![0.0; g.len()];
                    let mut gb = vec![0.0; g.len()];
                    for i in 0..g.len() {
                        let (x, y) = (av.data()[i], bv.data()[i]);
                        let pick_a = if is_max { x >= y } else { x <= y };
                        if pick_a {
                            ga[i] = g.data()[i];
                        } else {
                            gb[i] = g.data()[i];
                        }
                    }
                    acc(&mut grads, *a, Tensor::from_raw(av.shape().to_vec(), ga));
                    acc(&mut grads, *b, Tensor::from_raw(bv.shape().to_vec(), gb));
                }
                Op::Sigmoid(a) => {
                    let s = &node.value;
                    acc(&mut grads, *a, zip_map(&g, s, |x, y| x * y * (1.0 - y)));
                }
                Op::Relu(a) => {
                    let av = self.value(*a);
                    acc(&mut grads, *a, zip_map(&g, av, |x, y| if y > 0.0 { x } else { 0.0 }));
                }
                Op::Exp(a) => acc(&mut grads, *a, zip_map(&g, &node.value, |x, y| x * y)),
                Op::Log(a) => acc(&mut grads, *a, zip_map(&g, self.value(*a), |x, y| x / y)),
                Op::Abs(a) => {
                    let f = |x: f64, y: f64| if y > 0.0 { x } else if y < 0.0 { -x } else { 0.0 };
                    acc(&mut grads, *a, zip_map(&g, self.value(*a), f));
                }
                Op::Softplus(a) => {
                    acc(&mut grads, *a, zip_map(&g, self.value(*a), |x, y| x * sigmoid(y)));
                }
                Op::Powf(a, p) => {
                    let p = *p;
                    acc(
                        &mut grads,
                        *a,
                        zip_map(&g, self.value(*a), |x, y| x * p * y.powf(p - 1.0)),
                    );
                }
                Op::SoftmaxRows(a) => {
                    let s = &node.value;
                    let c = s.cols();
                    let mut ga = vec![0.0; s.len()];
                    for r in 0..s.rows() {
                        let (sr, gr) = (s.row(r), g.row(r));
                        let dot: f64 = sr.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for j in 0..c {
                            ga[r * c + j] = sr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut grads, *a, Tensor::from_raw(s.shape().to_vec(), ga));
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    acc(&mut grads, *a, Tensor::filled(av.shape(), g.item()));
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    acc(&mut grads, *a, Tensor::filled(av.shape(), g.item() / av.len() as f64));
                }
                Op::Concat { parts, axis } => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let (r, c) = (pv.rows(), pv.cols());
                        let gp = if *axis == 0 {
                            g.data()[offset * c..(offset + r) * c].to_vec()
                        } else {
                            let mut d = Vec::with_capacity(r * c);
                            for i in 0..r {
                                d.extend_from_slice(&g.row(i)[offset..offset + c]);
                            }
                            d
                        };
                        offset += if *axis == 0 { r } else { c };
                        acc(&mut grads, p, Tensor::from_raw(pv.shape().to_vec(), gp));
                    }
                }
                Op::Slice { src, axis, start } => {
                    let sv = self.value(*src);
                    let c = sv.cols();
                    let mut gs = vec![0.0; sv.len()];
                    if *axis == 0 {
                        gs[start * c..start * c + g.len()].copy_from_slice(g.data());
                    } else {
                        let len = g.cols();
                        for i in 0..sv.rows() {
                            gs[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
                        }
                    }
                    acc(&mut grads, *src, Tensor::from_raw(sv.shape().to_vec(), gs));
                }
                Op::GatherRows { src, index } => {
                    let sv = self.value(*src);
                    let c = sv.cols();
                    let mut gs = vec![0.0; sv.len()];
                    for (k, &i) in index.iter().enumerate() {
                        for j in 0..c {
                            gs[i * c + j] += g.data()[k * c + j];
                        }
                    }
                    acc(&mut grads, *src, Tensor::from_raw(sv.shape().to_vec(), gs));
                }
                Op::Gather { src, index } => {
                    let sv = self.value(*src);
                    let mut gs = vec![0.0; sv.len()];
                    for (k, &i) in index.iter().enumerate() {
                        gs[i] += g.data()[k];
                    }
                    acc(&mut grads, *src, Tensor::from_raw(sv.shape().to_vec(), gs));
                }
                Op::Reshape(a) => {
                    let av = self.value(*a);
                    acc(&mut grads, *a, g.reshape(av.shape().to_vec())?);
                }
                Op::L1(a, b) => {
                    let s = g.item();
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let sign = zip_map(av, bv, |x, y| {
                        if x > y {
                            s
                        } else if x < y {
                            -s
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *b, sign.map(|x| -x));
                    acc(&mut grads, *a, sign);
                }
            }
        }

        let mut out_grads = Gradients::new();
        for (name, p) in self.params.iter() {
            if !p.trainable {
                continue;
            }
            let g = self
                .param_vars
                .get(name)
                .and_then(|v| grads.get(v.0).cloned().flatten())
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            out_grads.insert(name.clone(), g);
        }
        Ok(out_grads)
    }
}
