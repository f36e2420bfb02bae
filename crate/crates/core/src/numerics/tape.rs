//! Eager reverse-mode differentiation over a linear tape.
//!
//! Every operation computes its value immediately and appends a node; since a
//! node can only reference nodes that already exist, the tape is always in
//! topological order and `backward` is a single reverse sweep.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    Sigmoid(Var),
    Gelu(Var),
    Concat(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    named: BTreeMap<String, Var>,
}

/// Gradients produced by one [`Tape::backward`] call.
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    named: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.by_node.get(var.0).and_then(Option::as_ref)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named.get(name).and_then(|v| self.wrt(*v))
    }

    pub fn is_empty(&self) -> bool {
        self.named.values().all(|v| self.wrt(*v).is_none())
    }

    /// Gradients of named trainable leaves.
    pub fn into_named(mut self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, var) in self.named {
            if let Some(g) = self.by_node[var.0].take() {
                out.insert(name, g);
            }
        }
        out
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if let Some(v) = t.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::NumericDomain {
            op,
            detail: format!("non-finite input {v}"),
        });
    }
    Ok(())
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An anonymous trainable input.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter from `store`. Repeated binds return the same
    /// leaf so shared weights (e.g. tied embeddings) accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str, trainable: bool) -> Result<Var> {
        if let Some(v) = self.named.get(name) {
            return Ok(*v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name:?}")))?
            .clone();
        let var = self.push(value, Op::Leaf, trainable);
        self.named.insert(name.to_string(), var);
        Ok(var)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    fn gemm_op(&mut self, a: Var, ta: bool, b: Var, tb: bool, op: &'static str) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let inner_a = if ta { va.rows() } else { va.cols() };
        let inner_b = if tb { vb.cols() } else { vb.rows() };
        if va.shape().len() != 2 || vb.shape().len() != 2 || inner_a != inner_b {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a),
                rhs: self.shape(b),
            });
        }
        let out = gemm(va, ta, vb, tb);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, rg))
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.gemm_op(a, false, b, false, "matmul")
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.gemm_op(a, false, b, true, "matmul_nt")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a),
                rhs: self.shape(b),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds the `[1×n]` row `bias` to every row of `a[m×n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.shape(a),
                rhs: self.shape(bias),
            });
        }
        let cols = va.cols();
        let mut out = va.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += vb.data()[i % cols];
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Row-wise softmax where row `i` only sees columns `0..=i + (cols - rows)`;
    /// masked entries are exactly zero.
    pub fn causal_softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        let vx = self.value(x);
        check_finite("softmax_rows", vx)?;
        let (rows, cols) = (vx.rows(), vx.cols());
        if causal && cols < rows {
            return Err(Error::Dimension {
                op: "causal_softmax_rows",
                lhs: vec![rows, cols],
                rhs: vec![rows, rows],
            });
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let visible = if causal { r + 1 + (cols - rows) } else { cols };
            let row = &vx.row(r)[..visible];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for (c, e) in exps.iter().enumerate() {
                out.set(r, c, e / total);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        check_finite("sigmoid", self.value(x))?;
        let out = self.value(x).map(stable_sigmoid);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Sigmoid(x), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows needs at least one input"))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(first),
                    rhs: self.shape(p),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if ids.is_empty() {
            return Err(Error::contract("gather_rows needs at least one id"));
        }
        if let Some((pos, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= vt.rows()) {
            return Err(Error::Index {
                position: pos,
                index: id,
                bound: vt.rows(),
            });
        }
        let out = vt.select_rows(ids);
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[t, targets[t]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        check_finite("cross_entropy", vl)?;
        let (rows, vocab) = (vl.rows(), vl.cols());
        if targets.is_empty() || targets.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: vec![rows, vocab],
                rhs: vec![targets.len()],
            });
        }
        if let Some((pos, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= vocab) {
            return Err(Error::Index {
                position: pos,
                index: t,
                bound: vocab,
            });
        }
        let mut probs = Tensor::zeros(rows, vocab);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = vl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            for (c, v) in row.iter().enumerate() {
                probs.set(r, c, (v - lse).exp());
            }
        }
        let out = Tensor::scalar(total / rows as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    /// Gradients of the scalar `loss` with respect to every trainable leaf
    /// it depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        Ok(Gradients {
            by_node: grads,
            named: self.named.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    // C = op(A) op(B); dA follows from dC op(B)^T, transposed back if needed
                    let ga = if *ta {
                        gemm(vb, *tb, g, true)
                    } else {
                        gemm(g, false, vb, !*tb)
                    };
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = if *tb {
                        gemm(g, true, va, *ta)
                    } else {
                        gemm(va, !*ta, g, false)
                    };
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
                if self.requires_grad(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*bias) {
                    let cols = g.cols();
                    let mut gb = Tensor::zeros(1, cols);
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|v| v * f)),
            Op::Softmax(x) => {
                let y = &node.value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols() {
                        gx.set(r, c, yr[c] * (gr[c] - dot));
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let d = g.data().iter().zip(y.data()).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(gv, xv)| gv * gelu_grad(*xv))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), d).unwrap());
            }
            Op::Concat(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if self.requires_grad(*p) {
                        let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        self.accumulate(grads, *p, Tensor::new(vec![rows, cols], slice).unwrap());
                    }
                    offset += rows;
                }
            }
            Op::Gather { table, ids } => {
                let vt = self.value(*table);
                let mut gt = Tensor::zeros(vt.rows(), vt.cols());
                let cols = vt.cols();
                for (r, &id) in ids.iter().enumerate() {
                    for (c, v) in g.row(r).iter().enumerate() {
                        gt.data_mut()[id * cols + c] += v;
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.item() / targets.len() as f64;
                let mut gl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let v = gl.get(r, t);
                    gl.set(r, t, v - 1.0);
                }
                gl.scale_in_place(scale);
                self.accumulate(grads, *logits, gl);
            }
            Op::Sum(x) => {
                let vx = self.value(*x);
                let gx = Tensor::new(vx.shape().to_vec(), vec![g.item(); vx.len()]).unwrap();
                self.accumulate(grads, *x, gx);
            }
        }
    }
}
