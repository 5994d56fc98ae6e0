//! Reverse-mode differentiation over a recorded tape of tensor primitives.
//!
//! The primitive set is deliberately small: add, sub, mul, matmul, row-bias
//! add, tanh, silu, sum, mean, squared norm, scale, column concat and column
//! slice, plus `detach` which passes the value through and blocks adjoints.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

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
    Detach,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    AddRow(usize, usize),
    Tanh(usize),
    Silu(usize),
    Sum(usize),
    Mean(usize),
    SquaredNorm(usize),
    Scale(usize, f64),
    Concat(Vec<usize>),
    Slice(usize, usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of primitive applications. Nodes are appended in evaluation
/// order, so walking the vector backwards is a reverse topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Identity on values; no adjoint flows back through the result.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::Detach)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a.0, b.0)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a.0, b.0)))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = self.value(x).add_row(self.value(bias))?;
        Ok(self.push(v, Op::AddRow(x.0, bias.0)))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x.0))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(silu);
        self.push(v, Op::Silu(x.0))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        self.push(v, Op::Mean(x.0))
    }

    pub fn squared_norm(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).squared_norm());
        self.push(v, Op::SquaredNorm(x.0))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x).scale(k);
        self.push(v, Op::Scale(x.0, k))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_cols(&vals)?;
        Ok(self.push(v, Op::Concat(parts.iter().map(|p| p.0).collect())))
    }

    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x).slice_cols(start, end)?;
        Ok(self.push(v, Op::Slice(x.0, start, end)))
    }

    /// Propagates adjoints from a scalar `loss` back to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.value(loss);
        if !root.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Detach => {}
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, &g)?;
                    accumulate(&mut adj, *b, &g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *a, &g)?;
                    accumulate(&mut adj, *b, &g.scale(-1.0))?;
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(&self.nodes[*b].value)?;
                    let gb = g.mul(&self.nodes[*a].value)?;
                    accumulate(&mut adj, *a, &ga)?;
                    accumulate(&mut adj, *b, &gb)?;
                }
                Op::MatMul(a, b) => {
                    let ga = gemm(&g, false, &self.nodes[*b].value, true)?;
                    let gb = gemm(&self.nodes[*a].value, true, &g, false)?;
                    accumulate(&mut adj, *a, &ga)?;
                    accumulate(&mut adj, *b, &gb)?;
                }
                Op::AddRow(x, bias) => {
                    let gb = g.sum_rows();
                    accumulate(&mut adj, *x, &g)?;
                    accumulate(&mut adj, *bias, &gb)?;
                }
                Op::Tanh(x) => {
                    let gx = g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y))?;
                    accumulate(&mut adj, *x, &gx)?;
                }
                Op::Silu(x) => {
                    let gx = g.zip_map(&self.nodes[*x].value, |gi, xi| gi * silu_grad(xi))?;
                    accumulate(&mut adj, *x, &gx)?;
                }
                Op::Sum(x) => {
                    let s = g.as_scalar()?;
                    let xv = &self.nodes[*x].value;
                    accumulate(&mut adj, *x, &Tensor::filled(xv.rows(), xv.cols(), s))?;
                }
                Op::Mean(x) => {
                    let xv = &self.nodes[*x].value;
                    let s = g.as_scalar()? / xv.len() as f64;
                    accumulate(&mut adj, *x, &Tensor::filled(xv.rows(), xv.cols(), s))?;
                }
                Op::SquaredNorm(x) => {
                    let s = g.as_scalar()?;
                    let gx = self.nodes[*x].value.scale(2.0 * s);
                    accumulate(&mut adj, *x, &gx)?;
                }
                Op::Scale(x, k) => {
                    accumulate(&mut adj, *x, &g.scale(*k))?;
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let c = self.nodes[p].value.cols();
                        let gp = g.slice_cols(start, start + c)?;
                        accumulate(&mut adj, p, &gp)?;
                        start += c;
                    }
                }
                Op::Slice(x, start, end) => {
                    let xv = &self.nodes[*x].value;
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        gx.row_slice_mut(r)[*start..*end].copy_from_slice(g.row_slice(r));
                    }
                    accumulate(&mut adj, *x, &gx)?;
                }
            }
            adj[i] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }
}

fn accumulate(adj: &mut [Option<Tensor>], idx: usize, g: &Tensor) -> Result<()> {
    match &mut adj[idx] {
        Some(acc) => acc.add_assign(g),
        slot @ None => {
            *slot = Some(g.clone());
            Ok(())
        }
    }
}

/// Per-node adjoints after a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `d loss / d v`, or `None` when no adjoint reached `v`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but materializes zeros shaped like `v`.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let val = tape.value(v);
                Tensor::new(val.shape().to_vec(), vec![0.0; val.len()])
                    .expect("shape of an existing node")
            }
        }
    }
}

/// Evaluates a scalar loss built on a fresh tape and returns its value and the
/// gradient with respect to each of `params`.
pub fn grad<F>(params: &[Tensor], f: F) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss).as_scalar()?;
    let grads = tape.backward(loss)?;
    Ok((value, vars.iter().map(|v| grads.wrt(&tape, *v)).collect()))
}
