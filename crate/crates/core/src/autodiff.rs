//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every op evaluates eagerly and appends a node; node ids are handed out in
//! creation order, so the tape is always topologically sorted and
//! [`Tape::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Tape`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[n, m] + [m]`, bias broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Relu(Var),
    Elu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols { src: Var, start: usize },
    GatherRows { table: Var, index: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Relu(..) => "relu",
            Op::Elu(..) => "elu",
            Op::Gelu(..) => "gelu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Mse(..) => "mse",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MatMul(a, b) | Op::Mse(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Elu(a)
            | Op::Gelu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::ConcatCols(parts) => parts.clone(),
            Op::SliceCols { src, .. } => vec![*src],
            Op::GatherRows { table, .. } => vec![*table],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// ELU with α = 1.
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Exact GELU: `x · Φ(x) = 0.5 · x · (1 + erf(x / √2))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// `d/dx [x · Φ(x)] = Φ(x) + x · φ(x)`.
fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it participates in gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone().with_grad())
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Adds a length-`m` vector to every row of an `[n, m]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        let (_, m) = x.as_matrix("add_row")?;
        if b.numel() != m || b.shape().len() != 1 {
            return Err(self.shape_err("add_row", a, bias));
        }
        let mut out = x.clone();
        out.set_requires_grad(false);
        for row in out.data_mut().chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(elu);
        self.push(v, Op::Elu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::scalar(x.sum() / x.numel() as f64);
        self.push(v, Op::Mean(a))
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.expect_same_shape(y, "mse")?;
        let s: f64 = x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)).sum();
        let v = Tensor::scalar(s / x.numel() as f64);
        Ok(self.push(v, Op::Mse(a, b)))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat_cols: no inputs"));
        };
        let (rows, _) = self.value(first).as_matrix("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).as_matrix("concat_cols")?;
            if r != rows {
                return Err(self.shape_err("concat_cols", first, p));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..rows {
                out[i * total + offset..i * total + offset + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let v = Tensor::matrix(rows, total, out)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).as_matrix("slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: vec![rows, cols],
                rhs: vec![start, start + len],
            });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows * len);
        for i in 0..rows {
            out.extend_from_slice(&src[i * cols + start..i * cols + start + len]);
        }
        let v = Tensor::matrix(rows, len, out)?;
        Ok(self.push(v, Op::SliceCols { src: a, start }))
    }

    /// Embedding lookup: row `index[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let v = self.value(table).select_rows(index)?;
        Ok(self.push(
            v,
            Op::GatherRows {
                table,
                index: index.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let send = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| -> Result<()> {
            match &mut grads[v.0] {
                Some(acc) => acc.accumulate(&t),
                slot => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    send(*a, g.clone(), grads)?;
                }
                if wants(*b) {
                    send(*b, g.clone(), grads)?;
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    send(*a, g.clone(), grads)?;
                }
                if wants(*b) {
                    send(*b, g.scale(-1.0), grads)?;
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    send(*a, g.zip_map(y, "mul_backward", |gv, yv| gv * yv)?, grads)?;
                }
                if wants(*b) {
                    send(*b, g.zip_map(x, "mul_backward", |gv, xv| gv * xv)?, grads)?;
                }
            }
            Op::AddRow(a, bias) => {
                if wants(*a) {
                    send(*a, g.clone(), grads)?;
                }
                if wants(*bias) {
                    let m = g.cols();
                    let mut acc = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (s, &v) in acc.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    send(*bias, Tensor::vector(acc)?, grads)?;
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    send(*a, g.scale(*s), grads)?;
                }
            }
            Op::AddScalar(a) => {
                if wants(*a) {
                    send(*a, g.clone(), grads)?;
                }
            }
            Op::MatMul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (n, k) = x.as_matrix("matmul_backward")?;
                let (_, m) = y.as_matrix("matmul_backward")?;
                if wants(*a) {
                    let mut out = vec![0.0; n * k];
                    gemm_nt(g.data(), y.data(), &mut out, n, m, k);
                    send(*a, Tensor::matrix(n, k, out)?, grads)?;
                }
                if wants(*b) {
                    let mut out = vec![0.0; k * m];
                    gemm_tn(x.data(), g.data(), &mut out, n, k, m);
                    send(*b, Tensor::matrix(k, m, out)?, grads)?;
                }
            }
            Op::Relu(a) | Op::Elu(a) | Op::Gelu(a) | Op::Exp(a) | Op::Log(a) => {
                if wants(*a) {
                    let x = self.value(*a);
                    let d = match &node.op {
                        Op::Relu(_) => g.zip_map(x, "relu_backward", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?,
                        Op::Elu(_) => g.zip_map(x, "elu_backward", |gv, xv| gv * elu_grad(xv))?,
                        Op::Gelu(_) => g.zip_map(x, "gelu_backward", |gv, xv| gv * gelu_grad(xv))?,
                        Op::Exp(_) => g.zip_map(&node.value, "exp_backward", |gv, ev| gv * ev)?,
                        _ => g.zip_map(x, "log_backward", |gv, xv| gv / xv)?,
                    };
                    send(*a, d, grads)?;
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                if wants(*a) {
                    let x = self.value(*a);
                    let gs = g.item()?;
                    let scale = if matches!(node.op, Op::Mean(_)) {
                        gs / x.numel() as f64
                    } else {
                        gs
                    };
                    send(*a, Tensor::full(x.shape(), scale), grads)?;
                }
            }
            Op::Mse(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let c = 2.0 * g.item()? / x.numel() as f64;
                let diff = x.zip_map(y, "mse_backward", |p, q| c * (p - q))?;
                if wants(*b) {
                    send(*b, diff.scale(-1.0), grads)?;
                }
                if wants(*a) {
                    send(*a, diff, grads)?;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if wants(p) {
                        let mut out = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            out.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        send(p, Tensor::matrix(rows, w, out)?, grads)?;
                    }
                    offset += w;
                }
            }
            Op::SliceCols { src, start } => {
                if wants(*src) {
                    let x = self.value(*src);
                    let (rows, cols) = x.as_matrix("slice_cols_backward")?;
                    let len = g.cols();
                    let mut out = vec![0.0; rows * cols];
                    for i in 0..rows {
                        out[i * cols + start..i * cols + start + len].copy_from_slice(g.row(i));
                    }
                    send(*src, Tensor::matrix(rows, cols, out)?, grads)?;
                }
            }
            Op::GatherRows { table, index } => {
                if wants(*table) {
                    let t = self.value(*table);
                    let (rows, cols) = t.as_matrix("gather_rows_backward")?;
                    let mut out = vec![0.0; rows * cols];
                    for (i, &r) in index.iter().enumerate() {
                        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    send(*table, Tensor::matrix(rows, cols, out)?, grads)?;
                }
            }
        }
        Ok(())
    }

    /// Name of the op that produced `v`; handy in diagnostics.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

/// Evaluates a scalar function built on a fresh tape and returns its value
/// together with the gradient for every parameter tensor.
pub fn forward_backward<F>(f: F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).item().map_err(|_| Error::NonScalar(tape.value(out).shape().to_vec()))?;
    let grads = tape.backward(out)?;
    let per_param = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect();
    Ok((value, per_param))
}

/// Max over coordinates of `|ad − fd| / max(|ad|, |fd|, 1e-6)`, with `fd` the central
/// difference. The floor keeps exactly-zero and vanishing gradients from dividing by zero.
pub fn grad_check_params<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::invalid("grad_check: step must be positive"));
    }
    let (_, analytic) = forward_backward(&f, params)?;
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.numel() {
            let orig = p.data()[j];
            probe[pi].data_mut()[j] = orig + step;
            let up = eval(&probe)?;
            probe[pi].data_mut()[j] = orig - step;
            let down = eval(&probe)?;
            probe[pi].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * step);
            let ad = analytic[pi].data()[j];
            worst = worst.max((ad - fd).abs() / fd.abs().max(ad.abs()).max(1e-6));
        }
    }
    Ok(worst)
}

/// Single-tensor form of [`grad_check_params`].
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_params(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), step)
}
