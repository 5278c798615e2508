//! Dense tensors and a Wengert tape for reverse-mode differentiation.
//!
//! Tensors are immutable row-major `f64` buffers. All differentiable
//! computation goes through a [`Tape`]: operations append nodes recording
//! their inputs and return [`Var`] handles, and [`Tape::backward`] replays
//! the tape once in reverse, accumulating gradients into every node that
//! was registered as a parameter. Multiple uses of the same parameter sum
//! their gradients, which is what weight tying and recurrent reuse need.

use crate::error::{Error, Result};

/// Dense real-valued array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dim(format!("zero dimension in shape {:?}", shape)));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar payload; errors when the tensor is not a single element.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Dim(format!("expected scalar, shape is {:?}", self.shape)))
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Dot(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Recip(Var),
    Concat(Var, Var),
    Sum(Var),
    Row(Var, usize),
    Get(Var, usize),
    Stack(Vec<Var>),
    Softmax(Var),
    LogSoftmax(Var),
    AddScalar(Var, Var),
    MulScalar(Var, Var),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of forward operations. Inputs always precede their
/// consumers, so a single reverse sweep visits each node exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Parameters untouched by
    /// the loss get a zero tensor of the right shape lazily via
    /// [`Gradients::grad_or_zeros`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn grad_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape),
        }
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

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Register a constant input (receives no gradient).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    /// Register a tracked parameter (gradient accumulated on backward).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = matmul_raw(ta, tb)?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || ta.shape.len() != 1 {
            return Err(Error::Dim(format!(
                "dot needs equal-length vectors, got {:?} and {:?}",
                ta.shape, tb.shape
            )));
        }
        let v = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).sum();
        Ok(self.push(Op::Dot(a, b), Tensor::scalar(v)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = zip_same(self.value(a), self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = zip_same(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = zip_same(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|x| x * c).collect() };
        self.push(Op::Scale(a, c), out)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|x| x + c).collect() };
        self.push(Op::AddConst(a), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|x| x.tanh()).collect() };
        self.push(Op::Tanh(a), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect(),
        };
        self.push(Op::Sigmoid(a), out)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|x| x.sqrt()).collect() };
        self.push(Op::Sqrt(a), out)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|x| 1.0 / x).collect() };
        self.push(Op::Recip(a), out)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 1 || tb.shape.len() != 1 {
            return Err(Error::Dim("concat expects vectors".into()));
        }
        let mut data = ta.data.clone();
        data.extend_from_slice(&tb.data);
        let out = Tensor::vector(data);
        Ok(self.push(Op::Concat(a, b), out))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).data.iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(v))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape.len() != 2 {
            return Err(Error::Dim(format!("row() expects a matrix, got {:?}", t.shape)));
        }
        if i >= t.shape[0] {
            return Err(Error::Arg(format!("row {} out of range for {:?}", i, t.shape)));
        }
        let c = t.shape[1];
        let out = Tensor::vector(t.data[i * c..(i + 1) * c].to_vec());
        Ok(self.push(Op::Row(a, i), out))
    }

    /// Element `i` of a vector as a scalar.
    pub fn get(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        if i >= t.data.len() {
            return Err(Error::Arg(format!("index {} out of range for {:?}", i, t.shape)));
        }
        let out = Tensor::scalar(t.data[i]);
        Ok(self.push(Op::Get(a, i), out))
    }

    /// Stack scalar vars into a vector.
    pub fn stack(&mut self, vs: &[Var]) -> Result<Var> {
        if vs.is_empty() {
            return Err(Error::Arg("stack of zero scalars".into()));
        }
        let mut data = Vec::with_capacity(vs.len());
        for &v in vs {
            data.push(self.value(v).item()?);
        }
        let out = Tensor::vector(data);
        Ok(self.push(Op::Stack(vs.to_vec()), out))
    }

    /// Numerically stable softmax (max-subtraction) over a vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Arg("softmax of empty input".into()));
        }
        let out = Tensor { shape: t.shape.clone(), data: softmax_raw(&t.data) };
        Ok(self.push(Op::Softmax(a), out))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Arg("log_softmax of empty input".into()));
        }
        let m = t.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + t.data.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|x| x - lse).collect() };
        Ok(self.push(Op::LogSoftmax(a), out))
    }

    /// Tensor plus a broadcast scalar var.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let t = self.value(a);
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|x| x + sv).collect() };
        Ok(self.push(Op::AddScalar(a, s), out))
    }

    /// Tensor times a broadcast scalar var.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let t = self.value(a);
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|x| x * sv).collect() };
        Ok(self.push(Op::MulScalar(a, s), out))
    }

    /// gain * (x - mean) / sqrt(var + eps) + bias, over a vector of length >= 2.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).len();
        if n < 2 {
            return Err(Error::Arg("layer_norm needs at least 2 elements".into()));
        }
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::Dim("layer_norm gain/bias length mismatch".into()));
        }
        let total = self.sum(x);
        let neg_mean = self.scale(total, -1.0 / n as f64);
        let centered = self.add_scalar(x, neg_mean)?;
        let sq = self.mul(centered, centered)?;
        let sqsum = self.sum(sq);
        let var = self.scale(sqsum, 1.0 / n as f64);
        let var_eps = self.add_const(var, eps);
        let std = self.sqrt(var_eps);
        let inv = self.recip(std);
        let normed = self.mul_scalar(centered, inv)?;
        let scaled = self.mul(gain, normed)?;
        self.add(scaled, bias)
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate across every
    /// use of a var; parameters the loss never touches stay `None`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_vjp(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn apply_vjp(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (ga, gb) = matmul_vjp(ta, tb, g);
                accumulate(grads, a.0, ga);
                accumulate(grads, b.0, gb);
            }
            Op::Dot(a, b) => {
                let gv = g.data[0];
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = Tensor::vector(tb.data.iter().map(|x| gv * x).collect());
                let gb = Tensor::vector(ta.data.iter().map(|x| gv * x).collect());
                accumulate(grads, a.0, ga);
                accumulate(grads, b.0, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, a.0, g.clone());
                accumulate(grads, b.0, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, a.0, g.clone());
                let gb = Tensor { shape: g.shape.clone(), data: g.data.iter().map(|x| -x).collect() };
                accumulate(grads, b.0, gb);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().zip(&tb.data).map(|(gx, x)| gx * x).collect(),
                };
                let gb = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().zip(&ta.data).map(|(gx, x)| gx * x).collect(),
                };
                accumulate(grads, a.0, ga);
                accumulate(grads, b.0, gb);
            }
            Op::Scale(a, c) => {
                let ga = Tensor { shape: g.shape.clone(), data: g.data.iter().map(|x| x * c).collect() };
                accumulate(grads, a.0, ga);
            }
            Op::AddConst(a) => accumulate(grads, a.0, g.clone()),
            Op::Tanh(a) => {
                let ga = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().zip(&y.data).map(|(gx, t)| gx * (1.0 - t * t)).collect(),
                };
                accumulate(grads, a.0, ga);
            }
            Op::Sigmoid(a) => {
                let ga = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().zip(&y.data).map(|(gx, s)| gx * s * (1.0 - s)).collect(),
                };
                accumulate(grads, a.0, ga);
            }
            Op::Sqrt(a) => {
                let ga = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().zip(&y.data).map(|(gx, s)| gx / (2.0 * s)).collect(),
                };
                accumulate(grads, a.0, ga);
            }
            Op::Recip(a) => {
                let ga = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().zip(&y.data).map(|(gx, r)| -gx * r * r).collect(),
                };
                accumulate(grads, a.0, ga);
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                accumulate(grads, a.0, Tensor::vector(g.data[..na].to_vec()));
                accumulate(grads, b.0, Tensor::vector(g.data[na..].to_vec()));
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                let ga = Tensor { shape: ta.shape.clone(), data: vec![g.data[0]; ta.len()] };
                accumulate(grads, a.0, ga);
            }
            Op::Row(a, i) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.shape());
                let c = ta.shape[1];
                ga.data[i * c..(i + 1) * c].copy_from_slice(&g.data);
                accumulate(grads, a.0, ga);
            }
            Op::Get(a, i) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.shape());
                ga.data[*i] = g.data[0];
                accumulate(grads, a.0, ga);
            }
            Op::Stack(vs) => {
                for (k, v) in vs.iter().enumerate() {
                    accumulate(grads, v.0, Tensor::scalar(g.data[k]));
                }
            }
            Op::Softmax(a) => {
                let s = &y.data;
                let gy: f64 = g.data.iter().zip(s.iter()).map(|(gx, sx)| gx * sx).sum();
                let ga = Tensor {
                    shape: g.shape.clone(),
                    data: g.data.iter().zip(s.iter()).map(|(gx, sx)| sx * (gx - gy)).collect(),
                };
                accumulate(grads, a.0, ga);
            }
            Op::LogSoftmax(a) => {
                let gsum: f64 = g.data.iter().sum();
                let ga = Tensor {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(&y.data)
                        .map(|(gx, lp)| gx - lp.exp() * gsum)
                        .collect(),
                };
                accumulate(grads, a.0, ga);
            }
            Op::AddScalar(a, s) => {
                accumulate(grads, a.0, g.clone());
                accumulate(grads, s.0, Tensor::scalar(g.data.iter().sum()));
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).data[0];
                let ta = self.value(*a);
                let ga = Tensor { shape: g.shape.clone(), data: g.data.iter().map(|x| x * sv).collect() };
                let gs: f64 = g.data.iter().zip(&ta.data).map(|(gx, x)| gx * x).sum();
                accumulate(grads, a.0, ga);
                accumulate(grads, s.0, Tensor::scalar(gs));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
    match &mut grads[i] {
        Some(existing) => {
            for (e, x) in existing.data.iter_mut().zip(&g.data) {
                *e += x;
            }
        }
        slot => *slot = Some(g),
    }
}

fn zip_same(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::Dim(format!("{}: {:?} vs {:?}", what, a.shape, b.shape)));
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

/// Matrix product; vectors on the right are treated as columns.
pub fn matmul_raw(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match (a.shape.len(), b.shape.len()) {
        (2, 1) => {
            let (m, k) = (a.shape[0], a.shape[1]);
            if k != b.shape[0] {
                return Err(Error::Dim(format!("matmul {:?} x {:?}", a.shape, b.shape)));
            }
            let mut out = vec![0.0; m];
            for i in 0..m {
                let row = &a.data[i * k..(i + 1) * k];
                out[i] = row.iter().zip(&b.data).map(|(x, y)| x * y).sum();
            }
            Ok(Tensor::vector(out))
        }
        (2, 2) => {
            let (m, k) = (a.shape[0], a.shape[1]);
            let (k2, n) = (b.shape[0], b.shape[1]);
            if k != k2 {
                return Err(Error::Dim(format!("matmul {:?} x {:?}", a.shape, b.shape)));
            }
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let av = a.data[i * k + p];
                    let brow = &b.data[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            Tensor::matrix(m, n, out)
        }
        _ => Err(Error::Dim(format!("matmul {:?} x {:?}", a.shape, b.shape))),
    }
}

fn matmul_vjp(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    if b.shape.len() == 1 {
        // y[m] = A[m,k] b[k]
        let (m, k) = (a.shape[0], a.shape[1]);
        let mut ga = vec![0.0; m * k];
        for i in 0..m {
            let gi = g.data[i];
            for p in 0..k {
                ga[i * k + p] = gi * b.data[p];
            }
        }
        let mut gb = vec![0.0; k];
        for i in 0..m {
            let gi = g.data[i];
            let row = &a.data[i * k..(i + 1) * k];
            for (gbp, av) in gb.iter_mut().zip(row) {
                *gbp += gi * av;
            }
        }
        (
            Tensor { shape: vec![m, k], data: ga },
            Tensor::vector(gb),
        )
    } else {
        let (m, k) = (a.shape[0], a.shape[1]);
        let n = b.shape[1];
        // gA = g B^T, gB = A^T g
        let mut ga = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                let grow = &g.data[i * n..(i + 1) * n];
                let brow = &b.data[p * n..(p + 1) * n];
                ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        let mut gb = vec![0.0; k * n];
        for i in 0..m {
            let grow = &g.data[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a.data[i * k + p];
                let gbrow = &mut gb[p * n..(p + 1) * n];
                for (o, gv) in gbrow.iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
        (
            Tensor { shape: vec![m, k], data: ga },
            Tensor { shape: vec![k, n], data: gb },
        )
    }
}

/// Stable softmax on a raw slice.
pub fn softmax_raw(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Stable log-softmax on a raw slice.
pub fn log_softmax_raw(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{} vs {} (tol {})", a, b, tol);
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i2 = t.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = t.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_row_times_column() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = t.leaf(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        // brute-force oracle: independent entry-by-entry triple loop
        let mut rng_state = 12345u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng_state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        let a_data: Vec<f64> = (0..12).map(|_| next()).collect();
        let b_data: Vec<f64> = (0..8).map(|_| next()).collect();
        let a = Tensor::matrix(3, 4, a_data.clone()).unwrap();
        let b = Tensor::matrix(4, 2, b_data.clone()).unwrap();
        let y = matmul_raw(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a_data[i * 4 + k] * b_data[k * 2 + j];
                }
                assert_close(y.data()[i * 2 + j], acc, 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        let err = matmul_raw(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{}", err);
    }

    #[test]
    fn softmax_symmetry_and_values() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0, 0.0]));
        let y = t.softmax(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);

        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = t.softmax(x).unwrap();
        let v = t.value(y).data();
        assert_close(v[0], 0.09003, 1e-4);
        assert_close(v[1], 0.24473, 1e-4);
        assert_close(v[2], 0.66524, 1e-4);
        assert_close(v.iter().sum::<f64>(), 1.0, 1e-6);
    }

    #[test]
    fn softmax_shift_invariant_no_overflow() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1000.0, 1000.0]));
        let y = t.softmax(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);

        let a = softmax_raw(&[1.0, 2.0, 3.0]);
        let b = softmax_raw(&[1001.0, 1002.0, 1003.0]);
        for (x, y) in a.iter().zip(&b) {
            assert_close(*x, *y, 1e-9);
        }
    }

    #[test]
    fn softmax_empty_is_error() {
        let mut t = Tape::new();
        let x = t.push(Op::Leaf, Tensor { shape: vec![0], data: vec![] });
        assert!(t.softmax(x).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let gain = t.leaf(Tensor::vector(vec![1.0; 4]));
        let bias = t.leaf(Tensor::vector(vec![0.0; 4]));
        let x = t.leaf(Tensor::vector(vec![1.0, 1.0, 1.0, 1.0]));
        let y = t.layer_norm(x, gain, bias, 1e-5).unwrap();
        for v in t.value(y).data() {
            assert_close(*v, 0.0, 1e-9);
        }

        // mean 0, std 1 by hand
        let gain2 = t.leaf(Tensor::vector(vec![1.0, 1.0]));
        let bias2 = t.leaf(Tensor::vector(vec![0.0, 0.0]));
        let x2 = t.leaf(Tensor::vector(vec![-1.0, 1.0]));
        let y2 = t.layer_norm(x2, gain2, bias2, 1e-12).unwrap();
        assert_close(t.value(y2).data()[0], -1.0, 1e-6);
        assert_close(t.value(y2).data()[1], 1.0, 1e-6);

        // gain 0 collapses to bias
        let gain3 = t.leaf(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let bias3 = t.leaf(Tensor::vector(vec![7.0, 8.0, 9.0]));
        let x3 = t.leaf(Tensor::vector(vec![0.3, -2.0, 5.5]));
        let y3 = t.layer_norm(x3, gain3, bias3, 1e-5).unwrap();
        assert_eq!(t.value(y3).data(), &[7.0, 8.0, 9.0]);
    }

    #[test]
    fn layer_norm_rejects_short_input() {
        let mut t = Tape::new();
        let g = t.leaf(Tensor::vector(vec![1.0]));
        let b = t.leaf(Tensor::vector(vec![0.0]));
        let x = t.leaf(Tensor::vector(vec![3.0]));
        assert!(t.layer_norm(x, g, b, 1e-5).is_err());
    }

    #[test]
    fn elementwise_basics() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::vector(vec![0.0]));
        let s = t.sigmoid(z);
        assert_eq!(t.value(s).data(), &[0.5]);
        let th = t.tanh(z);
        assert_eq!(t.value(th).data(), &[0.0]);
        let a = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = t.leaf(Tensor::vector(vec![3.0]));
        let c = t.concat(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_square() {
        // loss = x^2 at x=3 -> grad 6
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn unused_param_has_no_grad() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let unused = t.param(Tensor::vector(vec![1.0, 2.0]));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.grad(unused).is_none());
        assert_eq!(g.grad_or_zeros(unused, &[2]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_tanh_matmul_matches_finite_differences() {
        // loss = sum(tanh(Wx)): central finite differences at step 1e-4
        let w_data = vec![0.3, -0.5, 0.8, 0.1, -0.2, 0.7];
        let x_data = vec![0.4, -0.9];
        let f = |w: &[f64]| -> f64 {
            let mut acc = 0.0;
            for i in 0..3 {
                let s = w[i * 2] * x_data[0] + w[i * 2 + 1] * x_data[1];
                acc += s.tanh();
            }
            acc
        };
        let mut t = Tape::new();
        let w = t.param(Tensor::matrix(3, 2, w_data.clone()).unwrap());
        let x = t.leaf(Tensor::vector(x_data.clone()));
        let wx = t.matmul(w, x).unwrap();
        let th = t.tanh(wx);
        let loss = t.sum(th);
        let g = t.backward(loss).unwrap();
        let gw = g.grad(w).unwrap();
        let h = 1e-4;
        for i in 0..6 {
            let mut wp = w_data.clone();
            let mut wm = w_data.clone();
            wp[i] += h;
            wm[i] -= h;
            let fd = (f(&wp) - f(&wm)) / (2.0 * h);
            let analytic = gw.data()[i];
            let denom = fd.abs().max(analytic.abs()).max(1e-8);
            assert!((fd - analytic).abs() / denom < 1e-4);
        }
    }

    #[test]
    fn gradient_accumulates_across_reuse() {
        // loss = x*x + 3x uses x three times
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(2.0));
        let sq = t.mul(x, x).unwrap();
        let tx = t.scale(x, 3.0);
        let loss = t.add(sq, tx).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn tape_replay_is_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let x = t.param(Tensor::vector(vec![0.25, -0.75, 1.5]));
            let s = t.sigmoid(x);
            let th = t.tanh(s);
            let loss = t.sum(th);
            let g = t.backward(loss).unwrap();
            g.grad(x).unwrap().data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "identical inputs must give bit-identical gradients");
    }
}
