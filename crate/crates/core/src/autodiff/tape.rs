use super::{AutodiffError, Tensor};

/// Floor applied to probabilities before any logarithm.
pub const PROB_EPSILON: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation selector for [`Tape::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Transpose,
    Relu,
    Exp,
    Log,
    Sigmoid,
    Softmax { temperature: f64 },
    LogSoftmax { temperature: f64 },
    Sum,
    Mean,
    SumAxis { axis: usize },
    MeanAxis { axis: usize },
    CrossEntropyRows,
    KlDivRows,
    SquaredErrorRows,
    BinaryCrossEntropy,
    Scale { factor: f64 },
    Concat { axis: usize },
    Outer,
    StopGradient,
    GradReverse { lambda: f64 },
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softmax(Var, f64),
    LogSoftmax(Var, f64),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    CrossEntropy(Var, Var),
    KlDiv(Var, Var),
    SquaredError(Var, Var),
    Bce(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>, usize),
    Outer(Var, Var),
    StopGradient,
    GradReverse(Var, f64),
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Ordered record of a forward pass.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and a reverse scan is a valid topological order for backpropagation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// Layout of a broadcast binary op: per-output flat index into each input.
// `None` means the input already has the output shape.
struct Broadcast {
    shape: Vec<usize>,
    lhs: Option<Vec<usize>>,
    rhs: Option<Vec<usize>>,
}

impl Broadcast {
    fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self, AutodiffError> {
        if a == b {
            return Ok(Self {
                shape: a.to_vec(),
                lhs: None,
                rhs: None,
            });
        }
        let n = a.len().max(b.len());
        let mut shape = Vec::with_capacity(n);
        for i in 0..n {
            let da = dim_from_right(a, n - 1 - i);
            let db = dim_from_right(b, n - 1 - i);
            let d = if da == db || db == 1 {
                da
            } else if da == 1 {
                db
            } else {
                return Err(AutodiffError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                });
            };
            shape.push(d);
        }
        let lhs = (a != shape.as_slice()).then(|| broadcast_map(a, &shape));
        let rhs = (b != shape.as_slice()).then(|| broadcast_map(b, &shape));
        Ok(Self { shape, lhs, rhs })
    }

    #[inline]
    fn lhs_at(&self, i: usize) -> usize {
        self.lhs.as_ref().map_or(i, |m| m[i])
    }

    #[inline]
    fn rhs_at(&self, i: usize) -> usize {
        self.rhs.as_ref().map_or(i, |m| m[i])
    }
}

fn dim_from_right(shape: &[usize], k: usize) -> usize {
    if k < shape.len() {
        shape[shape.len() - 1 - k]
    } else {
        1
    }
}

fn broadcast_map(input: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let off = n - input.len();
    let mut strides = vec![0usize; n];
    let mut s = 1;
    for i in (0..input.len()).rev() {
        if input[i] != 1 {
            strides[i + off] = s;
        }
        s *= input[i];
    }
    let total: usize = out.iter().product();
    let mut idx = vec![0usize; n];
    let mut cur = 0usize;
    let mut map = Vec::with_capacity(total);
    for _ in 0..total {
        map.push(cur);
        for d in (0..n).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < out[d] {
                break;
            }
            cur -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    map
}

fn clamp_prob(p: f64) -> f64 {
    p.max(PROB_EPSILON)
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// Rowwise log-softmax of `z / temperature` over the trailing axis.
fn log_softmax_rows(z: &Tensor, temperature: f64) -> Vec<f64> {
    let c = z.cols();
    let mut out = Vec::with_capacity(z.numel());
    for row in z.data().chunks(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) / temperature;
        let lse = m + row
            .iter()
            .map(|&v| (v / temperature - m).exp())
            .sum::<f64>()
            .ln();
        out.extend(row.iter().map(|&v| v / temperature - lse));
    }
    out
}

fn row_shape(shape: &[usize]) -> Vec<usize> {
    match shape.len() {
        0 | 1 => Vec::new(),
        _ => shape[..shape.len() - 1].to_vec(),
    }
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

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Accumulated gradient, present once a backward pass has reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Smallest distance of any ReLU input from its kink at zero.
    pub fn min_kink_distance(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(
                    self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .fold(f64::INFINITY, |m, v| m.min(v.abs())),
                ),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(value, op, rg)
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        let layout = Broadcast::new(name, va.shape(), vb.shape())?;
        let n: usize = layout.shape.iter().product();
        let (da, db) = (va.data(), vb.data());
        let data: Vec<f64> = (0..n)
            .map(|i| f(da[layout.lhs_at(i)], db[layout.rhs_at(i)]))
            .collect();
        let value = Tensor::new(layout.shape, data)?;
        Ok(self.binary(a, b, value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (va.data(), vb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.binary(a, b, value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let v = self.value(x);
        if v.ndim() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "transpose",
                reason: format!("expected a 2-D tensor, got shape {:?}", v.shape()),
            });
        }
        let (m, n) = (v.shape()[0], v.shape()[1]);
        let d = v.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.unary(x, value, Op::Transpose(x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.unary(x, value, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.unary(x, value, Op::Exp(x))
    }

    /// Natural log with the argument floored at [`PROB_EPSILON`].
    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| clamp_prob(v).ln());
        self.unary(x, value, Op::Log(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(stable_sigmoid);
        self.unary(x, value, Op::Sigmoid(x))
    }

    fn check_temperature(op: &'static str, t: f64) -> Result<(), AutodiffError> {
        if t > 0.0 && t.is_finite() {
            Ok(())
        } else {
            Err(AutodiffError::InvalidArgument {
                op,
                reason: format!("temperature must be positive, got {t}"),
            })
        }
    }

    /// Softmax of `x / temperature` over the trailing axis.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var, AutodiffError> {
        Self::check_temperature("softmax", temperature)?;
        let v = self.value(x);
        let data = log_softmax_rows(v, temperature)
            .into_iter()
            .map(f64::exp)
            .collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.unary(x, value, Op::Softmax(x, temperature)))
    }

    pub fn log_softmax(&mut self, x: Var, temperature: f64) -> Result<Var, AutodiffError> {
        Self::check_temperature("log_softmax", temperature)?;
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), log_softmax_rows(v, temperature))?;
        Ok(self.unary(x, value, Op::LogSoftmax(x, temperature)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.unary(x, Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.unary(x, Tensor::scalar(s), Op::Mean(x))
    }

    /// Sums a 1-D or 2-D tensor along `axis`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let v = self.value(x);
        let value = match (v.ndim(), axis) {
            (1, 0) => Tensor::scalar(v.data().iter().sum()),
            (2, 0) => {
                let (m, n) = (v.shape()[0], v.shape()[1]);
                let mut out = vec![0.0; n];
                for i in 0..m {
                    for (o, &a) in out.iter_mut().zip(v.row(i)) {
                        *o += a;
                    }
                }
                Tensor::vector(out)
            }
            (2, 1) => Tensor::vector((0..v.rows()).map(|i| v.row(i).iter().sum()).collect()),
            _ => {
                return Err(AutodiffError::InvalidArgument {
                    op: "sum_axis",
                    reason: format!("axis {axis} invalid for shape {:?}", v.shape()),
                })
            }
        };
        Ok(self.unary(x, value, Op::SumAxis(x, axis)))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let extent = self.value(x).shape().get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / extent as f64))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// Per-row cross-entropy `-Σ_k t_k log softmax(z)_k` between logits and
    /// target distributions (one-hot or soft).
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: Var) -> Result<Var, AutodiffError> {
        self.same_shape("cross_entropy", logits, targets)?;
        let (z, t) = (self.value(logits), self.value(targets));
        let ls = log_softmax_rows(z, 1.0);
        let c = z.cols();
        let data: Vec<f64> = ls
            .chunks(c)
            .zip(t.data().chunks(c))
            .map(|(l, t)| -l.iter().zip(t).map(|(l, t)| l * t).sum::<f64>())
            .collect();
        let value = Tensor::new(row_shape(z.shape()), data)?;
        Ok(self.binary(logits, targets, value, Op::CrossEntropy(logits, targets)))
    }

    /// Mean over rows of [`Tape::cross_entropy_rows`].
    pub fn cross_entropy(&mut self, logits: Var, targets: Var) -> Result<Var, AutodiffError> {
        let rows = self.cross_entropy_rows(logits, targets)?;
        Ok(self.mean(rows))
    }

    /// Per-row `KL(p ‖ q)` between categorical distributions.
    pub fn kl_div_rows(&mut self, p: Var, q: Var) -> Result<Var, AutodiffError> {
        self.same_shape("kl_div", p, q)?;
        let (vp, vq) = (self.value(p), self.value(q));
        let c = vp.cols();
        let data: Vec<f64> = vp
            .data()
            .chunks(c)
            .zip(vq.data().chunks(c))
            .map(|(p, q)| {
                p.iter()
                    .zip(q)
                    .map(|(&p, &q)| p * (clamp_prob(p).ln() - clamp_prob(q).ln()))
                    .sum()
            })
            .collect();
        let value = Tensor::new(row_shape(vp.shape()), data)?;
        Ok(self.binary(p, q, value, Op::KlDiv(p, q)))
    }

    /// Per-row squared Euclidean distance.
    pub fn squared_error_rows(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("squared_error", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let c = va.cols();
        let data: Vec<f64> = va
            .data()
            .chunks(c)
            .zip(vb.data().chunks(c))
            .map(|(x, y)| x.iter().zip(y).map(|(x, y)| (x - y) * (x - y)).sum())
            .collect();
        let value = Tensor::new(row_shape(va.shape()), data)?;
        Ok(self.binary(a, b, value, Op::SquaredError(a, b)))
    }

    /// Elementwise binary cross-entropy of probabilities against targets in [0, 1].
    pub fn binary_cross_entropy(&mut self, probs: Var, targets: Var) -> Result<Var, AutodiffError> {
        self.same_shape("binary_cross_entropy", probs, targets)?;
        let (vp, vt) = (self.value(probs), self.value(targets));
        let data = vp
            .data()
            .iter()
            .zip(vt.data())
            .map(|(&p, &t)| -(t * clamp_prob(p).ln() + (1.0 - t) * clamp_prob(1.0 - p).ln()))
            .collect();
        let value = Tensor::new(vp.shape().to_vec(), data)?;
        Ok(self.binary(probs, targets, value, Op::Bce(probs, targets)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.unary(x, value, Op::Scale(x, factor))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// Concatenates 1-D tensors (axis 0) or 2-D tensors along rows (0) or columns (1).
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = match xs.first() {
            Some(&v) => self.value(v).shape().to_vec(),
            None => {
                return Err(AutodiffError::InvalidArgument {
                    op: "concat",
                    reason: "no inputs".into(),
                })
            }
        };
        let nd = first.len();
        if nd == 0 || nd > 2 || axis >= nd {
            return Err(AutodiffError::InvalidArgument {
                op: "concat",
                reason: format!("axis {axis} invalid for shape {first:?}"),
            });
        }
        for &v in &xs[1..] {
            let s = self.shape(v);
            let compatible = s.len() == nd && (0..nd).all(|d| d == axis || s[d] == first[d]);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let mut shape = first.clone();
        shape[axis] = xs.iter().map(|&v| self.shape(v)[axis]).sum();
        let data = if axis == 0 {
            xs.iter()
                .flat_map(|&v| self.value(v).data().iter().copied())
                .collect()
        } else {
            let rows = first[0];
            let mut data = Vec::with_capacity(shape.iter().product());
            for i in 0..rows {
                for &v in xs {
                    data.extend_from_slice(self.value(v).row(i));
                }
            }
            data
        };
        let value = Tensor::new(shape, data)?;
        let rg = xs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push(value, Op::Concat(xs.to_vec(), axis), rg))
    }

    /// Outer product. Two vectors `(F)`, `(K)` give `(F, K)`; two batches
    /// `(B, F)`, `(B, K)` give `(B, F·K)` with row `i` = flatten(a_i ⊗ b_i).
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        let (batch, f, k, shape) = match (sa.len(), sb.len()) {
            (1, 1) => (1, sa[0], sb[0], vec![sa[0], sb[0]]),
            (2, 2) if sa[0] == sb[0] => (sa[0], sa[1], sb[1], vec![sa[0], sa[1] * sb[1]]),
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "outer",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        let (da, db) = (va.data(), vb.data());
        let mut data = Vec::with_capacity(batch * f * k);
        for i in 0..batch {
            for fi in 0..f {
                let x = da[i * f + fi];
                data.extend(db[i * k..(i + 1) * k].iter().map(|y| x * y));
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.binary(a, b, value, Op::Outer(a, b)))
    }

    /// Identity forward; blocks every gradient toward `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// Identity forward; backward multiplies the incoming gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Var {
        let value = self.value(x).clone();
        self.unary(x, value, Op::GradReverse(x, lambda))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.unary(x, value, Op::Reshape(x)))
    }

    /// Generic entry point dispatching on [`OpKind`].
    pub fn apply(&mut self, kind: &OpKind, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let arity = match kind {
            OpKind::Concat { .. } => None,
            OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Div
            | OpKind::MatMul
            | OpKind::CrossEntropyRows
            | OpKind::KlDivRows
            | OpKind::SquaredErrorRows
            | OpKind::BinaryCrossEntropy
            | OpKind::Outer => Some(2),
            _ => Some(1),
        };
        if let Some(n) = arity {
            if inputs.len() != n {
                return Err(AutodiffError::InvalidArgument {
                    op: "apply",
                    reason: format!("{kind:?} takes {n} inputs, got {}", inputs.len()),
                });
            }
        }
        let x = inputs.first().copied().unwrap_or(Var(usize::MAX));
        let y = inputs.get(1).copied().unwrap_or(Var(usize::MAX));
        match *kind {
            OpKind::Add => self.add(x, y),
            OpKind::Sub => self.sub(x, y),
            OpKind::Mul => self.mul(x, y),
            OpKind::Div => self.div(x, y),
            OpKind::MatMul => self.matmul(x, y),
            OpKind::Transpose => self.transpose(x),
            OpKind::Relu => Ok(self.relu(x)),
            OpKind::Exp => Ok(self.exp(x)),
            OpKind::Log => Ok(self.log(x)),
            OpKind::Sigmoid => Ok(self.sigmoid(x)),
            OpKind::Softmax { temperature } => self.softmax(x, temperature),
            OpKind::LogSoftmax { temperature } => self.log_softmax(x, temperature),
            OpKind::Sum => Ok(self.sum(x)),
            OpKind::Mean => Ok(self.mean(x)),
            OpKind::SumAxis { axis } => self.sum_axis(x, axis),
            OpKind::MeanAxis { axis } => self.mean_axis(x, axis),
            OpKind::CrossEntropyRows => self.cross_entropy_rows(x, y),
            OpKind::KlDivRows => self.kl_div_rows(x, y),
            OpKind::SquaredErrorRows => self.squared_error_rows(x, y),
            OpKind::BinaryCrossEntropy => self.binary_cross_entropy(x, y),
            OpKind::Scale { factor } => Ok(self.scale(x, factor)),
            OpKind::Concat { axis } => self.concat(inputs, axis),
            OpKind::Outer => self.outer(x, y),
            OpKind::StopGradient => Ok(self.stop_gradient(x)),
            OpKind::GradReverse { lambda } => Ok(self.grad_reverse(x, lambda)),
        }
    }

    /// Backpropagates from a scalar `loss`, accumulating into every
    /// `requires_grad` node reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        self.backward_blocked(loss, &[])
    }

    /// Like [`Tape::backward`], but gradients are not accumulated into the
    /// `blocked` nodes. Values and gradients still flow through them to their
    /// inputs; for leaves this simply leaves them untouched.
    pub fn backward_blocked(&mut self, loss: Var, blocked: &[Var]) -> Result<(), AutodiffError> {
        let shape = self.shape(loss);
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: shape.to_vec(),
            });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            if blocked.contains(&Var(i)) {
                continue;
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(&g) {
                        *a += d;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        match nodes[i].op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let layout = Broadcast::new("", nodes[a.0].value.shape(), nodes[b.0].value.shape())
                    .expect("shapes validated at forward time");
                let (da, db) = (val(a), val(b));
                let op = &nodes[i].op;
                acc(a, &mut |ga| {
                    for (k, &gk) in g.iter().enumerate() {
                        let (ia, ib) = (layout.lhs_at(k), layout.rhs_at(k));
                        ga[ia] += match op {
                            Op::Add(..) | Op::Sub(..) => gk,
                            Op::Mul(..) => gk * db[ib],
                            _ => gk / db[ib],
                        };
                    }
                });
                acc(b, &mut |gb| {
                    for (k, &gk) in g.iter().enumerate() {
                        let (ia, ib) = (layout.lhs_at(k), layout.rhs_at(k));
                        gb[ib] += match op {
                            Op::Add(..) => gk,
                            Op::Sub(..) => -gk,
                            Op::Mul(..) => gk * da[ia],
                            _ => -gk * da[ia] / (db[ib] * db[ib]),
                        };
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &db[p * n..(p + 1) * n];
                            ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let arp = da[r * k + p];
                            if arp == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += arp * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let s = nodes[x.0].value.shape();
                let (m, n) = (s[0], s[1]);
                acc(x, &mut |gx| {
                    for r in 0..m {
                        for c in 0..n {
                            gx[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let dx = val(x);
                acc(x, &mut |gx| {
                    for k in 0..g.len() {
                        if dx[k] > 0.0 {
                            gx[k] += g[k];
                        }
                    }
                });
            }
            Op::Exp(x) => acc(x, &mut |gx| {
                for k in 0..g.len() {
                    gx[k] += g[k] * out[k];
                }
            }),
            Op::Log(x) => {
                let dx = val(x);
                acc(x, &mut |gx| {
                    for k in 0..g.len() {
                        if dx[k] > PROB_EPSILON {
                            gx[k] += g[k] / dx[k];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => acc(x, &mut |gx| {
                for k in 0..g.len() {
                    gx[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }),
            Op::Softmax(x, t) => {
                let c = nodes[x.0].value.cols();
                acc(x, &mut |gx| {
                    for ((gr, yr), gxr) in g.chunks(c).zip(out.chunks(c)).zip(gx.chunks_mut(c)) {
                        let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gxr[j] += yr[j] * (gr[j] - s) / t;
                        }
                    }
                });
            }
            Op::LogSoftmax(x, t) => {
                let c = nodes[x.0].value.cols();
                acc(x, &mut |gx| {
                    for ((gr, yr), gxr) in g.chunks(c).zip(out.chunks(c)).zip(gx.chunks_mut(c)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..c {
                            gxr[j] += (gr[j] - yr[j].exp() * s) / t;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel() as f64;
                acc(x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0] / n))
            }
            Op::SumAxis(x, axis) => {
                let v = &nodes[x.0].value;
                let c = v.cols();
                acc(x, &mut |gx| {
                    for (k, o) in gx.iter_mut().enumerate() {
                        *o += match (v.ndim(), axis) {
                            (1, _) => g[0],
                            (_, 0) => g[k % c],
                            _ => g[k / c],
                        };
                    }
                });
            }
            Op::CrossEntropy(z, t) => {
                let c = nodes[z.0].value.cols();
                let ls = log_softmax_rows(&nodes[z.0].value, 1.0);
                let dt = val(t);
                acc(z, &mut |gz| {
                    for (r, &gr) in g.iter().enumerate() {
                        let tr = &dt[r * c..(r + 1) * c];
                        let tsum: f64 = tr.iter().sum();
                        for j in 0..c {
                            gz[r * c + j] += gr * (ls[r * c + j].exp() * tsum - tr[j]);
                        }
                    }
                });
                acc(t, &mut |gt| {
                    for (k, o) in gt.iter_mut().enumerate() {
                        *o -= g[k / c] * ls[k];
                    }
                });
            }
            Op::KlDiv(p, q) => {
                let c = nodes[p.0].value.cols();
                let (dp, dq) = (val(p), val(q));
                acc(p, &mut |gp| {
                    for (k, o) in gp.iter_mut().enumerate() {
                        let mut d = clamp_prob(dp[k]).ln() - clamp_prob(dq[k]).ln();
                        if dp[k] > PROB_EPSILON {
                            d += 1.0;
                        }
                        *o += g[k / c] * d;
                    }
                });
                acc(q, &mut |gq| {
                    for (k, o) in gq.iter_mut().enumerate() {
                        if dq[k] > PROB_EPSILON {
                            *o -= g[k / c] * dp[k] / dq[k];
                        }
                    }
                });
            }
            Op::SquaredError(a, b) => {
                let c = nodes[a.0].value.cols();
                let (da, db) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for (k, o) in ga.iter_mut().enumerate() {
                        *o += 2.0 * g[k / c] * (da[k] - db[k]);
                    }
                });
                acc(b, &mut |gb| {
                    for (k, o) in gb.iter_mut().enumerate() {
                        *o -= 2.0 * g[k / c] * (da[k] - db[k]);
                    }
                });
            }
            Op::Bce(p, t) => {
                let (dp, dt) = (val(p), val(t));
                acc(p, &mut |gp| {
                    for (k, o) in gp.iter_mut().enumerate() {
                        let pk = dp[k];
                        let mut d = 0.0;
                        if pk > PROB_EPSILON {
                            d -= dt[k] / pk;
                        }
                        if 1.0 - pk > PROB_EPSILON {
                            d += (1.0 - dt[k]) / (1.0 - pk);
                        }
                        *o += g[k] * d;
                    }
                });
                acc(t, &mut |gt| {
                    for (k, o) in gt.iter_mut().enumerate() {
                        *o += g[k] * (clamp_prob(1.0 - dp[k]).ln() - clamp_prob(dp[k]).ln());
                    }
                });
            }
            Op::Scale(x, f) => acc(x, &mut |gx| {
                for (o, gv) in gx.iter_mut().zip(g) {
                    *o += f * gv;
                }
            }),
            Op::GradReverse(x, lambda) => acc(x, &mut |gx| {
                for (o, gv) in gx.iter_mut().zip(g) {
                    *o += -lambda * gv;
                }
            }),
            Op::Reshape(x) => acc(x, &mut |gx| {
                for (o, gv) in gx.iter_mut().zip(g) {
                    *o += gv;
                }
            }),
            Op::Concat(ref xs, axis) => {
                if axis == 0 {
                    let mut off = 0;
                    for &x in xs {
                        let n = nodes[x.0].value.numel();
                        acc(x, &mut |gx| {
                            for (o, gv) in gx.iter_mut().zip(&g[off..off + n]) {
                                *o += gv;
                            }
                        });
                        off += n;
                    }
                } else {
                    let total = nodes[i].value.cols();
                    let mut col = 0;
                    for &x in xs {
                        let c = nodes[x.0].value.cols();
                        acc(x, &mut |gx| {
                            for (r, gxr) in gx.chunks_mut(c).enumerate() {
                                for j in 0..c {
                                    gxr[j] += g[r * total + col + j];
                                }
                            }
                        });
                        col += c;
                    }
                }
            }
            Op::Outer(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (f, k) = (va.cols(), vb.cols());
                let (da, db) = (va.data(), vb.data());
                let batch = va.numel() / f;
                acc(a, &mut |ga| {
                    for r in 0..batch {
                        for fi in 0..f {
                            let base = r * f * k + fi * k;
                            ga[r * f + fi] += (0..k).map(|j| g[base + j] * db[r * k + j]).sum::<f64>();
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for r in 0..batch {
                        for fi in 0..f {
                            let base = r * f * k + fi * k;
                            let x = da[r * f + fi];
                            for j in 0..k {
                                gb[r * k + j] += g[base + j] * x;
                            }
                        }
                    }
                });
            }
        }
    }
}
