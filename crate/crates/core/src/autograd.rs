//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op on a [`Tape`] computes its value eagerly and, when any input
//! requires a gradient, appends a node holding the inputs it needs for the
//! backward rule. [`Tape::backward`] walks the nodes in exact reverse order and
//! consumes the tape; a second call is an error.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::kernels::{self, ConvGeom};
use crate::tensor::{numel, Result, Tensor, TensorError};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value computed on a [`Tape`].
#[derive(Debug, Clone)]
pub struct Var {
    id: usize,
    tape: u64,
    value: Rc<Tensor>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f32] {
        self.value.data()
    }

    pub fn item(&self) -> Option<f32> {
        self.value.item()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Conv2d {
        geom: ConvGeom,
    },
    Relu,
    Sigmoid,
    SoftmaxLast {
        cols: usize,
    },
    Add,
    Sub,
    Mul,
    Div,
    Scale(f32),
    AddScalar,
    Abs,
    Square,
    MatMul {
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Gather(Rc<Vec<usize>>),
    Concat,
    Reshape,
    Sum,
    Mean,
}

#[derive(Debug)]
struct Node {
    id: usize,
    op: Op,
    inputs: Vec<Var>,
    output: Rc<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Open,
    Consumed,
}

#[derive(Debug)]
pub struct Tape {
    tape: u64,
    nodes: Vec<Node>,
    requires: Vec<bool>,
    leaves: Vec<bool>,
    recording: bool,
    state: State,
    /// Running hash of which side of zero every relu/abs input fell on.
    kinks: Option<u64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    tape: u64,
    by_id: HashMap<usize, Vec<f32>>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&[f32]> {
        if var.tape != self.tape {
            return None;
        }
        self.by_id.get(&var.id).map(Vec::as_slice)
    }

    pub fn take(&mut self, var: &Var) -> Option<Vec<f32>> {
        if var.tape != self.tape {
            return None;
        }
        self.by_id.remove(&var.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            tape: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            requires: Vec::new(),
            leaves: Vec::new(),
            recording: true,
            state: State::Open,
            kinks: None,
        }
    }

    /// A tape that never records; intermediate values are freed as soon as
    /// their [`Var`]s drop.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    /// Starts hashing the sign pattern of relu/abs inputs, see [`Tape::kink_pattern`].
    pub fn track_kinks(mut self) -> Self {
        self.kinks = Some(0xcbf2_9ce4_8422_2325);
        self
    }

    /// Hash of the side of zero each relu/abs input has landed on so far, if
    /// tracking is on. Two evaluations with equal patterns ran on the same
    /// smooth piece of the function (up to hash collisions).
    pub fn kink_pattern(&self) -> Option<u64> {
        self.kinks
    }

    fn note_kinks(&mut self, x: &Var) {
        if let Some(h) = self.kinks.as_mut() {
            for chunk in x.data().chunks(64) {
                let bits = chunk
                    .iter()
                    .enumerate()
                    .fold(0u64, |b, (i, &v)| b | ((v > 0.0) as u64) << i);
                *h = (*h ^ bits).wrapping_mul(0x0100_0000_01b3);
            }
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf. Its gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires = tensor.requires_grad() && self.recording;
        let id = self.requires.len();
        self.requires.push(requires);
        self.leaves.push(true);
        Var {
            id,
            tape: self.tape,
            value: Rc::new(tensor),
        }
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn check(&self, vars: &[&Var]) -> Result<()> {
        if self.state == State::Consumed {
            return Err(TensorError::TapeConsumed);
        }
        if vars.iter().any(|v| v.tape != self.tape) {
            return Err(TensorError::ForeignVar);
        }
        Ok(())
    }

    fn record(
        &mut self,
        op: Op,
        inputs: &[&Var],
        shape: Vec<usize>,
        data: Vec<f32>,
        name: &'static str,
    ) -> Result<Var> {
        let out = Rc::new(Tensor::finite(shape, data, name)?);
        let requires = self.recording && inputs.iter().any(|v| self.requires[v.id]);
        let id = self.requires.len();
        self.requires.push(requires);
        self.leaves.push(false);
        if requires {
            self.nodes.push(Node {
                id,
                op,
                inputs: inputs.iter().map(|&v| v.clone()).collect(),
                output: out.clone(),
            });
        }
        Ok(Var {
            id,
            tape: self.tape,
            value: out,
        })
    }

    pub fn conv2d(
        &mut self,
        x: &Var,
        weight: &Var,
        bias: Option<&Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let mut all = vec![x, weight];
        all.extend(bias);
        self.check(&all)?;
        let (n, ci, h, w) = x.value.dims4("conv2d")?;
        let (co, wi, kh, kw) = weight.value.dims4("conv2d")?;
        if ci != wi {
            return Err(TensorError::ChannelMismatch {
                input: ci,
                weight: wi,
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid(
                "conv2d: stride must be positive".into(),
            ));
        }
        let padded = (h + 2 * padding, w + 2 * padding);
        if kh > padded.0 || kw > padded.1 {
            return Err(TensorError::KernelTooLarge {
                kernel: (kh, kw),
                padded,
            });
        }
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(TensorError::Incompatible {
                    op: "conv2d bias",
                    lhs: vec![co],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let geom = ConvGeom {
            batch: n,
            in_ch: ci,
            height: h,
            width: w,
            out_ch: co,
            kh,
            kw,
            stride,
            pad: padding,
        };
        let data = kernels::conv2d_forward(x.data(), weight.data(), bias.map(|b| b.data()), &geom);
        let shape = vec![n, co, geom.out_h(), geom.out_w()];
        self.record(Op::Conv2d { geom }, &all, shape, data, "conv2d")
    }

    fn unary(
        &mut self,
        x: &Var,
        op: Op,
        name: &'static str,
        f: impl Fn(f32) -> f32,
    ) -> Result<Var> {
        self.check(&[x])?;
        let data = x.data().iter().map(|&v| f(v)).collect();
        self.record(op, &[x], x.shape().to_vec(), data, name)
    }

    /// `max(x, 0)`; the gradient at exactly 0 is 0.
    pub fn relu(&mut self, x: &Var) -> Result<Var> {
        self.note_kinks(x);
        self.unary(x, Op::Relu, "relu", |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: &Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid, "sigmoid", sigmoid)
    }

    pub fn scale(&mut self, x: &Var, s: f32) -> Result<Var> {
        self.unary(x, Op::Scale(s), "scale", |v| v * s)
    }

    pub fn add_scalar(&mut self, x: &Var, c: f32) -> Result<Var> {
        self.unary(x, Op::AddScalar, "add_scalar", |v| v + c)
    }

    pub fn abs(&mut self, x: &Var) -> Result<Var> {
        self.note_kinks(x);
        self.unary(x, Op::Abs, "abs", f32::abs)
    }

    pub fn square(&mut self, x: &Var) -> Result<Var> {
        self.unary(x, Op::Square, "square", |v| v * v)
    }

    /// Numerically stable softmax along the last axis.
    pub fn softmax_lastdim(&mut self, x: &Var) -> Result<Var> {
        self.check(&[x])?;
        let cols = *x.shape().last().ok_or_else(|| TensorError::Rank {
            op: "softmax",
            expected: 1,
            shape: vec![],
        })?;
        let mut data = x.data().to_vec();
        if cols > 0 {
            for row in data.chunks_mut(cols) {
                softmax_row(row);
            }
        }
        self.record(
            Op::SoftmaxLast { cols },
            &[x],
            x.shape().to_vec(),
            data,
            "softmax",
        )
    }

    fn binary(
        &mut self,
        a: &Var,
        b: &Var,
        op: Op,
        name: &'static str,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Var> {
        self.check(&[a, b])?;
        if a.shape() != b.shape() {
            return Err(TensorError::Incompatible {
                op: name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.record(op, &[a, b], a.shape().to_vec(), data, name)
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(a, b, Op::Add, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(a, b, Op::Div, "div", |x, y| x / y)
    }

    /// `[b, m, k] x [b, k, n] -> [b, m, n]`.
    pub fn batched_matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.check(&[a, b])?;
        let (&[ba, m, k], &[bb, kb, n]) = (a.shape(), b.shape()) else {
            return Err(TensorError::Incompatible {
                op: "batched_matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        };
        if ba != bb || k != kb {
            return Err(TensorError::Incompatible {
                op: "batched_matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = kernels::bmm(a.data(), b.data(), ba, m, k, n);
        self.record(
            Op::MatMul { batch: ba, m, k, n },
            &[a, b],
            vec![ba, m, n],
            data,
            "batched_matmul",
        )
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: &Var, index: Rc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        self.check(&[x])?;
        if numel(&shape) != index.len() {
            return Err(TensorError::ShapeMismatch {
                shape,
                expected: index.len(),
                actual: index.len(),
            });
        }
        let src = x.data();
        if index.iter().any(|&i| i >= src.len()) {
            return Err(TensorError::Invalid("gather index out of range".into()));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        self.record(Op::Gather(index), &[x], shape, data, "gather")
    }

    /// Swaps the last two axes of a 3-D tensor.
    pub fn transpose_last2(&mut self, x: &Var) -> Result<Var> {
        let &[b, r, c] = x.shape() else {
            return Err(TensorError::Rank {
                op: "transpose_last2",
                expected: 3,
                shape: x.shape().to_vec(),
            });
        };
        let mut index = Vec::with_capacity(b * r * c);
        for z in 0..b {
            for j in 0..c {
                for i in 0..r {
                    index.push((z * r + i) * c + j);
                }
            }
        }
        self.gather(x, Rc::new(index), vec![b, c, r])
    }

    /// Flat concatenation into a 1-D tensor.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Var> = parts.iter().collect();
        self.check(&refs)?;
        let data: Vec<f32> = parts
            .iter()
            .flat_map(|p| p.data().iter().copied())
            .collect();
        let len = data.len();
        self.record(Op::Concat, &refs, vec![len], data, "concat")
    }

    pub fn reshape(&mut self, x: &Var, shape: Vec<usize>) -> Result<Var> {
        self.check(&[x])?;
        if numel(&shape) != x.value.numel() {
            return Err(TensorError::Incompatible {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape,
            });
        }
        self.record(Op::Reshape, &[x], shape, x.data().to_vec(), "reshape")
    }

    pub fn sum(&mut self, x: &Var) -> Result<Var> {
        self.check(&[x])?;
        let s = kernels::sum_f64(x.data()) as f32;
        self.record(Op::Sum, &[x], vec![], vec![s], "sum")
    }

    pub fn mean(&mut self, x: &Var) -> Result<Var> {
        self.check(&[x])?;
        let n = x.value.numel().max(1) as f64;
        let s = (kernels::sum_f64(x.data()) / n) as f32;
        self.record(Op::Mean, &[x], vec![], vec![s], "mean")
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: &Var) -> Result<Gradients> {
        self.check(&[loss])?;
        if loss.value.numel() != 1 {
            return Err(TensorError::NotScalar(loss.shape().to_vec()));
        }
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        self.state = State::Consumed;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.requires.len()];
        grads[loss.id] = Some(vec![1.0]);
        while let Some(node) = self.nodes.pop() {
            let Some(g) = grads[node.id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.requires[v.id]).collect();
            let local = node_backward(&node, &g, &needs);
            for ((input, grad), need) in node.inputs.iter().zip(local).zip(needs) {
                let (Some(grad), true) = (grad, need) else {
                    continue;
                };
                match &mut grads[input.id] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, v)| *a += v),
                    slot => *slot = Some(grad),
                }
            }
        }
        let by_id = grads
            .into_iter()
            .enumerate()
            .filter_map(|(id, g)| {
                (self.leaves[id] && self.requires[id])
                    .then_some(g)
                    .flatten()
                    .map(|g| (id, g))
            })
            .collect();
        Ok(Gradients {
            tape: self.tape,
            by_id,
        })
    }
}

fn node_backward(node: &Node, g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
    let inp = |i: usize| node.inputs[i].data();
    let y = node.output.data();
    match &node.op {
        Op::Conv2d { geom } => {
            let dx = needs[0].then(|| kernels::conv2d_backward_input(g, inp(1), geom));
            let need_params = needs[1] || needs.get(2).copied().unwrap_or(false);
            let (dw, db) = if need_params {
                let (dw, db) = kernels::conv2d_backward_params(g, inp(0), geom);
                (Some(dw), Some(db))
            } else {
                (None, None)
            };
            let mut out = vec![dx, dw];
            if node.inputs.len() == 3 {
                out.push(db);
            }
            out
        }
        Op::Relu => vec![Some(zip_map(
            g,
            inp(0),
            |g, x| if x > 0.0 { g } else { 0.0 },
        ))],
        Op::Sigmoid => vec![Some(zip_map(g, y, |g, s| g * s * (1.0 - s)))],
        Op::SoftmaxLast { cols } => {
            let mut dx = vec![0f32; g.len()];
            for ((d, gr), yr) in dx
                .chunks_mut(*cols)
                .zip(g.chunks(*cols))
                .zip(y.chunks(*cols))
            {
                let dot: f64 = gr.iter().zip(yr).map(|(&a, &b)| a as f64 * b as f64).sum();
                let dot = dot as f32;
                for ((d, &gv), &yv) in d.iter_mut().zip(gr).zip(yr) {
                    *d = yv * (gv - dot);
                }
            }
            vec![Some(dx)]
        }
        Op::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
        Op::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
        Op::Mul => vec![
            needs[0].then(|| zip_map(g, inp(1), |g, b| g * b)),
            needs[1].then(|| zip_map(g, inp(0), |g, a| g * a)),
        ],
        Op::Div => vec![
            needs[0].then(|| zip_map(g, inp(1), |g, b| g / b)),
            needs[1].then(|| {
                g.iter()
                    .zip(inp(0))
                    .zip(inp(1))
                    .map(|((&g, &a), &b)| -g * a / (b * b))
                    .collect()
            }),
        ],
        Op::Scale(s) => vec![Some(g.iter().map(|v| v * s).collect())],
        Op::AddScalar => vec![Some(g.to_vec())],
        Op::Abs => vec![Some(zip_map(g, inp(0), |g, x| {
            if x > 0.0 {
                g
            } else if x < 0.0 {
                -g
            } else {
                0.0
            }
        }))],
        Op::Square => vec![Some(zip_map(g, inp(0), |g, x| 2.0 * x * g))],
        Op::MatMul { batch, m, k, n } => vec![
            needs[0].then(|| kernels::bmm_nt(g, inp(1), *batch, *m, *n, *k)),
            needs[1].then(|| kernels::bmm_tn(inp(0), g, *batch, *m, *k, *n)),
        ],
        Op::Gather(index) => {
            let mut dx = vec![0f32; node.inputs[0].value.numel()];
            for (&i, &v) in index.iter().zip(g) {
                dx[i] += v;
            }
            vec![Some(dx)]
        }
        Op::Concat => {
            let mut offset = 0;
            node.inputs
                .iter()
                .map(|p| {
                    let n = p.value.numel();
                    let part = g[offset..offset + n].to_vec();
                    offset += n;
                    Some(part)
                })
                .collect()
        }
        Op::Reshape => vec![Some(g.to_vec())],
        Op::Sum => vec![Some(vec![g[0]; node.inputs[0].value.numel()])],
        Op::Mean => {
            let n = node.inputs[0].value.numel();
            vec![Some(vec![(g[0] as f64 / n as f64) as f32; n])]
        }
    }
}

fn zip_map(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Logistic function, kept strictly inside `(0, 1)` where f32 would round to an endpoint.
pub fn sigmoid(v: f32) -> f32 {
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    s.clamp(f32::MIN_POSITIVE, 1.0 - f32::EPSILON / 2.0)
}

/// In-place softmax of one row, shifted by the row max.
pub fn softmax_row(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v as f64;
    }
    for v in row.iter_mut() {
        *v = (*v as f64 / total) as f32;
    }
}
