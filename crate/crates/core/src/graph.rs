//! Define-by-run computation graph with reverse-mode gradients.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value and whatever it needs for the backward sweep;
//! [`Graph::backward`] then walks the nodes in reverse insertion order, which is
//! a valid reverse topological order because operands always precede results.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{MatRef, Scalar};
use crate::tensor::{numel, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Square-score masking applied inside the last-axis softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoftmaxMask {
    None,
    /// Row `r` only sees columns `0..=r`.
    Causal,
}

/// Forward primitive selector for [`Graph::primitive`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Scale(f64),
    SoftmaxLastDim(SoftmaxMask),
    LayerNormLastDim { eps: f64 },
    Gelu,
    EmbeddingAdd,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_COEF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`
pub fn gelu<S: Scalar>(x: S) -> S {
    let half = S::from_f64_lossy(0.5);
    let c = S::from_f64_lossy(SQRT_2_OVER_PI);
    let a = S::from_f64_lossy(GELU_COEF);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::from_f64_lossy(0.5);
    let c = S::from_f64_lossy(SQRT_2_OVER_PI);
    let a = S::from_f64_lossy(GELU_COEF);
    let three = S::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool, batch: usize, m: usize, k: usize, n: usize, shared_rhs: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: S },
    Softmax { a: Var, cols: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, rstd: Vec<S> },
    Gelu { a: Var },
    PositionAdd { a: Var, table: Var, len: usize, width: usize },
    Reshape { a: Var },
    SwapAxes12 { a: Var, dims: [usize; 4] },
    MeanAxis1 { a: Var, dims: [usize; 3] },
    SelectAxis1 { a: Var, index: usize, dims: [usize; 3] },
    Sum { a: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, include: Vec<bool>, probs: Vec<S>, count: usize },
    Dropout { a: Var, mask: Vec<S> },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu { .. } => "gelu",
            Op::PositionAdd { .. } => "embedding-add",
            Op::Reshape { .. } => "reshape",
            Op::SwapAxes12 { .. } => "swap-axes",
            Op::MeanAxis1 { .. } => "mean-pool",
            Op::SelectAxis1 { .. } => "select",
            Op::Sum { .. } => "sum",
            Op::CrossEntropy { .. } => "cross-entropy",
            Op::Dropout { .. } => "dropout",
        }
    }
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    tracked: bool,
}

/// Gradients produced by [`Graph::backward`], keyed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    by_node: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var) -> Option<&[S]> {
        self.by_node.get(var.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    check_finite: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], var: Var, len: usize) -> &mut Vec<S> {
    grads[var.0].get_or_insert_with(|| vec![S::zero(); len])
}

impl<S: Scalar> Graph<S> {
    /// Non-finite checking follows `debug_assertions`.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), check_finite: cfg!(debug_assertions) }
    }

    pub fn with_finite_checks(mut self, enabled: bool) -> Self {
        self.check_finite = enabled;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].tracked
    }

    /// Registers a tensor as a graph input; it is differentiated iff `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> Result<Var> {
        let tracked = tensor.requires_grad;
        self.push(tensor, Op::Leaf, tracked)
    }

    pub fn constant(&mut self, tensor: Tensor<S>) -> Result<Var> {
        self.push(tensor, Op::Leaf, false)
    }

    fn push(&mut self, mut value: Tensor<S>, op: Op<S>, tracked: bool) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::Numeric(format!("non-finite value produced by {}", op.name())));
        }
        value.requires_grad = tracked;
        value.zero_grad();
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn primitive(&mut self, kind: Primitive, operands: &[Var]) -> Result<Var> {
        let arity = match kind {
            Primitive::Scale(_) | Primitive::SoftmaxLastDim(_) | Primitive::Gelu => 1,
            Primitive::MatMul | Primitive::Add | Primitive::EmbeddingAdd => 2,
            Primitive::LayerNormLastDim { .. } => 3,
        };
        if operands.len() != arity {
            return Err(Error::shape(format!("{kind:?} takes {arity} operands, got {}", operands.len())));
        }
        match kind {
            Primitive::MatMul => self.matmul(operands[0], operands[1]),
            Primitive::Add => self.add(operands[0], operands[1]),
            Primitive::Scale(f) => self.scale(operands[0], S::from_f64_lossy(f)),
            Primitive::SoftmaxLastDim(mask) => self.softmax(operands[0], mask),
            Primitive::LayerNormLastDim { eps } => {
                self.layer_norm(operands[0], operands[1], operands[2], S::from_f64_lossy(eps))
            }
            Primitive::Gelu => self.gelu(operands[0]),
            Primitive::EmbeddingAdd => self.add_positions(operands[0], operands[1]),
        }
    }

    /// `a @ b`. `a` is `[..., m, k]`; `b` is either a shared `[k, n]` matrix or has the
    /// same leading dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` with `b` shaped `[n, k]` (or batched `[..., n, k]`).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(format!("matmul needs rank >= 2 operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {sa:?} x {sb:?}{}",
                if trans_b { "^T" } else { "" }
            )));
        }
        let lead = &sa[..sa.len() - 2];
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != *lead {
            return Err(Error::shape(format!("matmul batch dimensions differ: {sa:?} x {sb:?}")));
        }
        let batch = numel(lead);
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);

        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![S::zero(); batch * m * n];
        let b_view = |data| {
            let v = if trans_b { MatRef::row_major(data, n, k) } else { MatRef::row_major(data, k, n) };
            if trans_b { v.t() } else { v }
        };
        if shared_rhs {
            S::gemm(S::one(), MatRef::row_major(av, batch * m, k), b_view(bv), S::zero(), &mut out);
        } else {
            for p in 0..batch {
                S::gemm(
                    S::one(),
                    MatRef::row_major(&av[p * m * k..(p + 1) * m * k], m, k),
                    b_view(&bv[p * k * n..(p + 1) * k * n]),
                    S::zero(),
                    &mut out[p * m * n..(p + 1) * m * n],
                );
            }
        }
        let tracked = self.tracked(&[a, b]);
        self.push(
            Tensor::new(out_shape, out)?,
            Op::MatMul { a, b, trans_b, batch, m, k, n, shared_rhs },
            tracked,
        )
    }

    /// Elementwise sum. `b` may have the shape of a trailing suffix of `a`'s shape, in
    /// which case it is broadcast over `a`'s leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(format!("cannot add {sb:?} onto {sa:?}")));
        }
        let bv = self.value(b).data();
        let inner = bv.len();
        let out: Vec<S> = self
            .value(a)
            .data()
            .chunks(inner)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        let tracked = self.tracked(&[a, b]);
        self.push(Tensor::new(sa, out)?, Op::Add { a, b }, tracked)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) {
            return Err(Error::shape(format!("mul needs equal shapes, got {sa:?} and {:?}", self.shape(b))));
        }
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let tracked = self.tracked(&[a, b]);
        self.push(Tensor::new(sa, out)?, Op::Mul { a, b }, tracked)
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let out = self.value(a).data().iter().map(|&x| x * factor).collect();
        let tracked = self.tracked(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Scale { a, factor }, tracked)
    }

    /// Softmax over the last axis. With [`SoftmaxMask::Causal`] the trailing two axes
    /// must be square and masked entries get probability exactly zero.
    pub fn softmax(&mut self, a: Var, mask: SoftmaxMask) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().expect("tensor rank >= 1");
        let rows_per_block = if mask == SoftmaxMask::Causal {
            if shape.len() < 2 || shape[shape.len() - 2] != cols {
                return Err(Error::shape(format!("causal softmax needs square trailing axes, got {shape:?}")));
            }
            cols
        } else {
            1
        };
        let mut out = self.value(a).data().to_vec();
        for (r, row) in out.chunks_mut(cols).enumerate() {
            let visible = match mask {
                SoftmaxMask::None => cols,
                SoftmaxMask::Causal => r % rows_per_block + 1,
            };
            let (seen, hidden) = row.split_at_mut(visible);
            let max = seen.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for v in seen.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            let inv = sum.recip();
            seen.iter_mut().for_each(|v| *v = *v * inv);
            hidden.iter_mut().for_each(|v| *v = S::zero());
        }
        let tracked = self.tracked(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Softmax { a, cols }, tracked)
    }

    /// Normalizes each last-axis row to zero mean and unit variance, then applies
    /// `gain` and `bias` (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().expect("tensor rank >= 1");
        if self.shape(gain) != [width] || self.shape(bias) != [width] {
            return Err(Error::shape(format!(
                "layernorm affine params must be [{width}], got {:?} and {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let w = S::from_usize_lossy(width);
        let xv = self.value(x).data();
        let rows = xv.len() / width;
        let mut xhat = vec![S::zero(); xv.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * width..(r + 1) * width];
            let mean = row.iter().copied().sum::<S>() / w;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / w;
            let inv = (var + eps).sqrt().recip();
            rstd[r] = inv;
            for j in 0..width {
                let h = (row[j] - mean) * inv;
                xhat[r * width + j] = h;
                out[r * width + j] = h * g[j] + b[j];
            }
        }
        let tracked = self.tracked(&[x, gain, bias]);
        self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gain, bias, xhat, rstd }, tracked)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let out = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let tracked = self.tracked(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Gelu { a }, tracked)
    }

    /// Adds rows `0..len` of a `[max_len, width]` position table to `a: [..., len, width]`.
    pub fn add_positions(&mut self, a: Var, table: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let st = self.shape(table);
        if sa.len() < 2 || st.len() != 2 {
            return Err(Error::shape(format!("embedding-add needs [..., L, d] and [Lmax, d], got {sa:?}, {st:?}")));
        }
        let (len, width) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        if st[1] != width || st[0] < len {
            return Err(Error::shape(format!(
                "position table {st:?} cannot cover a sequence of {len} x {width}"
            )));
        }
        let rows = &self.value(table).data()[..len * width];
        let out = self
            .value(a)
            .data()
            .chunks(len * width)
            .flat_map(|block| block.iter().zip(rows).map(|(&x, &p)| x + p))
            .collect();
        let tracked = self.tracked(&[a, table]);
        self.push(Tensor::new(sa, out)?, Op::PositionAdd { a, table, len, width }, tracked)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape(a))));
        }
        let data = self.value(a).data().to_vec();
        let tracked = self.tracked(&[a]);
        self.push(Tensor::new(shape.to_vec(), data)?, Op::Reshape { a }, tracked)
    }

    /// `[p, q, r, s] -> [p, r, q, s]`.
    pub fn swap_axes_12(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 4 {
            return Err(Error::shape(format!("swap_axes_12 needs rank 4, got {s:?}")));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let out = swap12(self.value(a).data(), dims);
        let tracked = self.tracked(&[a]);
        self.push(Tensor::new(vec![dims[0], dims[2], dims[1], dims[3]], out)?, Op::SwapAxes12 { a, dims }, tracked)
    }

    /// `[b, l, d] -> [b, d]` averaging over `l`.
    pub fn mean_axis1(&mut self, a: Var) -> Result<Var> {
        let dims = rank3(self.shape(a))?;
        let [b, l, d] = dims;
        let inv = S::from_usize_lossy(l).recip();
        let av = self.value(a).data();
        let mut out = vec![S::zero(); b * d];
        for i in 0..b {
            for t in 0..l {
                let row = &av[(i * l + t) * d..(i * l + t + 1) * d];
                out[i * d..(i + 1) * d].iter_mut().zip(row).for_each(|(o, &v)| *o = *o + v);
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let tracked = self.tracked(&[a]);
        self.push(Tensor::new(vec![b, d], out)?, Op::MeanAxis1 { a, dims }, tracked)
    }

    /// `[b, l, d] -> [b, d]` taking position `index`.
    pub fn select_axis1(&mut self, a: Var, index: usize) -> Result<Var> {
        let dims = rank3(self.shape(a))?;
        let [b, l, d] = dims;
        if index >= l {
            return Err(Error::Index(format!("position {index} of {l}")));
        }
        let av = self.value(a).data();
        let out = (0..b).flat_map(|i| av[(i * l + index) * d..(i * l + index + 1) * d].iter().copied()).collect();
        let tracked = self.tracked(&[a]);
        self.push(Tensor::new(vec![b, d], out)?, Op::SelectAxis1 { a, index, dims }, tracked)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().copied().sum();
        let tracked = self.tracked(&[a]);
        self.push(Tensor::scalar(total), Op::Sum { a }, tracked)
    }

    /// Inverted dropout with keep-probability `1 - p`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} outside [0, 1)")));
        }
        let shape = self.shape(a).to_vec();
        let keep = S::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..numel(&shape))
            .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
            .collect();
        let out = self.value(a).data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let tracked = self.tracked(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Dropout { a, mask }, tracked)
    }

    /// Mean negative log-likelihood of `targets` under the row-wise softmax of
    /// `logits: [..., c]`, restricted to rows where `include` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], include: &[bool]) -> Result<Var> {
        let shape = self.shape(logits);
        let classes = *shape.last().expect("tensor rank >= 1");
        let rows = self.value(logits).len() / classes;
        if targets.len() != rows || include.len() != rows {
            return Err(Error::shape(format!(
                "cross-entropy over {rows} rows got {} targets and {} mask entries",
                targets.len(),
                include.len()
            )));
        }
        let count = include.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::NoLossPositions);
        }
        let lv = self.value(logits).data();
        let mut probs = vec![S::zero(); lv.len()];
        let mut total = 0.0f64;
        for r in 0..rows {
            if !include[r] {
                continue;
            }
            let t = targets[r];
            if t >= classes {
                return Err(Error::Index(format!("target {t} with {classes} classes")));
            }
            let row = &lv[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let p = &mut probs[r * classes..(r + 1) * classes];
            let mut sum = S::zero();
            for (pj, &x) in p.iter_mut().zip(row) {
                *pj = (x - max).exp();
                sum = sum + *pj;
            }
            let inv = sum.recip();
            p.iter_mut().for_each(|v| *v = *v * inv);
            total += (max + sum.ln() - row[t]).as_f64();
        }
        let loss = S::from_f64_lossy(total / count as f64);
        let tracked = self.tracked(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), include: include.to_vec(), probs, count },
            tracked,
        )
    }

    /// Reverse sweep from a single-element `loss`. Returned gradients cover every tracked leaf
    /// reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.backprop_node(node, &gout, &mut grads);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.tracked {
                *g = None;
            }
        }
        Ok(Gradients { by_node: grads })
    }

    fn backprop_node(&self, node: &Node<S>, gout: &[S], grads: &mut [Option<Vec<S>>]) {
        let tracked = |v: Var| self.nodes[v.0].tracked;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b, batch, m, k, n, shared_rhs } => {
                let (av, bv) = (val(a), val(b));
                // dA = dC * op(B)^T ; dB = A^T dC (or dC^T A when b is stored transposed)
                let b_for_da = |data| {
                    if trans_b { MatRef::row_major(data, n, k) } else { MatRef::row_major(data, k, n).t() }
                };
                if tracked(a) {
                    let ga = accumulate(grads, a, batch * m * k);
                    if shared_rhs {
                        S::gemm(S::one(), MatRef::row_major(gout, batch * m, n), b_for_da(bv), S::one(), ga);
                    } else {
                        for p in 0..batch {
                            S::gemm(
                                S::one(),
                                MatRef::row_major(&gout[p * m * n..(p + 1) * m * n], m, n),
                                b_for_da(&bv[p * k * n..(p + 1) * k * n]),
                                S::one(),
                                &mut ga[p * m * k..(p + 1) * m * k],
                            );
                        }
                    }
                }
                if tracked(b) {
                    let blocks = if shared_rhs { 1 } else { batch };
                    let rows = if shared_rhs { batch * m } else { m };
                    let gb = accumulate(grads, b, blocks * k * n);
                    for p in 0..blocks {
                        let a_blk = MatRef::row_major(&av[p * rows * k..(p + 1) * rows * k], rows, k);
                        let g_blk = MatRef::row_major(&gout[p * rows * n..(p + 1) * rows * n], rows, n);
                        let dst = &mut gb[p * k * n..(p + 1) * k * n];
                        if trans_b {
                            S::gemm(S::one(), g_blk.t(), a_blk, S::one(), dst);
                        } else {
                            S::gemm(S::one(), a_blk.t(), g_blk, S::one(), dst);
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                if tracked(a) {
                    let ga = accumulate(grads, a, gout.len());
                    ga.iter_mut().zip(gout).for_each(|(g, &d)| *g = *g + d);
                }
                if tracked(b) {
                    let inner = self.nodes[b.0].value.len();
                    let gb = accumulate(grads, b, inner);
                    for chunk in gout.chunks(inner) {
                        gb.iter_mut().zip(chunk).for_each(|(g, &d)| *g = *g + d);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if tracked(a) {
                    let bv = val(b);
                    let ga = accumulate(grads, a, gout.len());
                    for ((g, &d), &y) in ga.iter_mut().zip(gout).zip(bv) {
                        *g = *g + d * y;
                    }
                }
                if tracked(b) {
                    let av = val(a);
                    let gb = accumulate(grads, b, gout.len());
                    for ((g, &d), &x) in gb.iter_mut().zip(gout).zip(av) {
                        *g = *g + d * x;
                    }
                }
            }
            &Op::Scale { a, factor } => {
                if tracked(a) {
                    let ga = accumulate(grads, a, gout.len());
                    ga.iter_mut().zip(gout).for_each(|(g, &d)| *g = *g + d * factor);
                }
            }
            &Op::Softmax { a, cols } => {
                if tracked(a) {
                    let y = node.value.data();
                    let ga = accumulate(grads, a, gout.len());
                    for ((gr, yr), dr) in ga.chunks_mut(cols).zip(y.chunks(cols)).zip(gout.chunks(cols)) {
                        let dot: S = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                        for ((g, &p), &d) in gr.iter_mut().zip(yr).zip(dr) {
                            *g = *g + p * (d - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let width = self.nodes[gain.0].value.len();
                let gv = val(*gain);
                if tracked(*gain) {
                    let gg = accumulate(grads, *gain, width);
                    for (dr, hr) in gout.chunks(width).zip(xhat.chunks(width)) {
                        gg.iter_mut().zip(dr.iter().zip(hr)).for_each(|(g, (&d, &h))| *g = *g + d * h);
                    }
                }
                if tracked(*bias) {
                    let gb = accumulate(grads, *bias, width);
                    for dr in gout.chunks(width) {
                        gb.iter_mut().zip(dr).for_each(|(g, &d)| *g = *g + d);
                    }
                }
                if tracked(*x) {
                    let w = S::from_usize_lossy(width);
                    let gx = accumulate(grads, *x, gout.len());
                    let mut dh = vec![S::zero(); width];
                    for (r, &inv) in rstd.iter().enumerate() {
                        let dr = &gout[r * width..(r + 1) * width];
                        let hr = &xhat[r * width..(r + 1) * width];
                        dh.iter_mut().zip(dr.iter().zip(gv)).for_each(|(o, (&d, &g))| *o = d * g);
                        let mean_dh = dh.iter().copied().sum::<S>() / w;
                        let mean_dh_h = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<S>() / w;
                        for j in 0..width {
                            let gxj = &mut gx[r * width + j];
                            *gxj = *gxj + inv * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            &Op::Gelu { a } => {
                if tracked(a) {
                    let av = val(a);
                    let ga = accumulate(grads, a, gout.len());
                    for ((g, &d), &x) in ga.iter_mut().zip(gout).zip(av) {
                        *g = *g + d * gelu_grad(x);
                    }
                }
            }
            &Op::PositionAdd { a, table, len, width } => {
                if tracked(a) {
                    let ga = accumulate(grads, a, gout.len());
                    ga.iter_mut().zip(gout).for_each(|(g, &d)| *g = *g + d);
                }
                if tracked(table) {
                    let gt = accumulate(grads, table, self.nodes[table.0].value.len());
                    for block in gout.chunks(len * width) {
                        gt[..len * width].iter_mut().zip(block).for_each(|(g, &d)| *g = *g + d);
                    }
                }
            }
            &Op::Reshape { a } => {
                if tracked(a) {
                    let ga = accumulate(grads, a, gout.len());
                    ga.iter_mut().zip(gout).for_each(|(g, &d)| *g = *g + d);
                }
            }
            &Op::SwapAxes12 { a, dims } => {
                if tracked(a) {
                    let back = swap12(gout, [dims[0], dims[2], dims[1], dims[3]]);
                    let ga = accumulate(grads, a, gout.len());
                    ga.iter_mut().zip(back).for_each(|(g, d)| *g = *g + d);
                }
            }
            &Op::MeanAxis1 { a, dims: [b, l, d] } => {
                if tracked(a) {
                    let inv = S::from_usize_lossy(l).recip();
                    let ga = accumulate(grads, a, b * l * d);
                    for i in 0..b {
                        let src = &gout[i * d..(i + 1) * d];
                        for t in 0..l {
                            let dst = &mut ga[(i * l + t) * d..(i * l + t + 1) * d];
                            dst.iter_mut().zip(src).for_each(|(g, &s)| *g = *g + s * inv);
                        }
                    }
                }
            }
            &Op::SelectAxis1 { a, index, dims: [b, l, d] } => {
                if tracked(a) {
                    let ga = accumulate(grads, a, b * l * d);
                    for i in 0..b {
                        let dst = &mut ga[(i * l + index) * d..(i * l + index + 1) * d];
                        dst.iter_mut().zip(&gout[i * d..(i + 1) * d]).for_each(|(g, &s)| *g = *g + s);
                    }
                }
            }
            &Op::Sum { a } => {
                if tracked(a) {
                    let len = self.nodes[a.0].value.len();
                    let ga = accumulate(grads, a, len);
                    ga.iter_mut().for_each(|g| *g = *g + gout[0]);
                }
            }
            &Op::Dropout { a, ref mask } => {
                if tracked(a) {
                    let ga = accumulate(grads, a, gout.len());
                    for ((g, &d), &m) in ga.iter_mut().zip(gout).zip(mask) {
                        *g = *g + d * m;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, include, probs, count } => {
                if tracked(*logits) {
                    let classes = probs.len() / targets.len();
                    let scale = gout[0] / S::from_usize_lossy(*count);
                    let gl = accumulate(grads, *logits, probs.len());
                    for (r, (&t, &inc)) in targets.iter().zip(include).enumerate() {
                        if !inc {
                            continue;
                        }
                        let row = &mut gl[r * classes..(r + 1) * classes];
                        let p = &probs[r * classes..(r + 1) * classes];
                        for (j, (g, &pj)) in row.iter_mut().zip(p).enumerate() {
                            let onehot = if j == t { S::one() } else { S::zero() };
                            *g = *g + scale * (pj - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn rank3(shape: &[usize]) -> Result<[usize; 3]> {
    match *shape {
        [b, l, d] => Ok([b, l, d]),
        _ => Err(Error::shape(format!("expected a [batch, len, width] tensor, got {shape:?}"))),
    }
}

fn swap12<S: Copy>(src: &[S], [p, q, r, s]: [usize; 4]) -> Vec<S> {
    let mut out = Vec::with_capacity(src.len());
    for i in 0..p {
        for k in 0..r {
            for j in 0..q {
                let base = ((i * q + j) * r + k) * s;
                out.extend_from_slice(&src[base..base + s]);
            }
        }
    }
    out
}
