use super::kernels::{self, broadcast_index_map, broadcast_shape, split_at_axis};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Log,
    Softmax,
    Sum,
    Mean,
    SumAxis,
    MeanAxis,
    MaxAxis,
    Concat,
    Permute,
    Reshape,
    DepthwiseConv1d,
    PointwiseConv,
    OverlapAvgPool,
    TemporalDifference,
    QuantileMask,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Log => "log",
            OpKind::Softmax => "softmax",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAxis => "sum_axis",
            OpKind::MeanAxis => "mean_axis",
            OpKind::MaxAxis => "max_axis",
            OpKind::Concat => "concat",
            OpKind::Permute => "permute",
            OpKind::Reshape => "reshape",
            OpKind::DepthwiseConv1d => "depthwise_conv1d",
            OpKind::PointwiseConv => "pointwise_conv",
            OpKind::OverlapAvgPool => "overlap_avg_pool",
            OpKind::TemporalDifference => "temporal_difference",
            OpKind::QuantileMask => "quantile_mask",
        }
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        a_batched: bool,
        b_batched: bool,
    },
    Binary {
        kind: BinKind,
        a_map: Option<Vec<usize>>,
        b_map: Option<Vec<usize>>,
    },
    Relu,
    Sigmoid,
    Log,
    Softmax {
        outer: usize,
        len: usize,
        inner: usize,
    },
    SumAll,
    MeanAll,
    ReduceAxis {
        mean: bool,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaxAxis {
        outer: usize,
        len: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    Concat {
        outer: usize,
        sizes: Vec<usize>,
        inner: usize,
    },
    Permute {
        perm: Vec<usize>,
    },
    Reshape,
    DepthwiseConv1d(ConvGeom),
    PointwiseConv {
        rows: usize,
        c_in: usize,
        c_out: usize,
    },
    OverlapAvgPool {
        t_out: usize,
        channels: usize,
        kernel: usize,
        stride: usize,
    },
    TemporalDifference {
        batch: usize,
        t: usize,
        d: usize,
    },
    QuantileMask,
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Binary { kind, .. } => match kind {
                BinKind::Add => OpKind::Add,
                BinKind::Sub => OpKind::Sub,
                BinKind::Mul => OpKind::Mul,
            },
            Op::Relu => OpKind::Relu,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Log => OpKind::Log,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::SumAll => OpKind::Sum,
            Op::MeanAll => OpKind::Mean,
            Op::ReduceAxis { mean: false, .. } => OpKind::SumAxis,
            Op::ReduceAxis { mean: true, .. } => OpKind::MeanAxis,
            Op::MaxAxis { .. } => OpKind::MaxAxis,
            Op::Concat { .. } => OpKind::Concat,
            Op::Permute { .. } => OpKind::Permute,
            Op::Reshape => OpKind::Reshape,
            Op::DepthwiseConv1d(_) => OpKind::DepthwiseConv1d,
            Op::PointwiseConv { .. } => OpKind::PointwiseConv,
            Op::OverlapAvgPool { .. } => OpKind::OverlapAvgPool,
            Op::TemporalDifference { .. } => OpKind::TemporalDifference,
            Op::QuantileMask => OpKind::QuantileMask,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    t_in: usize,
    t_out: usize,
    spatial: usize,
    channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    needs_grad: bool,
}

/// Recording of a forward computation.
///
/// Nodes are appended in evaluation order, so node ids are already a
/// topological order and [`Graph::backward`] is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    trace_kinks: bool,
    sorted_sums: bool,
    kink_hash: u64,
    branches: Vec<Branch>,
    frozen: Option<(Vec<Branch>, usize)>,
    grad_faults: Vec<(Var, f64)>,
}

/// One piecewise decision: relu sides or mask bits, or max winners.
#[derive(Clone, Debug, PartialEq)]
enum Branch {
    Bits(Vec<bool>),
    Indices(Vec<usize>),
}

/// Every piecewise decision taken by a traced forward pass, in op order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BranchPattern(Vec<Branch>);

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that fingerprints every piecewise branch taken (relu side,
    /// max winner, mask bit). Two evaluations with equal fingerprints lie on
    /// the same smooth piece of the function.
    pub fn with_kink_trace() -> Self {
        Self {
            trace_kinks: true,
            kink_hash: FNV_OFFSET,
            ..Self::default()
        }
    }

    /// A graph whose matmul and softmax reductions add their terms in sorted
    /// order. Results are then exactly invariant to reordering the reduced
    /// axis, at a cost of a sort per output entry.
    pub fn with_sorted_sums() -> Self {
        Self {
            sorted_sums: true,
            ..Self::default()
        }
    }

    pub fn kink_signature(&self) -> u64 {
        self.kink_hash
    }

    /// Branches recorded by a traced graph.
    pub fn branch_pattern(&self) -> BranchPattern {
        BranchPattern(self.branches.clone())
    }

    /// A graph whose relu, max and mask ops replay `pattern` instead of
    /// deciding from their inputs. The forward pass must build the same ops
    /// in the same order as the one that recorded it. Evaluating it at
    /// nearby points gives the smooth piece a traced point sits on, which is
    /// what the backward pass differentiates.
    pub fn with_frozen_branches(pattern: BranchPattern) -> Self {
        Self {
            frozen: Some((pattern.0, 0)),
            ..Self::default()
        }
    }

    fn next_frozen(&mut self) -> Option<Branch> {
        let (pattern, cursor) = self.frozen.as_mut()?;
        let b = pattern.get(*cursor).cloned().expect("frozen pattern shorter than the forward pass");
        *cursor += 1;
        Some(b)
    }

    fn frozen_bits(&mut self, n: usize) -> Option<Vec<bool>> {
        match self.next_frozen()? {
            Branch::Bits(b) if b.len() == n => Some(b),
            other => panic!("frozen pattern does not match the forward pass: {other:?}"),
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// First node (in evaluation order) whose output holds NaN or ±inf.
    pub fn first_non_finite(&self) -> Option<(usize, OpKind)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.kind()))
    }

    /// Scales the gradient delivered to `leaf` by `factor`. Test hook for
    /// exercising the gradient audit against a broken backward pass.
    #[doc(hidden)]
    pub fn inject_grad_fault(&mut self, leaf: Var, factor: f64) {
        self.grad_faults.push((leaf, factor));
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn trace(&mut self, bits: Vec<bool>) {
        if !self.trace_kinks {
            return;
        }
        let mut h = self.kink_hash;
        let mut word = 0u64;
        let mut count = 0;
        for &b in &bits {
            word = (word << 1) | b as u64;
            count += 1;
            if count == 64 {
                h = (h ^ word).wrapping_mul(FNV_PRIME);
                word = 0;
                count = 0;
            }
        }
        h = (h ^ word ^ ((count as u64) << 56)).wrapping_mul(FNV_PRIME);
        self.kink_hash = h;
        self.branches.push(Branch::Bits(bits));
    }

    fn trace_indices(&mut self, idx: &[usize]) {
        if !self.trace_kinks {
            return;
        }
        let mut h = self.kink_hash;
        for &i in idx {
            h = (h ^ i as u64).wrapping_mul(FNV_PRIME);
        }
        self.kink_hash = h;
        self.branches.push(Branch::Indices(idx.to_vec()));
    }

    // ---- leaves ----------------------------------------------------------

    /// Leaf node; participates in differentiation iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: t,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    // ---- linear algebra --------------------------------------------------

    /// Matrix product. Accepts `[m,k]·[k,n]`, batched `[B,m,k]·[B,k,n]`, and
    /// either operand shared across the batch (`[B,m,k]·[k,n]`,
    /// `[m,k]·[B,k,n]`).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::dim("matmul", &sa, &sb);
        let (batch, m, k, n, a_batched, b_batched) = match (sa.len(), sb.len()) {
            (2, 2) => (1, sa[0], sa[1], sb[1], false, false),
            (3, 3) => {
                if sa[0] != sb[0] {
                    return Err(err());
                }
                (sa[0], sa[1], sa[2], sb[2], true, true)
            }
            (3, 2) => (sa[0], sa[1], sa[2], sb[1], true, false),
            (2, 3) => (sb[0], sa[0], sa[1], sb[2], false, true),
            _ => return Err(err()),
        };
        let kb = if b_batched { sb[1] } else { sb[0] };
        if k != kb {
            return Err(err());
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        let mm = if self.sorted_sums { kernels::mm_sorted_acc } else { kernels::mm_acc };
        if a_batched && !b_batched {
            mm(av, bv, &mut out, batch * m, k, n);
        } else {
            for bi in 0..batch {
                let ao = if a_batched { bi * m * k } else { 0 };
                let bo = if b_batched { bi * k * n } else { 0 };
                mm(
                    &av[ao..ao + m * k],
                    &bv[bo..bo + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let shape = if a_batched || b_batched {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        Ok(self.push(
            Op::MatMul {
                batch,
                m,
                k,
                n,
                a_batched,
                b_batched,
            },
            vec![a, b],
            Tensor::from_parts(shape, out),
        ))
    }

    /// 1×1 convolution: mixes the trailing channel axis of `x` through `w[C×C']`.
    pub fn pointwise_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.is_empty() || sx[sx.len() - 1] != sw[0] {
            return Err(Error::dim("pointwise_conv", &sx, &sw));
        }
        let c_in = sw[0];
        let c_out = sw[1];
        let rows = self.value(x).numel() / c_in;
        let mut out = vec![0.0; rows * c_out];
        kernels::mm_acc(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            rows,
            c_in,
            c_out,
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = c_out;
        Ok(self.push(
            Op::PointwiseConv { rows, c_in, c_out },
            vec![x, w],
            Tensor::from_parts(shape, out),
        ))
    }

    // ---- elementwise -----------------------------------------------------

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
        };
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::dim(name, &sa, &sb))?;
        let a_map = (sa != out_shape).then(|| broadcast_index_map(&sa, &out_shape));
        let b_map = (sb != out_shape).then(|| broadcast_index_map(&sb, &out_shape));
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let n: usize = out_shape.iter().product();
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        let out: Vec<f64> = match (&a_map, &b_map) {
            (None, None) => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n)
                .map(|i| {
                    let x = a_map.as_ref().map_or_else(|| av[i], |m| av[m[i]]);
                    let y = b_map.as_ref().map_or_else(|| bv[i], |m| bv[m[i]]);
                    f(x, y)
                })
                .collect(),
        };
        Ok(self.push(
            Op::Binary { kind, a_map, b_map },
            vec![a, b],
            Tensor::from_parts(out_shape, out),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    /// `x · c` for a scalar constant, recorded as a broadcast multiply.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = self.constant(Tensor::scalar(c));
        self.mul(x, c).expect("scalar broadcast always matches")
    }

    /// `|x|` composed as `relu(x) + relu(-x)`.
    pub fn abs(&mut self, x: Var) -> Var {
        let pos = self.relu(x);
        let neg = self.scale(x, -1.0);
        let neg = self.relu(neg);
        self.add(pos, neg).expect("same shape")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let shape = self.shape(x).to_vec();
        let out: Vec<f64> = match self.frozen_bits(n) {
            Some(on) => self.value(x).data().iter().zip(on).map(|(&v, o)| if o { v } else { 0.0 }).collect(),
            None => {
                if self.trace_kinks {
                    let bits = self.value(x).data().iter().map(|&v| v > 0.0).collect();
                    self.trace(bits);
                }
                // NaN passes through so non-finite values stay visible downstream
                self.value(x).data().iter().map(|&v| if v <= 0.0 { 0.0 } else { v }).collect()
            }
        };
        self.push(Op::Relu, vec![x], Tensor::from_parts(shape, out))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = xv
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let shape = xv.shape().to_vec();
        self.push(Op::Sigmoid, vec![x], Tensor::from_parts(shape, out))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = xv.data().iter().map(|v| v.ln()).collect();
        let shape = xv.shape().to_vec();
        self.push(Op::Log, vec![x], Tensor::from_parts(shape, out))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = split_at_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..len {
                    mx = mx.max(xv[base + l * inner]);
                }
                let mut s = 0.0;
                for l in 0..len {
                    let e = (xv[base + l * inner] - mx).exp();
                    out[base + l * inner] = e;
                    s += e;
                }
                if self.sorted_sums {
                    let mut terms: Vec<f64> = (0..len).map(|l| out[base + l * inner]).collect();
                    s = kernels::sorted_sum(&mut terms);
                }
                for l in 0..len {
                    out[base + l * inner] /= s;
                }
            }
        }
        Ok(self.push(
            Op::Softmax { outer, len, inner },
            vec![x],
            Tensor::from_parts(shape, out),
        ))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Op::SumAll, vec![x], Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Op::MeanAll, vec![x], Tensor::scalar(s))
    }

    fn reduce_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
        let mut out = shape.to_vec();
        if keepdim {
            out[axis] = 1;
        } else {
            out.remove(axis);
            if out.is_empty() {
                out.push(1);
            }
        }
        out
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "{op}: axis {axis} out of range for shape {shape:?}"
            )));
        }
        Ok(shape)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, keepdim: bool, mean: bool) -> Result<Var> {
        let shape = self.check_axis(if mean { "mean_axis" } else { "sum_axis" }, x, axis)?;
        let (outer, len, inner) = split_at_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            let inv = len as f64;
            out.iter_mut().for_each(|v| *v /= inv);
        }
        Ok(self.push(
            Op::ReduceAxis {
                mean,
                outer,
                len,
                inner,
            },
            vec![x],
            Tensor::from_parts(Self::reduce_shape(&shape, axis, keepdim), out),
        ))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce_axis(x, axis, keepdim, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce_axis(x, axis, keepdim, true)
    }

    /// Maximum along `axis`. Ties go to the lowest index, and so does the
    /// gradient.
    pub fn max_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.check_axis("max_axis", x, axis)?;
        let (outer, len, inner) = split_at_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = 0;
                let mut bv = xv[base];
                for l in 1..len {
                    let v = xv[base + l * inner];
                    if v > bv || (v.is_nan() && !bv.is_nan()) {
                        bv = v;
                        best = l;
                    }
                }
                out[o * inner + i] = bv;
                argmax[o * inner + i] = best;
            }
        }
        match self.next_frozen() {
            Some(Branch::Indices(fixed)) if fixed.len() == argmax.len() => {
                let xv = self.value(x).data();
                for o in 0..outer {
                    for i in 0..inner {
                        let k = o * inner + i;
                        out[k] = xv[o * len * inner + fixed[k] * inner + i];
                    }
                }
                argmax = fixed;
            }
            Some(other) => panic!("frozen pattern does not match the forward pass: {other:?}"),
            None => self.trace_indices(&argmax),
        }
        Ok(self.push(
            Op::MaxAxis {
                outer,
                len,
                inner,
                argmax,
            },
            vec![x],
            Tensor::from_parts(Self::reduce_shape(&shape, axis, keepdim), out),
        ))
    }

    /// Global max pooling over the position axis of a `[N×C]` matrix.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::dim("global_max_pool", self.shape(x), &[]));
        }
        self.max_axis(x, 0, false)
    }

    // ---- layout ----------------------------------------------------------

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.check_axis("concat", *first, axis)?;
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &sz) in xs.iter().zip(&sizes) {
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Op::Concat {
                outer,
                sizes,
                inner,
            },
            xs.to_vec(),
            Tensor::from_parts(shape, out),
        ))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm
                .iter()
                .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::Contract(format!(
                "permute: {perm:?} is not a permutation of rank {}",
                shape.len()
            )));
        }
        let (out_shape, out) = kernels::permute(self.value(x).data(), &shape, perm);
        Ok(self.push(
            Op::Permute {
                perm: perm.to_vec(),
            },
            vec![x],
            Tensor::from_parts(out_shape, out),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.numel() || shape.contains(&0) {
            return Err(Error::dim("reshape", v.shape(), shape));
        }
        let t = Tensor::from_parts(shape.to_vec(), v.data().to_vec());
        Ok(self.push(Op::Reshape, vec![x], t))
    }

    // ---- temporal ops ----------------------------------------------------

    /// Per-channel 1-D convolution along the time axis of `x[B×T×S×C]` with
    /// `kernel[C×K]`, symmetric zero padding `(K-1)/2`, and the given stride.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 4 || sk.len() != 2 || sk[0] != sx[3] {
            return Err(Error::dim("depthwise_conv1d", &sx, &sk));
        }
        let k = sk[1];
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!("temporal kernel must be odd, got {k}")));
        }
        if stride == 0 {
            return Err(Error::Config("temporal stride must be at least 1".into()));
        }
        if k > sx[1] {
            return Err(Error::Config(format!(
                "temporal kernel {k} exceeds sequence length {}",
                sx[1]
            )));
        }
        let pad = (k - 1) / 2;
        let geom = ConvGeom {
            batch: sx[0],
            t_in: sx[1],
            t_out: (sx[1] + 2 * pad - k) / stride + 1,
            spatial: sx[2],
            channels: sx[3],
            kernel: k,
            stride,
            pad,
        };
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let sc = geom.spatial * geom.channels;
        let mut out = vec![0.0; geom.batch * geom.t_out * sc];
        for b in 0..geom.batch {
            for to in 0..geom.t_out {
                let dst = &mut out[(b * geom.t_out + to) * sc..(b * geom.t_out + to + 1) * sc];
                for j in 0..k {
                    let ti = (to * stride + j) as isize - pad as isize;
                    if ti < 0 || ti >= geom.t_in as isize {
                        continue;
                    }
                    let src = &xv[(b * geom.t_in + ti as usize) * sc..][..sc];
                    for (idx, (d, &s)) in dst.iter_mut().zip(src).enumerate() {
                        *d += kv[(idx % geom.channels) * k + j] * s;
                    }
                }
            }
        }
        Ok(self.push(
            Op::DepthwiseConv1d(geom),
            vec![x, kernel],
            Tensor::from_parts(vec![geom.batch, geom.t_out, geom.spatial, geom.channels], out),
        ))
    }

    /// Mean over overlapping windows of a `[T×C]` matrix:
    /// `L = floor((T - kernel)/stride) + 1` output rows.
    pub fn overlap_avg_pool(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::dim("overlap_avg_pool", &sx, &[]));
        }
        let (t_in, channels) = (sx[0], sx[1]);
        if kernel == 0 || kernel > t_in {
            return Err(Error::Config(format!(
                "pool kernel {kernel} must be in 1..={t_in}"
            )));
        }
        if stride == 0 || stride >= kernel {
            return Err(Error::Config(format!(
                "pool stride {stride} must satisfy 1 <= stride < kernel ({kernel})"
            )));
        }
        let t_out = (t_in - kernel) / stride + 1;
        let xv = self.value(x).data();
        let mut out = vec![0.0; t_out * channels];
        for o in 0..t_out {
            let dst = &mut out[o * channels..(o + 1) * channels];
            for w in 0..kernel {
                let src = &xv[(o * stride + w) * channels..][..channels];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            dst.iter_mut().for_each(|v| *v /= kernel as f64);
        }
        Ok(self.push(
            Op::OverlapAvgPool {
                t_out,
                channels,
                kernel,
                stride,
            },
            vec![x],
            Tensor::from_parts(vec![t_out, channels], out),
        ))
    }

    /// `out[t] = x[t+1] - x[t]` along the time axis of `[T×D]` or `[B×T×D]`.
    pub fn temporal_difference(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (batch, t, d) = match sx.len() {
            2 => (1, sx[0], sx[1]),
            3 => (sx[0], sx[1], sx[2]),
            _ => return Err(Error::dim("temporal_difference", &sx, &[])),
        };
        if t < 2 {
            return Err(Error::DegenerateSequence(format!(
                "temporal difference needs at least 2 time steps, got {t}"
            )));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(batch * (t - 1) * d);
        for b in 0..batch {
            for s in 0..t - 1 {
                let cur = &xv[(b * t + s) * d..][..d];
                let next = &xv[(b * t + s + 1) * d..][..d];
                out.extend(next.iter().zip(cur).map(|(n, c)| n - c));
            }
        }
        let mut shape = sx;
        let ax = shape.len() - 2;
        shape[ax] = t - 1;
        Ok(self.push(
            Op::TemporalDifference { batch, t, d },
            vec![x],
            Tensor::from_parts(shape, out),
        ))
    }

    /// Binary mask that zeroes entries strictly below the element at sorted
    /// position `floor(q·N)`. The mask is a constant for differentiation.
    pub fn quantile_mask(&mut self, x: Var, q: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&q) {
            return Err(Error::Config(format!("quantile {q} must lie in [0, 1)")));
        }
        let n = self.value(x).numel();
        let mask = match self.frozen_bits(n) {
            Some(bits) => bits.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect(),
            None => {
                let mask = quantile_mask_values(self.value(x).data(), q);
                if self.trace_kinks {
                    self.trace(mask.iter().map(|&m| m > 0.0).collect());
                }
                mask
            }
        };
        let shape = self.shape(x).to_vec();
        let v = self.push(Op::QuantileMask, vec![x], Tensor::from_parts(shape, mask));
        self.nodes[v.0].needs_grad = false;
        Ok(v)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar `loss`, returning gradients for every leaf
    /// that requires them and is reachable.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                let mut g = g;
                for &(leaf, factor) in &self.grad_faults {
                    if leaf.0 == idx {
                        g.iter_mut().for_each(|v| *v *= factor);
                    }
                }
                leaf_grads[idx] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn input_needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let inputs = &node.inputs;
        let acc = |v: Var, grads: &mut [Option<Vec<f64>>]| -> Option<usize> {
            if self.input_needs(v) {
                let n = self.nodes[v.0].value.numel();
                grads[v.0].get_or_insert_with(|| vec![0.0; n]);
                Some(v.0)
            } else {
                None
            }
        };
        match &node.op {
            Op::Leaf | Op::QuantileMask => {}
            Op::MatMul {
                batch,
                m,
                k,
                n,
                a_batched,
                b_batched,
            } => {
                let (a, b) = (inputs[0], inputs[1]);
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                if let Some(ai) = acc(a, grads) {
                    let ga = grads[ai].as_mut().unwrap();
                    for bi in 0..batch {
                        let bo = if *b_batched { bi * k * n } else { 0 };
                        let ao = if *a_batched { bi * m * k } else { 0 };
                        kernels::mm_a_bt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv[bo..bo + k * n],
                            &mut ga[ao..ao + m * k],
                            m,
                            k,
                            n,
                        );
                    }
                }
                if let Some(bi_) = acc(b, grads) {
                    let gb = grads[bi_].as_mut().unwrap();
                    if *a_batched && !*b_batched {
                        kernels::mm_at_b_acc(av, g, gb, batch * m, k, n);
                    } else {
                        for bi in 0..batch {
                            let ao = if *a_batched { bi * m * k } else { 0 };
                            let bo = if *b_batched { bi * k * n } else { 0 };
                            kernels::mm_at_b_acc(
                                &av[ao..ao + m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut gb[bo..bo + k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
            }
            Op::PointwiseConv { rows, c_in, c_out } => {
                let (x, w) = (inputs[0], inputs[1]);
                if let Some(xi) = acc(x, grads) {
                    let wv = self.value(w).data();
                    kernels::mm_a_bt_acc(g, wv, grads[xi].as_mut().unwrap(), *rows, *c_in, *c_out);
                }
                if let Some(wi) = acc(w, grads) {
                    let xv = self.value(x).data();
                    kernels::mm_at_b_acc(xv, g, grads[wi].as_mut().unwrap(), *rows, *c_in, *c_out);
                }
            }
            Op::Binary { kind, a_map, b_map } => {
                let (a, b) = (inputs[0], inputs[1]);
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let ia = |i: usize| a_map.as_ref().map_or(i, |m| m[i]);
                let ib = |i: usize| b_map.as_ref().map_or(i, |m| m[i]);
                if let Some(ai) = acc(a, grads) {
                    let ga = grads[ai].as_mut().unwrap();
                    for (i, &gi) in g.iter().enumerate() {
                        ga[ia(i)] += match kind {
                            BinKind::Add | BinKind::Sub => gi,
                            BinKind::Mul => gi * bv[ib(i)],
                        };
                    }
                }
                if let Some(bi) = acc(b, grads) {
                    let gb = grads[bi].as_mut().unwrap();
                    for (i, &gi) in g.iter().enumerate() {
                        gb[ib(i)] += match kind {
                            BinKind::Add => gi,
                            BinKind::Sub => -gi,
                            BinKind::Mul => gi * av[ia(i)],
                        };
                    }
                }
            }
            Op::Relu => {
                let x = inputs[0];
                if let Some(xi) = acc(x, grads) {
                    let xv = self.value(x).data();
                    let gx = grads[xi].as_mut().unwrap();
                    for ((d, &gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Sigmoid => {
                let x = inputs[0];
                if let Some(xi) = acc(x, grads) {
                    let y = node.value.data();
                    let gx = grads[xi].as_mut().unwrap();
                    for ((d, &gi), &yv) in gx.iter_mut().zip(g).zip(y) {
                        *d += gi * yv * (1.0 - yv);
                    }
                }
            }
            Op::Log => {
                let x = inputs[0];
                if let Some(xi) = acc(x, grads) {
                    let xv = self.value(x).data();
                    let gx = grads[xi].as_mut().unwrap();
                    for ((d, &gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *d += gi / v;
                    }
                }
            }
            Op::Softmax { outer, len, inner } => {
                let x = inputs[0];
                if let Some(xi) = acc(x, grads) {
                    let y = node.value.data();
                    let gx = grads[xi].as_mut().unwrap();
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for l in 0..*len {
                                dot += g[base + l * inner] * y[base + l * inner];
                            }
                            for l in 0..*len {
                                let p = base + l * inner;
                                gx[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::SumAll | Op::MeanAll => {
                let x = inputs[0];
                if let Some(xi) = acc(x, grads) {
                    let gx = grads[xi].as_mut().unwrap();
                    let scale = if matches!(node.op, Op::MeanAll) {
                        1.0 / gx.len() as f64
                    } else {
                        1.0
                    };
                    gx.iter_mut().for_each(|d| *d += g[0] * scale);
                }
            }
            Op::ReduceAxis {
                mean,
                outer,
                len,
                inner,
            } => {
                let x = inputs[0];
                if let Some(xi) = acc(x, grads) {
                    let gx = grads[xi].as_mut().unwrap();
                    let scale = if *mean { 1.0 / *len as f64 } else { 1.0 };
                    for o in 0..*outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..*len {
                            let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s * scale;
                            }
                        }
                    }
                }
            }
            Op::MaxAxis {
                outer,
                len,
                inner,
                argmax,
            } => {
                let x = inputs[0];
                if let Some(xi) = acc(x, grads) {
                    let gx = grads[xi].as_mut().unwrap();
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let r = o * inner + i;
                            gx[o * len * inner + argmax[r] * inner + i] += g[r];
                        }
                    }
                }
            }
            Op::Concat {
                outer,
                sizes,
                inner,
            } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&x, &sz) in inputs.iter().zip(sizes) {
                    if let Some(xi) = acc(x, grads) {
                        let gx = grads[xi].as_mut().unwrap();
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..][..sz * inner];
                            for (d, &s) in gx[o * sz * inner..(o + 1) * sz * inner]
                                .iter_mut()
                                .zip(src)
                            {
                                *d += s;
                            }
                        }
                    }
                    offset += sz;
                }
            }
            Op::Permute { perm } => {
                let x = inputs[0];
                if let Some(xi) = acc(x, grads) {
                    let inv = kernels::inverse_perm(perm);
                    let (_, back) = kernels::permute(g, node.value.shape(), &inv);
                    let gx = grads[xi].as_mut().unwrap();
                    for (d, s) in gx.iter_mut().zip(back) {
                        *d += s;
                    }
                }
            }
            Op::Reshape => {
                let x = inputs[0];
                if let Some(xi) = acc(x, grads) {
                    let gx = grads[xi].as_mut().unwrap();
                    for (d, &s) in gx.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::DepthwiseConv1d(geom) => {
                let (x, kern) = (inputs[0], inputs[1]);
                let xv = self.value(x).data();
                let kv = self.value(kern).data();
                let sc = geom.spatial * geom.channels;
                let k = geom.kernel;
                let need_x = acc(x, grads);
                let need_k = acc(kern, grads);
                let mut gk = need_k.map(|_| vec![0.0; kv.len()]);
                let mut gx = need_x.map(|_| vec![0.0; xv.len()]);
                for b in 0..geom.batch {
                    for to in 0..geom.t_out {
                        let go = &g[(b * geom.t_out + to) * sc..][..sc];
                        for j in 0..k {
                            let ti = (to * geom.stride + j) as isize - geom.pad as isize;
                            if ti < 0 || ti >= geom.t_in as isize {
                                continue;
                            }
                            let off = (b * geom.t_in + ti as usize) * sc;
                            for (idx, &gv) in go.iter().enumerate() {
                                let c = idx % geom.channels;
                                if let Some(gk) = gk.as_mut() {
                                    gk[c * k + j] += gv * xv[off + idx];
                                }
                                if let Some(gx) = gx.as_mut() {
                                    gx[off + idx] += gv * kv[c * k + j];
                                }
                            }
                        }
                    }
                }
                if let (Some(i), Some(src)) = (need_x, gx) {
                    add_into(grads[i].as_mut().unwrap(), &src);
                }
                if let (Some(i), Some(src)) = (need_k, gk) {
                    add_into(grads[i].as_mut().unwrap(), &src);
                }
            }
            Op::OverlapAvgPool {
                t_out,
                channels,
                kernel,
                stride,
            } => {
                let x = inputs[0];
                if let Some(xi) = acc(x, grads) {
                    let gx = grads[xi].as_mut().unwrap();
                    let inv = 1.0 / *kernel as f64;
                    for o in 0..*t_out {
                        let src = &g[o * channels..(o + 1) * channels];
                        for w in 0..*kernel {
                            let dst = &mut gx[(o * stride + w) * channels..][..*channels];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s * inv;
                            }
                        }
                    }
                }
            }
            Op::TemporalDifference { batch, t, d } => {
                let x = inputs[0];
                if let Some(xi) = acc(x, grads) {
                    let gx = grads[xi].as_mut().unwrap();
                    for b in 0..*batch {
                        for s in 0..t - 1 {
                            let src = &g[(b * (t - 1) + s) * d..][..*d];
                            for (c, &gv) in src.iter().enumerate() {
                                gx[(b * t + s + 1) * d + c] += gv;
                                gx[(b * t + s) * d + c] -= gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn quantile_mask_values(x: &[f64], q: f64) -> Vec<f64> {
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = ((q * x.len() as f64).floor() as usize).min(x.len() - 1);
    let threshold = sorted[pos];
    x.iter()
        .map(|&v| if v < threshold { 0.0 } else { 1.0 })
        .collect()
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like its value when unreachable.
    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v).to_vec()))
    }
}
