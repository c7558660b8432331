//! Gradient tape: a linear record of executed primitives replayed in reverse.

use crate::conv::{ConvGeom, Padding};
use crate::depthwise::DepthwiseGeom;
use crate::error::{invalid, shape_err, Result};
use crate::par::Exec;
use crate::real::matmul;
use crate::tensor::numel;
use crate::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    ClampMin(Var, T),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Conv2d { input: Var, kernel: Var, geom: ConvGeom },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    TileSpatial(Var),
    ResizeNearest(Var),
    ReduceSum(Var),
    ReduceMean(Var),
    Softmax(Var),
    InstanceNorm { input: Var, eps: T },
    DepthwiseKernels { frame: Var, kernels: Var },
    MaskComposite { layers: Var, masks: Var },
}

#[derive(Clone, Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Outcome of one reverse sweep.
#[derive(Clone, Debug, Default)]
pub struct BackwardReport {
    /// Nodes that received an adjoint, in the order they were processed.
    pub visited: Vec<Var>,
}

/// Records primitives during the forward pass.
///
/// Single-threaded by contract: distinct replicas should use distinct tapes.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    exec: Exec,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => shape_err(op, format!("expected [B,H,W,C], got {shape:?}")),
    }
}

fn stable_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; gradients are kept iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        let value = tensor.into_data();
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape matches value")
    }

    /// Accumulated gradient of a leaf created with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- elementwise -------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err(op, format!("{sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, rec: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), value, rec, &[a, b]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, rec: Op<T>) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(self.shape(a).to_vec(), value, rec, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, stable_sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// `max(x, threshold)`; gradient passes only where `x > threshold`.
    pub fn clamp_min(&mut self, a: Var, threshold: T) -> Var {
        self.unary(a, |x| if x > threshold { x } else { threshold }, Op::ClampMin(a, threshold))
    }

    /// Adds `bias[C]` along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&1);
        if self.shape(bias) != [c] {
            return shape_err("add_bias", format!("bias {:?} for input {:?}", self.shape(bias), self.shape(x)));
        }
        let b = self.value(bias);
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % c])
            .collect();
        Ok(self.push(self.shape(x).to_vec(), value, Op::AddBias(x, bias), &[x, bias]))
    }

    // ---- linear maps -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = match (self.shape(a), self.shape(b)) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return shape_err("matmul", format!("{sa:?} x {sb:?}")),
        };
        let mut out = vec![T::zero(); m * n];
        matmul(self.value(a), false, self.value(b), false, &mut out, m, k, n, false);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// Cross-correlation of `input[B,H,W,Cin]` with `kernel[k,k,Cin,Cout]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(kernel), stride, padding)?;
        let out = geom.forward(self.value(input), self.value(kernel), self.exec);
        Ok(self.push(geom.out_shape(), out, Op::Conv2d { input, kernel, geom }, &[input, kernel]))
    }

    // ---- shape manipulation ------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return invalid("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err("concat", format!("axis {axis} out of range for {base:?}"));
        }
        let mut extent = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err("concat", format!("{s:?} vs {base:?} along axis {axis}"));
            }
            extent += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = extent;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * len..(o + 1) * len]);
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Concatenation along the trailing (channel) axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return invalid("concat_channels", "no inputs");
        };
        let axis = self.shape(first).len().saturating_sub(1);
        self.concat(inputs, axis)
    }

    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return shape_err("slice", format!("[{start}, {}) along axis {axis} of {shape:?}", start + len));
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let src = self.value(input);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(out_shape, out, Op::Slice { input, axis, start }, &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(input).len() {
            return shape_err("reshape", format!("{:?} as {shape:?}", self.shape(input)));
        }
        let value = self.value(input).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(input), &[input]))
    }

    /// Broadcasts `v[B,C]` to a `[B,H,W,C]` map.
    pub fn tile_spatial(&mut self, v: Var, h: usize, w: usize) -> Result<Var> {
        let (b, c) = match *self.shape(v) {
            [b, c] => (b, c),
            ref s => return shape_err("tile_spatial", format!("expected [B,C], got {s:?}")),
        };
        let src = self.value(v);
        let mut out = Vec::with_capacity(b * h * w * c);
        for bi in 0..b {
            for _ in 0..h * w {
                out.extend_from_slice(&src[bi * c..(bi + 1) * c]);
            }
        }
        Ok(self.push(vec![b, h, w, c], out, Op::TileSpatial(v), &[v]))
    }

    /// Nearest-neighbour resampling of `x[B,H,W,C]` to `[B,oh,ow,C]`.
    pub fn resize_nearest(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (b, h, w, c) = dims4("resize_nearest", self.shape(x))?;
        if oh == 0 || ow == 0 {
            return invalid("resize_nearest", "empty target extent");
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(b * oh * ow * c);
        for bi in 0..b {
            for y in 0..oh {
                let sy = y * h / oh;
                for xx in 0..ow {
                    let sx = xx * w / ow;
                    out.extend_from_slice(&src[((bi * h + sy) * w + sx) * c..][..c]);
                }
            }
        }
        Ok(self.push(vec![b, oh, ow, c], out, Op::ResizeNearest(x), &[x]))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (_, h, w, _) = dims4("upsample_nearest", self.shape(x))?;
        self.resize_nearest(x, h * factor, w * factor)
    }

    // ---- reductions & normalisers -----------------------------------------

    pub fn reduce_sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(Vec::new(), vec![s], Op::ReduceSum(a), &[a])
    }

    pub fn reduce_mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s: T = self.value(a).iter().copied().sum();
        self.push(Vec::new(), vec![s / T::lit(n as f64)], Op::ReduceMean(a), &[a])
    }

    /// Softmax over the trailing axis, stabilised by max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let c = match self.shape(a).last() {
            Some(&c) if c > 0 => c,
            _ => return shape_err("softmax", format!("empty trailing axis in {:?}", self.shape(a))),
        };
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x = *x / sum;
            }
        }
        Ok(self.push(self.shape(a).to_vec(), out, Op::Softmax(a), &[a]))
    }

    /// Alias of [`Tape::softmax`] for NHWC maps: normalises over channels.
    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        self.softmax(a)
    }

    /// Per-sample, per-channel normalisation over the spatial axes.
    pub fn instance_norm(&mut self, input: Var, eps: T) -> Result<Var> {
        let (b, h, w, c) = dims4("instance_norm", self.shape(input))?;
        let x = self.value(input);
        let n = h * w;
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let idx = |p: usize| (bi * n + p) * c + ci;
                let mean = (0..n).map(|p| x[idx(p)]).sum::<T>() / T::lit(n as f64);
                let var = (0..n).map(|p| (x[idx(p)] - mean).powi(2)).sum::<T>() / T::lit(n as f64);
                let inv = T::one() / (var + eps).sqrt();
                for p in 0..n {
                    out[idx(p)] = (x[idx(p)] - mean) * inv;
                }
            }
        }
        Ok(self.push(self.shape(input).to_vec(), out, Op::InstanceNorm { input, eps }, &[input]))
    }

    // ---- motion transforms -------------------------------------------------

    /// Applies per-sample kernels depthwise with replicate padding.
    ///
    /// `frame[B,H,W,C]`, `kernels[B,M,k,k]` → `[B,H,W,M,C]` with
    /// `out[b,y,x,m,c] = Σ K[b,m,i,j] · frame[b, y+i-k/2, x+j-k/2, c]`.
    pub fn depthwise_kernels(&mut self, frame: Var, kernels: Var) -> Result<Var> {
        let (b, h, w, c) = dims4("depthwise_kernels", self.shape(frame))?;
        let (kb, m, k) = match *self.shape(kernels) {
            [kb, m, k, k2] if k == k2 && k % 2 == 1 => (kb, m, k),
            ref s => return shape_err("depthwise_kernels", format!("kernels must be [B,M,k,k] with odd k, got {s:?}")),
        };
        if kb != b {
            return shape_err(
                "depthwise_kernels",
                format!("frame {:?} vs kernels {:?}", self.shape(frame), self.shape(kernels)),
            );
        }
        let geom = DepthwiseGeom { b, h, w, c, m, k };
        let out = geom.forward(self.value(frame), self.value(kernels), self.exec);
        Ok(self.push(
            vec![b, h, w, m, c],
            out,
            Op::DepthwiseKernels { frame, kernels },
            &[frame, kernels],
        ))
    }

    /// Per-pixel weighted sum: `layers[B,H,W,L,C]`, `masks[B,H,W,L]` → `[B,H,W,C]`.
    pub fn mask_composite(&mut self, layers: Var, masks: Var) -> Result<Var> {
        let ls = self.shape(layers).to_vec();
        let ms = self.shape(masks);
        let (l, c) = match (ls.as_slice(), ms) {
            ([b, h, w, l, c], [mb, mh, mw, ml]) if b == mb && h == mh && w == mw && l == ml => (*l, *c),
            _ => return shape_err("mask_composite", format!("layers {ls:?} vs masks {ms:?}")),
        };
        let lv = self.value(layers);
        let mv = self.value(masks);
        let pixels = mv.len() / l.max(1);
        let mut out = vec![T::zero(); pixels * c];
        for p in 0..pixels {
            let dst = &mut out[p * c..(p + 1) * c];
            for li in 0..l {
                let wgt = mv[p * l + li];
                let src = &lv[(p * l + li) * c..][..c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += wgt * s;
                }
            }
        }
        let shape = vec![ls[0], ls[1], ls[2], c];
        Ok(self.push(shape, out, Op::MaskComposite { layers, masks }, &[layers, masks]))
    }

    // ---- reverse sweep -----------------------------------------------------

    /// Accumulates `d root / d leaf` into every `requires_grad` leaf.
    ///
    /// The root is seeded with ones, so a non-scalar root differentiates the
    /// sum of its entries. Gradients add to whatever the leaves already hold.
    pub fn backward(&mut self, root: Var) -> Result<BackwardReport> {
        if root.0 >= self.nodes.len() {
            return invalid("backward", format!("unknown variable {root:?}"));
        }
        let mut report = BackwardReport::default();
        if !self.nodes[root.0].needs_grad {
            return Ok(report);
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![T::one(); self.nodes[root.0].value.len()]);
        let mut leaf_grads = Vec::new();
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            report.visited.push(Var(i));
            if let Op::Leaf = self.nodes[i].op {
                if self.nodes[i].requires_grad {
                    leaf_grads.push((i, g));
                }
                continue;
            }
            self.backward_node(i, &g, &mut adj);
        }
        for (i, g) in leaf_grads {
            let slot = self.nodes[i].grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
            for (s, v) in slot.iter_mut().zip(g) {
                *s += v;
            }
        }
        Ok(report)
    }

    fn backward_node(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let y = &node.value;
        let val = |v: Var| -> &[T] { &nodes[v.0].value };
        let shape = |v: Var| -> &[usize] { &nodes[v.0].shape };

        // Adjoint buffer of `v`, allocated lazily; `None` when `v` needs no gradient.
        fn slot<'a, T: Real>(nodes: &[Node<T>], adj: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
            if !nodes[v.0].needs_grad {
                return None;
            }
            Some(adj[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]))
        }
        macro_rules! each {
            ($v:expr, |$j:ident, $d:ident| $body:expr) => {
                if let Some(buf) = slot(nodes, adj, $v) {
                    for ($j, $d) in buf.iter_mut().enumerate() {
                        *$d += $body;
                    }
                }
            };
        }

        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                each!(a, |j, d| g[j]);
                each!(b, |j, d| g[j]);
            }
            &Op::Sub(a, b) => {
                each!(a, |j, d| g[j]);
                each!(b, |j, d| -g[j]);
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                each!(a, |j, d| g[j] * vb[j]);
                each!(b, |j, d| g[j] * va[j]);
            }
            &Op::Scale(a, c) => each!(a, |j, d| g[j] * c),
            &Op::AddScalar(a) => each!(a, |j, d| g[j]),
            &Op::Relu(a) => {
                let x = val(a);
                each!(a, |j, d| if x[j] > T::zero() { g[j] } else { T::zero() });
            }
            &Op::Sigmoid(a) => each!(a, |j, d| g[j] * y[j] * (T::one() - y[j])),
            &Op::Tanh(a) => each!(a, |j, d| g[j] * (T::one() - y[j] * y[j])),
            &Op::Exp(a) => each!(a, |j, d| g[j] * y[j]),
            &Op::Log(a) => {
                let x = val(a);
                each!(a, |j, d| g[j] / x[j]);
            }
            &Op::Square(a) => {
                let x = val(a);
                each!(a, |j, d| g[j] * T::lit(2.0) * x[j]);
            }
            &Op::ClampMin(a, t) => {
                let x = val(a);
                each!(a, |j, d| if x[j] > t { g[j] } else { T::zero() });
            }
            &Op::AddBias(x, b) => {
                each!(x, |j, d| g[j]);
                if let Some(buf) = slot(nodes, adj, b) {
                    let c = buf.len();
                    for (j, &gj) in g.iter().enumerate() {
                        buf[j % c] += gj;
                    }
                }
            }
            &Op::MatMul(a, b) => {
                let (m, k) = (shape(a)[0], shape(a)[1]);
                let n = shape(b)[1];
                let (va, vb) = (val(a), val(b));
                if let Some(buf) = slot(nodes, adj, a) {
                    matmul(g, false, vb, true, buf, m, n, k, true);
                }
                if let Some(buf) = slot(nodes, adj, b) {
                    matmul(va, true, g, false, buf, k, m, n, true);
                }
            }
            Op::Conv2d { input, kernel, geom } => {
                let (input, kernel) = (*input, *kernel);
                if let Some(buf) = slot(nodes, adj, kernel) {
                    geom.backward_kernel(val(input), g, buf, self.exec);
                }
                if let Some(buf) = slot(nodes, adj, input) {
                    geom.backward_input(val(kernel), g, buf, self.exec);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, extent, inner) = axis_split(&node.shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = shape(v)[*axis] * inner;
                    if let Some(buf) = slot(nodes, adj, v) {
                        for o in 0..outer {
                            let src = &g[o * extent * inner + offset..][..len];
                            for (d, &s) in buf[o * len..(o + 1) * len].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            &Op::Slice { input, axis, start } => {
                let (outer, extent, inner) = axis_split(shape(input), axis);
                let len = node.shape[axis] * inner;
                if let Some(buf) = slot(nodes, adj, input) {
                    for o in 0..outer {
                        let base = (o * extent + start) * inner;
                        for (d, &s) in buf[base..base + len].iter_mut().zip(&g[o * len..(o + 1) * len]) {
                            *d += s;
                        }
                    }
                }
            }
            &Op::Reshape(a) => each!(a, |j, d| g[j]),
            &Op::TileSpatial(v) => {
                let (b, h, w, c) = (node.shape[0], node.shape[1], node.shape[2], node.shape[3]);
                if let Some(buf) = slot(nodes, adj, v) {
                    for bi in 0..b {
                        for p in 0..h * w {
                            for ci in 0..c {
                                buf[bi * c + ci] += g[(bi * h * w + p) * c + ci];
                            }
                        }
                    }
                }
            }
            &Op::ResizeNearest(x) => {
                let (b, h, w, c) = (shape(x)[0], shape(x)[1], shape(x)[2], shape(x)[3]);
                let (oh, ow) = (node.shape[1], node.shape[2]);
                if let Some(buf) = slot(nodes, adj, x) {
                    for bi in 0..b {
                        for yy in 0..oh {
                            let sy = yy * h / oh;
                            for xx in 0..ow {
                                let sx = xx * w / ow;
                                let src = &g[((bi * oh + yy) * ow + xx) * c..][..c];
                                let dst = &mut buf[((bi * h + sy) * w + sx) * c..][..c];
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        }
                    }
                }
            }
            &Op::ReduceSum(a) => each!(a, |_j, d| g[0]),
            &Op::ReduceMean(a) => {
                let n = T::lit(val(a).len().max(1) as f64);
                each!(a, |_j, d| g[0] / n);
            }
            &Op::Softmax(a) => {
                let c = *node.shape.last().expect("softmax has a trailing axis");
                if let Some(buf) = slot(nodes, adj, a) {
                    for ((dst, yr), gr) in buf.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for ((d, &p), &q) in dst.iter_mut().zip(yr).zip(gr) {
                            *d += p * (q - dot);
                        }
                    }
                }
            }
            &Op::InstanceNorm { input, eps } => {
                let (b, h, w, c) = (node.shape[0], node.shape[1], node.shape[2], node.shape[3]);
                let n = h * w;
                let nf = T::lit(n as f64);
                let x = val(input);
                if let Some(buf) = slot(nodes, adj, input) {
                    for bi in 0..b {
                        for ci in 0..c {
                            let idx = |p: usize| (bi * n + p) * c + ci;
                            let mean = (0..n).map(|p| x[idx(p)]).sum::<T>() / nf;
                            let var = (0..n).map(|p| (x[idx(p)] - mean).powi(2)).sum::<T>() / nf;
                            let inv = T::one() / (var + eps).sqrt();
                            let sum_g: T = (0..n).map(|p| g[idx(p)]).sum();
                            let sum_gy: T = (0..n).map(|p| g[idx(p)] * y[idx(p)]).sum();
                            for p in 0..n {
                                buf[idx(p)] += inv / nf * (nf * g[idx(p)] - sum_g - y[idx(p)] * sum_gy);
                            }
                        }
                    }
                }
            }
            &Op::DepthwiseKernels { frame, kernels } => {
                let (b, h, w, m, c) = (node.shape[0], node.shape[1], node.shape[2], node.shape[3], node.shape[4]);
                let geom = DepthwiseGeom { b, h, w, c, m, k: shape(kernels)[2] };
                if let Some(buf) = slot(nodes, adj, kernels) {
                    geom.backward_kernels(val(frame), g, buf, self.exec);
                }
                if let Some(buf) = slot(nodes, adj, frame) {
                    geom.backward_frame(val(kernels), g, buf, self.exec);
                }
            }
            &Op::MaskComposite { layers, masks } => {
                let l = *shape(masks).last().expect("masks are 4-d");
                let c = *node.shape.last().expect("output is 4-d");
                let lv = val(layers);
                let mv = val(masks);
                let pixels = mv.len() / l.max(1);
                if let Some(buf) = slot(nodes, adj, layers) {
                    for p in 0..pixels {
                        for li in 0..l {
                            let wgt = mv[p * l + li];
                            for ci in 0..c {
                                buf[(p * l + li) * c + ci] += wgt * g[p * c + ci];
                            }
                        }
                    }
                }
                if let Some(buf) = slot(nodes, adj, masks) {
                    for p in 0..pixels {
                        for li in 0..l {
                            let mut acc = T::zero();
                            for ci in 0..c {
                                acc += lv[(p * l + li) * c + ci] * g[p * c + ci];
                            }
                            buf[p * l + li] += acc;
                        }
                    }
                }
            }
        }
    }
}
