//! Tape-based reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Operations are evaluated eagerly and recorded on a [`Tape`]; [`Tape::backward`]
//! then walks the records in reverse, accumulating gradients additively across
//! fan-out. Values are immutable once recorded, so the saved buffers stay valid
//! for the backward pass.
//!
//! Semantics fixed here and relied on by every caller:
//! - double precision, row-major contiguous layout;
//! - binary elementwise ops broadcast by the trailing-dimension rule and reduce
//!   gradients back to the input shapes by summation;
//! - `leaky_relu` uses slope [`LEAKY_SLOPE`] = 0.01 everywhere;
//! - max-pool ties route the gradient to the first occurrence, scanning each
//!   window row-major;
//! - grid sampling clamps out-of-range points to the border (the position
//!   gradient vanishes once a coordinate is clamped);
//! - the graph-attention reductions sum their terms in value-sorted order, so
//!   relabeling graph nodes permutes the outputs bit-identically.

pub mod kernels;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Slope of every `leaky_relu` in the system, including the attention scores.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Handle to a value recorded on a [`Tape`]. Only valid for the tape that
/// produced it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Adjacency used by the fused graph-attention operations: one sorted,
/// deduplicated neighbor list per node (self-loops included explicitly).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphEdges {
    neighbors: Vec<Vec<usize>>,
}

impl GraphEdges {
    pub fn new(neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = neighbors.len();
        for (i, ns) in neighbors.iter().enumerate() {
            if ns.is_empty() {
                return Err(Error::shape(format!("node {i} has no neighbors")));
            }
            for pair in ns.windows(2) {
                if pair[0] >= pair[1] {
                    return Err(Error::shape(format!("neighbors of node {i} not sorted/unique")));
                }
            }
            if *ns.last().unwrap() >= n {
                return Err(Error::shape(format!("neighbor index out of range for node {i}")));
            }
        }
        Ok(GraphEdges { neighbors })
    }

    /// Build from undirected edges, optionally adding self-loops.
    pub fn from_undirected(n: usize, edges: &[(usize, usize)], self_loops: bool) -> Result<Self> {
        let mut sets = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::shape(format!("edge ({a},{b}) out of range for {n} nodes")));
            }
            sets[a].push(b);
            sets[b].push(a);
        }
        if self_loops {
            for (i, s) in sets.iter_mut().enumerate() {
                s.push(i);
            }
        }
        for s in &mut sets {
            s.sort_unstable();
            s.dedup();
        }
        GraphEdges::new(sets)
    }

    /// Nodes reachable in at most two steps (the one-hop sets composed with
    /// themselves); always a superset of the one-hop sets.
    pub fn two_hop(&self) -> GraphEdges {
        let mut sets = Vec::with_capacity(self.n());
        for ns in &self.neighbors {
            let mut s: Vec<usize> = ns.clone();
            for &j in ns {
                s.extend_from_slice(&self.neighbors[j]);
            }
            s.sort_unstable();
            s.dedup();
            sets.push(s);
        }
        GraphEdges { neighbors: sets }
    }

    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }
}

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var),
    Square(Var),
    Sqrt(Var),
    Abs(Var),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    UpsampleNearest2d { x: Var, factor: usize },
    Softmax { x: Var, axis: usize },
    GridSampleBilinear { featmap: Var, points: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    GatherRows { x: Var, indices: Arc<Vec<usize>> },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    SumAll(Var),
    GatAlpha { score_self: Var, score_neigh: Var, edges: Arc<GraphEdges> },
    GatAggregate { alpha: Var, feats: Var, edges: Arc<GraphEdges> },
}

struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation and differentiates it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Sum in ascending value order. Given the same multiset of terms this yields
/// a bit-identical result regardless of the order terms were produced in.
fn sorted_sum(buf: &mut Vec<f64>) -> f64 {
    buf.sort_unstable_by(f64::total_cmp);
    let mut acc = 0.0;
    for v in buf.iter() {
        acc += v;
    }
    acc
}

fn leaky_deriv(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Broadcast shape of two operands under the trailing-dimension rule.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for d in 0..rank {
        let da = if d < rank - a.len() { 1 } else { a[d - (rank - a.len())] };
        let db = if d < rank - b.len() { 1 } else { b[d - (rank - b.len())] };
        if da == db {
            out[d] = da;
        } else if da == 1 {
            out[d] = db;
        } else if db == 1 {
            out[d] = da;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Row-major strides of `shape` left-padded to `rank`, with stride 0 on
/// broadcast (size-1) dims so a flat input offset can follow an output walk.
fn bcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for d in (0..shape.len()).rev() {
        strides[pad + d] = if shape[d] == 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Walk every element of `out_shape` in row-major order, tracking two input
/// offsets that follow the given (possibly zero) strides.
fn for_each_pair(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total = numel(out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

/// Row-major strides of `shape`.
fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

/// Walk `out_shape` row-major, tracking one input offset along `strides`.
fn for_each_map(out_shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel(out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut i = 0usize;
    for o in 0..total {
        f(o, i);
        for d in (0..rank).rev() {
            idx[d] += 1;
            i += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            i -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

/// Softmax lane decomposition: (outer, len, inner) for a reduction over `axis`.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.push_shared(shape, Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, shape: Vec<usize>, value: Arc<Vec<f64>>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Record a trainable input; gradients will be available after backward.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_shared(t.shape().to_vec(), t.buffer(), Op::Leaf, true)
    }

    /// Record a non-trainable input; no gradient is computed for it.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push_shared(t.shape().to_vec(), t.buffer(), Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.as_ref().clone()).expect("recorded node is consistent")
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if one was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &str, make: impl Fn(Var, Var) -> Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let out_shape = broadcast_shape(sa, sb)
            .ok_or_else(|| Error::shape(format!("{name}: shapes {sa:?} and {sb:?} not broadcastable")))?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = vec![0.0; numel(&out_shape)];
        if sa == sb {
            for ((o, &x), &y) in out.iter_mut().zip(va.iter()).zip(vb.iter()) {
                *o = f(x, y);
            }
        } else {
            let stra = bcast_strides(sa, &out_shape);
            let strb = bcast_strides(sb, &out_shape);
            for_each_pair(&out_shape, &stra, &strb, |o, ia, ib| out[o] = f(va[ia], vb[ib]));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out_shape, out, make(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul, |x, y| x * y)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x);
        self.push(shape, out, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::LeakyRelu(x), |v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul: incompatible shapes {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn_acc(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    // ---- structured ops --------------------------------------------------

    /// 2-D convolution: x is [C_in,H,W], w is [C_out,C_in,kh,kw]; zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        if sx.len() != 3 || sw.len() != 4 {
            return Err(Error::shape(format!("conv2d: need [C,H,W] and [O,C,kh,kw], got {sx:?} and {sw:?}")));
        }
        if sx[0] != sw[1] {
            return Err(Error::shape(format!("conv2d: input channels {} != kernel channels {}", sx[0], sw[1])));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d: stride must be >= 1"));
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::shape(format!("conv2d: kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * pad, wd + 2 * pad)));
        }
        let oh = kernels::conv_out_dim(h, kh, stride, pad);
        let ow = kernels::conv_out_dim(wd, kw, stride, pad);
        let ck = cin * kh * kw;
        let mut cols = vec![0.0; ck * oh * ow];
        kernels::im2col(&self.nodes[x.0].value, cin, h, wd, kh, kw, stride, pad, &mut cols);
        let mut out = vec![0.0; cout * oh * ow];
        kernels::matmul_nn_acc(&self.nodes[w.0].value, &cols, &mut out, cout, ck, oh * ow);
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(vec![cout, oh, ow], out, Op::Conv2d { x, w, stride, pad }, rg))
    }

    /// Max pooling over [C,H,W] with a square window.
    pub fn maxpool2d(&mut self, x: Var, win: usize, stride: usize) -> Result<Var> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 3 {
            return Err(Error::shape(format!("maxpool2d: need [C,H,W], got {sx:?}")));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        if win == 0 || stride == 0 || win > h || win > w {
            return Err(Error::shape(format!("maxpool2d: window {win} stride {stride} invalid for {h}x{w}")));
        }
        let oh = (h - win) / stride + 1;
        let ow = (w - win) / stride + 1;
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = Vec::new();
        kernels::maxpool_forward(&self.nodes[x.0].value, c, h, w, win, stride, &mut out, &mut argmax);
        let rg = self.rg(x);
        Ok(self.push(vec![c, oh, ow], out, Op::MaxPool2d { x, argmax }, rg))
    }

    /// Nearest-neighbor upsampling of [C,H,W] by an integer factor.
    pub fn upsample_nearest2d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let sx = &self.nodes[x.0].shape;
        if sx.len() != 3 {
            return Err(Error::shape(format!("upsample_nearest2d: need [C,H,W], got {sx:?}")));
        }
        if factor == 0 {
            return Err(Error::shape("upsample_nearest2d: factor must be >= 1"));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let (oh, ow) = (h * factor, w * factor);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                let src = &xv[(ci * h + oy / factor) * w..(ci * h + oy / factor + 1) * w];
                let dst = &mut out[(ci * oh + oy) * ow..(ci * oh + oy + 1) * ow];
                for (ox, d) in dst.iter_mut().enumerate() {
                    *d = src[ox / factor];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, oh, ow], out, Op::UpsampleNearest2d { x, factor }, rg))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = &self.nodes[x.0].shape;
        if axis >= sx.len() {
            return Err(Error::shape(format!("softmax: axis {axis} out of range for {sx:?}")));
        }
        let (outer, len, inner) = lanes(sx, axis);
        let mut out = vec![0.0; numel(sx)];
        kernels::softmax_lanes(&self.nodes[x.0].value, outer, len, inner, &mut out);
        let shape = sx.clone();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, rg))
    }

    /// Bilinear sampling: featmap [C,h,w], points [J,2] as (x,y) pixel
    /// coordinates; returns [J,C]. Points are clamped to the border.
    pub fn grid_sample_bilinear(&mut self, featmap: Var, points: Var) -> Result<Var> {
        let (sf, sp) = (&self.nodes[featmap.0].shape, &self.nodes[points.0].shape);
        if sf.len() != 3 {
            return Err(Error::shape(format!("grid_sample: featmap must be [C,h,w], got {sf:?}")));
        }
        if sp.len() != 2 || sp[1] != 2 {
            return Err(Error::shape(format!("grid_sample: points must be [J,2], got {sp:?}")));
        }
        let (c, h, w) = (sf[0], sf[1], sf[2]);
        let j = sp[0];
        let fv = &self.nodes[featmap.0].value;
        let pv = &self.nodes[points.0].value;
        let mut out = vec![0.0; j * c];
        for ji in 0..j {
            let (x0, y0, wx, wy, _, _) = kernels::bilinear_setup(pv[2 * ji], pv[2 * ji + 1], h, w);
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            for ci in 0..c {
                let plane = &fv[ci * h * w..(ci + 1) * h * w];
                let top = (1.0 - wx) * plane[y0 * w + x0] + wx * plane[y0 * w + x1];
                let bot = (1.0 - wx) * plane[y1 * w + x0] + wx * plane[y1 * w + x1];
                out[ji * c + ci] = (1.0 - wy) * top + wy * bot;
            }
        }
        let rg = self.rg(featmap) || self.rg(points);
        Ok(self.push(vec![j, c], out, Op::GridSampleBilinear { featmap, points }, rg))
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::shape("concat: no inputs"));
        }
        let first = self.nodes[inputs[0].0].shape.clone();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat: axis {axis} out of range for {first:?}")));
        }
        let mut axis_total = 0;
        for &v in inputs {
            let s = &self.nodes[v.0].shape;
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b) {
                return Err(Error::shape(format!("concat: shape {s:?} incompatible with {first:?} on axis {axis}")));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; numel(&out_shape)];
        let out_row = axis_total * inner;
        let mut offset = 0;
        for &v in inputs {
            let s = &self.nodes[v.0].shape;
            let block = s[axis] * inner;
            let val = &self.nodes[v.0].value;
            for o in 0..outer {
                out[o * out_row + offset..o * out_row + offset + block].copy_from_slice(&val[o * block..(o + 1) * block]);
            }
            offset += block;
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(out_shape, out, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// Select rows of a [N,...] tensor by index; duplicates allowed, and
    /// backward accumulates into the source rows.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let sx = &self.nodes[x.0].shape;
        if sx.is_empty() {
            return Err(Error::shape("gather_rows: input must have at least one dim"));
        }
        let n = sx[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::shape(format!("gather_rows: index {bad} out of range for {n} rows")));
        }
        let row: usize = sx[1..].iter().product();
        let mut out_shape = sx.clone();
        out_shape[0] = indices.len();
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; indices.len() * row];
        for (i, &src) in indices.iter().enumerate() {
            out[i * row..(i + 1) * row].copy_from_slice(&xv[src * row..(src + 1) * row]);
        }
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, Op::GatherRows { x, indices: Arc::new(indices.to_vec()) }, rg))
    }

    /// Permute dimensions: output dim `i` is input dim `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = &self.nodes[x.0].shape;
        let rank = sx.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("permute: {perm:?} is not a permutation of 0..{rank}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let in_strides = strides_of(sx);
        let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; xv.len()];
        for_each_map(&out_shape, &walk, |o, i| out[o] = xv[i]);
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    /// Same data, new shape (element count must match). Shares the buffer.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let node = &self.nodes[x.0];
        if numel(shape) != node.value.len() {
            return Err(Error::shape(format!("reshape: {:?} has {} elements, target {shape:?} has {}", node.shape, node.value.len(), numel(shape))));
        }
        let value = Arc::clone(&node.value);
        let rg = node.requires_grad;
        Ok(self.push_shared(shape.to_vec(), value, Op::Reshape(x), rg))
    }

    /// Sum of all elements, as a [1] scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::SumAll(x), rg)
    }

    /// Mean of all elements, as a [1] scalar.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    // ---- fused graph attention -------------------------------------------

    /// Attention weights from per-node scores: for each node i,
    /// alpha[i,j] = softmax over j in N(i) of leaky_relu(score_self[i] + score_neigh[j]),
    /// stored dense [N,N] with exact zeros off the edge set.
    pub fn gat_alpha(&mut self, score_self: Var, score_neigh: Var, edges: &Arc<GraphEdges>) -> Result<Var> {
        let n = edges.n();
        if self.nodes[score_self.0].value.len() != n || self.nodes[score_neigh.0].value.len() != n {
            return Err(Error::shape(format!(
                "gat_alpha: score lengths {} and {} must equal node count {n}",
                self.nodes[score_self.0].value.len(),
                self.nodes[score_neigh.0].value.len()
            )));
        }
        let ss = &self.nodes[score_self.0].value;
        let sn = &self.nodes[score_neigh.0].value;
        let mut out = vec![0.0; n * n];
        let mut exps: Vec<f64> = Vec::new();
        for i in 0..n {
            let ns = edges.neighbors(i);
            let mut max = f64::NEG_INFINITY;
            for &j in ns {
                let z = ss[i] + sn[j];
                let e = if z > 0.0 { z } else { LEAKY_SLOPE * z };
                max = max.max(e);
            }
            exps.clear();
            for &j in ns {
                let z = ss[i] + sn[j];
                let e = if z > 0.0 { z } else { LEAKY_SLOPE * z };
                exps.push((e - max).exp());
            }
            let mut denom_terms = exps.clone();
            let denom = sorted_sum(&mut denom_terms);
            for (k, &j) in ns.iter().enumerate() {
                out[i * n + j] = exps[k] / denom;
            }
        }
        let rg = self.rg(score_self) || self.rg(score_neigh);
        Ok(self.push(vec![n, n], out, Op::GatAlpha { score_self, score_neigh, edges: Arc::clone(edges) }, rg))
    }

    /// Neighborhood aggregation: out[i] = sum over j in N(i) of alpha[i,j] * feats[j].
    /// Each output scalar sums its terms in value-sorted order, so node
    /// relabeling permutes the result bit-identically.
    pub fn gat_aggregate(&mut self, alpha: Var, feats: Var, edges: &Arc<GraphEdges>) -> Result<Var> {
        let n = edges.n();
        let (sa, sf) = (&self.nodes[alpha.0].shape, &self.nodes[feats.0].shape);
        if sa.as_slice() != [n, n] {
            return Err(Error::shape(format!("gat_aggregate: alpha must be [{n},{n}], got {sa:?}")));
        }
        if sf.len() != 2 || sf[0] != n {
            return Err(Error::shape(format!("gat_aggregate: feats must be [{n},F], got {sf:?}")));
        }
        let f = sf[1];
        let av = &self.nodes[alpha.0].value;
        let fv = &self.nodes[feats.0].value;
        let mut out = vec![0.0; n * f];
        let mut terms: Vec<f64> = Vec::new();
        for i in 0..n {
            let ns = edges.neighbors(i);
            for c in 0..f {
                terms.clear();
                for &j in ns {
                    terms.push(av[i * n + j] * fv[j * f + c]);
                }
                out[i * f + c] = sorted_sum(&mut terms);
            }
        }
        let rg = self.rg(alpha) || self.rg(feats);
        Ok(self.push(vec![n, f], out, Op::GatAggregate { alpha, feats, edges: Arc::clone(edges) }, rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss. Gradients accumulate additively across
    /// fan-out and are reachable via [`Tape::grad`] afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(format!("backward: loss must be a scalar, got shape {:?}", self.nodes[loss.0].shape)));
        }
        self.grads.clear();
        self.grads.resize(self.nodes.len(), None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if self.grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = self.grads[id].take().expect("checked above");
            self.step_backward(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn grad_buf(&mut self, v: Var) -> &mut Vec<f64> {
        let len = self.nodes[v.0].value.len();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// Accumulate `g` (shaped like the output of a broadcast op) into the
    /// gradient of input `v`, summing over broadcast dimensions; `scale`
    /// handles the sign for subtraction.
    fn accum_bcast(&mut self, v: Var, out_shape: &[usize], g: &[f64], scale: f64) {
        if !self.rg(v) {
            return;
        }
        let vs = self.nodes[v.0].shape.clone();
        if vs.as_slice() == out_shape {
            let gb = self.grad_buf(v);
            for (d, &gi) in gb.iter_mut().zip(g) {
                *d += scale * gi;
            }
        } else {
            let strides = bcast_strides(&vs, out_shape);
            // Borrow dance: take the buffer out, fill, put back.
            let mut buf = std::mem::take(self.grad_buf(v));
            for_each_map(out_shape, &strides, |o, i| buf[i] += scale * g[o]);
            self.grads[v.0] = Some(buf);
        }
    }

    /// Like `accum_bcast` but multiplies the upstream gradient by the other
    /// operand (for the product rule), reading it through its own strides.
    fn accum_bcast_mul(&mut self, v: Var, other: Var, out_shape: &[usize], g: &[f64]) {
        if !self.rg(v) {
            return;
        }
        let vs = self.nodes[v.0].shape.clone();
        let other_shape = self.nodes[other.0].shape.clone();
        let strided = vs.as_slice() != out_shape || other_shape.as_slice() != out_shape;
        let ov = Arc::clone(&self.nodes[other.0].value);
        if !strided {
            let gb = self.grad_buf(v);
            for ((d, &gi), &o) in gb.iter_mut().zip(g).zip(ov.iter()) {
                *d += gi * o;
            }
        } else {
            let sv = bcast_strides(&vs, out_shape);
            let so = bcast_strides(&other_shape, out_shape);
            let mut buf = std::mem::take(self.grad_buf(v));
            for_each_pair(out_shape, &sv, &so, |o, iv, io| buf[iv] += g[o] * ov[io]);
            self.grads[v.0] = Some(buf);
        }
    }

    fn accum_pointwise(&mut self, v: Var, g: &[f64], f: impl Fn(usize, f64) -> f64) {
        if !self.rg(v) {
            return;
        }
        let gb = self.grad_buf(v);
        for (i, (d, &gi)) in gb.iter_mut().zip(g).enumerate() {
            *d += f(i, gi);
        }
    }

    fn step_backward(&mut self, id: usize, g: &[f64]) {
        // `op` holds only Vars and small metadata; clone the cheap parts we
        // need to avoid borrowing `self.nodes` across the mutation below.
        match &self.nodes[id].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                let out_shape = self.nodes[id].shape.clone();
                self.accum_bcast(a, &out_shape, g, 1.0);
                self.accum_bcast(b, &out_shape, g, 1.0);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                let out_shape = self.nodes[id].shape.clone();
                self.accum_bcast(a, &out_shape, g, 1.0);
                self.accum_bcast(b, &out_shape, g, -1.0);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let out_shape = self.nodes[id].shape.clone();
                self.accum_bcast_mul(a, b, &out_shape, g);
                self.accum_bcast_mul(b, a, &out_shape, g);
            }
            Op::Scale(x, c) => {
                let (x, c) = (*x, *c);
                self.accum_pointwise(x, g, |_, gi| gi * c);
            }
            Op::AddScalar(x) => {
                let x = *x;
                self.accum_pointwise(x, g, |_, gi| gi);
            }
            Op::Relu(x) => {
                let x = *x;
                let xv = Arc::clone(&self.nodes[x.0].value);
                self.accum_pointwise(x, g, |i, gi| if xv[i] > 0.0 { gi } else { 0.0 });
            }
            Op::LeakyRelu(x) => {
                let x = *x;
                let xv = Arc::clone(&self.nodes[x.0].value);
                self.accum_pointwise(x, g, |i, gi| gi * leaky_deriv(xv[i]));
            }
            Op::Square(x) => {
                let x = *x;
                let xv = Arc::clone(&self.nodes[x.0].value);
                self.accum_pointwise(x, g, |i, gi| gi * 2.0 * xv[i]);
            }
            Op::Sqrt(x) => {
                let x = *x;
                let yv = Arc::clone(&self.nodes[id].value);
                self.accum_pointwise(x, g, |i, gi| gi * 0.5 / yv[i]);
            }
            Op::Abs(x) => {
                let x = *x;
                let xv = Arc::clone(&self.nodes[x.0].value);
                self.accum_pointwise(x, g, |i, gi| {
                    gi * if xv[i] > 0.0 {
                        1.0
                    } else if xv[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let av = Arc::clone(&self.nodes[a.0].value);
                let bv = Arc::clone(&self.nodes[b.0].value);
                if self.rg(a) {
                    // dA = g . B^T
                    let mut da = std::mem::take(self.grad_buf(a));
                    kernels::matmul_nt_acc(g, &bv, &mut da, m, n, k);
                    self.grads[a.0] = Some(da);
                }
                if self.rg(b) {
                    // dB = A^T . g
                    let mut db = std::mem::take(self.grad_buf(b));
                    kernels::matmul_tn_acc(&av, g, &mut db, k, m, n);
                    self.grads[b.0] = Some(db);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (x, w, stride, pad) = (*x, *w, *stride, *pad);
                let sx = self.nodes[x.0].shape.clone();
                let sw = self.nodes[w.0].shape.clone();
                let (cin, h, wd) = (sx[0], sx[1], sx[2]);
                let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
                let oh = kernels::conv_out_dim(h, kh, stride, pad);
                let ow = kernels::conv_out_dim(wd, kw, stride, pad);
                let ck = cin * kh * kw;
                // Recompute the unfolded input instead of saving it; forward
                // already paid this cost once and memory stays bounded.
                let xv = Arc::clone(&self.nodes[x.0].value);
                let wv = Arc::clone(&self.nodes[w.0].value);
                let mut cols = vec![0.0; ck * oh * ow];
                kernels::im2col(&xv, cin, h, wd, kh, kw, stride, pad, &mut cols);
                if self.rg(w) {
                    let mut dw = std::mem::take(self.grad_buf(w));
                    kernels::matmul_nt_acc(g, &cols, &mut dw, cout, oh * ow, ck);
                    self.grads[w.0] = Some(dw);
                }
                if self.rg(x) {
                    let mut dcols = vec![0.0; ck * oh * ow];
                    kernels::matmul_tn_acc(&wv, g, &mut dcols, ck, cout, oh * ow);
                    let mut dx = std::mem::take(self.grad_buf(x));
                    kernels::col2im_acc(&dcols, cin, h, wd, kh, kw, stride, pad, &mut dx);
                    self.grads[x.0] = Some(dx);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let x = *x;
                if self.rg(x) {
                    let argmax = argmax.clone();
                    let mut dx = std::mem::take(self.grad_buf(x));
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src] += g[o];
                    }
                    self.grads[x.0] = Some(dx);
                }
            }
            Op::UpsampleNearest2d { x, factor } => {
                let (x, factor) = (*x, *factor);
                if self.rg(x) {
                    let sx = self.nodes[x.0].shape.clone();
                    let (c, h, w) = (sx[0], sx[1], sx[2]);
                    let (oh, ow) = (h * factor, w * factor);
                    let mut dx = std::mem::take(self.grad_buf(x));
                    for ci in 0..c {
                        for oy in 0..oh {
                            let grow = &g[(ci * oh + oy) * ow..(ci * oh + oy + 1) * ow];
                            let drow = &mut dx[(ci * h + oy / factor) * w..(ci * h + oy / factor + 1) * w];
                            for (ox, &gv) in grow.iter().enumerate() {
                                drow[ox / factor] += gv;
                            }
                        }
                    }
                    self.grads[x.0] = Some(dx);
                }
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                if self.rg(x) {
                    let yv = Arc::clone(&self.nodes[id].value);
                    let (outer, len, inner) = lanes(&self.nodes[id].shape, axis);
                    let mut dx = std::mem::take(self.grad_buf(x));
                    for o in 0..outer {
                        let base = o * len * inner;
                        for i in 0..inner {
                            let mut dot = 0.0;
                            for l in 0..len {
                                let idx = base + l * inner + i;
                                dot += g[idx] * yv[idx];
                            }
                            for l in 0..len {
                                let idx = base + l * inner + i;
                                dx[idx] += yv[idx] * (g[idx] - dot);
                            }
                        }
                    }
                    self.grads[x.0] = Some(dx);
                }
            }
            Op::GridSampleBilinear { featmap, points } => {
                let (featmap, points) = (*featmap, *points);
                let sf = self.nodes[featmap.0].shape.clone();
                let (c, h, w) = (sf[0], sf[1], sf[2]);
                let j = self.nodes[points.0].shape[0];
                let fv = Arc::clone(&self.nodes[featmap.0].value);
                let pv = Arc::clone(&self.nodes[points.0].value);
                let rg_f = self.rg(featmap);
                let rg_p = self.rg(points);
                let mut df = if rg_f { std::mem::take(self.grad_buf(featmap)) } else { Vec::new() };
                let mut dp = if rg_p { std::mem::take(self.grad_buf(points)) } else { Vec::new() };
                for ji in 0..j {
                    let (x0, y0, wx, wy, in_x, in_y) = kernels::bilinear_setup(pv[2 * ji], pv[2 * ji + 1], h, w);
                    let x1 = (x0 + 1).min(w - 1);
                    let y1 = (y0 + 1).min(h - 1);
                    let (mut gx, mut gy) = (0.0, 0.0);
                    for ci in 0..c {
                        let gi = g[ji * c + ci];
                        let base = ci * h * w;
                        let (f00, f01) = (fv[base + y0 * w + x0], fv[base + y0 * w + x1]);
                        let (f10, f11) = (fv[base + y1 * w + x0], fv[base + y1 * w + x1]);
                        if rg_f {
                            df[base + y0 * w + x0] += gi * (1.0 - wy) * (1.0 - wx);
                            df[base + y0 * w + x1] += gi * (1.0 - wy) * wx;
                            df[base + y1 * w + x0] += gi * wy * (1.0 - wx);
                            df[base + y1 * w + x1] += gi * wy * wx;
                        }
                        if rg_p {
                            gx += gi * ((1.0 - wy) * (f01 - f00) + wy * (f11 - f10));
                            gy += gi * ((1.0 - wx) * (f10 - f00) + wx * (f11 - f01));
                        }
                    }
                    if rg_p {
                        dp[2 * ji] += if in_x { gx } else { 0.0 };
                        dp[2 * ji + 1] += if in_y { gy } else { 0.0 };
                    }
                }
                if rg_f {
                    self.grads[featmap.0] = Some(df);
                }
                if rg_p {
                    self.grads[points.0] = Some(dp);
                }
            }
            Op::Concat { inputs, axis } => {
                let inputs = inputs.clone();
                let axis = *axis;
                let out_shape = self.nodes[id].shape.clone();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let out_row = out_shape[axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let block = self.nodes[v.0].shape[axis] * inner;
                    if self.rg(v) {
                        let mut dv = std::mem::take(self.grad_buf(v));
                        for o in 0..outer {
                            let src = &g[o * out_row + offset..o * out_row + offset + block];
                            for (d, &gv) in dv[o * block..(o + 1) * block].iter_mut().zip(src) {
                                *d += gv;
                            }
                        }
                        self.grads[v.0] = Some(dv);
                    }
                    offset += block;
                }
            }
            Op::GatherRows { x, indices } => {
                let x = *x;
                if self.rg(x) {
                    let indices = Arc::clone(indices);
                    let row: usize = self.nodes[x.0].shape[1..].iter().product();
                    let mut dx = std::mem::take(self.grad_buf(x));
                    for (i, &src) in indices.iter().enumerate() {
                        for (d, &gv) in dx[src * row..(src + 1) * row].iter_mut().zip(&g[i * row..(i + 1) * row]) {
                            *d += gv;
                        }
                    }
                    self.grads[x.0] = Some(dx);
                }
            }
            Op::Permute { x, perm } => {
                let x = *x;
                if self.rg(x) {
                    let perm = perm.clone();
                    let out_shape = self.nodes[id].shape.clone();
                    let in_strides = strides_of(&self.nodes[x.0].shape);
                    let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                    let mut dx = std::mem::take(self.grad_buf(x));
                    for_each_map(&out_shape, &walk, |o, i| dx[i] += g[o]);
                    self.grads[x.0] = Some(dx);
                }
            }
            Op::Reshape(x) => {
                let x = *x;
                self.accum_pointwise(x, g, |_, gi| gi);
            }
            Op::SumAll(x) => {
                let x = *x;
                if self.rg(x) {
                    let gv = g[0];
                    for d in self.grad_buf(x).iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::GatAlpha { score_self, score_neigh, edges } => {
                let (ss_v, sn_v) = (*score_self, *score_neigh);
                let edges = Arc::clone(edges);
                let n = edges.n();
                let alpha = Arc::clone(&self.nodes[id].value);
                let ssv = Arc::clone(&self.nodes[ss_v.0].value);
                let snv = Arc::clone(&self.nodes[sn_v.0].value);
                let rg_s = self.rg(ss_v);
                let rg_n = self.rg(sn_v);
                let mut ds = if rg_s { std::mem::take(self.grad_buf(ss_v)) } else { Vec::new() };
                let mut dn = if rg_n { std::mem::take(self.grad_buf(sn_v)) } else { Vec::new() };
                let mut terms: Vec<f64> = Vec::new();
                let mut row_terms: Vec<f64> = Vec::new();
                for i in 0..n {
                    let ns = edges.neighbors(i);
                    terms.clear();
                    for &jj in ns {
                        terms.push(g[i * n + jj] * alpha[i * n + jj]);
                    }
                    let dot = sorted_sum(&mut terms);
                    row_terms.clear();
                    for &jj in ns {
                        let de = alpha[i * n + jj] * (g[i * n + jj] - dot);
                        let d = de * leaky_deriv(ssv[i] + snv[jj]);
                        if rg_n {
                            dn[jj] += d;
                        }
                        row_terms.push(d);
                    }
                    if rg_s {
                        ds[i] += sorted_sum(&mut row_terms);
                    }
                }
                if rg_s {
                    self.grads[ss_v.0] = Some(ds);
                }
                if rg_n {
                    self.grads[sn_v.0] = Some(dn);
                }
            }
            Op::GatAggregate { alpha, feats, edges } => {
                let (alpha, feats) = (*alpha, *feats);
                let edges = Arc::clone(edges);
                let n = edges.n();
                let f = self.nodes[feats.0].shape[1];
                let av = Arc::clone(&self.nodes[alpha.0].value);
                let fv = Arc::clone(&self.nodes[feats.0].value);
                if self.rg(alpha) {
                    let mut da = std::mem::take(self.grad_buf(alpha));
                    for i in 0..n {
                        for &j in edges.neighbors(i) {
                            let mut acc = 0.0;
                            for c in 0..f {
                                acc += g[i * f + c] * fv[j * f + c];
                            }
                            da[i * n + j] += acc;
                        }
                    }
                    self.grads[alpha.0] = Some(da);
                }
                if self.rg(feats) {
                    let mut dfe = std::mem::take(self.grad_buf(feats));
                    for i in 0..n {
                        for &j in edges.neighbors(i) {
                            let a = av[i * n + j];
                            for c in 0..f {
                                dfe[j * f + c] += a * g[i * f + c];
                            }
                        }
                    }
                    self.grads[feats.0] = Some(dfe);
                }
            }
        }
    }
}
