//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. [`Var`] is a
//! cheap copyable handle into the graph. Parameters enter the graph through
//! [`Graph::param`], which snapshots their value; [`Graph::backward`] writes
//! gradients back into the owning [`ParamStore`], adding to whatever is
//! already there.

pub mod gradcheck;
pub mod kernels;

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{shape_mismatch, DecaError, Result};
use crate::real::Real;
use crate::tensor::{ParamId, ParamStore, Tensor};
use kernels::{
    broadcast_shape, broadcast_strides, col2im_acc, contiguous_strides, for_each_broadcast2,
    gemm_acc, im2col, transpose, ConvGeom,
};

pub use gradcheck::{finite_diff_check, finite_diff_compare, GradCheckOptions, GradCheckReport};

/// Marks a gathered slot that reads as zero.
pub const GATHER_PAD: usize = usize::MAX;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[derive(Clone, Debug)]
enum Op<T: Real> {
    Constant,
    Detached,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, T),
    Offset(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    Abs(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    Tanh(usize),
    Gelu(usize),
    SumAxis(usize, usize),
    SumAll(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Gather(usize, Rc<Vec<usize>>),
    MatMul(usize, usize),
    Softmax(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    InstanceNorm {
        x: usize,
        rstd: Vec<T>,
        spatial: usize,
    },
}

struct Node<T: Real> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward computation.
pub struct Graph<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real = f32> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn node(&self, id: usize) -> Ref<'_, Node<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id])
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// A constant (non-differentiable) input.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Constant, false)
    }

    pub fn input(&self, shape: &[usize], data: Vec<T>) -> Result<Var<'_, T>> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.push(vec![1], vec![v], Op::Constant, false)
    }

    /// Snapshots a parameter into the graph as a differentiable leaf.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        let t = &store.get(id).tensor;
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(id), true)
    }

    /// Runs reverse-mode differentiation from the scalar `loss`, adding
    /// `∂loss/∂p` into the gradient buffer of every parameter in `store`.
    /// Parameters the loss does not depend on end up with (possibly newly
    /// allocated) zero-valued contributions.
    pub fn backward(&self, loss: Var<'_, T>, store: &mut ParamStore<T>) -> Result<()> {
        if !std::ptr::eq(loss.graph, self) {
            return Err(DecaError::Contract("loss belongs to another graph".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(DecaError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        if matches!(root.op, Op::Detached) {
            return Err(DecaError::Contract("backward called on a detached tensor".into()));
        }
        store.ensure_grads();
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop_node(&nodes, node, g, &mut grads, store)?;
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, g: Vec<T>) {
    match &mut grads[id] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Sums a broadcast gradient back down to `src_shape`.
fn reduce_to<T: Real>(g: &[T], out_shape: &[usize], src_shape: &[usize]) -> Vec<T> {
    if out_shape == src_shape {
        return g.to_vec();
    }
    let n: usize = src_shape.iter().product();
    let mut r = vec![T::zero(); n];
    let s = broadcast_strides(src_shape, out_shape);
    let zeros = vec![0; out_shape.len()];
    for_each_broadcast2(out_shape, &s, &zeros, |o, a, _| r[a] += g[o]);
    r
}

/// Like [`reduce_to`] but weights each element by `w(out, a_off, b_off)`.
fn reduce_weighted<T: Real>(
    g: &[T],
    out_shape: &[usize],
    target_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    target_is_a: bool,
    mut w: impl FnMut(usize, usize) -> T,
) -> Vec<T> {
    let n: usize = target_shape.iter().product();
    let mut r = vec![T::zero(); n];
    for_each_broadcast2(out_shape, sa, sb, |o, a, b| {
        let dst = if target_is_a { a } else { b };
        r[dst] += g[o] * w(a, b);
    });
    r
}

fn backprop_node<T: Real>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: Vec<T>,
    grads: &mut [Option<Vec<T>>],
    store: &mut ParamStore<T>,
) -> Result<()> {
    let val = |i: usize| -> &[T] { &nodes[i].value };
    let rg = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Constant | Op::Detached => {}
        Op::Param(pid) => store.get_mut(*pid).tensor.accumulate_grad(&g),
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
            if rg(*a) {
                accumulate(grads, *a, reduce_to(&g, &node.shape, &nodes[*a].shape));
            }
            if rg(*b) {
                let mut gb = reduce_to(&g, &node.shape, &nodes[*b].shape);
                if sign < T::zero() {
                    gb.iter_mut().for_each(|v| *v = -*v);
                }
                accumulate(grads, *b, gb);
            }
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let (sa_shape, sb_shape) = (&nodes[*a].shape, &nodes[*b].shape);
            let sa = broadcast_strides(sa_shape, &node.shape);
            let sb = broadcast_strides(sb_shape, &node.shape);
            let (av, bv) = (val(*a), val(*b));
            let is_div = matches!(node.op, Op::Div(..));
            if rg(*a) {
                let ga = if is_div {
                    reduce_weighted(&g, &node.shape, sa_shape, &sa, &sb, true, |_, j| T::one() / bv[j])
                } else {
                    reduce_weighted(&g, &node.shape, sa_shape, &sa, &sb, true, |_, j| bv[j])
                };
                accumulate(grads, *a, ga);
            }
            if rg(*b) {
                let gb = if is_div {
                    reduce_weighted(&g, &node.shape, sb_shape, &sa, &sb, false, |i, j| {
                        -av[i] / (bv[j] * bv[j])
                    })
                } else {
                    reduce_weighted(&g, &node.shape, sb_shape, &sa, &sb, false, |i, _| av[i])
                };
                accumulate(grads, *b, gb);
            }
        }
        Op::Neg(a) => accumulate(grads, *a, g.iter().map(|&v| -v).collect()),
        Op::Scale(a, c) => accumulate(grads, *a, g.iter().map(|&v| v * *c).collect()),
        Op::Offset(a) | Op::Reshape(a) => accumulate(grads, *a, g),
        Op::Exp(a) => accumulate(grads, *a, zip_map(&g, &node.value, |gi, y| gi * y)),
        Op::Ln(a) => accumulate(grads, *a, zip_map(&g, val(*a), |gi, x| gi / x)),
        Op::Sqrt(a) => accumulate(
            grads,
            *a,
            zip_map(&g, &node.value, |gi, y| {
                // subgradient 0 at the origin keeps norms of exact zeros finite
                if y > T::zero() {
                    gi / (y + y)
                } else {
                    T::zero()
                }
            }),
        ),
        Op::Square(a) => accumulate(grads, *a, zip_map(&g, val(*a), |gi, x| gi * (x + x))),
        Op::Abs(a) => accumulate(
            grads,
            *a,
            zip_map(&g, val(*a), |gi, x| {
                if x > T::zero() {
                    gi
                } else if x < T::zero() {
                    -gi
                } else {
                    T::zero()
                }
            }),
        ),
        Op::Sigmoid(a) => accumulate(
            grads,
            *a,
            zip_map(&g, &node.value, |gi, y| gi * y * (T::one() - y)),
        ),
        Op::LogSigmoid(a) => accumulate(
            grads,
            *a,
            zip_map(&g, val(*a), |gi, x| gi * sigmoid(-x)),
        ),
        Op::Tanh(a) => accumulate(
            grads,
            *a,
            zip_map(&g, &node.value, |gi, y| gi * (T::one() - y * y)),
        ),
        Op::Gelu(a) => accumulate(grads, *a, zip_map(&g, val(*a), |gi, x| gi * gelu_grad(x))),
        Op::SumAxis(a, axis) => {
            let src = &nodes[*a].shape;
            let outer: usize = src[..*axis].iter().product();
            let len = src[*axis];
            let inner: usize = src[*axis + 1..].iter().product();
            let mut ga = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                    dst.copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::SumAll(a) => accumulate(grads, *a, vec![g[0]; nodes[*a].value.len()]),
        Op::Permute(a, perm) => {
            let src = &nodes[*a].shape;
            let inv = invert_perm(perm);
            let ga = permute_data(&g, &node.shape, &inv);
            debug_assert_eq!(ga.len(), src.iter().product::<usize>());
            accumulate(grads, *a, ga);
        }
        Op::Gather(a, index) => {
            let mut ga = vec![T::zero(); nodes[*a].value.len()];
            for (o, &src) in index.iter().enumerate() {
                if src != GATHER_PAD {
                    ga[src] += g[o];
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::MatMul(a, b) => {
            let (ga, gb) = matmul_backward(
                &nodes[*a].shape,
                val(*a),
                &nodes[*b].shape,
                val(*b),
                &node.shape,
                &g,
                rg(*a),
                rg(*b),
            );
            if let Some(ga) = ga {
                accumulate(grads, *a, ga);
            }
            if let Some(gb) = gb {
                accumulate(grads, *b, gb);
            }
        }
        Op::Softmax(a, axis) => {
            let shape = &node.shape;
            let outer: usize = shape[..*axis].iter().product();
            let len = shape[*axis];
            let inner: usize = shape[*axis + 1..].iter().product();
            let y = &node.value;
            let mut ga = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = T::zero();
                    for l in 0..len {
                        dot += g[base + l * inner] * y[base + l * inner];
                    }
                    for l in 0..len {
                        let k = base + l * inner;
                        ga[k] = y[k] * (g[k] - dot);
                    }
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::Conv2d { x, w, b, geom, cols } => {
            let (ho, wo) = geom.out_hw();
            let n = ho * wo;
            let kr = geom.col_rows();
            let oc = geom.out_ch;
            if let Some(b) = b {
                if rg(*b) {
                    let mut gb = vec![T::zero(); oc];
                    for s in 0..geom.batch {
                        for (c, gbc) in gb.iter_mut().enumerate() {
                            let base = (s * oc + c) * n;
                            *gbc += g[base..base + n].iter().copied().sum::<T>();
                        }
                    }
                    accumulate(grads, *b, gb);
                }
            }
            if rg(*w) {
                let mut gw = vec![T::zero(); oc * kr];
                for s in 0..geom.batch {
                    let cols_t = transpose(kr, n, &cols[s * kr * n..(s + 1) * kr * n]);
                    gemm_acc(oc, n, kr, &g[s * oc * n..(s + 1) * oc * n], &cols_t, &mut gw);
                }
                accumulate(grads, *w, gw);
            }
            if rg(*x) {
                let w_t = transpose(oc, kr, val(*w));
                let plane = geom.in_ch * geom.h * geom.w;
                let mut gx = vec![T::zero(); geom.batch * plane];
                let mut gcols = vec![T::zero(); kr * n];
                for s in 0..geom.batch {
                    gcols.iter_mut().for_each(|v| *v = T::zero());
                    gemm_acc(kr, oc, n, &w_t, &g[s * oc * n..(s + 1) * oc * n], &mut gcols);
                    col2im_acc(geom, &gcols, &mut gx[s * plane..(s + 1) * plane]);
                }
                accumulate(grads, *x, gx);
            }
        }
        Op::InstanceNorm { x, rstd, spatial } => {
            let y = &node.value;
            let n = *spatial;
            let nf = T::from_f64(n as f64);
            let mut gx = vec![T::zero(); y.len()];
            for (c, &rs) in rstd.iter().enumerate() {
                let r = c * n..(c + 1) * n;
                let (gy, yy) = (&g[r.clone()], &y[r.clone()]);
                let mean_g = gy.iter().copied().sum::<T>() / nf;
                let mean_gy = gy.iter().zip(yy).map(|(&a, &b)| a * b).sum::<T>() / nf;
                for ((dst, &gi), &yi) in gx[r].iter_mut().zip(gy).zip(yy) {
                    *dst = rs * (gi - mean_g - yi * mean_gy);
                }
            }
            accumulate(grads, *x, gx);
        }
    }
    Ok(())
}

fn zip_map<T: Real>(g: &[T], v: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    g.iter().zip(v).map(|(&a, &b)| f(a, b)).collect()
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn log_sigmoid<T: Real>(x: T) -> T {
    // -softplus(-x)
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Tanh approximation of the Gaussian error linear unit.
#[inline]
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let k = T::from_f64(GELU_K);
    let c = T::from_f64(GELU_C);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::from_f64(GELU_K);
    let c = T::from_f64(GELU_C);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x)
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Output dim `i` is input dim `perm[i]`.
fn permute_data<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = contiguous_strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; out_shape.len()];
    let mut out = vec![T::zero(); data.len()];
    for_each_broadcast2(&out_shape, &src_strides, &zeros, |o, a, _| out[o] = data[a]);
    out
}

struct MatMulPlan {
    batch_shape: Vec<usize>,
    a_batch_strides: Vec<usize>,
    b_batch_strides: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatMulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(shape_mismatch("matmul needs rank >= 2 operands", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(shape_mismatch("matmul inner dimensions differ", a, b));
    }
    let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let batch_shape = broadcast_shape(ab, bb).map_err(|_| shape_mismatch("matmul batch dims", a, b))?;
    // strides in units of whole matrices
    let a_batch_strides = broadcast_strides(ab, &batch_shape);
    let b_batch_strides = broadcast_strides(bb, &batch_shape);
    Ok(MatMulPlan {
        batch_shape,
        a_batch_strides,
        b_batch_strides,
        m,
        k,
        n,
    })
}

impl MatMulPlan {
    fn pairs(&self) -> Vec<(usize, usize, usize)> {
        let mut v = Vec::new();
        if self.batch_shape.is_empty() {
            v.push((0, 0, 0));
        } else {
            for_each_broadcast2(
                &self.batch_shape,
                &self.a_batch_strides,
                &self.b_batch_strides,
                |o, a, b| v.push((o, a, b)),
            );
        }
        v
    }

    fn out_shape(&self) -> Vec<usize> {
        let mut s = self.batch_shape.clone();
        s.push(self.m);
        s.push(self.n);
        s
    }
}

#[allow(clippy::too_many_arguments)]
fn matmul_backward<T: Real>(
    a_shape: &[usize],
    a: &[T],
    b_shape: &[usize],
    b: &[T],
    _out_shape: &[usize],
    g: &[T],
    want_a: bool,
    want_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plan = matmul_plan(a_shape, b_shape).expect("validated in forward");
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut ga = want_a.then(|| vec![T::zero(); a.len()]);
    let mut gb = want_b.then(|| vec![T::zero(); b.len()]);
    for (o, ia, ib) in plan.pairs() {
        let gs = &g[o * m * n..(o + 1) * m * n];
        if let Some(ga) = ga.as_mut() {
            let bt = transpose(k, n, &b[ib * k * n..(ib + 1) * k * n]);
            gemm_acc(m, n, k, gs, &bt, &mut ga[ia * m * k..(ia + 1) * m * k]);
        }
        if let Some(gb) = gb.as_mut() {
            let at = transpose(m, k, &a[ia * m * k..(ia + 1) * m * k]);
            gemm_acc(k, m, n, &at, gs, &mut gb[ib * k * n..(ib + 1) * k * n]);
        }
    }
    (ga, gb)
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.node(self.id).shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.node(self.id).value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.rg(self.id)
    }

    /// Copy of the current value.
    pub fn value(&self) -> Tensor<T> {
        let n = self.graph.node(self.id);
        Tensor::new(&n.shape, n.value.clone()).expect("graph node shape is consistent")
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.graph.node(self.id).value.clone()
    }

    pub fn with_data<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.graph.node(self.id).value)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        let n = self.graph.node(self.id);
        assert_eq!(n.value.len(), 1, "item() on tensor of shape {:?}", n.shape);
        n.value[0]
    }

    /// A copy of this value that gradient does not flow through.
    pub fn detach(&self) -> Var<'g, T> {
        let n = self.graph.node(self.id);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        drop(n);
        self.graph.push(shape, value, Op::Detached, false)
    }

    fn unary(&self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'g, T> {
        let n = self.graph.node(self.id);
        let (shape, value) = (n.shape.clone(), n.value.iter().map(|&v| f(v)).collect());
        let rg = n.requires_grad;
        drop(n);
        self.graph.push(shape, value, op, rg)
    }

    fn binary(&self, other: Var<'g, T>, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var<'g, T>> {
        debug_assert!(std::ptr::eq(self.graph, other.graph));
        let (a, b) = (self.graph.node(self.id), self.graph.node(other.id));
        let (value, shape) = if a.shape == b.shape {
            (
                a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect(),
                a.shape.clone(),
            )
        } else {
            let out = broadcast_shape(&a.shape, &b.shape)?;
            let sa = broadcast_strides(&a.shape, &out);
            let sb = broadcast_strides(&b.shape, &out);
            let mut v = vec![T::zero(); out.iter().product()];
            for_each_broadcast2(&out, &sa, &sb, |o, i, j| v[o] = f(a.value[i], b.value[j]));
            (v, out)
        };
        let rg = a.requires_grad || b.requires_grad;
        drop(a);
        drop(b);
        Ok(self.graph.push(shape, value, op, rg))
    }

    pub fn add(&self, o: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(o, Op::Add(self.id, o.id), |a, b| a + b)
    }

    pub fn sub(&self, o: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(o, Op::Sub(self.id, o.id), |a, b| a - b)
    }

    pub fn mul(&self, o: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(o, Op::Mul(self.id, o.id), |a, b| a * b)
    }

    pub fn div(&self, o: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(o, Op::Div(self.id, o.id), |a, b| a / b)
    }

    pub fn neg(&self) -> Var<'g, T> {
        self.unary(Op::Neg(self.id), |v| -v)
    }

    pub fn scale(&self, c: T) -> Var<'g, T> {
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn add_scalar(&self, c: T) -> Var<'g, T> {
        self.unary(Op::Offset(self.id), |v| v + c)
    }

    pub fn exp(&self) -> Var<'g, T> {
        self.unary(Op::Exp(self.id), |v| v.exp())
    }

    pub fn ln(&self) -> Var<'g, T> {
        self.unary(Op::Ln(self.id), |v| v.ln())
    }

    pub fn sqrt(&self) -> Var<'g, T> {
        self.unary(Op::Sqrt(self.id), |v| v.sqrt())
    }

    pub fn square(&self) -> Var<'g, T> {
        self.unary(Op::Square(self.id), |v| v * v)
    }

    /// Absolute value; subgradient 0 at 0.
    pub fn abs(&self) -> Var<'g, T> {
        self.unary(Op::Abs(self.id), |v| v.abs())
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    /// `ln(sigmoid(x))`, finite for every finite `x`.
    pub fn log_sigmoid(&self) -> Var<'g, T> {
        self.unary(Op::LogSigmoid(self.id), log_sigmoid)
    }

    pub fn tanh(&self) -> Var<'g, T> {
        self.unary(Op::Tanh(self.id), |v| v.tanh())
    }

    pub fn gelu(&self) -> Var<'g, T> {
        self.unary(Op::Gelu(self.id), gelu_scalar)
    }

    /// Sums over `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g, T>> {
        let n = self.graph.node(self.id);
        if axis >= n.shape.len() {
            return Err(DecaError::Dimension(format!(
                "sum over axis {axis} of shape {:?}",
                n.shape
            )));
        }
        let outer: usize = n.shape[..axis].iter().product();
        let len = n.shape[axis];
        let inner: usize = n.shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &n.value[(o * len + l) * inner..(o * len + l + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        let mut shape = n.shape.clone();
        shape[axis] = 1;
        let rg = n.requires_grad;
        drop(n);
        Ok(self.graph.push(shape, out, Op::SumAxis(self.id, axis), rg))
    }

    pub fn sum(&self) -> Var<'g, T> {
        let n = self.graph.node(self.id);
        let s = n.value.iter().copied().sum::<T>();
        let rg = n.requires_grad;
        drop(n);
        self.graph.push(vec![1], vec![s], Op::SumAll(self.id), rg)
    }

    pub fn mean(&self) -> Var<'g, T> {
        let n = T::from_f64(self.numel() as f64);
        self.sum().scale(T::one() / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let n = self.graph.node(self.id);
        if shape.iter().product::<usize>() != n.value.len() {
            return Err(shape_mismatch("reshape changes element count", &n.shape, shape));
        }
        let (value, rg) = (n.value.clone(), n.requires_grad);
        drop(n);
        Ok(self.graph.push(shape.to_vec(), value, Op::Reshape(self.id), rg))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'g, T>> {
        let n = self.graph.node(self.id);
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..n.shape.len()).collect::<Vec<_>>() {
            return Err(DecaError::Dimension(format!(
                "invalid permutation {perm:?} for shape {:?}",
                n.shape
            )));
        }
        let value = permute_data(&n.value, &n.shape, perm);
        let shape = perm.iter().map(|&p| n.shape[p]).collect();
        let rg = n.requires_grad;
        drop(n);
        Ok(self.graph.push(shape, value, Op::Permute(self.id, perm.to_vec()), rg))
    }

    /// `out[i] = self.flat[index[i]]`, or zero where `index[i] == GATHER_PAD`.
    pub fn gather(&self, out_shape: &[usize], index: Rc<Vec<usize>>) -> Result<Var<'g, T>> {
        let n = self.graph.node(self.id);
        if out_shape.iter().product::<usize>() != index.len() {
            return Err(DecaError::Dimension(format!(
                "gather index of length {} for output shape {out_shape:?}",
                index.len()
            )));
        }
        let mut value = Vec::with_capacity(index.len());
        for &i in index.iter() {
            if i == GATHER_PAD {
                value.push(T::zero());
            } else if i < n.value.len() {
                value.push(n.value[i]);
            } else {
                return Err(DecaError::Dimension(format!(
                    "gather index {i} out of range for {} elements",
                    n.value.len()
                )));
            }
        }
        let rg = n.requires_grad;
        drop(n);
        Ok(self.graph.push(out_shape.to_vec(), value, Op::Gather(self.id, index), rg))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(DecaError::Dimension(format!(
                "narrow({axis}, {start}, {len}) on shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for l in start..start + len {
                let base = (o * shape[axis] + l) * inner;
                index.extend(base..base + inner);
            }
        }
        let mut out = shape.clone();
        out[axis] = len;
        self.gather(&out, Rc::new(index))
    }

    /// Batched matrix product with broadcasting over leading dimensions.
    pub fn matmul(&self, o: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.graph.node(self.id), self.graph.node(o.id));
        let plan = matmul_plan(&a.shape, &b.shape)?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let out_shape = plan.out_shape();
        let mut out = vec![T::zero(); out_shape.iter().product()];
        for (oi, ia, ib) in plan.pairs() {
            gemm_acc(
                m,
                k,
                n,
                &a.value[ia * m * k..(ia + 1) * m * k],
                &b.value[ib * k * n..(ib + 1) * k * n],
                &mut out[oi * m * n..(oi + 1) * m * n],
            );
        }
        let rg = a.requires_grad || b.requires_grad;
        drop(a);
        drop(b);
        Ok(self.graph.push(out_shape, out, Op::MatMul(self.id, o.id), rg))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'g, T>> {
        let n = self.graph.node(self.id);
        if axis >= n.shape.len() {
            return Err(DecaError::Dimension(format!(
                "softmax over axis {axis} of shape {:?}",
                n.shape
            )));
        }
        let outer: usize = n.shape[..axis].iter().product();
        let len = n.shape[axis];
        let inner: usize = n.shape[axis + 1..].iter().product();
        let x = &n.value;
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for l in 0..len {
                    mx = mx.max(x[base + l * inner]);
                }
                let mut s = T::zero();
                for l in 0..len {
                    let e = (x[base + l * inner] - mx).exp();
                    y[base + l * inner] = e;
                    s += e;
                }
                for l in 0..len {
                    y[base + l * inner] /= s;
                }
            }
        }
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        drop(n);
        Ok(self.graph.push(shape, y, Op::Softmax(self.id, axis), rg))
    }

    /// 2-D cross-correlation. `self` is `[B,C,H,W]`, `weight` is
    /// `[O,C,k,k]`, `bias` is `[O]`.
    pub fn conv2d(
        &self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'g, T>> {
        let x = self.graph.node(self.id);
        let w = self.graph.node(weight.id);
        if x.shape.len() != 4 || w.shape.len() != 4 || w.shape[2] != w.shape[3] {
            return Err(shape_mismatch("conv2d expects [B,C,H,W] and [O,C,k,k]", &x.shape, &w.shape));
        }
        if x.shape[1] != w.shape[1] {
            return Err(shape_mismatch("conv2d channel mismatch", &x.shape, &w.shape));
        }
        if stride == 0 || x.shape[2] + 2 * pad < w.shape[2] || x.shape[3] + 2 * pad < w.shape[3] {
            return Err(shape_mismatch("conv2d kernel larger than padded input", &x.shape, &w.shape));
        }
        let geom = ConvGeom {
            batch: x.shape[0],
            in_ch: x.shape[1],
            out_ch: w.shape[0],
            h: x.shape[2],
            w: x.shape[3],
            kernel: w.shape[2],
            stride,
            pad,
        };
        let bias_vals = match bias {
            Some(b) => {
                let bn = self.graph.node(b.id);
                if bn.shape != [geom.out_ch] {
                    return Err(shape_mismatch("conv2d bias", &bn.shape, &[geom.out_ch]));
                }
                Some(bn.value.clone())
            }
            None => None,
        };
        let (ho, wo) = geom.out_hw();
        let (kr, n) = (geom.col_rows(), geom.col_cols());
        let plane = geom.in_ch * geom.h * geom.w;
        let mut cols = vec![T::zero(); geom.batch * kr * n];
        let mut out = vec![T::zero(); geom.batch * geom.out_ch * n];
        for s in 0..geom.batch {
            let cs = &mut cols[s * kr * n..(s + 1) * kr * n];
            im2col(&geom, &x.value[s * plane..(s + 1) * plane], cs);
            let os = &mut out[s * geom.out_ch * n..(s + 1) * geom.out_ch * n];
            gemm_acc(geom.out_ch, kr, n, &w.value, cs, os);
            if let Some(bv) = &bias_vals {
                for (c, &bc) in bv.iter().enumerate() {
                    os[c * n..(c + 1) * n].iter_mut().for_each(|v| *v += bc);
                }
            }
        }
        let rg = x.requires_grad
            || w.requires_grad
            || bias.map_or(false, |b| self.graph.rg(b.id));
        drop(x);
        drop(w);
        Ok(self.graph.push(
            vec![geom.batch, geom.out_ch, ho, wo],
            out,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Per-(sample, channel) standardization over spatial positions,
    /// without affine terms.
    pub fn instance_norm(&self, eps: T) -> Result<Var<'g, T>> {
        let n = self.graph.node(self.id);
        if n.shape.len() != 4 {
            return Err(DecaError::Dimension(format!(
                "instance_norm expects [B,C,H,W], got {:?}",
                n.shape
            )));
        }
        let spatial = n.shape[2] * n.shape[3];
        if spatial < 2 && eps <= T::zero() {
            return Err(DecaError::Numeric(
                "instance_norm over a single position needs eps > 0".into(),
            ));
        }
        let nf = T::from_f64(spatial as f64);
        let groups = n.shape[0] * n.shape[1];
        let mut y = vec![T::zero(); n.value.len()];
        let mut rstd = Vec::with_capacity(groups);
        for c in 0..groups {
            let xs = &n.value[c * spatial..(c + 1) * spatial];
            let mean = xs.iter().copied().sum::<T>() / nf;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            for (d, &v) in y[c * spatial..(c + 1) * spatial].iter_mut().zip(xs) {
                *d = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        drop(n);
        Ok(self.graph.push(
            shape,
            y,
            Op::InstanceNorm {
                x: self.id,
                rstd,
                spatial,
            },
            rg,
        ))
    }
}
