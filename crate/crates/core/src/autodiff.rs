//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`] holding the
//! forward value and enough context to run the vector-Jacobian product later.
//! [`Tape::backward`] walks the tape in reverse and accumulates adjoints into
//! the differentiable leaves. Repeated calls accumulate.

use std::cell::RefCell;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeom {
    batch: usize,
    in_channels: usize,
    height: usize,
    width: usize,
    out_channels: usize,
    kernel: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn pixels(&self) -> usize {
        self.height * self.width
    }
}

enum Op {
    Leaf,
    Linear { x: usize, w: usize, b: Option<usize>, rows: usize, inner: usize, outer: usize },
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeom, cols: Vec<f64> },
    MaxPool { x: usize, argmax: Vec<usize> },
    Relu(usize),
    Tanh(usize),
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    SumRows { x: usize, cols: usize },
    LogSoftmax { x: usize, cols: usize },
    Softmax { x: usize, cols: usize },
    Gather { x: usize, cols: usize, index: Vec<usize> },
    Clamp { x: usize, lo: f64, hi: f64 },
    Minimum(usize, usize),
    StopGradient,
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass.
///
/// A tape is single-threaded; independent networks build independent tapes,
/// so a frozen network can be evaluated from several threads at once.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices covering the strided extents; c is row-major m x n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Adds a leaf holding a copy of `tensor`; it is differentiable when the
    /// tensor carries a gradient buffer.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        self.push(tensor.shape().to_vec(), tensor.values().to_vec(), Op::Leaf, tensor.requires_grad())
    }

    /// Adds a differentiable leaf.
    pub fn variable(&self, shape: &[usize], values: Vec<f64>) -> Var<'_> {
        self.push(shape.to_vec(), values, Op::Leaf, true)
    }

    /// Adds a non-differentiable leaf.
    pub fn constant(&self, shape: &[usize], values: Vec<f64>) -> Var<'_> {
        self.push(shape.to_vec(), values, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Accumulated gradient of a differentiable leaf, if backward has reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Vec<f64>> {
        self.grads.borrow().get(var.id).cloned().flatten()
    }

    /// Adds the accumulated gradient of `var` into the gradient buffer of `tensor`.
    pub fn accumulate_into(&self, var: Var<'_>, tensor: &mut Tensor) {
        let grads = self.grads.borrow();
        if let (Some(Some(g)), Some(dst)) = (grads.get(var.id), tensor.grad_mut()) {
            add_into(dst, g);
        }
    }

    /// Back-propagates from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        if root.requires_grad {
            adj[loss.id] = Some(vec![1.0]);
        }

        for id in (0..=loss.id).rev() {
            let Some(dy) = adj[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                adj[id] = Some(dy);
                continue;
            }
            backprop_node(&nodes, node, &dy, &mut adj);
        }

        let mut grads = self.grads.borrow_mut();
        if grads.len() < nodes.len() {
            grads.resize(nodes.len(), None);
        }
        for (id, a) in adj.into_iter().enumerate() {
            if let Some(a) = a {
                if matches!(nodes[id].op, Op::Leaf) && nodes[id].requires_grad {
                    match grads[id].as_mut() {
                        Some(g) => add_into(g, &a),
                        None => grads[id] = Some(a),
                    }
                }
            }
        }
        Ok(())
    }
}

fn parent_adj<'a>(
    nodes: &[Node],
    adj: &'a mut [Option<Vec<f64>>],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(adj[id].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop_node(nodes: &[Node], node: &Node, dy: &[f64], adj: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf | Op::StopGradient => {}
        Op::Linear { x, w, b, rows, inner, outer } => {
            let (rows, inner, outer) = (*rows, *inner, *outer);
            if nodes[*w].requires_grad {
                let xv = &nodes[*x].value;
                let gw = parent_adj(nodes, adj, *w).unwrap();
                // dW[inner x outer] += X^T dY
                gemm(inner, rows, outer, xv, (1, inner), dy, (outer, 1), gw, 1.0);
            }
            if let Some(b) = b {
                if let Some(gb) = parent_adj(nodes, adj, *b) {
                    for r in 0..rows {
                        add_into(gb, &dy[r * outer..(r + 1) * outer]);
                    }
                }
            }
            if nodes[*x].requires_grad {
                let wv = &nodes[*w].value;
                let gx = parent_adj(nodes, adj, *x).unwrap();
                // dX[rows x inner] += dY W^T
                gemm(rows, outer, inner, dy, (outer, 1), wv, (1, outer), gx, 1.0);
            }
        }
        Op::Conv2d { x, w, b, geom, cols } => {
            let g = *geom;
            let (patch, pix, oc) = (g.patch(), g.pixels(), g.out_channels);
            if let Some(gb) = parent_adj(nodes, adj, *b) {
                for bi in 0..g.batch {
                    for o in 0..oc {
                        let start = (bi * oc + o) * pix;
                        gb[o] += dy[start..start + pix].iter().sum::<f64>();
                    }
                }
            }
            if nodes[*w].requires_grad {
                let gw = parent_adj(nodes, adj, *w).unwrap();
                for bi in 0..g.batch {
                    let dyb = &dy[bi * oc * pix..(bi + 1) * oc * pix];
                    let cb = &cols[bi * patch * pix..(bi + 1) * patch * pix];
                    // dW[oc x patch] += dY_b[oc x pix] cols_b^T[pix x patch]
                    gemm(oc, pix, patch, dyb, (pix, 1), cb, (1, pix), gw, 1.0);
                }
            }
            if nodes[*x].requires_grad {
                let wv = &nodes[*w].value;
                let mut dcols = vec![0.0; patch * pix];
                let plane = g.height * g.width;
                for bi in 0..g.batch {
                    let dyb = &dy[bi * oc * pix..(bi + 1) * oc * pix];
                    // dcols[patch x pix] = W^T[patch x oc] dY_b[oc x pix]
                    gemm(patch, oc, pix, wv, (1, patch), dyb, (pix, 1), &mut dcols, 0.0);
                    let gx = parent_adj(nodes, adj, *x).unwrap();
                    let gxb = &mut gx[bi * g.in_channels * plane..(bi + 1) * g.in_channels * plane];
                    col2im(&dcols, gxb, g);
                }
            }
        }
        Op::MaxPool { x, argmax } => {
            if let Some(gx) = parent_adj(nodes, adj, *x) {
                for (d, &src) in dy.iter().zip(argmax) {
                    gx[src] += d;
                }
            }
        }
        Op::Relu(x) => {
            if let Some(gx) = parent_adj(nodes, adj, *x) {
                for ((g, d), y) in gx.iter_mut().zip(dy).zip(&node.value) {
                    if *y > 0.0 {
                        *g += d;
                    }
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(gx) = parent_adj(nodes, adj, *x) {
                for ((g, d), y) in gx.iter_mut().zip(dy).zip(&node.value) {
                    *g += d * (1.0 - y * y);
                }
            }
        }
        Op::Reshape(x) | Op::Offset(x) => {
            if let Some(gx) = parent_adj(nodes, adj, *x) {
                add_into(gx, dy);
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = parent_adj(nodes, adj, *a) {
                add_into(ga, dy);
            }
            if let Some(gb) = parent_adj(nodes, adj, *b) {
                add_into(gb, dy);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = parent_adj(nodes, adj, *a) {
                add_into(ga, dy);
            }
            if let Some(gb) = parent_adj(nodes, adj, *b) {
                for (g, d) in gb.iter_mut().zip(dy) {
                    *g -= d;
                }
            }
        }
        Op::Mul(a, b) => {
            if nodes[*a].requires_grad {
                let bv = &nodes[*b].value;
                let ga = parent_adj(nodes, adj, *a).unwrap();
                for ((g, d), v) in ga.iter_mut().zip(dy).zip(bv) {
                    *g += d * v;
                }
            }
            if nodes[*b].requires_grad {
                let av = &nodes[*a].value;
                let gb = parent_adj(nodes, adj, *b).unwrap();
                for ((g, d), v) in gb.iter_mut().zip(dy).zip(av) {
                    *g += d * v;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = parent_adj(nodes, adj, *x) {
                for (g, d) in gx.iter_mut().zip(dy) {
                    *g += d * c;
                }
            }
        }
        Op::Exp(x) => {
            if let Some(gx) = parent_adj(nodes, adj, *x) {
                for ((g, d), y) in gx.iter_mut().zip(dy).zip(&node.value) {
                    *g += d * y;
                }
            }
        }
        Op::Log(x) => {
            if nodes[*x].requires_grad {
                let xv = &nodes[*x].value;
                let gx = parent_adj(nodes, adj, *x).unwrap();
                for ((g, d), v) in gx.iter_mut().zip(dy).zip(xv) {
                    *g += d / v;
                }
            }
        }
        Op::Square(x) => {
            if nodes[*x].requires_grad {
                let xv = &nodes[*x].value;
                let gx = parent_adj(nodes, adj, *x).unwrap();
                for ((g, d), v) in gx.iter_mut().zip(dy).zip(xv) {
                    *g += 2.0 * d * v;
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = parent_adj(nodes, adj, *x) {
                gx.iter_mut().for_each(|g| *g += dy[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(gx) = parent_adj(nodes, adj, *x) {
                let d = dy[0] / gx.len() as f64;
                gx.iter_mut().for_each(|g| *g += d);
            }
        }
        Op::SumRows { x, cols } => {
            if let Some(gx) = parent_adj(nodes, adj, *x) {
                for (row, d) in gx.chunks_mut(*cols).zip(dy) {
                    row.iter_mut().for_each(|g| *g += d);
                }
            }
        }
        Op::LogSoftmax { x, cols } => {
            if let Some(gx) = parent_adj(nodes, adj, *x) {
                for ((g, d), y) in gx.chunks_mut(*cols).zip(dy.chunks(*cols)).zip(node.value.chunks(*cols)) {
                    let total: f64 = d.iter().sum();
                    for k in 0..*cols {
                        g[k] += d[k] - y[k].exp() * total;
                    }
                }
            }
        }
        Op::Softmax { x, cols } => {
            if let Some(gx) = parent_adj(nodes, adj, *x) {
                for ((g, d), y) in gx.chunks_mut(*cols).zip(dy.chunks(*cols)).zip(node.value.chunks(*cols)) {
                    let dot: f64 = d.iter().zip(y).map(|(a, b)| a * b).sum();
                    for k in 0..*cols {
                        g[k] += y[k] * (d[k] - dot);
                    }
                }
            }
        }
        Op::Gather { x, cols, index } => {
            if let Some(gx) = parent_adj(nodes, adj, *x) {
                for (r, (&i, d)) in index.iter().zip(dy).enumerate() {
                    gx[r * cols + i] += d;
                }
            }
        }
        Op::Clamp { x, lo, hi } => {
            if nodes[*x].requires_grad {
                let xv = &nodes[*x].value;
                let gx = parent_adj(nodes, adj, *x).unwrap();
                for ((g, d), v) in gx.iter_mut().zip(dy).zip(xv) {
                    if *v >= *lo && *v <= *hi {
                        *g += d;
                    }
                }
            }
        }
        Op::Minimum(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let pick_a: Vec<bool> = av.iter().zip(bv).map(|(x, y)| x <= y).collect();
            if let Some(ga) = parent_adj(nodes, adj, *a) {
                for ((g, d), &p) in ga.iter_mut().zip(dy).zip(&pick_a) {
                    if p {
                        *g += d;
                    }
                }
            }
            if let Some(gb) = parent_adj(nodes, adj, *b) {
                for ((g, d), &p) in gb.iter_mut().zip(dy).zip(&pick_a) {
                    if !p {
                        *g += d;
                    }
                }
            }
        }
    }
}

fn im2col(x: &[f64], cols: &mut [f64], g: ConvGeom) {
    let pad = (g.kernel / 2) as isize;
    let (h, w) = (g.height as isize, g.width as isize);
    let pix = g.pixels();
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * pix..(row + 1) * pix];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    for xx in 0..w {
                        let sx = xx + dx;
                        dst[(y * w + xx) as usize] = if sy >= 0 && sy < h && sx >= 0 && sx < w {
                            plane[(sy * w + sx) as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], gx: &mut [f64], g: ConvGeom) {
    let pad = (g.kernel / 2) as isize;
    let (h, w) = (g.height as isize, g.width as isize);
    let pix = g.pixels();
    for c in 0..g.in_channels {
        let plane = &mut gx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * pix..(row + 1) * pix];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx + dx;
                        if sx >= 0 && sx < w {
                            plane[(sy * w + sx) as usize] += src[(y * w + xx) as usize];
                        }
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Runs `f` against the forward value without copying it.
    pub fn with_value<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn item(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        assert_eq!(v.len(), 1, "item() on a non-scalar");
        v[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn to_tensor(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shapes are consistent")
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&v| f(v)).collect(), n.requires_grad)
        };
        self.tape.push(shape, value, op, rg)
    }

    fn binary(self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            assert_eq!(
                a.value.len(),
                b.value.len(),
                "elementwise op on shapes {:?} and {:?}",
                a.shape,
                b.shape
            );
            let value = a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect();
            (a.shape.clone(), value, a.requires_grad || b.requires_grad)
        };
        self.tape.push(shape, value, op, rg)
    }

    fn rows_cols(&self, what: &str) -> (usize, usize) {
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "{what} expects a 2-d tensor, got {shape:?}");
        (shape[0], shape[1])
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn minimum(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Minimum(self.id, other.id), |a, b| if a <= b { a } else { b })
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        self.unary(Op::Offset(self.id), |v| v + c)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |v| v * v)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp { x: self.id, lo, hi }, |v| v.clamp(lo, hi))
    }

    /// Identity on values; blocks all gradient flow.
    pub fn stop_gradient(self) -> Var<'t> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            (nodes[self.id].shape.clone(), nodes[self.id].value.clone())
        };
        self.tape.push(shape, value, Op::StopGradient, false)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            assert_eq!(shape.iter().product::<usize>(), n.value.len(), "bad reshape {:?} -> {shape:?}", n.shape);
            (n.value.clone(), n.requires_grad)
        };
        self.tape.push(shape.to_vec(), value, Op::Reshape(self.id), rg)
    }

    pub fn sum(self) -> Var<'t> {
        let v = self.with_value(|v| v.iter().sum::<f64>());
        self.tape.push(vec![1], vec![v], Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.numel() as f64;
        let v = self.with_value(|v| v.iter().sum::<f64>()) / n;
        self.tape.push(vec![1], vec![v], Op::Mean(self.id), self.requires_grad())
    }

    /// Sums each row of a `[rows, cols]` tensor.
    pub fn sum_rows(self) -> Var<'t> {
        let (rows, cols) = self.rows_cols("sum_rows");
        let v = self.with_value(|v| v.chunks(cols).map(|r| r.iter().sum()).collect());
        self.tape.push(vec![rows], v, Op::SumRows { x: self.id, cols }, self.requires_grad())
    }

    /// Row-wise log-softmax of a `[rows, cols]` tensor, stabilised by max subtraction.
    pub fn log_softmax(self) -> Var<'t> {
        let (rows, cols) = self.rows_cols("log_softmax");
        let v = self.with_value(|v| {
            let mut out = Vec::with_capacity(v.len());
            for r in v.chunks(cols) {
                out.extend(log_softmax_row(r));
            }
            out
        });
        self.tape.push(vec![rows, cols], v, Op::LogSoftmax { x: self.id, cols }, self.requires_grad())
    }

    /// Row-wise softmax of a `[rows, cols]` tensor.
    pub fn softmax(self) -> Var<'t> {
        let (rows, cols) = self.rows_cols("softmax");
        let v = self.with_value(|v| {
            let mut out = Vec::with_capacity(v.len());
            for r in v.chunks(cols) {
                out.extend(softmax_row(r));
            }
            out
        });
        self.tape.push(vec![rows, cols], v, Op::Softmax { x: self.id, cols }, self.requires_grad())
    }

    /// Picks `x[r, index[r]]` from each row of a `[rows, cols]` tensor.
    pub fn gather(self, index: &[usize]) -> Var<'t> {
        let (rows, cols) = self.rows_cols("gather");
        assert_eq!(index.len(), rows, "gather index length");
        let v = self.with_value(|v| {
            index
                .iter()
                .enumerate()
                .map(|(r, &i)| {
                    assert!(i < cols, "gather index {i} out of range {cols}");
                    v[r * cols + i]
                })
                .collect()
        });
        self.tape.push(
            vec![rows],
            v,
            Op::Gather { x: self.id, cols, index: index.to_vec() },
            self.requires_grad(),
        )
    }

    /// Dense layer `x W + b` for `x: [rows, inner]`, `W: [inner, outer]`, `b: [outer]`.
    pub fn linear(self, w: Var<'t>, b: Option<Var<'t>>) -> Var<'t> {
        let (value, rows, inner, outer, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (xn, wn) = (&nodes[self.id], &nodes[w.id]);
            assert_eq!(xn.shape.len(), 2, "linear input must be 2-d, got {:?}", xn.shape);
            assert_eq!(wn.shape.len(), 2, "linear weight must be 2-d");
            let (rows, inner) = (xn.shape[0], xn.shape[1]);
            assert_eq!(wn.shape[0], inner, "linear: input {:?} vs weight {:?}", xn.shape, wn.shape);
            let outer = wn.shape[1];
            let mut out = vec![0.0; rows * outer];
            let mut rg = xn.requires_grad || wn.requires_grad;
            if let Some(b) = b {
                let bn = &nodes[b.id];
                assert_eq!(bn.value.len(), outer, "linear bias length");
                for row in out.chunks_mut(outer) {
                    row.copy_from_slice(&bn.value);
                }
                rg |= bn.requires_grad;
            }
            gemm(rows, inner, outer, &xn.value, (inner, 1), &wn.value, (outer, 1), &mut out, 1.0);
            (out, rows, inner, outer, rg)
        };
        self.tape.push(
            vec![rows, outer],
            value,
            Op::Linear { x: self.id, w: w.id, b: b.map(|b| b.id), rows, inner, outer },
            rg,
        )
    }

    /// Stride-1 same-padded convolution. `x: [B, C, H, W]`, `w: [O, C, k, k]`, `b: [O]`, odd `k`.
    pub fn conv2d(self, w: Var<'t>, b: Var<'t>) -> Var<'t> {
        let (value, geom, cols, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (xn, wn, bn) = (&nodes[self.id], &nodes[w.id], &nodes[b.id]);
            assert_eq!(xn.shape.len(), 4, "conv2d input must be [B,C,H,W], got {:?}", xn.shape);
            assert_eq!(wn.shape.len(), 4, "conv2d weight must be [O,C,k,k]");
            assert_eq!(wn.shape[1], xn.shape[1], "conv2d channel mismatch");
            assert_eq!(wn.shape[2], wn.shape[3], "conv2d kernel must be square");
            assert!(wn.shape[2] % 2 == 1, "conv2d kernel must be odd for same padding");
            let geom = ConvGeom {
                batch: xn.shape[0],
                in_channels: xn.shape[1],
                height: xn.shape[2],
                width: xn.shape[3],
                out_channels: wn.shape[0],
                kernel: wn.shape[2],
            };
            let (patch, pix, oc) = (geom.patch(), geom.pixels(), geom.out_channels);
            let plane = geom.in_channels * pix;
            let mut cols = vec![0.0; geom.batch * patch * pix];
            let mut out = vec![0.0; geom.batch * oc * pix];
            for bi in 0..geom.batch {
                let cb = &mut cols[bi * patch * pix..(bi + 1) * patch * pix];
                im2col(&xn.value[bi * plane..(bi + 1) * plane], cb, geom);
                let ob = &mut out[bi * oc * pix..(bi + 1) * oc * pix];
                for (o, row) in ob.chunks_mut(pix).enumerate() {
                    row.iter_mut().for_each(|v| *v = bn.value[o]);
                }
                gemm(oc, patch, pix, &wn.value, (patch, 1), cb, (pix, 1), ob, 1.0);
            }
            let rg = xn.requires_grad || wn.requires_grad || bn.requires_grad;
            (out, geom, cols, rg)
        };
        let shape = vec![geom.batch, geom.out_channels, geom.height, geom.width];
        self.tape.push(shape, value, Op::Conv2d { x: self.id, w: w.id, b: b.id, geom, cols }, rg)
    }

    /// Non-overlapping `k x k` max pooling over `[B, C, H, W]`; trailing rows/columns are dropped.
    pub fn max_pool(self, k: usize) -> Var<'t> {
        let (value, shape, argmax, rg) = {
            let nodes = self.tape.nodes.borrow();
            let xn = &nodes[self.id];
            assert_eq!(xn.shape.len(), 4, "max_pool input must be [B,C,H,W]");
            let (b, c, h, w) = (xn.shape[0], xn.shape[1], xn.shape[2], xn.shape[3]);
            let (oh, ow) = (h / k, w / k);
            let mut out = Vec::with_capacity(b * c * oh * ow);
            let mut argmax = Vec::with_capacity(b * c * oh * ow);
            for plane in 0..b * c {
                let base = plane * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = base;
                        for ky in 0..k {
                            for kx in 0..k {
                                let i = base + (oy * k + ky) * w + ox * k + kx;
                                if xn.value[i] > best {
                                    best = xn.value[i];
                                    best_i = i;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_i);
                    }
                }
            }
            (out, vec![b, c, oh, ow], argmax, xn.requires_grad)
        };
        self.tape.push(shape, value, Op::MaxPool { x: self.id, argmax }, rg)
    }
}

pub(crate) fn log_softmax_row(row: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(move |v| v - lse)
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Row-wise softmax of a `[rows, k]` tensor, outside any tape.
pub fn softmax(logits: &Tensor) -> Tensor {
    let k = *logits.shape().last().expect("non-empty shape");
    let values = logits.values().chunks(k).flat_map(softmax_row).collect();
    Tensor::new(logits.shape().to_vec(), values).expect("same shape")
}

/// Row-wise log-softmax of a `[rows, k]` tensor, outside any tape.
pub fn log_softmax(logits: &Tensor) -> Tensor {
    let k = *logits.shape().last().expect("non-empty shape");
    let values = logits.values().chunks(k).flat_map(log_softmax_row).collect();
    Tensor::new(logits.shape().to_vec(), values).expect("same shape")
}

/// Batch-mean KL divergence `KL[p || q]` with `p` given as probabilities
/// (treated as data) and `q` as log-probabilities on the tape.
///
/// Terms with `p = 0` contribute nothing.
pub fn kl_divergence<'t>(p_probs: &Tensor, q_log_probs: Var<'t>) -> Var<'t> {
    let tape = q_log_probs.tape();
    let shape = q_log_probs.shape();
    assert_eq!(p_probs.shape(), shape.as_slice(), "kl_divergence shape mismatch");
    let rows = shape[0] as f64;
    let entropy_term: f64 = p_probs
        .values()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
        / rows;
    let p = tape.constant(&shape, p_probs.values().to_vec());
    let cross = p.mul(q_log_probs).sum_rows().mean();
    cross.neg().offset(entropy_term)
}

/// Mean cross-entropy of `logits: [rows, k]` against integer class labels.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Var<'t> {
    logits.log_softmax().gather(labels).mean().neg()
}

/// Mean entropy of the categorical distributions given by `log_probs: [rows, k]`.
pub fn entropy<'t>(log_probs: Var<'t>) -> Var<'t> {
    log_probs.exp().mul(log_probs).sum_rows().mean().neg()
}

/// Mean squared difference between two same-shape vars.
pub fn mse<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    a.sub(b).square().mean()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let p = softmax(&Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap());
        for v in p.values() {
            assert!(close(*v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn softmax_two_logits() {
        let p = softmax(&Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        // e^1 / (e^1 + e^2) = 1 / (1 + e)
        let expected = 1.0 / (1.0 + 1f64.exp());
        assert!(close(p.values()[0], expected, 1e-15));
        assert!(close(p.values()[0], 0.26894, 1e-4));
        assert!(close(p.values()[1], 0.73106, 1e-4));
    }

    #[test]
    fn softmax_is_shift_invariant_and_stable() {
        let a = softmax(&Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap());
        let b = softmax(&Tensor::new(vec![1, 3], vec![1000.5, 999.0, 1002.0]).unwrap());
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!(close(*x, *y, 1e-12));
        }
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let tape = Tape::new();
        let logits = Tensor::new(vec![2, 3], vec![0.1, 0.2, -0.3, 1.0, 0.0, 0.5]).unwrap();
        let p = softmax(&logits);
        let q = tape.leaf(&logits).log_softmax();
        assert!(kl_divergence(&p, q).item().abs() < 1e-15);
    }

    #[test]
    fn kl_matches_direct_sum() {
        let tape = Tape::new();
        let p = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let q = tape.constant(&[1, 2], vec![0.9f64.ln(), 0.1f64.ln()]);
        let kl = kl_divergence(&p, q).item();
        let direct = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!(close(kl, direct, 1e-15));
        assert!(close(kl, 0.51083, 1e-4));
    }

    #[test]
    fn kl_with_one_hot_teacher_is_negative_log_prob() {
        let tape = Tape::new();
        let q = [0.2f64, 0.7, 0.1];
        let p = Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let qv = tape.constant(&[1, 3], q.iter().map(|v| v.ln()).collect());
        assert!(close(kl_divergence(&p, qv).item(), -0.7f64.ln(), 1e-15));
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.variable(&[2], vec![1.0, -2.0]);
        let loss = x.mul(x).sum();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![2.0, -4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.variable(&[2], vec![1.0, -2.0]);
        let loss = x.square().sum();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![4.0, -8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.variable(&[2], vec![1.0, 2.0]);
        assert!(matches!(tape.backward(x.square()), Err(Error::Usage(_))));
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let tape = Tape::new();
        let x = tape.variable(&[3], vec![1.0, 2.0, -3.0]);
        let y = tape.variable(&[3], vec![0.5, 0.5, 0.5]);
        let sg = y.stop_gradient();
        assert_eq!(sg.value(), y.value());
        tape.backward(x.mul(sg).sum()).unwrap();
        assert!(tape.grad(y).is_none());
        assert_eq!(tape.grad(x).unwrap(), vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn product_with_detached_self_has_single_derivative() {
        let tape = Tape::new();
        let x = tape.variable(&[2], vec![3.0, -1.5]);
        tape.backward(x.mul(x.stop_gradient()).sum()).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![3.0, -1.5]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(&[2], vec![1.0, 1.0]);
        let x = tape.variable(&[2], vec![2.0, 3.0]);
        tape.backward(c.mul(x).sum()).unwrap();
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let tape = Tape::new();
        let x = tape.variable(&[1, 1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]);
        let y = x.max_pool(2);
        assert_eq!(y.value(), vec![4.0]);
        tape.backward(y.sum()).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_with_centre_tap_is_identity() {
        let tape = Tape::new();
        let x = tape.constant(&[1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.constant(&[1, 1, 3, 3], k);
        let b = tape.constant(&[1], vec![0.5]);
        let y = x.conv2d(w, b);
        assert_eq!(y.value(), vec![1.5, 2.5, 3.5, 4.5, 5.5, 6.5]);
    }

    #[test]
    fn conv_shift_kernel_uses_zero_padding() {
        let tape = Tape::new();
        let x = tape.constant(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]);
        // Tap at (1, 2): output(x) = input(x + 1).
        let mut k = vec![0.0; 9];
        k[5] = 1.0;
        let w = tape.constant(&[1, 1, 3, 3], k);
        let b = tape.constant(&[1], vec![0.0]);
        assert_eq!(x.conv2d(w, b).value(), vec![2.0, 3.0, 0.0]);
    }
}
