//! Reverse-mode autodiff tensor engine.
//!
//! Tensors are handles (`Rc<RefCell<..>>`) onto n-dimensional f64 arrays in
//! row-major layout. Every differentiable op records its parents and a
//! backward closure; [`Tensor::backward`] runs the reverse sweep from a
//! scalar and frees the graph as it goes. Graphs are built per forward pass
//! and never reused.
//!
//! The engine is single-threaded by contract: one thread of control owns
//! forward/backward/optimizer. Tracking can be suspended with [`no_grad`]
//! for inference.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient tracking disabled (nested calls are fine).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Per-parent gradient contributions produced by a backward closure.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    node: Option<Node>,
}

/// Handle onto a tensor; clones share storage and gradient.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("id", &inner.id)
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    // ── Construction ────────────────────────────────────────────────

    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::new_leaf(data, shape.to_vec(), false))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Self::new_leaf(vec![0.0; numel], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        Self::new_leaf(vec![value; numel], shape.to_vec(), false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::new_leaf(vec![value], vec![1], false)
    }

    /// Marks this tensor as a gradient leaf and returns it.
    pub fn requires_grad(self, flag: bool) -> Tensor {
        self.inner.borrow_mut().requires_grad = flag;
        self
    }

    /// In-place variant for leaves whose training status changes (freezes).
    pub fn set_requires_grad(&self, flag: bool) {
        self.inner.borrow_mut().requires_grad = flag;
    }

    fn new_leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                grad: None,
                requires_grad,
                node: None,
            })),
        }
    }

    /// Crate-internal constructor for composite nodes (norms etc.).
    pub(crate) fn from_op(
        parents: Vec<Tensor>,
        data: Vec<f64>,
        shape: Vec<usize>,
        backward: BackwardFn,
    ) -> Tensor {
        let track = grad_enabled() && parents.iter().any(|p| p.is_tracked());
        let t = Self::new_leaf(data, shape, false);
        if track {
            let mut inner = t.inner.borrow_mut();
            inner.requires_grad = true;
            inner.node = Some(Node { parents, backward });
        }
        t
    }

    fn is_tracked(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    // ── Accessors ───────────────────────────────────────────────────

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_grad_leaf(&self) -> bool {
        let inner = self.inner.borrow();
        inner.requires_grad && inner.node.is_none()
    }

    pub fn data_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Zero-copy read access to the flat data.
    pub fn map_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.borrow().data)
    }

    pub fn grad_vec(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        debug_assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }

    // ── Leaf mutation (optimizer / checkpoint loading) ──────────────

    /// Replaces the data of a leaf tensor; shape must be unchanged.
    pub fn set_data(&self, data: Vec<f64>) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(data.len(), inner.data.len(), "set_data: length mismatch");
        inner.data = data;
    }

    /// In-place update of the flat data (leaf tensors only).
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.borrow_mut().data)
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar. Populates `grad` on every tensor with
    /// `requires_grad` reachable in the graph, then frees the graph.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::numeric("backward requires a scalar root"));
        }
        let order = self.topo_order();
        {
            let mut inner = self.inner.borrow_mut();
            let g = inner.grad.get_or_insert(vec![0.0; 1]);
            g[0] += 1.0;
        }
        for t in order.iter().rev() {
            let node = t.inner.borrow_mut().node.take();
            let Some(node) = node else { continue };
            let grad = match t.inner.borrow().grad.clone() {
                Some(g) => g,
                None => continue,
            };
            let contribs = (node.backward)(&grad);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (parent, contrib) in node.parents.iter().zip(contribs) {
                if !parent.is_tracked() {
                    continue;
                }
                let mut pi = parent.inner.borrow_mut();
                let numel = pi.data.len();
                debug_assert_eq!(contrib.len(), numel);
                let g = pi.grad.get_or_insert(vec![0.0; numel]);
                for (a, b) in g.iter_mut().zip(&contrib) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    /// Post-order DFS over the graph (parents before consumers).
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            let id = t.id();
            if !seen.insert(id) {
                continue;
            }
            stack.push((t.clone(), true));
            let inner = t.inner.borrow();
            if let Some(node) = &inner.node {
                for p in &node.parents {
                    if !seen.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Ids of all graph leaves (tensors without parents) reachable from
    /// this tensor. Used to assert structural independence.
    pub fn reachable_leaf_ids(&self) -> HashSet<u64> {
        let mut leaves = HashSet::new();
        for t in self.topo_order() {
            let inner = t.inner.borrow();
            if inner.node.is_none() {
                leaves.insert(inner.id);
            }
        }
        leaves
    }

    // ── Elementwise ops with broadcasting ───────────────────────────

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_broadcast(rhs, "add", |a, b| a + b, |_a, _b, g| (g, g))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_broadcast(rhs, "sub", |a, b| a - b, |_a, _b, g| (g, -g))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_broadcast(rhs, "mul", |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_broadcast(rhs, "div", |a, b| a / b, |a, b, g| (g / b, -g * a / (b * b)))
    }

    fn binary_broadcast(
        &self,
        rhs: &Tensor,
        op: &'static str,
        fwd: impl Fn(f64, f64) -> f64,
        bwd: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Tensor> {
        let a_shape = self.shape();
        let b_shape = rhs.shape();
        let out_shape = broadcast_shape(&a_shape, &b_shape).ok_or(Error::Shape {
            op,
            lhs: a_shape.clone(),
            rhs: b_shape.clone(),
        })?;
        let a_exp = self.map_data(|d| expand_to(d, &a_shape, &out_shape));
        let b_exp = rhs.map_data(|d| expand_to(d, &b_shape, &out_shape));
        let data: Vec<f64> = a_exp.iter().zip(&b_exp).map(|(&a, &b)| fwd(a, b)).collect();
        let out_shape_b = out_shape.clone();
        let backward = Box::new(move |g: &[f64]| {
            let mut da = vec![0.0; g.len()];
            let mut db = vec![0.0; g.len()];
            for i in 0..g.len() {
                let (x, y) = bwd(a_exp[i], b_exp[i], g[i]);
                da[i] = x;
                db[i] = y;
            }
            vec![
                reduce_to(&da, &out_shape_b, &a_shape),
                reduce_to(&db, &out_shape_b, &b_shape),
            ]
        });
        Ok(Tensor::from_op(vec![self.clone(), rhs.clone()], data, out_shape, backward))
    }

    pub fn scale(&self, k: f64) -> Tensor {
        let data = self.map_data(|d| d.iter().map(|v| v * k).collect());
        let shape = self.shape();
        Tensor::from_op(
            vec![self.clone()],
            data,
            shape,
            Box::new(move |g| vec![g.iter().map(|v| v * k).collect()]),
        )
    }

    pub fn add_scalar(&self, k: f64) -> Tensor {
        let data = self.map_data(|d| d.iter().map(|v| v + k).collect());
        let shape = self.shape();
        Tensor::from_op(
            vec![self.clone()],
            data,
            shape,
            Box::new(move |g| vec![g.to_vec()]),
        )
    }

    // ── Matrix ops (2-D) ────────────────────────────────────────────

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let a_shape = self.shape();
        let b_shape = rhs.shape();
        if a_shape.len() != 2 || b_shape.len() != 2 || a_shape[1] != b_shape[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: a_shape,
                rhs: b_shape,
            });
        }
        let (m, k, n) = (a_shape[0], a_shape[1], b_shape[1]);
        let a_data = self.data_vec();
        let b_data = rhs.data_vec();
        let data = matmul_raw(&a_data, &b_data, m, k, n);
        let backward = Box::new(move |g: &[f64]| {
            // dA = G Bᵀ, dB = Aᵀ G
            let bt = transpose_raw(&b_data, k, n);
            let da = matmul_raw(g, &bt, m, n, k);
            let at = transpose_raw(&a_data, m, k);
            let db = matmul_raw(&at, g, k, m, n);
            vec![da, db]
        });
        Ok(Tensor::from_op(vec![self.clone(), rhs.clone()], data, vec![m, n], backward))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (m, n) = (shape[0], shape[1]);
        let data = self.map_data(|d| transpose_raw(d, m, n));
        Ok(Tensor::from_op(
            vec![self.clone()],
            data,
            vec![n, m],
            Box::new(move |g| vec![transpose_raw(g, n, m)]),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data_vec();
        Ok(Tensor::from_op(
            vec![self.clone()],
            data,
            shape.to_vec(),
            Box::new(move |g| vec![g.to_vec()]),
        ))
    }

    // ── Concatenation / splitting ───────────────────────────────────

    /// Concatenates tensors along `axis`; shapes must agree elsewhere.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::numeric("concat of empty list"));
        }
        let first = parts[0].shape();
        if axis >= first.len() {
            return Err(Error::Shape {
                op: "concat",
                lhs: first,
                rhs: vec![axis],
            });
        }
        let mut axis_total = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s,
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();

        let numel: usize = out_shape.iter().product();
        let mut data = vec![0.0; numel];
        let row = axis_total * inner;
        for o in 0..outer {
            let mut off = 0;
            for (p, &sz) in parts.iter().zip(&sizes) {
                p.map_data(|d| {
                    let block = sz * inner;
                    data[o * row + off..o * row + off + block]
                        .copy_from_slice(&d[o * block..(o + 1) * block]);
                });
                off += sz * inner;
            }
        }
        let sizes_b = sizes.clone();
        let backward = Box::new(move |g: &[f64]| {
            let mut out: Vec<Vec<f64>> = sizes_b.iter().map(|&s| vec![0.0; outer * s * inner]).collect();
            for o in 0..outer {
                let mut off = 0;
                for (idx, &sz) in sizes_b.iter().enumerate() {
                    let block = sz * inner;
                    out[idx][o * block..(o + 1) * block]
                        .copy_from_slice(&g[o * row + off..o * row + off + block]);
                    off += block;
                }
            }
            out
        });
        Ok(Tensor::from_op(parts.to_vec(), data, out_shape, backward))
    }

    /// Splits along `axis` into chunks of the given sizes (must sum to the
    /// axis length). Concat of the result restores the input bit-exactly.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
        let shape = self.shape();
        if axis >= shape.len() || sizes.iter().sum::<usize>() != shape[axis] {
            return Err(Error::Shape {
                op: "split",
                lhs: shape,
                rhs: sizes.to_vec(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let row = shape[axis] * inner;
        let mut outputs = Vec::with_capacity(sizes.len());
        let mut off = 0;
        for &sz in sizes {
            let mut out_shape = shape.clone();
            out_shape[axis] = sz;
            let block = sz * inner;
            let mut data = vec![0.0; outer * block];
            self.map_data(|d| {
                for o in 0..outer {
                    data[o * block..(o + 1) * block]
                        .copy_from_slice(&d[o * row + off..o * row + off + block]);
                }
            });
            let total = outer * row;
            let start = off;
            let backward = Box::new(move |g: &[f64]| {
                let mut dg = vec![0.0; total];
                for o in 0..outer {
                    dg[o * row + start..o * row + start + block]
                        .copy_from_slice(&g[o * block..(o + 1) * block]);
                }
                vec![dg]
            });
            outputs.push(Tensor::from_op(vec![self.clone()], data, out_shape, backward));
            off += block;
        }
        Ok(outputs)
    }

    /// Gathers rows of a 2-D tensor (duplicates allowed); backward
    /// scatter-adds.
    pub fn index_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "index_rows",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::numeric(format!(
                "index_rows: index {bad} out of range for {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        self.map_data(|d| {
            for &i in indices {
                data.extend_from_slice(&d[i * cols..(i + 1) * cols]);
            }
        });
        let idx = indices.to_vec();
        let backward = Box::new(move |g: &[f64]| {
            let mut dg = vec![0.0; rows * cols];
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..cols {
                    dg[i * cols + c] += g[r * cols + c];
                }
            }
            vec![dg]
        });
        Ok(Tensor::from_op(
            vec![self.clone()],
            data,
            vec![indices.len(), cols],
            backward,
        ))
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum_all(&self) -> Tensor {
        let s = self.map_data(|d| d.iter().sum());
        let numel = self.numel();
        Tensor::from_op(
            vec![self.clone()],
            vec![s],
            vec![1],
            Box::new(move |g| vec![vec![g[0]; numel]]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let numel = self.numel();
        self.sum_all().scale(1.0 / numel as f64)
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op: "sum_axis",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut data = vec![0.0; outer * inner];
        self.map_data(|d| {
            for o in 0..outer {
                for a in 0..len {
                    for i in 0..inner {
                        data[o * inner + i] += d[(o * len + a) * inner + i];
                    }
                }
            }
        });
        let backward = Box::new(move |g: &[f64]| {
            let mut dg = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for a in 0..len {
                    for i in 0..inner {
                        dg[(o * len + a) * inner + i] = g[o * inner + i];
                    }
                }
            }
            vec![dg]
        });
        Ok(Tensor::from_op(vec![self.clone()], data, out_shape, backward))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or(Error::Shape {
                op: "mean_axis",
                lhs: self.shape(),
                rhs: vec![axis],
            })?;
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }

    /// Elementwise mean of equally shaped tensors. Each element's summands
    /// are accumulated in value order, so the result is bit-identical under
    /// any permutation of the operand list.
    pub fn mean_of(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::numeric("mean_of: empty list"));
        }
        let shape = parts[0].shape();
        for p in &parts[1..] {
            if p.shape() != shape {
                return Err(Error::Shape {
                    op: "mean_of",
                    lhs: shape,
                    rhs: p.shape(),
                });
            }
        }
        let m = parts.len();
        let numel: usize = shape.iter().product();
        let datas: Vec<Vec<f64>> = parts.iter().map(|p| p.data_vec()).collect();
        let mut data = vec![0.0; numel];
        let mut vals = vec![0.0; m];
        for i in 0..numel {
            for (j, d) in datas.iter().enumerate() {
                vals[j] = d[i];
            }
            vals.sort_by(f64::total_cmp);
            data[i] = vals.iter().sum::<f64>() / m as f64;
        }
        let backward = Box::new(move |g: &[f64]| {
            let scaled: Vec<f64> = g.iter().map(|v| v / m as f64).collect();
            vec![scaled; m]
        });
        Ok(Tensor::from_op(parts.to_vec(), data, shape, backward))
    }

    // ── Nonlinearities ──────────────────────────────────────────────

    /// Numerically stabilized softmax along `axis`; rows sum to 1.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op: "softmax",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        if !self.is_finite() {
            return Err(Error::numeric("softmax: non-finite input"));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; self.numel()];
        self.map_data(|d| {
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let mut mx = f64::NEG_INFINITY;
                    for a in 0..len {
                        mx = mx.max(d[at(a)]);
                    }
                    let mut sum = 0.0;
                    for a in 0..len {
                        let e = (d[at(a)] - mx).exp();
                        data[at(a)] = e;
                        sum += e;
                    }
                    for a in 0..len {
                        data[at(a)] /= sum;
                    }
                }
            }
        });
        let out = data.clone();
        let backward = Box::new(move |g: &[f64]| {
            let mut dg = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let mut dot = 0.0;
                    for a in 0..len {
                        dot += g[at(a)] * out[at(a)];
                    }
                    for a in 0..len {
                        dg[at(a)] = out[at(a)] * (g[at(a)] - dot);
                    }
                }
            }
            vec![dg]
        });
        Ok(Tensor::from_op(vec![self.clone()], data, shape, backward))
    }

    /// log(softmax(x)) along `axis`, computed stably.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op: "log_softmax",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        if !self.is_finite() {
            return Err(Error::numeric("log_softmax: non-finite input"));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; self.numel()];
        self.map_data(|d| {
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let mut mx = f64::NEG_INFINITY;
                    for a in 0..len {
                        mx = mx.max(d[at(a)]);
                    }
                    let mut sum = 0.0;
                    for a in 0..len {
                        sum += (d[at(a)] - mx).exp();
                    }
                    let lse = mx + sum.ln();
                    for a in 0..len {
                        data[at(a)] = d[at(a)] - lse;
                    }
                }
            }
        });
        let out = data.clone();
        let backward = Box::new(move |g: &[f64]| {
            // d/dx log_softmax = g - softmax * sum(g) per slice
            let mut dg = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let mut gsum = 0.0;
                    for a in 0..len {
                        gsum += g[at(a)];
                    }
                    for a in 0..len {
                        dg[at(a)] = g[at(a)] - out[at(a)].exp() * gsum;
                    }
                }
            }
            vec![dg]
        });
        Ok(Tensor::from_op(vec![self.clone()], data, shape, backward))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        let x = self.data_vec();
        let data: Vec<f64> = x
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (C * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        let shape = self.shape();
        let backward = Box::new(move |g: &[f64]| {
            let dg = g
                .iter()
                .zip(&x)
                .map(|(&gv, &v)| {
                    let u = C * (v + 0.044715 * v * v * v);
                    let t = u.tanh();
                    let du = C * (1.0 + 3.0 * 0.044715 * v * v);
                    gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                })
                .collect();
            vec![dg]
        });
        Tensor::from_op(vec![self.clone()], data, shape, backward)
    }

    /// log(1 + exp(x)), computed stably; derivative is the logistic sigmoid.
    pub fn softplus(&self) -> Tensor {
        let x = self.data_vec();
        let data: Vec<f64> = x.iter().map(|&v| v.max(0.0) + (-v.abs()).exp().ln_1p()).collect();
        let shape = self.shape();
        let backward = Box::new(move |g: &[f64]| {
            let dg = g
                .iter()
                .zip(&x)
                .map(|(&gv, &v)| gv / (1.0 + (-v).exp()))
                .collect();
            vec![dg]
        });
        Tensor::from_op(vec![self.clone()], data, shape, backward)
    }

    /// Elementwise square root; the subgradient at exactly 0 is taken as 0.
    pub fn sqrt(&self) -> Tensor {
        let data: Vec<f64> = self.map_data(|d| d.iter().map(|v| v.sqrt()).collect());
        let shape = self.shape();
        let out = data.clone();
        let backward = Box::new(move |g: &[f64]| {
            let dg = g
                .iter()
                .zip(&out)
                .map(|(&gv, &s)| if s == 0.0 { 0.0 } else { gv * 0.5 / s })
                .collect();
            vec![dg]
        });
        Tensor::from_op(vec![self.clone()], data, shape, backward)
    }

    /// Inverted dropout with keep-scale 1/(1-rate). `rate == 0` is identity.
    pub fn dropout(&self, rate: f64, rng: &mut crate::numerics::rng::SeededRng) -> Tensor {
        if rate <= 0.0 {
            return self.clone();
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.uniform(0.0, 1.0) < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = self.map_data(|d| d.iter().zip(&mask).map(|(v, m)| v * m).collect());
        let shape = self.shape();
        let backward = Box::new(move |g: &[f64]| {
            let dg = g.iter().zip(&mask).map(|(gv, m)| gv * m).collect();
            vec![dg]
        });
        Tensor::from_op(vec![self.clone()], data, shape, backward)
    }
}

// ── Raw kernels and broadcasting helpers ────────────────────────────

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

pub(crate) fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Broadcast-compatible output shape, or None.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

fn pad_shape(shape: &[usize], ndim: usize) -> Vec<usize> {
    let mut padded = vec![1; ndim];
    padded[ndim - shape.len()..].copy_from_slice(shape);
    padded
}

/// Expands `data` of `shape` to `out_shape` by repetition.
fn expand_to(data: &[f64], shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if shape == out_shape {
        return data.to_vec();
    }
    let ndim = out_shape.len();
    let padded = pad_shape(shape, ndim);
    let numel: usize = out_shape.iter().product();
    let mut out = vec![0.0; numel];
    let mut coords = vec![0usize; ndim];
    for (flat, o) in out.iter_mut().enumerate() {
        let mut rem = flat;
        for d in (0..ndim).rev() {
            coords[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut src = 0;
        let mut stride = 1;
        for d in (0..ndim).rev() {
            let c = if padded[d] == 1 { 0 } else { coords[d] };
            src += c * stride;
            stride *= padded[d];
        }
        *o = data[src];
    }
    out
}

/// Sums a gradient of `grad_shape` down to `target_shape` (the reverse of
/// broadcasting).
fn reduce_to(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let ndim = grad_shape.len();
    let padded = pad_shape(target_shape, ndim);
    let target_numel: usize = target_shape.iter().product();
    let mut out = vec![0.0; target_numel];
    let mut coords = vec![0usize; ndim];
    for (flat, &g) in grad.iter().enumerate() {
        let mut rem = flat;
        for d in (0..ndim).rev() {
            coords[d] = rem % grad_shape[d];
            rem /= grad_shape[d];
        }
        let mut dst = 0;
        let mut stride = 1;
        for d in (0..ndim).rev() {
            let c = if padded[d] == 1 { 0 } else { coords[d] };
            dst += c * stride;
            stride *= padded[d];
        }
        out[dst] += g;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape).unwrap().requires_grad(true)
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(vec![1.0, 2.0, 3.0], &[2, 2]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let c = i2.matmul(&a).unwrap();
        assert_eq!(c.data_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_selector_row() {
        let a = Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0], &[2, 2]).unwrap();
        let b = Tensor::from_vec(vec![5.0, 7.0], &[2, 1]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data_vec(), vec![5.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "got: {msg}");
    }

    #[test]
    fn softmax_symmetry_and_shift_stability() {
        let x = Tensor::from_vec(vec![0.0, 0.0], &[2]).unwrap();
        assert_eq!(x.softmax(0).unwrap().data_vec(), vec![0.5, 0.5]);
        let big = Tensor::from_vec(vec![1000.0, 1000.0], &[2]).unwrap();
        assert_eq!(big.softmax(0).unwrap().data_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Tensor::from_vec(vec![f64::NAN, 0.0], &[2]).unwrap();
        assert!(x.softmax(0).is_err());
    }

    #[test]
    fn backward_populates_reachable_grads() {
        let a = leaf(&[1.0, 2.0], &[2]);
        let b = leaf(&[3.0, 4.0], &[2]);
        let loss = a.mul(&b).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(a.grad_vec().unwrap(), vec![3.0, 4.0]);
        assert_eq!(b.grad_vec().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn backward_handles_aliased_inputs() {
        // x * x: both parents are the same tensor.
        let x = leaf(&[3.0], &[1]);
        let y = x.mul(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![6.0]);
    }

    #[test]
    fn grads_accumulate_across_backwards() {
        let x = leaf(&[2.0], &[1]);
        x.scale(3.0).backward().unwrap();
        x.scale(3.0).backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![6.0]);
        x.zero_grad();
        assert!(x.grad_vec().is_none());
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let x = leaf(&[1.0], &[1]);
        let y = no_grad(|| x.scale(2.0));
        assert!(!y.is_tracked());
    }

    #[test]
    fn concat_split_roundtrip_bit_exact() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]).unwrap();
        let parts = a.split(0, &[1, 2]).unwrap();
        let back = Tensor::concat(&parts, 0).unwrap();
        assert_eq!(back.data_vec(), a.data_vec());

        let cols = a.split(1, &[1, 1]).unwrap();
        let back = Tensor::concat(&cols, 1).unwrap();
        assert_eq!(back.data_vec(), a.data_vec());
    }

    #[test]
    fn mean_of_is_order_invariant_bitwise() {
        let a = Tensor::from_vec(vec![0.1, 0.7], &[2]).unwrap();
        let b = Tensor::from_vec(vec![0.2, -0.3], &[2]).unwrap();
        let c = Tensor::from_vec(vec![0.3, 1.9], &[2]).unwrap();
        let m1 = Tensor::mean_of(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let m2 = Tensor::mean_of(&[c, a, b]).unwrap();
        assert_eq!(m1.data_vec(), m2.data_vec());
    }

    #[test]
    fn mean_of_identity_and_average() {
        let a = Tensor::from_vec(vec![1.0, 3.0], &[1, 2]).unwrap();
        let b = Tensor::from_vec(vec![3.0, 5.0], &[1, 2]).unwrap();
        assert_eq!(Tensor::mean_of(&[a.clone()]).unwrap().data_vec(), a.data_vec());
        assert_eq!(Tensor::mean_of(&[a, b]).unwrap().data_vec(), vec![2.0, 4.0]);
    }

    #[test]
    fn index_rows_gathers_and_scatters() {
        let a = leaf(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        let g = a.index_rows(&[2, 0, 2]).unwrap();
        assert_eq!(g.data_vec(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        g.sum_all().backward().unwrap();
        assert_eq!(a.grad_vec().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn broadcast_add_row_vector() {
        let a = leaf(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = leaf(&[10.0, 20.0], &[2]);
        let c = a.add(&b).unwrap();
        assert_eq!(c.data_vec(), vec![11.0, 22.0, 13.0, 24.0]);
        c.sum_all().backward().unwrap();
        assert_eq!(b.grad_vec().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn reachable_leaves_sees_through_graph() {
        let a = leaf(&[1.0], &[1]);
        let b = leaf(&[2.0], &[1]);
        let c = Tensor::scalar(5.0);
        let y = a.mul(&b).unwrap().add(&c).unwrap();
        let leaves = y.reachable_leaf_ids();
        assert!(leaves.contains(&a.id()));
        assert!(leaves.contains(&b.id()));
        assert!(leaves.contains(&c.id()));
        let z = a.scale(2.0);
        assert!(!z.reachable_leaf_ids().contains(&b.id()));
    }
}
