//! Reverse-mode differentiation tape.
//!
//! A `Tape` is an ordered record of executed operations. Every op appends one
//! node holding the forward value and a backward closure; `backward` walks the
//! record in reverse creation order, which is a valid topological order because
//! an op can only consume vars that already exist. One backward traversal
//! populates gradients for every reachable leaf created with
//! `requires_grad = true`.
//!
//! A tape and its vars form one logical computation context; vars from one
//! tape are meaningless on another. Each forward op rejects non-finite
//! outputs, so NaN/Inf poisoning is caught at the op that produced it.

use super::kernels::{self, ConvGeom, PoolKind};
use super::{elem, Elem, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<E> = Box<dyn Fn(&[Tensor<E>], &[E], &mut Grads<E>)>;

struct Node<E: Elem> {
    requires: bool,
    back: Option<BackFn<E>>,
}

/// Gradient accumulators, one flat buffer per node, allocated lazily and only
/// for nodes that require gradients.
pub struct Grads<E: Elem> {
    bufs: Vec<Option<Vec<E>>>,
    requires: Vec<bool>,
    numels: Vec<usize>,
    col_scratch: Vec<E>,
    dcol_scratch: Vec<E>,
}

impl<E: Elem> Grads<E> {
    fn wants(&self, id: usize) -> bool {
        self.requires[id]
    }

    /// Two scratch buffers of at least `len` elements, shared by every
    /// convolution backward in one traversal so each node does not pay a
    /// fresh zeroed allocation. Contents are arbitrary between uses; the
    /// kernels fully overwrite what they read.
    fn conv_scratch(&mut self, len: usize) -> (&mut [E], &mut [E]) {
        if self.col_scratch.len() < len {
            self.col_scratch.resize(len, E::zero());
        }
        if self.dcol_scratch.len() < len {
            self.dcol_scratch.resize(len, E::zero());
        }
        (
            &mut self.col_scratch[..len],
            &mut self.dcol_scratch[..len],
        )
    }

    /// Buffer for a node, zero-initialized on first use. `None` when the node
    /// does not require gradients.
    fn take(&mut self, id: usize) -> Option<Vec<E>> {
        if !self.requires[id] {
            return None;
        }
        Some(
            self.bufs[id]
                .take()
                .unwrap_or_else(|| vec![E::zero(); self.numels[id]]),
        )
    }

    fn put(&mut self, id: usize, buf: Option<Vec<E>>) {
        if let Some(b) = buf {
            debug_assert_eq!(b.len(), self.numels[id]);
            self.bufs[id] = Some(b);
        }
    }

    /// Elementwise accumulate into a node's gradient.
    fn acc(&mut self, id: usize, src: &[E]) {
        if let Some(mut b) = self.take(id) {
            for (d, &s) in b.iter_mut().zip(src) {
                *d = *d + s;
            }
            self.put(id, Some(b));
        }
    }

    /// Accumulate `f(i)` for each element; used when the contribution is
    /// cheaper to compute on the fly than to materialize.
    fn acc_with(&mut self, id: usize, f: impl Fn(usize) -> E) {
        if let Some(mut b) = self.take(id) {
            for (i, d) in b.iter_mut().enumerate() {
                *d = *d + f(i);
            }
            self.put(id, Some(b));
        }
    }
}

/// Gradients read back after [`Tape::backward`].
pub struct GradMap<E: Elem> {
    bufs: Vec<Option<Vec<E>>>,
    shapes: Vec<Vec<usize>>,
}

impl<E: Elem> GradMap<E> {
    /// Gradient of the loss w.r.t. `v`. `None` when `v` did not require a
    /// gradient or was unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<Tensor<E>> {
        self.bufs[v.0]
            .as_ref()
            .map(|b| Tensor::new(&self.shapes[v.0], b.clone()).unwrap())
    }
}

pub struct Tape<E: Elem> {
    vals: Vec<Tensor<E>>,
    nodes: Vec<Node<E>>,
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.vals[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.vals[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op: &'static str,
        val: Tensor<E>,
        requires: bool,
        back: Option<BackFn<E>>,
    ) -> Result<Var> {
        if !val.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        self.vals.push(val);
        self.nodes.push(Node { requires, back });
        Ok(Var(self.vals.len() - 1))
    }

    fn req(&self, ids: &[Var]) -> bool {
        ids.iter().any(|v| self.nodes[v.0].requires)
    }

    /// Register an input tensor. Leaves with `requires_grad` receive
    /// gradients during `backward`.
    pub fn leaf(&mut self, t: &Tensor<E>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", t.clone(), requires_grad, None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor<E>) -> Result<Var> {
        self.leaf(t, false)
    }

    /// Run the reverse sweep from a scalar loss. Consumes the tape; the
    /// computation record is dropped and only leaf gradients survive.
    pub fn backward(self, loss: Var) -> Result<GradMap<E>> {
        if self.vals[loss.0].numel() != 1 {
            return Err(TensorError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.vals[loss.0].shape()),
            ));
        }
        let numels: Vec<usize> = self.vals.iter().map(|t| t.numel()).collect();
        let shapes: Vec<Vec<usize>> = self.vals.iter().map(|t| t.shape().to_vec()).collect();
        let mut grads = Grads {
            bufs: vec![None; self.vals.len()],
            requires: self.nodes.iter().map(|n| n.requires).collect(),
            numels,
        };
        if !grads.requires[loss.0] {
            return Ok(GradMap {
                bufs: grads.bufs,
                shapes,
            });
        }
        grads.bufs[loss.0] = Some(vec![E::one()]);
        for id in (0..self.nodes.len()).rev() {
            if self.nodes[id].back.is_none() {
                continue;
            }
            let Some(g) = grads.bufs[id].take() else {
                continue;
            };
            let back = self.nodes[id].back.as_ref().unwrap();
            back(&self.vals, &g, &mut grads);
        }
        Ok(GradMap {
            bufs: grads.bufs,
            shapes,
        })
    }

    // ---- elementwise and broadcast arithmetic ----

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: fn(E, E) -> E,
        // given (av, bv, upstream) -> (da, db)
        df: fn(E, E, E) -> (E, E),
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(op, &sa, &sb)?;
        let (xa, xb) = (self.vals[a.0].data(), self.vals[b.0].data());
        let n: usize = out_shape.iter().product();
        let mut out = vec![E::zero(); n];
        if sa == sb {
            for i in 0..n {
                out[i] = f(xa[i], xb[i]);
            }
        } else {
            let ia = BroadcastIndex::new(&sa, &out_shape);
            let ib = BroadcastIndex::new(&sb, &out_shape);
            for (i, o) in out.iter_mut().enumerate() {
                *o = f(xa[ia.map(i)], xb[ib.map(i)]);
            }
        }
        let val = Tensor::new(&out_shape, out)?;
        let requires = self.req(&[a, b]);
        let (aid, bid) = (a.0, b.0);
        let back: BackFn<E> = Box::new(move |vals, g, grads| {
            let (xa, xb) = (vals[aid].data(), vals[bid].data());
            let (sa, sb) = (vals[aid].shape(), vals[bid].shape());
            let out_shape = broadcast_shape("", sa, sb).unwrap();
            if aid == bid {
                // Same operand on both sides: one buffer receives both halves
                // of the product rule; two take() calls would alias it.
                if let Some(mut da) = grads.take(aid) {
                    for i in 0..g.len() {
                        let (ga, gb) = df(xa[i], xb[i], g[i]);
                        da[i] = da[i] + ga + gb;
                    }
                    grads.put(aid, Some(da));
                }
            } else if sa == sb {
                if grads.wants(aid) || grads.wants(bid) {
                    let mut da = grads.take(aid);
                    let mut db = grads.take(bid);
                    for i in 0..g.len() {
                        let (ga, gb) = df(xa[i], xb[i], g[i]);
                        if let Some(da) = da.as_deref_mut() {
                            da[i] = da[i] + ga;
                        }
                        if let Some(db) = db.as_deref_mut() {
                            db[i] = db[i] + gb;
                        }
                    }
                    grads.put(aid, da);
                    grads.put(bid, db);
                }
            } else {
                let ia = BroadcastIndex::new(sa, &out_shape);
                let ib = BroadcastIndex::new(sb, &out_shape);
                let mut da = grads.take(aid);
                let mut db = grads.take(bid);
                for (i, &gv) in g.iter().enumerate() {
                    let (ga, gb) = df(xa[ia.map(i)], xb[ib.map(i)], gv);
                    if let Some(da) = da.as_deref_mut() {
                        let j = ia.map(i);
                        da[j] = da[j] + ga;
                    }
                    if let Some(db) = db.as_deref_mut() {
                        let j = ib.map(i);
                        db[j] = db[j] + gb;
                    }
                }
                grads.put(aid, da);
                grads.put(bid, db);
            }
        });
        self.push(op, val, requires, Some(back))
    }

    /// Elementwise sum; shapes must match or broadcast (dims equal or 1).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |_, _, g| (g, -g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let cv = elem::<E>(c);
        let val = self.vals[x.0].map(|v| v + cv);
        let requires = self.req(&[x]);
        let xid = x.0;
        self.push(
            "add_scalar",
            val,
            requires,
            Some(Box::new(move |_, g, grads| grads.acc(xid, g))),
        )
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let cv = elem::<E>(c);
        let val = self.vals[x.0].map(|v| v * cv);
        let requires = self.req(&[x]);
        let xid = x.0;
        self.push(
            "mul_scalar",
            val,
            requires,
            Some(Box::new(move |_, g, grads| {
                grads.acc_with(xid, |i| g[i] * cv)
            })),
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let val = self.vals[x.0].map(|v| if v > E::zero() { v } else { E::zero() });
        let requires = self.req(&[x]);
        let xid = x.0;
        self.push(
            "relu",
            val,
            requires,
            Some(Box::new(move |vals, g, grads| {
                let x = vals[xid].data();
                grads.acc_with(xid, |i| if x[i] > E::zero() { g[i] } else { E::zero() })
            })),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let val = self.vals[x.0].map(sigmoid_scalar);
        let requires = self.req(&[x]);
        let xid = x.0;
        let out = Var(self.vals.len());
        self.push(
            "sigmoid",
            val,
            requires,
            Some(Box::new(move |vals, g, grads| {
                let y = vals[out.0].data();
                grads.acc_with(xid, |i| g[i] * y[i] * (E::one() - y[i]))
            })),
        )
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let val = self.vals[x.0].map(|v| v.ln());
        let requires = self.req(&[x]);
        let xid = x.0;
        self.push(
            "ln",
            val,
            requires,
            Some(Box::new(move |vals, g, grads| {
                let x = vals[xid].data();
                grads.acc_with(xid, |i| g[i] / x[i])
            })),
        )
    }

    /// Clamp to [lo, hi]; gradient passes only strictly inside the band.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (l, h) = (elem::<E>(lo), elem::<E>(hi));
        let val = self.vals[x.0].map(|v| v.max(l).min(h));
        let requires = self.req(&[x]);
        let xid = x.0;
        self.push(
            "clamp",
            val,
            requires,
            Some(Box::new(move |vals, g, grads| {
                let x = vals[xid].data();
                grads.acc_with(xid, |i| {
                    if x[i] > l && x[i] < h {
                        g[i]
                    } else {
                        E::zero()
                    }
                })
            })),
        )
    }

    // ---- linear algebra ----

    /// [m,k] x [k,n] -> [m,n]
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape(
                "matmul",
                format!("incompatible {:?} x {:?}", sa, sb),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::zero(); m * n];
        kernels::matmul_nn_acc(self.vals[a.0].data(), self.vals[b.0].data(), &mut out, m, k, n);
        let val = Tensor::new(&[m, n], out)?;
        let requires = self.req(&[a, b]);
        let (aid, bid) = (a.0, b.0);
        let back: BackFn<E> = Box::new(move |vals, g, grads| {
            if let Some(mut da) = grads.take(aid) {
                kernels::matmul_nt_acc(g, vals[bid].data(), &mut da, m, n, k);
                grads.put(aid, Some(da));
            }
            if let Some(mut db) = grads.take(bid) {
                kernels::matmul_tn_acc(vals[aid].data(), g, &mut db, k, m, n);
                grads.put(bid, Some(db));
            }
        });
        self.push("matmul", val, requires, Some(back))
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(TensorError::shape("transpose2d", format!("rank {:?}", s)));
        }
        let (r, c) = (s[0], s[1]);
        let xd = self.vals[x.0].data();
        let mut out = vec![E::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let val = Tensor::new(&[c, r], out)?;
        let requires = self.req(&[x]);
        let xid = x.0;
        self.push(
            "transpose2d",
            val,
            requires,
            Some(Box::new(move |_, g, grads| {
                if let Some(mut dx) = grads.take(xid) {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = dx[i * c + j] + g[j * r + i];
                        }
                    }
                    grads.put(xid, Some(dx));
                }
            })),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let val = self.vals[x.0].reshaped(shape)?;
        let requires = self.req(&[x]);
        let xid = x.0;
        self.push(
            "reshape",
            val,
            requires,
            Some(Box::new(move |_, g, grads| grads.acc(xid, g))),
        )
    }

    // ---- shape surgery ----

    /// Concatenate along `axis`. Inverse of `split`: concat(split(x)) == x
    /// bit-exactly.
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::shape("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0usize;
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(TensorError::shape(
                    "concat",
                    format!("mismatched shapes {:?} vs {:?}", s, first),
                ));
            }
            sizes.push(s[axis]);
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = kernels::axis_split(&out_shape, axis);
        let mut out = vec![E::zero(); out_shape.iter().product()];
        let mut off = 0;
        for (&p, &sz) in parts.iter().zip(&sizes) {
            let src = self.vals[p.0].data();
            for o in 0..outer {
                let dst = &mut out[(o * total + off) * inner..][..sz * inner];
                dst.copy_from_slice(&src[o * sz * inner..(o * sz + sz) * inner]);
            }
            off += sz;
        }
        let val = Tensor::new(&out_shape, out)?;
        let requires = self.req(parts);
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let back: BackFn<E> = Box::new(move |_, g, grads| {
            let mut off = 0;
            for (&id, &sz) in ids.iter().zip(&sizes) {
                if let Some(mut d) = grads.take(id) {
                    for o in 0..outer {
                        let src = &g[(o * total + off) * inner..][..sz * inner];
                        let dst = &mut d[o * sz * inner..(o * sz + sz) * inner];
                        for (dv, &sv) in dst.iter_mut().zip(src) {
                            *dv = *dv + sv;
                        }
                    }
                    grads.put(id, Some(d));
                }
                off += sz;
            }
        });
        self.push("concat", val, requires, Some(back))
    }

    /// Contiguous slice along `axis`, starting at `off`, `len` wide.
    pub fn narrow(&mut self, x: Var, axis: usize, off: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || off + len > s[axis] {
            return Err(TensorError::shape(
                "narrow",
                format!("axis {axis} [{off}, {}) of {:?}", off + len, s),
            ));
        }
        let (outer, total, inner) = kernels::axis_split(&s, axis);
        let src = self.vals[x.0].data();
        let mut out_shape = s.clone();
        out_shape[axis] = len;
        let mut out = vec![E::zero(); outer * len * inner];
        for o in 0..outer {
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&src[(o * total + off) * inner..][..len * inner]);
        }
        let val = Tensor::new(&out_shape, out)?;
        let requires = self.req(&[x]);
        let xid = x.0;
        self.push(
            "narrow",
            val,
            requires,
            Some(Box::new(move |_, g, grads| {
                if let Some(mut dx) = grads.take(xid) {
                    for o in 0..outer {
                        let dst = &mut dx[(o * total + off) * inner..][..len * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (dv, &sv) in dst.iter_mut().zip(src) {
                            *dv = *dv + sv;
                        }
                    }
                    grads.put(xid, Some(dx));
                }
            })),
        )
    }

    /// Split into consecutive chunks of the given sizes along `axis`.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let dim = self.shape(x)[axis];
        if sizes.iter().sum::<usize>() != dim {
            return Err(TensorError::shape(
                "split",
                format!("sizes {:?} do not cover axis of {dim}", sizes),
            ));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut off = 0;
        for &sz in sizes {
            out.push(self.narrow(x, axis, off, sz)?);
            off += sz;
        }
        Ok(out)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let mut acc = E::zero();
        for &v in self.vals[x.0].data() {
            acc = acc + v;
        }
        let requires = self.req(&[x]);
        let xid = x.0;
        self.push(
            "sum",
            Tensor::scalar(acc),
            requires,
            Some(Box::new(move |_, g, grads| grads.acc_with(xid, |_| g[0]))),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.vals[x.0].numel();
        if n == 0 {
            return Err(TensorError::Invalid("mean of empty tensor".into()));
        }
        let inv = elem::<E>(1.0 / n as f64);
        let mut acc = E::zero();
        for &v in self.vals[x.0].data() {
            acc = acc + v;
        }
        let requires = self.req(&[x]);
        let xid = x.0;
        self.push(
            "mean",
            Tensor::scalar(acc * inv),
            requires,
            Some(Box::new(move |_, g, grads| {
                grads.acc_with(xid, |_| g[0] * inv)
            })),
        )
    }

    // ---- structured ops ----

    /// 2-D convolution over [N,Cin,H,W] with weight [Cout,Cin/groups,kh,kw].
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 {
            return Err(TensorError::shape(
                "conv2d",
                format!("need 4-d input/weight, got {:?} and {:?}", sx, sw),
            ));
        }
        let (n, cin, h, wdt) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, cin_g, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin_g != cin / groups {
            return Err(TensorError::shape(
                "conv2d",
                format!("groups={groups} incompatible with cin={cin}, cout={cout}, weight {:?}", sw),
            ));
        }
        if let Some(bv) = b {
            if self.shape(bv) != [cout] {
                return Err(TensorError::shape(
                    "conv2d",
                    format!("bias shape {:?}, want [{cout}]", self.shape(bv)),
                ));
            }
        }
        let oh = kernels::conv_out_len(h, kh, stride, pad).ok_or_else(|| {
            TensorError::shape("conv2d", format!("kernel {kh} over height {h} (pad {pad})"))
        })?;
        let ow = kernels::conv_out_len(wdt, kw, stride, pad).ok_or_else(|| {
            TensorError::shape("conv2d", format!("kernel {kw} over width {wdt} (pad {pad})"))
        })?;
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: wdt,
            cout,
            kh,
            kw,
            stride,
            pad,
            groups,
            oh,
            ow,
        };
        let mut col = vec![E::zero(); geom.col_len()];
        let mut y = vec![E::zero(); n * cout * oh * ow];
        kernels::conv2d_forward(
            self.vals[x.0].data(),
            self.vals[w.0].data(),
            b.map(|bv| self.vals[bv.0].data()),
            &geom,
            &mut col,
            &mut y,
        );
        let val = Tensor::new(&[n, cout, oh, ow], y)?;
        let mut inputs = vec![x, w];
        if let Some(bv) = b {
            inputs.push(bv);
        }
        let requires = self.req(&inputs);
        let (xid, wid, bid) = (x.0, w.0, b.map(|v| v.0));
        let back: BackFn<E> = Box::new(move |vals, g, grads| {
            let geom = ConvGeom {
                n,
                cin,
                h,
                w: wdt,
                cout,
                kh,
                kw,
                stride,
                pad,
                groups,
                oh,
                ow,
            };
            let mut dx = grads.take(xid);
            let mut dw = grads.take(wid);
            let mut db = bid.and_then(|id| grads.take(id));
            let mut col = vec![E::zero(); geom.col_len()];
            let mut dcol = vec![E::zero(); geom.col_len()];
            kernels::conv2d_backward(
                vals[xid].data(),
                vals[wid].data(),
                g,
                &geom,
                &mut col,
                &mut dcol,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            grads.put(xid, dx);
            grads.put(wid, dw);
            if let Some(id) = bid {
                grads.put(id, db);
            }
        });
        self.push("conv2d", val, requires, Some(back))
    }

    /// Adaptive pooling to [oh, ow]. Window rows along each axis are
    /// [floor(i*len/out), ceil((i+1)*len/out)). Max routes its gradient to the
    /// first row-major argmax of each window.
    pub fn adaptive_pool(&mut self, x: Var, oh: usize, ow: usize, kind: PoolKind) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::shape("adaptive_pool", format!("rank {:?}", s)));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if oh == 0 || ow == 0 || oh > h || ow > w {
            return Err(TensorError::shape(
                "adaptive_pool",
                format!("output {oh}x{ow} from input {h}x{w}"),
            ));
        }
        let mut y = vec![E::zero(); n * c * oh * ow];
        let mut argmax = match kind {
            PoolKind::Max => Some(vec![0usize; n * c * oh * ow]),
            PoolKind::Avg => None,
        };
        kernels::adaptive_pool_forward(
            self.vals[x.0].data(),
            n,
            c,
            h,
            w,
            oh,
            ow,
            kind,
            &mut y,
            argmax.as_deref_mut(),
        );
        let val = Tensor::new(&[n, c, oh, ow], y)?;
        let requires = self.req(&[x]);
        let xid = x.0;
        let back: BackFn<E> = Box::new(move |_, g, grads| {
            if let Some(mut dx) = grads.take(xid) {
                kernels::adaptive_pool_backward(g, n, c, h, w, oh, ow, kind, argmax.as_deref(), &mut dx);
                grads.put(xid, Some(dx));
            }
        });
        self.push("adaptive_pool", val, requires, Some(back))
    }

    /// Bilinear interpolation (align-corners = false) to [oh, ow]. Identity
    /// when the size is unchanged.
    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::shape("bilinear_resize", format!("rank {:?}", s)));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if oh == 0 || ow == 0 {
            return Err(TensorError::shape("bilinear_resize", "zero output size".to_string()));
        }
        let mut y = vec![E::zero(); n * c * oh * ow];
        kernels::bilinear_forward(self.vals[x.0].data(), n * c, h, w, oh, ow, &mut y);
        let val = Tensor::new(&[n, c, oh, ow], y)?;
        let requires = self.req(&[x]);
        let xid = x.0;
        self.push(
            "bilinear_resize",
            val,
            requires,
            Some(Box::new(move |_, g, grads| {
                if let Some(mut dx) = grads.take(xid) {
                    kernels::bilinear_backward(g, n * c, h, w, oh, ow, &mut dx);
                    grads.put(xid, Some(dx));
                }
            })),
        )
    }

    /// Stabilized softmax along `axis`; slices sum to one.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::shape("softmax", format!("axis {axis} of {:?}", s)));
        }
        let mut y = vec![E::zero(); self.vals[x.0].numel()];
        kernels::softmax_forward(self.vals[x.0].data(), &s, axis, &mut y);
        let val = Tensor::new(&s, y)?;
        let requires = self.req(&[x]);
        let xid = x.0;
        let out = Var(self.vals.len());
        self.push(
            "softmax",
            val,
            requires,
            Some(Box::new(move |vals, g, grads| {
                if let Some(mut dx) = grads.take(xid) {
                    kernels::softmax_backward(
                        vals[out.0].data(),
                        g,
                        vals[out.0].shape(),
                        axis,
                        &mut dx,
                    );
                    grads.put(xid, Some(dx));
                }
            })),
        )
    }

    /// Batch normalization over [N,C,H,W] using batch statistics. Updates the
    /// running mean/var tensors in place (they live outside the tape).
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor<E>,
        running_var: &mut Tensor<E>,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::shape("batchnorm", format!("rank {:?}", s)));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let m = n * h * w;
        if m == 0 {
            return Err(TensorError::shape("batchnorm", "empty channel".to_string()));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(TensorError::shape(
                    "batchnorm",
                    format!("{name} shape {:?}, want [{c}]", self.shape(v)),
                ));
            }
        }
        let epe = elem::<E>(eps);
        let mom = elem::<E>(momentum);
        let inv_m = elem::<E>(1.0 / m as f64);
        let xd = self.vals[x.0].data();
        let mut mean = vec![E::zero(); c];
        let mut invstd = vec![E::zero(); c];
        let mut y = vec![E::zero(); xd.len()];
        let plane = h * w;
        for ch in 0..c {
            let mut acc = E::zero();
            for img in 0..n {
                let p = &xd[(img * c + ch) * plane..][..plane];
                for &v in p {
                    acc = acc + v;
                }
            }
            let mu = acc * inv_m;
            let mut var_acc = E::zero();
            for img in 0..n {
                let p = &xd[(img * c + ch) * plane..][..plane];
                for &v in p {
                    let d = v - mu;
                    var_acc = var_acc + d * d;
                }
            }
            let var = var_acc * inv_m;
            mean[ch] = mu;
            invstd[ch] = E::one() / (var + epe).sqrt();
            // Running stats follow the usual convention: unbiased variance
            // when more than one sample contributes.
            let run_var = if m > 1 {
                var_acc / elem::<E>((m - 1) as f64)
            } else {
                var
            };
            let rm = running_mean.data_mut();
            rm[ch] = (E::one() - mom) * rm[ch] + mom * mu;
            let rv = running_var.data_mut();
            rv[ch] = (E::one() - mom) * rv[ch] + mom * run_var;
        }
        let gd = self.vals[gamma.0].data();
        let bd = self.vals[beta.0].data();
        for img in 0..n {
            for ch in 0..c {
                let src = &xd[(img * c + ch) * plane..][..plane];
                let dst = &mut y[(img * c + ch) * plane..][..plane];
                let (mu, is, ga, be) = (mean[ch], invstd[ch], gd[ch], bd[ch]);
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = (v - mu) * is * ga + be;
                }
            }
        }
        let val = Tensor::new(&s, y)?;
        let requires = self.req(&[x, gamma, beta]);
        let (xid, gid, bid) = (x.0, gamma.0, beta.0);
        let back: BackFn<E> = Box::new(move |vals, g, grads| {
            let xd = vals[xid].data();
            let gd = vals[gid].data();
            // Per channel: dx = invstd/m * (m*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
            let mut dx = grads.take(xid);
            let mut dgamma = grads.take(gid);
            let mut dbeta = grads.take(bid);
            for ch in 0..c {
                let (mu, is) = (mean[ch], invstd[ch]);
                let mut sum_dy = E::zero();
                let mut sum_dy_xhat = E::zero();
                for img in 0..n {
                    let base = (img * c + ch) * plane;
                    for i in 0..plane {
                        let dy = g[base + i];
                        let xhat = (xd[base + i] - mu) * is;
                        sum_dy = sum_dy + dy;
                        sum_dy_xhat = sum_dy_xhat + dy * xhat;
                    }
                }
                if let Some(dg) = dgamma.as_deref_mut() {
                    dg[ch] = dg[ch] + sum_dy_xhat;
                }
                if let Some(db) = dbeta.as_deref_mut() {
                    db[ch] = db[ch] + sum_dy;
                }
                if let Some(dx) = dx.as_deref_mut() {
                    let ga = gd[ch];
                    let me = elem::<E>(m as f64);
                    for img in 0..n {
                        let base = (img * c + ch) * plane;
                        for i in 0..plane {
                            let xhat = (xd[base + i] - mu) * is;
                            let dxhat = g[base + i] * ga;
                            let t = me * dxhat - sum_dy * ga - xhat * sum_dy_xhat * ga;
                            dx[base + i] = dx[base + i] + is * t * inv_m;
                        }
                    }
                }
            }
            grads.put(xid, dx);
            grads.put(gid, dgamma);
            grads.put(bid, dbeta);
        });
        self.push("batchnorm", val, requires, Some(back))
    }

    /// Batch normalization using frozen running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<E>,
        running_var: &Tensor<E>,
        eps: f64,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::shape("batchnorm", format!("rank {:?}", s)));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let epe = elem::<E>(eps);
        let mean: Vec<E> = running_mean.data().to_vec();
        let invstd: Vec<E> = running_var
            .data()
            .iter()
            .map(|&v| E::one() / (v + epe).sqrt())
            .collect();
        let xd = self.vals[x.0].data();
        let gd = self.vals[gamma.0].data();
        let bd = self.vals[beta.0].data();
        let mut y = vec![E::zero(); xd.len()];
        for img in 0..n {
            for ch in 0..c {
                let src = &xd[(img * c + ch) * plane..][..plane];
                let dst = &mut y[(img * c + ch) * plane..][..plane];
                let (mu, is, ga, be) = (mean[ch], invstd[ch], gd[ch], bd[ch]);
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = (v - mu) * is * ga + be;
                }
            }
        }
        let val = Tensor::new(&s, y)?;
        let requires = self.req(&[x, gamma, beta]);
        let (xid, gid, bid) = (x.0, gamma.0, beta.0);
        let back: BackFn<E> = Box::new(move |vals, g, grads| {
            let xd = vals[xid].data();
            let gd = vals[gid].data();
            let mut dx = grads.take(xid);
            let mut dgamma = grads.take(gid);
            let mut dbeta = grads.take(bid);
            for ch in 0..c {
                let (mu, is) = (mean[ch], invstd[ch]);
                let ga = gd[ch];
                let mut sum_dy = E::zero();
                let mut sum_dy_xhat = E::zero();
                for img in 0..n {
                    let base = (img * c + ch) * plane;
                    for i in 0..plane {
                        let dy = g[base + i];
                        sum_dy = sum_dy + dy;
                        sum_dy_xhat = sum_dy_xhat + dy * (xd[base + i] - mu) * is;
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[base + i] = dx[base + i] + dy * ga * is;
                        }
                    }
                }
                if let Some(dg) = dgamma.as_deref_mut() {
                    dg[ch] = dg[ch] + sum_dy_xhat;
                }
                if let Some(db) = dbeta.as_deref_mut() {
                    db[ch] = db[ch] + sum_dy;
                }
            }
            grads.put(xid, dx);
            grads.put(gid, dgamma);
            grads.put(bid, dbeta);
        });
        self.push("batchnorm", val, requires, Some(back))
    }

    /// Rotate the frame axis: output frame t is input frame (t+1) mod T.
    pub fn shift_frames(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || s[0] == 0 {
            return Err(TensorError::shape("shift_frames", format!("shape {:?}", s)));
        }
        let t = s[0];
        let frame: usize = s[1..].iter().product();
        let xd = self.vals[x.0].data();
        let mut out = vec![E::zero(); xd.len()];
        for ti in 0..t {
            let src = (ti + 1) % t;
            out[ti * frame..(ti + 1) * frame].copy_from_slice(&xd[src * frame..(src + 1) * frame]);
        }
        let val = Tensor::new(&s, out)?;
        let requires = self.req(&[x]);
        let xid = x.0;
        self.push(
            "shift_frames",
            val,
            requires,
            Some(Box::new(move |_, g, grads| {
                if let Some(mut dx) = grads.take(xid) {
                    for ti in 0..t {
                        let src = (ti + 1) % t;
                        let dst = &mut dx[src * frame..(src + 1) * frame];
                        let gsrc = &g[ti * frame..(ti + 1) * frame];
                        for (d, &gv) in dst.iter_mut().zip(gsrc) {
                            *d = *d + gv;
                        }
                    }
                    grads.put(xid, Some(dx));
                }
            })),
        )
    }

    /// Temporal convolution with circular frame indexing. Input [T,C,H,W],
    /// kernel [C,C,T,3,3], no bias:
    /// out[t] = sum_s conv2d(in[(t+s) mod T], kernel[:,:,s], pad=1).
    pub fn temporal_conv_circular(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 5 {
            return Err(TensorError::shape(
                "temporal_conv",
                format!("input {:?}, kernel {:?}", sx, sw),
            ));
        }
        let (t, c, h, wdt) = (sx[0], sx[1], sx[2], sx[3]);
        if sw[0] != c || sw[1] != c || sw[2] != t || sw[3] != 3 || sw[4] != 3 {
            return Err(TensorError::shape(
                "temporal_conv",
                format!("kernel {:?}, want [{c},{c},{t},3,3]", sw),
            ));
        }
        let geom = ConvGeom {
            n: 1,
            cin: c,
            h,
            w: wdt,
            cout: c,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
            groups: 1,
            oh: h,
            ow: wdt,
        };
        let frame = c * h * wdt;
        let xd = self.vals[x.0].data();
        let wd = self.vals[w.0].data();
        let mut out = vec![E::zero(); t * frame];
        let mut ws = vec![E::zero(); c * c * 9];
        let mut col = vec![E::zero(); geom.col_len()];
        let mut scratch = vec![E::zero(); frame];
        for s in 0..t {
            gather_temporal_slice(wd, &mut ws, c, t, s);
            for ti in 0..t {
                let src = (ti + s) % t;
                kernels::conv2d_forward(
                    &xd[src * frame..(src + 1) * frame],
                    &ws,
                    None,
                    &geom,
                    &mut col,
                    &mut scratch,
                );
                let dst = &mut out[ti * frame..(ti + 1) * frame];
                for (d, &v) in dst.iter_mut().zip(&scratch) {
                    *d = *d + v;
                }
            }
        }
        let val = Tensor::new(&sx, out)?;
        let requires = self.req(&[x, w]);
        let (xid, wid) = (x.0, w.0);
        let back: BackFn<E> = Box::new(move |vals, g, grads| {
            let geom = ConvGeom {
                n: 1,
                cin: c,
                h,
                w: wdt,
                cout: c,
                kh: 3,
                kw: 3,
                stride: 1,
                pad: 1,
                groups: 1,
                oh: h,
                ow: wdt,
            };
            let xd = vals[xid].data();
            let wd = vals[wid].data();
            let mut dx = grads.take(xid);
            let mut dw = grads.take(wid);
            let mut ws = vec![E::zero(); c * c * 9];
            let mut dws = vec![E::zero(); c * c * 9];
            let mut col = vec![E::zero(); geom.col_len()];
            let mut dcol = vec![E::zero(); geom.col_len()];
            for s in 0..t {
                gather_temporal_slice(wd, &mut ws, c, t, s);
                for v in dws.iter_mut() {
                    *v = E::zero();
                }
                for ti in 0..t {
                    let src = (ti + s) % t;
                    let dy = &g[ti * frame..(ti + 1) * frame];
                    let want_dw = dw.is_some();
                    kernels::conv2d_backward(
                        &xd[src * frame..(src + 1) * frame],
                        &ws,
                        dy,
                        &geom,
                        &mut col,
                        &mut dcol,
                        dx.as_deref_mut()
                            .map(|d| &mut d[src * frame..(src + 1) * frame]),
                        if want_dw { Some(&mut dws) } else { None },
                        None,
                    );
                }
                if let Some(dwbuf) = dw.as_deref_mut() {
                    scatter_temporal_slice(dwbuf, &dws, c, t, s);
                }
            }
            grads.put(xid, dx);
            grads.put(wid, dw);
        });
        self.push("temporal_conv", val, requires, Some(back))
    }

    // ---- fused losses ----

    /// Mean binary cross entropy from logits via the stable log-sum-exp
    /// identity: loss_i = max(z,0) - z*g + ln(1 + exp(-|z|)).
    pub fn bce_with_logits(&mut self, z: Var, target: &Tensor<E>) -> Result<Var> {
        if self.shape(z) != target.shape() {
            return Err(TensorError::shape(
                "bce_with_logits",
                format!("{:?} vs {:?}", self.shape(z), target.shape()),
            ));
        }
        let zd = self.vals[z.0].data();
        let n = zd.len();
        let inv_n = elem::<E>(1.0 / n as f64);
        let mut acc = E::zero();
        for (&zv, &gv) in zd.iter().zip(target.data()) {
            let pos = zv.max(E::zero());
            acc = acc + pos - zv * gv + (E::one() + (-zv.abs()).exp()).ln();
        }
        let requires = self.req(&[z]);
        let zid = z.0;
        let tgt = target.data().to_vec();
        self.push(
            "bce_with_logits",
            Tensor::scalar(acc * inv_n),
            requires,
            Some(Box::new(move |vals, g, grads| {
                let zd = vals[zid].data();
                grads.acc_with(zid, |i| {
                    (sigmoid_scalar(zd[i]) - tgt[i]) * inv_n * g[0]
                })
            })),
        )
    }

    /// Fused reduction loss = mean(f(x_i)), with df the pointwise derivative.
    pub fn mean_map(
        &mut self,
        op: &'static str,
        x: Var,
        f: impl Fn(E) -> E,
        df: impl Fn(E) -> E + 'static,
    ) -> Result<Var> {
        let xd = self.vals[x.0].data();
        let n = xd.len();
        let inv_n = elem::<E>(1.0 / n as f64);
        let mut acc = E::zero();
        for &v in xd {
            acc = acc + f(v);
        }
        let requires = self.req(&[x]);
        let xid = x.0;
        self.push(
            op,
            Tensor::scalar(acc * inv_n),
            requires,
            Some(Box::new(move |vals, g, grads| {
                let xd = vals[xid].data();
                grads.acc_with(xid, |i| df(xd[i]) * inv_n * g[0])
            })),
        )
    }

    /// Fused reduction loss = mean(f(x_i, aux_i)) against a constant
    /// companion tensor (targets, weights). Gradient flows only into x.
    pub fn mean_map2(
        &mut self,
        op: &'static str,
        x: Var,
        aux: &Tensor<E>,
        f: impl Fn(E, E) -> E,
        df: impl Fn(E, E) -> E + 'static,
    ) -> Result<Var> {
        if self.shape(x) != aux.shape() {
            return Err(TensorError::shape(
                op,
                format!("{:?} vs companion {:?}", self.shape(x), aux.shape()),
            ));
        }
        let xd = self.vals[x.0].data();
        let n = xd.len();
        let inv_n = elem::<E>(1.0 / n as f64);
        let mut acc = E::zero();
        for (&v, &a) in xd.iter().zip(aux.data()) {
            acc = acc + f(v, a);
        }
        let requires = self.req(&[x]);
        let xid = x.0;
        let aux = aux.data().to_vec();
        self.push(
            op,
            Tensor::scalar(acc * inv_n),
            requires,
            Some(Box::new(move |vals, g, grads| {
                let xd = vals[xid].data();
                grads.acc_with(xid, |i| df(xd[i], aux[i]) * inv_n * g[0])
            })),
        )
    }

    /// Mean binary cross entropy on probabilities, clamped to
    /// [eps, 1 - eps]. The clamp zeroes the gradient where it binds.
    pub fn bce_prob(&mut self, p: Var, target: &Tensor<E>, eps: f64) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return Err(TensorError::shape(
                "bce",
                format!("{:?} vs {:?}", self.shape(p), target.shape()),
            ));
        }
        let lo = elem::<E>(eps);
        let hi = E::one() - lo;
        let pd = self.vals[p.0].data();
        let n = pd.len();
        let inv_n = elem::<E>(1.0 / n as f64);
        let mut acc = E::zero();
        for (&pv, &gv) in pd.iter().zip(target.data()) {
            let pc = pv.max(lo).min(hi);
            acc = acc - gv * pc.ln() - (E::one() - gv) * (E::one() - pc).ln();
        }
        let requires = self.req(&[p]);
        let pid = p.0;
        let tgt = target.data().to_vec();
        self.push(
            "bce",
            Tensor::scalar(acc * inv_n),
            requires,
            Some(Box::new(move |vals, g, grads| {
                let pd = vals[pid].data();
                grads.acc_with(pid, |i| {
                    let pv = pd[i];
                    if pv <= lo || pv >= hi {
                        E::zero()
                    } else {
                        (-tgt[i] / pv + (E::one() - tgt[i]) / (E::one() - pv)) * inv_n * g[0]
                    }
                })
            })),
        )
    }
}

fn sigmoid_scalar<E: Elem>(v: E) -> E {
    // Split by sign so exp never overflows.
    if v >= E::zero() {
        E::one() / (E::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (E::one() + e)
    }
}

/// Copy kernel[:,:,s,:,:] out of a [C,C,T,3,3] tensor into contiguous
/// [C,C,3,3] form.
fn gather_temporal_slice<E: Elem>(w: &[E], ws: &mut [E], c: usize, t: usize, s: usize) {
    for co in 0..c {
        for ci in 0..c {
            let src = ((co * c + ci) * t + s) * 9;
            let dst = (co * c + ci) * 9;
            ws[dst..dst + 9].copy_from_slice(&w[src..src + 9]);
        }
    }
}

fn scatter_temporal_slice<E: Elem>(dw: &mut [E], dws: &[E], c: usize, t: usize, s: usize) {
    for co in 0..c {
        for ci in 0..c {
            let dst = ((co * c + ci) * t + s) * 9;
            let src = (co * c + ci) * 9;
            for k in 0..9 {
                dw[dst + k] = dw[dst + k] + dws[src + k];
            }
        }
    }
}

/// Shape of a broadcast binary op: same rank, each dim equal or 1.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(TensorError::shape(
            if op.is_empty() { "broadcast" } else { op },
            format!("rank mismatch {:?} vs {:?}", a, b),
        ));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y || x == 1 || y == 1 {
                Ok(x.max(y))
            } else {
                Err(TensorError::shape(
                    if op.is_empty() { "broadcast" } else { op },
                    format!("incompatible {:?} vs {:?}", a, b),
                ))
            }
        })
        .collect()
}

/// Maps a flat index in the broadcast output to a flat index in the input.
struct BroadcastIndex {
    out_strides: Vec<usize>,
    in_strides: Vec<usize>,
}

impl BroadcastIndex {
    fn new(in_shape: &[usize], out_shape: &[usize]) -> Self {
        let rank = out_shape.len();
        let mut out_strides = vec![1; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            out_strides[d] = out_strides[d + 1] * out_shape[d + 1];
        }
        let mut in_strides = vec![0; rank];
        let mut s = 1;
        for d in (0..rank).rev() {
            in_strides[d] = if in_shape[d] == 1 { 0 } else { s };
            s *= in_shape[d];
        }
        BroadcastIndex {
            out_strides,
            in_strides,
        }
    }

    #[inline]
    fn map(&self, flat: usize) -> usize {
        let mut rem = flat;
        let mut idx = 0;
        for (os, is) in self.out_strides.iter().zip(&self.in_strides) {
            let d = rem / os;
            rem %= os;
            idx += d * is;
        }
        idx
    }
}
