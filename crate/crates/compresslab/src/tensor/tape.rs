use super::{CoreError, Elem, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<E> {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: E },
    Silu { a: Var },
    Sum { a: Var },
    RmsNorm { x: Var, gain: Var, inv: Vec<E> },
    Embed { table: Var, ids: Vec<u32> },
    SplitHeads { x: Var, batch: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, heads: usize },
    Attention { q: Var, k: Var, v: Var, theta: f64, roped_q: Tensor<E>, roped_k: Tensor<E>, probs: Tensor<E> },
    CrossEntropy { logits: Var, targets: Vec<u32>, probs: Tensor<E> },
    CustomGrad { passthrough: Var },
}

struct Node<E> {
    op: Op<E>,
    value: Tensor<E>,
}

/// Wengert list: ops are recorded in execution order during the forward
/// pass and replayed in exact reverse order by [`Tape::backward`].
///
/// A tape is single-threaded; tensors handed out by [`Tape::value`] are
/// immutable and safe to share read-only.
pub struct Tape<E> {
    nodes: Vec<Node<E>>,
}

/// Per-variable gradient buffers produced by [`Tape::backward`].
///
/// Buffers are zero-initialized before accumulation; variables that do not
/// influence the loss report `None`.
pub struct Gradients<E> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Elem> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads[v.0].as_ref()
    }
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op<E>, value: Tensor<E>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, op: Op<E>, value: Tensor<E>) -> Result<Var> {
        if !value.all_finite() {
            return Err(CoreError::NonFinite { op: name });
        }
        Ok(self.push(op, value))
    }

    /// Record an input value (parameter or data) on the tape.
    pub fn leaf(&mut self, t: Tensor<E>) -> Var {
        self.push(Op::Leaf, t)
    }

    /// `a[m×k] @ b[k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", av.shape(), bv.shape()),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        unsafe {
            E::gemm(
                m, k, n,
                E::one(),
                av.data().as_ptr(), k as isize, 1,
                bv.data().as_ptr(), n as isize, 1,
                E::zero(),
                out.data_mut().as_mut_ptr(), n as isize, 1,
            );
        }
        self.push_checked("matmul", Op::Matmul { a, b }, out)
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(E, E) -> E,
    ) -> Result<Tensor<E>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Ok(Tensor { shape: av.shape().to_vec(), data })
        } else if bv.is_scalar() {
            let s = bv.data()[0];
            let data = av.data().iter().map(|&x| f(x, s)).collect();
            Ok(Tensor { shape: av.shape().to_vec(), data })
        } else if bv.shape().len() == 1 && av.shape().last() == Some(&bv.numel()) {
            let d = bv.numel();
            let data = av
                .data()
                .chunks_exact(d)
                .flat_map(|row| row.iter().zip(bv.data()).map(|(&x, &y)| f(x, y)))
                .collect();
            Ok(Tensor { shape: av.shape().to_vec(), data })
        } else {
            Err(CoreError::ShapeMismatch {
                op: name,
                detail: format!("{:?} vs {:?}", av.shape(), bv.shape()),
            })
        }
    }

    /// Elementwise `a + b`; `b` may be a scalar or a trailing-row vector.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        self.push_checked("add", Op::Add { a, b }, out)
    }

    /// Elementwise `a - b`; `b` may be a scalar or a trailing-row vector.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        self.push_checked("sub", Op::Sub { a, b }, out)
    }

    /// Elementwise `a * b`; `b` may be a scalar or a trailing-row vector.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        self.push_checked("mul", Op::Mul { a, b }, out)
    }

    /// `c * a` for a plain constant.
    pub fn scale(&mut self, a: Var, c: E) -> Result<Var> {
        let out = self.value(a).map(|x| c * x);
        self.push_checked("scale", Op::Scale { a, c }, out)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push_checked("silu", Op::Silu { a }, out)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().fold(E::zero(), |acc, &x| acc + x);
        self.push_checked("sum", Op::Sum { a }, Tensor::scalar(s))
    }

    /// Row-wise RMS normalization with a learned per-column gain:
    /// `y[i,j] = gain[j] * x[i,j] / sqrt(mean_j(x[i,j]^2) + eps)`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(CoreError::InvalidArgument { op: "rmsnorm", detail: "eps must be > 0".into() });
        }
        let (xv, gv) = (self.value(x), self.value(gain));
        if xv.shape().len() != 2 || gv.shape() != [xv.cols()] {
            return Err(CoreError::ShapeMismatch {
                op: "rmsnorm",
                detail: format!("x {:?}, gain {:?}", xv.shape(), gv.shape()),
            });
        }
        let (r, d) = (xv.rows(), xv.cols());
        let dn = E::from_f64c(d as f64);
        let epse = E::from_f64c(eps);
        let mut inv = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r * d);
        for row in xv.data().chunks_exact(d) {
            let ms = row.iter().fold(E::zero(), |acc, &v| acc + v * v) / dn;
            let ri = (ms + epse).sqrt().recip();
            inv.push(ri);
            data.extend(row.iter().zip(gv.data()).map(|(&v, &g)| g * v * ri));
        }
        let out = Tensor { shape: vec![r, d], data };
        self.push_checked("rmsnorm", Op::RmsNorm { x, gain, inv }, out)
    }

    /// Gather rows of `table[vocab×d]` for each id: `out[i,:] = table[ids[i],:]`.
    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(CoreError::ShapeMismatch {
                op: "embed",
                detail: format!("table {:?}", tv.shape()),
            });
        }
        let (vocab, d) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= vocab {
                return Err(CoreError::TokenOutOfRange { id, vocab });
            }
            let off = id as usize * d;
            data.extend_from_slice(&tv.data()[off..off + d]);
        }
        let out = Tensor { shape: vec![ids.len(), d], data };
        self.push_checked("embed", Op::Embed { table, ids: ids.to_vec() }, out)
    }

    /// `[batch*t × d] -> [batch*heads, t, d/heads]` head reshuffle.
    pub fn split_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || xv.rows() % batch != 0 || xv.cols() % heads != 0 {
            return Err(CoreError::ShapeMismatch {
                op: "split_heads",
                detail: format!("{:?} with batch {batch}, heads {heads}", xv.shape()),
            });
        }
        let (t, d) = (xv.rows() / batch, xv.cols());
        let dh = d / heads;
        let mut data = vec![E::zero(); xv.numel()];
        let src = xv.data();
        for b in 0..batch {
            for h in 0..heads {
                for tt in 0..t {
                    let dst = (((b * heads + h) * t) + tt) * dh;
                    let s = (b * t + tt) * d + h * dh;
                    data[dst..dst + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        let out = Tensor { shape: vec![batch * heads, t, dh], data };
        self.push_checked("split_heads", Op::SplitHeads { x, batch, heads }, out)
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 3 || xv.shape()[0] != batch * heads {
            return Err(CoreError::ShapeMismatch {
                op: "merge_heads",
                detail: format!("{:?} with batch {batch}, heads {heads}", xv.shape()),
            });
        }
        let (t, dh) = (xv.shape()[1], xv.shape()[2]);
        let d = heads * dh;
        let mut data = vec![E::zero(); xv.numel()];
        let src = xv.data();
        for b in 0..batch {
            for h in 0..heads {
                for tt in 0..t {
                    let s = (((b * heads + h) * t) + tt) * dh;
                    let dst = (b * t + tt) * d + h * dh;
                    data[dst..dst + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        let out = Tensor { shape: vec![batch * t, d], data };
        self.push_checked("merge_heads", Op::MergeHeads { x, batch, heads }, out)
    }

    /// Causal self-attention over `[groups, t, dh]` tensors with rotary
    /// position embeddings applied to `q` and `k` before the scores.
    /// Positions `j > i` are masked; each output row is the
    /// softmax-weighted causal mix of `v` rows.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, theta: f64) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.shape().len() != 3 {
            return Err(CoreError::ShapeMismatch {
                op: "causal_attention",
                detail: format!("q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape()),
            });
        }
        let (g, t, dh) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        if dh % 2 != 0 {
            return Err(CoreError::InvalidArgument {
                op: "causal_attention",
                detail: format!("head dim {dh} must be even for rotary embeddings"),
            });
        }
        let rot = RopeTable::new(t, dh, theta);
        let roped_q = rot.apply(qv, false);
        let roped_k = rot.apply(kv, false);

        let scale = E::from_f64c(1.0 / (dh as f64).sqrt());
        let mut probs = vec![E::zero(); g * t * t];
        let mut out = vec![E::zero(); g * t * dh];
        for gi in 0..g {
            let qg = &roped_q.data()[gi * t * dh..(gi + 1) * t * dh];
            let kg = &roped_k.data()[gi * t * dh..(gi + 1) * t * dh];
            let vg = &vv.data()[gi * t * dh..(gi + 1) * t * dh];
            let pg = &mut probs[gi * t * t..(gi + 1) * t * t];
            let og = &mut out[gi * t * dh..(gi + 1) * t * dh];
            for ti in 0..t {
                let qrow = &qg[ti * dh..(ti + 1) * dh];
                // scores over allowed positions u <= ti
                let mut mx = E::neg_infinity();
                for u in 0..=ti {
                    let krow = &kg[u * dh..(u + 1) * dh];
                    let mut s = E::zero();
                    for j in 0..dh {
                        s = s + qrow[j] * krow[j];
                    }
                    s = s * scale;
                    pg[ti * t + u] = s;
                    if s > mx {
                        mx = s;
                    }
                }
                let mut z = E::zero();
                for u in 0..=ti {
                    let e = (pg[ti * t + u] - mx).exp();
                    pg[ti * t + u] = e;
                    z = z + e;
                }
                let zi = z.recip();
                for u in 0..=ti {
                    pg[ti * t + u] = pg[ti * t + u] * zi;
                }
                let orow = &mut og[ti * dh..(ti + 1) * dh];
                for u in 0..=ti {
                    let p = pg[ti * t + u];
                    let vrow = &vg[u * dh..(u + 1) * dh];
                    for j in 0..dh {
                        orow[j] = orow[j] + p * vrow[j];
                    }
                }
            }
        }
        let probs = Tensor { shape: vec![g, t, t], data: probs };
        let out = Tensor { shape: vec![g, t, dh], data: out };
        self.push_checked(
            "causal_attention",
            Op::Attention { q, k, v, theta, roped_q, roped_k, probs },
            out,
        )
    }

    /// Mean next-token cross-entropy: `-log softmax(logits)[target]`,
    /// averaged over rows, stabilized by max-subtraction.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.rows() != targets.len() {
            return Err(CoreError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("logits {:?}, {} targets", lv.shape(), targets.len()),
            });
        }
        let (r, vocab) = (lv.rows(), lv.cols());
        for &id in targets {
            if id as usize >= vocab {
                return Err(CoreError::TokenOutOfRange { id, vocab });
            }
        }
        let mut probs = vec![E::zero(); r * vocab];
        let mut total = E::zero();
        for (i, row) in lv.data().chunks_exact(vocab).enumerate() {
            let mx = row.iter().fold(E::neg_infinity(), |a, &b| if b > a { b } else { a });
            let mut z = E::zero();
            let prow = &mut probs[i * vocab..(i + 1) * vocab];
            for (p, &x) in prow.iter_mut().zip(row) {
                let e = (x - mx).exp();
                *p = e;
                z = z + e;
            }
            let zi = z.recip();
            for p in prow.iter_mut() {
                *p = *p * zi;
            }
            // -log softmax[target] = log(z) + mx - logit[target]
            total = total + z.ln() + mx - row[targets[i] as usize];
        }
        let loss = total / E::from_f64c(r as f64);
        let probs = Tensor { shape: vec![r, vocab], data: probs };
        self.push_checked(
            "cross_entropy",
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            Tensor::scalar(loss),
        )
    }

    /// Straight-through hook: forward returns `forward_value`, backward
    /// routes the incoming gradient unchanged to `passthrough` and
    /// contributes nothing through `forward_value` itself.
    pub fn custom_grad(&mut self, forward_value: Tensor<E>, passthrough: Var) -> Result<Var> {
        if forward_value.shape() != self.value(passthrough).shape() {
            return Err(CoreError::ShapeMismatch {
                op: "custom_grad",
                detail: format!(
                    "forward {:?} vs passthrough {:?}",
                    forward_value.shape(),
                    self.value(passthrough).shape()
                ),
            });
        }
        self.push_checked("custom_grad", Op::CustomGrad { passthrough }, forward_value)
    }

    /// Reverse-mode accumulation from a scalar loss. Visits ops in exact
    /// reverse execution order; every gradient buffer starts at zero.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<E>> {
        if !self.value(loss).is_scalar() {
            return Err(CoreError::InvalidArgument {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(E::one()));

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (self.value(a).rows(), self.value(a).cols());
                    let n = self.value(b).cols();
                    {
                        let ga = ensure(&mut grads, a.0, self.nodes[a.0].value.shape());
                        unsafe {
                            E::gemm(
                                m, n, k,
                                E::one(),
                                g.data().as_ptr(), n as isize, 1,
                                self.nodes[b.0].value.data().as_ptr(), 1, n as isize,
                                E::one(),
                                ga.as_mut_ptr(), k as isize, 1,
                            );
                        }
                    }
                    {
                        let gb = ensure(&mut grads, b.0, self.nodes[b.0].value.shape());
                        unsafe {
                            E::gemm(
                                k, m, n,
                                E::one(),
                                self.nodes[a.0].value.data().as_ptr(), 1, k as isize,
                                g.data().as_ptr(), n as isize, 1,
                                E::one(),
                                gb.as_mut_ptr(), n as isize, 1,
                            );
                        }
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, &self.nodes, a, |ga| {
                        for (d, &s) in ga.iter_mut().zip(g.data()) {
                            *d = *d + s;
                        }
                    });
                    self.reduce_into(&mut grads, b, g.data(), |_, gy| gy);
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, &self.nodes, a, |ga| {
                        for (d, &s) in ga.iter_mut().zip(g.data()) {
                            *d = *d + s;
                        }
                    });
                    self.reduce_into(&mut grads, b, g.data(), |_, gy| E::zero() - gy);
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let same_shape = self.value(a).shape() == self.value(b).shape();
                    // d/da = g * broadcast(b)
                    {
                        let bv = self.nodes[b.0].value.data();
                        accumulate(&mut grads, &self.nodes, a, |ga| {
                            if same_shape {
                                for ((d, &s), &bb) in ga.iter_mut().zip(g.data()).zip(bv) {
                                    *d = *d + s * bb;
                                }
                            } else if bv.len() == 1 {
                                for (d, &s) in ga.iter_mut().zip(g.data()) {
                                    *d = *d + s * bv[0];
                                }
                            } else {
                                let dcols = bv.len();
                                for (drow, srow) in
                                    ga.chunks_exact_mut(dcols).zip(g.data().chunks_exact(dcols))
                                {
                                    for j in 0..dcols {
                                        drow[j] = drow[j] + srow[j] * bv[j];
                                    }
                                }
                            }
                        });
                    }
                    // d/db = reduce(g * a)
                    {
                        let av = self.nodes[a.0].value.data();
                        let prod: Vec<E> =
                            g.data().iter().zip(av).map(|(&gy, &x)| gy * x).collect();
                        self.reduce_into_vals(&mut grads, b, &prod);
                    }
                }
                Op::Scale { a, c } => {
                    let (a, c) = (*a, *c);
                    accumulate(&mut grads, &self.nodes, a, |ga| {
                        for (d, &s) in ga.iter_mut().zip(g.data()) {
                            *d = *d + c * s;
                        }
                    });
                }
                Op::Silu { a } => {
                    let a = *a;
                    let xv = self.nodes[a.0].value.data();
                    accumulate(&mut grads, &self.nodes, a, |ga| {
                        for ((d, &s), &x) in ga.iter_mut().zip(g.data()).zip(xv) {
                            let sg = sigmoid(x);
                            *d = *d + s * (sg + x * sg * (E::one() - sg));
                        }
                    });
                }
                Op::Sum { a } => {
                    let a = *a;
                    let gy = g.item();
                    accumulate(&mut grads, &self.nodes, a, |ga| {
                        for d in ga.iter_mut() {
                            *d = *d + gy;
                        }
                    });
                }
                Op::RmsNorm { x, gain, inv } => {
                    let (x, gain) = (*x, *gain);
                    let d = self.value(x).cols();
                    let dn = E::from_f64c(d as f64);
                    let xv = self.nodes[x.0].value.data();
                    let gv = self.nodes[gain.0].value.data();
                    // dgain[j] = sum_i go[i,j] * x[i,j] * inv[i]
                    accumulate(&mut grads, &self.nodes, gain, |gg| {
                        for (i, grow) in g.data().chunks_exact(d).enumerate() {
                            let xrow = &xv[i * d..(i + 1) * d];
                            for j in 0..d {
                                gg[j] = gg[j] + grow[j] * xrow[j] * inv[i];
                            }
                        }
                    });
                    // dx[i,j] = inv[i] * (gain[j]*go[i,j] - x[i,j]*inv[i]^2/d * dot)
                    accumulate(&mut grads, &self.nodes, x, |gx| {
                        for (i, (grow, xrow)) in
                            g.data().chunks_exact(d).zip(xv.chunks_exact(d)).enumerate()
                        {
                            let ri = inv[i];
                            let mut dot = E::zero();
                            for j in 0..d {
                                dot = dot + grow[j] * gv[j] * xrow[j];
                            }
                            let coef = ri * ri * ri * dot / dn;
                            let gxrow = &mut gx[i * d..(i + 1) * d];
                            for j in 0..d {
                                gxrow[j] = gxrow[j] + gv[j] * grow[j] * ri - xrow[j] * coef;
                            }
                        }
                    });
                }
                Op::Embed { table, ids } => {
                    let table = *table;
                    let d = self.value(table).cols();
                    accumulate(&mut grads, &self.nodes, table, |gt| {
                        for (i, &id) in ids.iter().enumerate() {
                            let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                            let src = &g.data()[i * d..(i + 1) * d];
                            for j in 0..d {
                                dst[j] = dst[j] + src[j];
                            }
                        }
                    });
                }
                Op::SplitHeads { x, batch, heads } => {
                    let (x, batch, heads) = (*x, *batch, *heads);
                    let shape = self.value(Var(idx)).shape().to_vec();
                    let (t, dh) = (shape[1], shape[2]);
                    let d = heads * dh;
                    accumulate(&mut grads, &self.nodes, x, |gx| {
                        for b in 0..batch {
                            for h in 0..heads {
                                for tt in 0..t {
                                    let s = (((b * heads + h) * t) + tt) * dh;
                                    let dst = (b * t + tt) * d + h * dh;
                                    for j in 0..dh {
                                        gx[dst + j] = gx[dst + j] + g.data()[s + j];
                                    }
                                }
                            }
                        }
                    });
                }
                Op::MergeHeads { x, batch, heads } => {
                    let (x, batch, heads) = (*x, *batch, *heads);
                    let shape = self.value(x).shape().to_vec();
                    let (t, dh) = (shape[1], shape[2]);
                    let d = heads * dh;
                    accumulate(&mut grads, &self.nodes, x, |gx| {
                        for b in 0..batch {
                            for h in 0..heads {
                                for tt in 0..t {
                                    let dst = (((b * heads + h) * t) + tt) * dh;
                                    let s = (b * t + tt) * d + h * dh;
                                    for j in 0..dh {
                                        gx[dst + j] = gx[dst + j] + g.data()[s + j];
                                    }
                                }
                            }
                        }
                    });
                }
                Op::Attention { q, k, v, theta, roped_q, roped_k, probs } => {
                    let (q, k, v, theta) = (*q, *k, *v, *theta);
                    let shape = roped_q.shape().to_vec();
                    let (gs, t, dh) = (shape[0], shape[1], shape[2]);
                    let scale = E::from_f64c(1.0 / (dh as f64).sqrt());
                    let rot = RopeTable::new(t, dh, theta);
                    let mut dq_roped = vec![E::zero(); gs * t * dh];
                    let mut dk_roped = vec![E::zero(); gs * t * dh];
                    let mut dv = vec![E::zero(); gs * t * dh];
                    let vv = self.nodes[v.0].value.data();
                    for gi in 0..gs {
                        let go = &g.data()[gi * t * dh..(gi + 1) * t * dh];
                        let pg = &probs.data()[gi * t * t..(gi + 1) * t * t];
                        let qg = &roped_q.data()[gi * t * dh..(gi + 1) * t * dh];
                        let kg = &roped_k.data()[gi * t * dh..(gi + 1) * t * dh];
                        let vg = &vv[gi * t * dh..(gi + 1) * t * dh];
                        let dqg = &mut dq_roped[gi * t * dh..(gi + 1) * t * dh];
                        let dkg = &mut dk_roped[gi * t * dh..(gi + 1) * t * dh];
                        let dvg = &mut dv[gi * t * dh..(gi + 1) * t * dh];
                        let mut dp = vec![E::zero(); t];
                        for ti in 0..t {
                            let gorow = &go[ti * dh..(ti + 1) * dh];
                            // dP[u] and dV
                            let mut dot = E::zero();
                            for (u, dpu) in dp.iter_mut().enumerate().take(ti + 1) {
                                let vrow = &vg[u * dh..(u + 1) * dh];
                                let mut s = E::zero();
                                for j in 0..dh {
                                    s = s + gorow[j] * vrow[j];
                                }
                                *dpu = s;
                                let p = pg[ti * t + u];
                                dot = dot + s * p;
                                let dvrow = &mut dvg[u * dh..(u + 1) * dh];
                                for j in 0..dh {
                                    dvrow[j] = dvrow[j] + p * gorow[j];
                                }
                            }
                            // softmax backward, then into q/k
                            let qrow = &qg[ti * dh..(ti + 1) * dh];
                            let dqrow_base = ti * dh;
                            for u in 0..=ti {
                                let p = pg[ti * t + u];
                                let ds = p * (dp[u] - dot) * scale;
                                let krow = &kg[u * dh..(u + 1) * dh];
                                for j in 0..dh {
                                    dqg[dqrow_base + j] = dqg[dqrow_base + j] + ds * krow[j];
                                    dkg[u * dh + j] = dkg[u * dh + j] + ds * qrow[j];
                                }
                            }
                        }
                    }
                    let dq_t = Tensor { shape: shape.clone(), data: dq_roped };
                    let dk_t = Tensor { shape: shape.clone(), data: dk_roped };
                    let dq = rot.apply(&dq_t, true);
                    let dk = rot.apply(&dk_t, true);
                    accumulate(&mut grads, &self.nodes, q, |gq| {
                        for (d, &s) in gq.iter_mut().zip(dq.data()) {
                            *d = *d + s;
                        }
                    });
                    accumulate(&mut grads, &self.nodes, k, |gk| {
                        for (d, &s) in gk.iter_mut().zip(dk.data()) {
                            *d = *d + s;
                        }
                    });
                    accumulate(&mut grads, &self.nodes, v, |gv2| {
                        for (d, &s) in gv2.iter_mut().zip(&dv) {
                            *d = *d + s;
                        }
                    });
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let logits = *logits;
                    let vocab = self.value(logits).cols();
                    let r = targets.len();
                    let gy = g.item() / E::from_f64c(r as f64);
                    let pv = probs.data();
                    accumulate(&mut grads, &self.nodes, logits, |gl| {
                        for (i, &tgt) in targets.iter().enumerate() {
                            let row = &mut gl[i * vocab..(i + 1) * vocab];
                            let prow = &pv[i * vocab..(i + 1) * vocab];
                            for j in 0..vocab {
                                row[j] = row[j] + gy * prow[j];
                            }
                            row[tgt as usize] = row[tgt as usize] - gy;
                        }
                    });
                }
                Op::CustomGrad { passthrough } => {
                    let p = *passthrough;
                    accumulate(&mut grads, &self.nodes, p, |gp| {
                        for (d, &s) in gp.iter_mut().zip(g.data()) {
                            *d = *d + s;
                        }
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Accumulate `vals` (shaped like the op output) into `target`'s grad,
    /// reducing over broadcast dims when `target` was scalar- or
    /// row-broadcast.
    fn reduce_into(
        &self,
        grads: &mut Vec<Option<Tensor<E>>>,
        target: Var,
        upstream: &[E],
        f: impl Fn(usize, E) -> E,
    ) {
        let vals: Vec<E> = upstream.iter().enumerate().map(|(i, &gy)| f(i, gy)).collect();
        self.reduce_into_vals(grads, target, &vals);
    }

    fn reduce_into_vals(&self, grads: &mut Vec<Option<Tensor<E>>>, target: Var, vals: &[E]) {
        let tlen = self.value(target).numel();
        accumulate_raw(grads, target, self.value(target).shape().to_vec(), |gt| {
            if vals.len() == tlen {
                for (d, &s) in gt.iter_mut().zip(vals) {
                    *d = *d + s;
                }
            } else if tlen == 1 {
                let mut acc = E::zero();
                for &s in vals {
                    acc = acc + s;
                }
                gt[0] = gt[0] + acc;
            } else {
                for row in vals.chunks_exact(tlen) {
                    for j in 0..tlen {
                        gt[j] = gt[j] + row[j];
                    }
                }
            }
        });
    }
}

fn ensure<'g, E: Elem>(
    grads: &'g mut [Option<Tensor<E>>],
    idx: usize,
    shape: &[usize],
) -> &'g mut [E] {
    if grads[idx].is_none() {
        grads[idx] = Some(Tensor::zeros(shape.to_vec()));
    }
    grads[idx].as_mut().unwrap().data_mut()
}

fn accumulate<E: Elem>(
    grads: &mut Vec<Option<Tensor<E>>>,
    nodes: &[Node<E>],
    target: Var,
    f: impl FnOnce(&mut [E]),
) {
    let shape = nodes[target.0].value.shape().to_vec();
    accumulate_raw(grads, target, shape, f);
}

fn accumulate_raw<E: Elem>(
    grads: &mut Vec<Option<Tensor<E>>>,
    target: Var,
    shape: Vec<usize>,
    f: impl FnOnce(&mut [E]),
) {
    if grads[target.0].is_none() {
        grads[target.0] = Some(Tensor::zeros(shape));
    }
    f(grads[target.0].as_mut().unwrap().data_mut());
}

fn sigmoid<E: Elem>(x: E) -> E {
    if x >= E::zero() {
        (E::one() + (E::zero() - x).exp()).recip()
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

/// Precomputed rotary sin/cos table for one (seq, head-dim) pair.
struct RopeTable<E> {
    t: usize,
    dh: usize,
    cos: Vec<E>,
    sin: Vec<E>,
}

impl<E: Elem> RopeTable<E> {
    fn new(t: usize, dh: usize, theta: f64) -> Self {
        let half = dh / 2;
        let mut cos = Vec::with_capacity(t * half);
        let mut sin = Vec::with_capacity(t * half);
        for pos in 0..t {
            for j in 0..half {
                let freq = theta.powf(-2.0 * j as f64 / dh as f64);
                let angle = pos as f64 * freq;
                cos.push(E::from_f64c(angle.cos()));
                sin.push(E::from_f64c(angle.sin()));
            }
        }
        Self { t, dh, cos, sin }
    }

    /// Rotate consecutive pairs `(x[2j], x[2j+1])` by the position angle;
    /// `inverse` rotates the other way (used for the backward pass).
    fn apply(&self, x: &Tensor<E>, inverse: bool) -> Tensor<E> {
        let (t, dh, half) = (self.t, self.dh, self.dh / 2);
        let groups = x.numel() / (t * dh);
        let mut out = vec![E::zero(); x.numel()];
        let src = x.data();
        for gi in 0..groups {
            for pos in 0..t {
                let base = (gi * t + pos) * dh;
                let tab = pos * half;
                for j in 0..half {
                    let (c, s) = (self.cos[tab + j], self.sin[tab + j]);
                    let s = if inverse { E::zero() - s } else { s };
                    let (a, b) = (src[base + 2 * j], src[base + 2 * j + 1]);
                    out[base + 2 * j] = a * c - b * s;
                    out[base + 2 * j + 1] = a * s + b * c;
                }
            }
        }
        Tensor { shape: x.shape().to_vec(), data: out }
    }
}

// Tensor field access for in-module construction without re-validation.
impl<E> Tensor<E> {
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<E>) -> Self {
        Self { shape, data }
    }
}
