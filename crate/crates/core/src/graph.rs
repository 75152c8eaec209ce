//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node whose parents were created earlier, so the node
//! list is already in topological order and `backward` walks it in reverse.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, AttnShape, RopeTable};
use crate::tensor::{check_finite, gemm, MatViewMut, Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    AddPeriodic {
        x: Var,
        pos: Var,
        period: usize,
    },
    Rope {
        x: Var,
        heads: usize,
        seq: usize,
        table: Arc<RopeTable<T>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    SwiGlu(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        probs: Vec<T>,
    },
    Kl {
        logits: Var,
        target_probs: Vec<T>,
        probs: Vec<T>,
        tau: T,
    },
    Cosine {
        x: Var,
        target: Arc<Tensor<T>>,
        cos: Vec<T>,
        x_norm: Vec<T>,
        t_norm: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(T::ZERO))
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A constant leaf (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        check_finite(name, value.data())?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(shape_err(op, format!("expected rank 2, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            T::ONE,
            self.value(a).view(),
            self.value(b).view(),
            T::ZERO,
            MatViewMut::new(out.data_mut(), m, n),
        );
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("[{m}x{k}] x [{n}x{k2}]ᵀ")));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            T::ONE,
            self.value(a).view(),
            self.value(b).view().t(),
            T::ZERO,
            MatViewMut::new(out.data_mut(), m, n),
        );
        self.push("matmul_nt", out, Op::MatMulNt(a, b), &[a, b])
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn rms_norm(&mut self, x: Var, w: Var, eps: T) -> Result<Var> {
        let d = self.value(w).len();
        if d == 0 || self.value(x).cols() != d || self.value(w).shape().len() != 1 {
            return Err(shape_err(
                "rms_norm",
                format!("x {:?} weight {:?}", self.value(x).shape(), self.value(w).shape()),
            ));
        }
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.shape());
        let mut inv_rms = vec![T::ZERO; xv.rows()];
        kernels::rms_norm_forward(xv.data(), self.value(w).data(), eps, out.data_mut(), &mut inv_rms);
        self.push("rms_norm", out, Op::RmsNorm { x, w, inv_rms }, &[x, w])
    }

    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (vocab, d) = self.dims2(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::Empty("embedding ids"));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            data.extend_from_slice(tv.row(id as usize));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        self.push(
            "embedding",
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// `x[r] + pos[r mod period]` — learned absolute positions.
    pub fn add_periodic(&mut self, x: Var, pos: Var, period: usize) -> Result<Var> {
        let (rows, d) = self.dims2(x, "add_periodic")?;
        let (prow, pd) = self.dims2(pos, "add_periodic")?;
        if pd != d || period == 0 || period > prow || rows % period != 0 {
            return Err(shape_err("add_periodic", format!("x [{rows}x{d}] pos [{prow}x{pd}] period {period}")));
        }
        let mut out = self.value(x).clone();
        let pv = self.value(pos);
        for (r, row) in out.data_mut().chunks_exact_mut(d).enumerate() {
            for (o, &p) in row.iter_mut().zip(pv.row(r % period)) {
                *o += p;
            }
        }
        self.push("add_periodic", out, Op::AddPeriodic { x, pos, period }, &[x, pos])
    }

    pub fn rope(&mut self, x: Var, heads: usize, seq: usize, table: Arc<RopeTable<T>>) -> Result<Var> {
        let (rows, d) = self.dims2(x, "rope")?;
        if heads == 0 || d % heads != 0 || (d / heads) % 2 != 0 || rows % seq != 0 {
            return Err(shape_err("rope", format!("[{rows}x{d}] heads {heads} seq {seq}")));
        }
        if table.half != d / heads / 2 || table.cos.len() < seq * table.half {
            return Err(shape_err("rope", "table does not cover head dim / positions"));
        }
        let mut out = Tensor::zeros(&[rows, d]);
        kernels::rope_apply(self.value(x).data(), out.data_mut(), d, heads, seq, &table, false);
        self.push("rope", out, Op::Rope { x, heads, seq, table }, &[x])
    }

    /// Causal self-attention over `batch` sequences of `seq` rows each.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (rows, d) = self.dims2(q, "attention")?;
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(shape_err(
                "attention",
                format!("[{rows}x{d}] batch {batch} seq {seq} heads {heads}"),
            ));
        }
        let shape = AttnShape {
            batch,
            seq,
            heads,
            d_model: d,
        };
        let mut out = Tensor::zeros(&[rows, d]);
        let mut probs = vec![T::ZERO; batch * heads * seq * seq];
        kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            &shape,
            out.data_mut(),
            &mut probs,
        );
        self.push(
            "attention",
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// `silu(gate) ⊙ up`.
    pub fn swiglu(&mut self, gate: Var, up: Var) -> Result<Var> {
        self.same_shape(gate, up, "swiglu")?;
        let mut out = Tensor::zeros(self.value(gate).shape());
        kernels::swiglu_forward(self.value(gate).data(), self.value(up).data(), out.data_mut());
        self.push("swiglu", out, Op::SwiGlu(gate, up), &[gate, up])
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let (rows, vocab) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != rows {
            return Err(shape_err("cross_entropy", format!("{rows} rows, {} targets", targets.len())));
        }
        if let Some(&id) = targets.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0f64;
        for (r, row) in self.value(logits).data().chunks_exact(vocab).enumerate() {
            total += kernels::log_sum_exp(row) - row[targets[r] as usize].to_f64();
        }
        kernels::softmax_rows(&mut probs, vocab);
        let loss = Tensor::scalar(T::from_f64(total / rows as f64));
        self.push(
            "cross_entropy",
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// `tau² · mean_rows KL(softmax(target/tau) ‖ softmax(logits/tau))`; `target_logits` is constant.
    pub fn kl_div(&mut self, logits: Var, target_logits: &Tensor<T>, tau: T) -> Result<Var> {
        let (rows, vocab) = self.dims2(logits, "kl_div")?;
        if target_logits.shape() != self.value(logits).shape() {
            return Err(shape_err(
                "kl_div",
                format!("{:?} vs {:?}", target_logits.shape(), self.value(logits).shape()),
            ));
        }
        if !(tau > T::ZERO) {
            return Err(Error::Invalid("temperature must be positive".into()));
        }
        let inv_tau = T::ONE / tau;
        let zs: Vec<T> = self.value(logits).data().iter().map(|&z| z * inv_tau).collect();
        let zt: Vec<T> = target_logits.data().iter().map(|&z| z * inv_tau).collect();
        let mut total = 0.0f64;
        for (rs, rt) in zs.chunks_exact(vocab).zip(zt.chunks_exact(vocab)) {
            let (ls, lt) = (kernels::log_sum_exp(rs), kernels::log_sum_exp(rt));
            let mut kl = 0.0f64;
            for (&s, &t) in rs.iter().zip(rt) {
                let log_pt = t.to_f64() - lt;
                let pt = log_pt.exp();
                if pt > 0.0 {
                    kl += pt * (log_pt - (s.to_f64() - ls));
                }
            }
            total += kl;
        }
        let t2 = tau.to_f64() * tau.to_f64();
        let mut probs = zs;
        let mut target_probs = zt;
        kernels::softmax_rows(&mut probs, vocab);
        kernels::softmax_rows(&mut target_probs, vocab);
        let loss = Tensor::scalar(T::from_f64(t2 * total / rows as f64));
        self.push(
            "kl_div",
            loss,
            Op::Kl {
                logits,
                target_probs,
                probs,
                tau,
            },
            &[logits],
        )
    }

    /// Mean over rows of `1 − cos(x_r, target_r)`; `target` is constant.
    pub fn cosine_distance(&mut self, x: Var, target: Arc<Tensor<T>>) -> Result<Var> {
        let (rows, d) = self.dims2(x, "cosine_distance")?;
        if target.shape() != self.value(x).shape() {
            return Err(shape_err(
                "cosine_distance",
                format!("{:?} vs {:?}", target.shape(), self.value(x).shape()),
            ));
        }
        let xv = self.value(x);
        let mut cos = Vec::with_capacity(rows);
        let mut x_norm = Vec::with_capacity(rows);
        let mut t_norm = Vec::with_capacity(rows);
        let mut total = 0.0f64;
        for r in 0..rows {
            let (a, b) = (&xv.data()[r * d..(r + 1) * d], target.row(r));
            let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
            for (&p, &q) in a.iter().zip(b) {
                let (p, q) = (p.to_f64(), q.to_f64());
                dot += p * q;
                na += p * p;
                nb += q * q;
            }
            if na == 0.0 || nb == 0.0 {
                return Err(Error::ZeroNorm {
                    op: "cosine_distance",
                    row: r,
                });
            }
            let (na, nb) = (na.sqrt(), nb.sqrt());
            let c = dot / (na * nb);
            total += 1.0 - c;
            cos.push(T::from_f64(c));
            x_norm.push(T::from_f64(na));
            t_norm.push(T::from_f64(nb));
        }
        let loss = Tensor::scalar(T::from_f64(total / rows as f64));
        self.push(
            "cosine_distance",
            loss,
            Op::Cosine {
                x,
                target,
                cos,
                x_norm,
                t_norm,
            },
            &[x],
        )
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn grad_buf<'g>(grads: &'g mut [Option<Tensor<T>>], nodes: &[Node<T>], v: Var) -> &'g mut Tensor<T> {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()))
    }

    /// Reverse pass from a scalar `loss`. Gradients of leaves are kept and
    /// readable through [`Graph::grad`]; a graph supports a single backward.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.needs(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::ONE));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &Tensor<T>) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, n) = (g.rows(), g.cols());
                let k = val(a).cols();
                if needs(a) {
                    let da = Self::grad_buf(grads, nodes, a);
                    gemm(T::ONE, g.view(), val(b).view().t(), T::ONE, MatViewMut::new(da.data_mut(), m, k));
                }
                if needs(b) {
                    let db = Self::grad_buf(grads, nodes, b);
                    gemm(T::ONE, val(a).view().t(), g.view(), T::ONE, MatViewMut::new(db.data_mut(), k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (a, b) = (*a, *b);
                let (m, n) = (g.rows(), g.cols());
                let k = val(a).cols();
                if needs(a) {
                    let da = Self::grad_buf(grads, nodes, a);
                    gemm(T::ONE, g.view(), val(b).view(), T::ONE, MatViewMut::new(da.data_mut(), m, k));
                }
                if needs(b) {
                    let db = Self::grad_buf(grads, nodes, b);
                    gemm(T::ONE, g.view().t(), val(a).view(), T::ONE, MatViewMut::new(db.data_mut(), n, k));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        Self::grad_buf(grads, nodes, v).add_assign(g).expect("shape");
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                for (v, other) in [(a, b), (b, a)] {
                    if needs(v) {
                        let ov = val(other).data();
                        let buf = Self::grad_buf(grads, nodes, v);
                        for ((o, &gv), &y) in buf.data_mut().iter_mut().zip(g.data()).zip(ov) {
                            *o += gv * y;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                if needs(a) {
                    let buf = Self::grad_buf(grads, nodes, a);
                    for (o, &gv) in buf.data_mut().iter_mut().zip(g.data()) {
                        *o += gv * c;
                    }
                }
            }
            Op::Sum(a) => {
                let a = *a;
                if needs(a) {
                    let gv = g.item();
                    for o in Self::grad_buf(grads, nodes, a).data_mut() {
                        *o += gv;
                    }
                }
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let (x, w) = (*x, *w);
                let mut dx = needs(x).then(|| Tensor::zeros(val(x).shape()));
                let mut dw = needs(w).then(|| Tensor::zeros(val(w).shape()));
                kernels::rms_norm_backward(
                    val(x).data(),
                    val(w).data(),
                    inv_rms,
                    g.data(),
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                );
                if let Some(dx) = dx {
                    Self::grad_buf(grads, nodes, x).add_assign(&dx).expect("shape");
                }
                if let Some(dw) = dw {
                    Self::grad_buf(grads, nodes, w).add_assign(&dw).expect("shape");
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                if needs(table) {
                    let d = g.cols();
                    let buf = Self::grad_buf(grads, nodes, table);
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut buf.data_mut()[id as usize * d..(id as usize + 1) * d];
                        for (o, &gv) in dst.iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::AddPeriodic { x, pos, period } => {
                let (x, pos, period) = (*x, *pos, *period);
                if needs(x) {
                    Self::grad_buf(grads, nodes, x).add_assign(g).expect("shape");
                }
                if needs(pos) {
                    let d = g.cols();
                    let buf = Self::grad_buf(grads, nodes, pos);
                    for r in 0..g.rows() {
                        let p = r % period;
                        for (o, &gv) in buf.data_mut()[p * d..(p + 1) * d].iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Rope { x, heads, seq, table } => {
                let x = *x;
                if needs(x) {
                    let d = g.cols();
                    let (heads, seq) = (*heads, *seq);
                    let table = table.clone();
                    let buf = Self::grad_buf(grads, nodes, x);
                    kernels::rope_apply(g.data(), buf.data_mut(), d, heads, seq, &table, true);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (q, k, v) = (*q, *k, *v);
                let shape = AttnShape {
                    batch: *batch,
                    seq: *seq,
                    heads: *heads,
                    d_model: g.cols(),
                };
                let mut dq = Tensor::zeros(g.shape());
                let mut dk = Tensor::zeros(g.shape());
                let mut dv = Tensor::zeros(g.shape());
                kernels::attention_backward(
                    val(q).data(),
                    val(k).data(),
                    val(v).data(),
                    probs,
                    g.data(),
                    &shape,
                    dq.data_mut(),
                    dk.data_mut(),
                    dv.data_mut(),
                );
                for (var, d) in [(q, dq), (k, dk), (v, dv)] {
                    if needs(var) {
                        Self::grad_buf(grads, nodes, var).add_assign(&d).expect("shape");
                    }
                }
            }
            Op::SwiGlu(gate, up) => {
                let (gate, up) = (*gate, *up);
                let mut dg = needs(gate).then(|| Tensor::zeros(g.shape()));
                let mut du = needs(up).then(|| Tensor::zeros(g.shape()));
                kernels::swiglu_backward(
                    val(gate).data(),
                    val(up).data(),
                    g.data(),
                    dg.as_mut().map(|t| t.data_mut()),
                    du.as_mut().map(|t| t.data_mut()),
                );
                if let Some(dg) = dg {
                    Self::grad_buf(grads, nodes, gate).add_assign(&dg).expect("shape");
                }
                if let Some(du) = du {
                    Self::grad_buf(grads, nodes, up).add_assign(&du).expect("shape");
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let logits = *logits;
                if needs(logits) {
                    let vocab = val(logits).cols();
                    let c = g.item() / T::from_f64(targets.len() as f64);
                    let buf = Self::grad_buf(grads, nodes, logits);
                    for (r, (row, pr)) in buf
                        .data_mut()
                        .chunks_exact_mut(vocab)
                        .zip(probs.chunks_exact(vocab))
                        .enumerate()
                    {
                        for (o, &p) in row.iter_mut().zip(pr) {
                            *o += c * p;
                        }
                        row[targets[r] as usize] -= c;
                    }
                }
            }
            Op::Kl {
                logits,
                target_probs,
                probs,
                tau,
            } => {
                let logits = *logits;
                if needs(logits) {
                    let rows = val(logits).rows();
                    let c = g.item() * *tau / T::from_f64(rows as f64);
                    let buf = Self::grad_buf(grads, nodes, logits);
                    for ((o, &ps), &pt) in buf.data_mut().iter_mut().zip(probs).zip(target_probs) {
                        *o += c * (ps - pt);
                    }
                }
            }
            Op::Cosine {
                x,
                target,
                cos,
                x_norm,
                t_norm,
            } => {
                let x = *x;
                if needs(x) {
                    let d = val(x).cols();
                    let rows = val(x).rows();
                    let c = -g.item() / T::from_f64(rows as f64);
                    let xs = val(x).data();
                    let target = target.clone();
                    let buf = Self::grad_buf(grads, nodes, x);
                    for r in 0..rows {
                        let (nx, nt, cr) = (x_norm[r], t_norm[r], cos[r]);
                        let a = T::ONE / (nx * nt);
                        let b = cr / (nx * nx);
                        let xr = &xs[r * d..(r + 1) * d];
                        let tr = target.row(r);
                        for ((o, &xv), &tv) in buf.data_mut()[r * d..(r + 1) * d].iter_mut().zip(xr).zip(tr) {
                            *o += c * (tv * a - xv * b);
                        }
                    }
                }
            }
        }
    }
}
