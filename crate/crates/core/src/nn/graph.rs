//! Reverse-mode automatic differentiation over a flat tape.
//!
//! A [`Graph`] borrows a [`ParamStore`] and records every operation in
//! evaluation order. `backward` walks the tape in reverse and returns
//! [`Gradients`] keyed by parameter id. Operations are coarse (fused layer
//! norm, fused attention, fused softmax cross-entropy) so the tape stays
//! short and each backward rule can be checked in isolation.

use super::tensor::{gemm, MatRef};
use super::{Gradients, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One attention problem inside a packed batch: query rows
/// `q_start..q_start+q_len` attend key rows `k_start..k_start+k_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Clone, Debug)]
pub struct AttnSpec {
    pub segments: Vec<AttnSegment>,
    pub n_heads: usize,
    /// Query `i` sees keys `0..=i + (k_len - q_len)` when set.
    pub causal: bool,
}

impl AttnSpec {
    /// Self-attention over consecutive packed sequences.
    pub fn self_attention(lens: &[usize], n_heads: usize, causal: bool) -> Self {
        let mut start = 0;
        let segments = lens
            .iter()
            .map(|&len| {
                let s = AttnSegment {
                    q_start: start,
                    q_len: len,
                    k_start: start,
                    k_len: len,
                };
                start += len;
                s
            })
            .collect();
        Self {
            segments,
            n_heads,
            causal,
        }
    }

    /// Cross-attention: query sequences attend the matching key sequences.
    pub fn cross_attention(q_lens: &[usize], k_lens: &[usize], n_heads: usize) -> Self {
        assert_eq!(q_lens.len(), k_lens.len());
        let (mut qs, mut ks) = (0, 0);
        let segments = q_lens
            .iter()
            .zip(k_lens)
            .map(|(&ql, &kl)| {
                let s = AttnSegment {
                    q_start: qs,
                    q_len: ql,
                    k_start: ks,
                    k_len: kl,
                };
                qs += ql;
                ks += kl;
                s
            })
            .collect();
        Self {
            segments,
            n_heads,
            causal: false,
        }
    }
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Tanh(Var),
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttnSpec,
        probs: Vec<Tensor>,
    },
    Rows(Vec<(Var, usize)>),
    MeanRows {
        x: Var,
        segments: Vec<(usize, usize)>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Tensor,
    },
    Mse {
        x: Var,
        target: Tensor,
    },
}

struct Node {
    value: Value,
    op: Op,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.tensor(*id),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter leaf looked up by name. Panics on a missing name; model
    /// code only asks for names it registered itself.
    pub fn named(&mut self, name: &str) -> Var {
        let id = self
            .store
            .id(name)
            .unwrap_or_else(|_| panic!("parameter {name} not registered"));
        self.param(id)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1);
        let mut out = self.value(x).clone();
        assert_eq!(out.cols(), b.cols());
        let bd = b.data().to_vec();
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&bd) {
                *o += bv;
            }
        }
        self.push(out, Op::AddBias(x, bias))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut xhat = Tensor::zeros(n, d);
        let mut out = Tensor::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for c in 0..d {
                xh[c] = (row[c] - mean) * is;
            }
            let o = out.row_mut(r);
            for c in 0..d {
                o[c] = xh[c] * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()));
        self.push(out, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    /// Gather rows of `table` by index.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let out = self.value(table).select_rows(ids.iter().copied());
        self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Build a tensor from rows of other nodes.
    pub fn rows(&mut self, parts: Vec<(Var, usize)>) -> Var {
        let cols = parts.first().map_or(0, |(v, _)| self.value(*v).cols());
        let mut data = Vec::with_capacity(parts.len() * cols);
        for (v, r) in &parts {
            data.extend_from_slice(self.value(*v).row(*r));
        }
        let out = Tensor::from_vec(parts.len(), cols, data);
        self.push(out, Op::Rows(parts))
    }

    /// Mean over row ranges `(start, len)`, one output row per range.
    pub fn mean_rows(&mut self, x: Var, segments: &[(usize, usize)]) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = Tensor::zeros(segments.len(), d);
        for (i, &(s, l)) in segments.iter().enumerate() {
            let o = out.row_mut(i);
            for r in s..s + l {
                for (ov, xv) in o.iter_mut().zip(xv.row(r)) {
                    *ov += xv;
                }
            }
            for ov in o.iter_mut() {
                *ov /= l as f64;
            }
        }
        self.push(
            out,
            Op::MeanRows {
                x,
                segments: segments.to_vec(),
            },
        )
    }

    /// Scaled dot-product multi-head attention over packed sequences.
    /// `q` is `[sum q_len, d]`, `k` and `v` are `[sum k_len, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: &AttnSpec) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert_eq!(kv.cols(), d);
        assert_eq!(vv.cols(), d);
        assert_eq!(d % spec.n_heads, 0);
        let dh = d / spec.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(qv.rows(), d);
        let mut probs = Vec::with_capacity(spec.segments.len() * spec.n_heads);
        for seg in &spec.segments {
            for h in 0..spec.n_heads {
                let off = h * dh;
                let mut p = Tensor::zeros(seg.q_len, seg.k_len);
                gemm(
                    seg.q_len,
                    dh,
                    seg.k_len,
                    MatRef::new(&qv.data()[seg.q_start * d + off..], d, 1),
                    MatRef::new(&kv.data()[seg.k_start * d + off..], 1, d),
                    p.data_mut(),
                    seg.k_len,
                    0.0,
                );
                let shift = seg.k_len as isize - seg.q_len as isize;
                for i in 0..seg.q_len {
                    let visible = if spec.causal {
                        ((i as isize + shift + 1).clamp(0, seg.k_len as isize)) as usize
                    } else {
                        seg.k_len
                    };
                    let row = p.row_mut(i);
                    let mut mx = f64::NEG_INFINITY;
                    for s in row[..visible].iter_mut() {
                        *s *= scale;
                        mx = mx.max(*s);
                    }
                    let mut sum = 0.0;
                    for s in row[..visible].iter_mut() {
                        *s = (*s - mx).exp();
                        sum += *s;
                    }
                    for s in row[..visible].iter_mut() {
                        *s /= sum;
                    }
                    for s in row[visible..].iter_mut() {
                        *s = 0.0;
                    }
                }
                gemm(
                    seg.q_len,
                    seg.k_len,
                    dh,
                    MatRef::new(p.data(), seg.k_len, 1),
                    MatRef::new(&vv.data()[seg.k_start * d + off..], d, 1),
                    &mut out.data_mut()[seg.q_start * d + off..],
                    d,
                    0.0,
                );
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                spec: spec.clone(),
                probs,
            },
        )
    }

    /// Mean softmax cross-entropy over `(row, class)` targets, in nats.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Var {
        assert!(!targets.is_empty(), "cross_entropy needs targets");
        let lv = self.value(logits);
        let c = lv.cols();
        let mut probs = Tensor::zeros(targets.len(), c);
        let mut total = 0.0;
        for (i, &(r, t)) in targets.iter().enumerate() {
            let row = lv.row(r);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = probs.row_mut(i);
            let mut sum = 0.0;
            for (pv, &l) in p.iter_mut().zip(row) {
                *pv = (l - mx).exp();
                sum += *pv;
            }
            for pv in p.iter_mut() {
                *pv /= sum;
            }
            total += -(row[t] - mx - sum.ln());
        }
        let loss = Tensor::scalar(total / targets.len() as f64);
        self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Mean squared error over every element.
    pub fn mse(&mut self, x: Var, target: Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape());
        let n = xv.len().max(1) as f64;
        let s: f64 = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        self.push(Tensor::scalar(s / n), Op::Mse { x, target })
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::new(self.store.len());

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Value::Param(id) = node.value {
                out.accumulate(id, &dy);
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = dy.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&dy);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = dy.matmul(self.value(*b));
                    let db = dy.t_matmul(self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, dy.clone());
                    acc(&mut grads, *a, dy);
                }
                Op::AddBias(x, bias) => {
                    let mut db = Tensor::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for (o, g) in db.data_mut().iter_mut().zip(dy.row(r)) {
                            *o += g;
                        }
                    }
                    acc(&mut grads, *bias, db);
                    acc(&mut grads, *x, dy);
                }
                Op::Scale(x, s) => {
                    acc(&mut grads, *x, dy.map(|g| g * s));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let g = self.value(*gamma).data();
                    let (n, d) = dy.shape();
                    let mut dg = Tensor::zeros(1, d);
                    let mut db = Tensor::zeros(1, d);
                    let mut dx = Tensor::zeros(n, d);
                    let mut dxh = vec![0.0; d];
                    for r in 0..n {
                        let dyr = dy.row(r);
                        let xh = xhat.row(r);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..d {
                            dg.data_mut()[c] += dyr[c] * xh[c];
                            db.data_mut()[c] += dyr[c];
                            dxh[c] = dyr[c] * g[c];
                            m1 += dxh[c];
                            m2 += dxh[c] * xh[c];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        let o = dx.row_mut(r);
                        for c in 0..d {
                            o[c] = inv_std[r] * (dxh[c] - m1 - xh[c] * m2);
                        }
                    }
                    acc(&mut grads, *gamma, dg);
                    acc(&mut grads, *beta, db);
                    acc(&mut grads, *x, dx);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut dx = dy;
                    for (g, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        *g *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let y = self.value(Var(idx));
                    let mut dx = dy;
                    for (g, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                        *g *= 1.0 - yv * yv;
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Embed { table, ids } => {
                    let tv = self.value(*table);
                    let mut dt = Tensor::zeros(tv.rows(), tv.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, g) in dt.row_mut(id).iter_mut().zip(dy.row(r)) {
                            *o += g;
                        }
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::Rows(parts) => {
                    // Group by source node so each source gets one dense buffer.
                    let mut order: Vec<Var> = Vec::new();
                    for (v, _) in parts {
                        if !order.contains(v) {
                            order.push(*v);
                        }
                    }
                    for src in order {
                        let sv = self.value(src);
                        let mut ds = Tensor::zeros(sv.rows(), sv.cols());
                        for (i, (v, r)) in parts.iter().enumerate() {
                            if *v == src {
                                for (o, g) in ds.row_mut(*r).iter_mut().zip(dy.row(i)) {
                                    *o += g;
                                }
                            }
                        }
                        acc(&mut grads, src, ds);
                    }
                }
                Op::MeanRows { x, segments } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for (i, &(s, l)) in segments.iter().enumerate() {
                        let inv = 1.0 / l as f64;
                        for r in s..s + l {
                            for (o, g) in dx.row_mut(r).iter_mut().zip(dy.row(i)) {
                                *o += g * inv;
                            }
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    spec,
                    probs,
                } => {
                    let (dq, dk, dv) = self.attention_backward(*q, *k, *v, spec, probs, &dy);
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let lv = self.value(*logits);
                    let scale = dy.item() / targets.len() as f64;
                    let mut dl = Tensor::zeros(lv.rows(), lv.cols());
                    for (i, &(r, t)) in targets.iter().enumerate() {
                        let o = dl.row_mut(r);
                        for (ov, p) in o.iter_mut().zip(probs.row(i)) {
                            *ov += p * scale;
                        }
                        o[t] -= scale;
                    }
                    acc(&mut grads, *logits, dl);
                }
                Op::Mse { x, target } => {
                    let xv = self.value(*x);
                    let s = 2.0 * dy.item() / xv.len().max(1) as f64;
                    let dx = Tensor::from_vec(
                        xv.rows(),
                        xv.cols(),
                        xv.data()
                            .iter()
                            .zip(target.data())
                            .map(|(a, b)| s * (a - b))
                            .collect(),
                    );
                    acc(&mut grads, *x, dx);
                }
            }
        }
        out
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttnSpec,
        probs: &[Tensor],
        dy: &Tensor,
    ) -> (Tensor, Tensor, Tensor) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dh = d / spec.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Tensor::zeros(qv.rows(), d);
        let mut dk = Tensor::zeros(kv.rows(), d);
        let mut dv = Tensor::zeros(vv.rows(), d);
        let mut pi = 0;
        for seg in &spec.segments {
            for h in 0..spec.n_heads {
                let off = h * dh;
                let p = &probs[pi];
                pi += 1;
                // dP = dO * V^T
                let mut dp = Tensor::zeros(seg.q_len, seg.k_len);
                gemm(
                    seg.q_len,
                    dh,
                    seg.k_len,
                    MatRef::new(&dy.data()[seg.q_start * d + off..], d, 1),
                    MatRef::new(&vv.data()[seg.k_start * d + off..], 1, d),
                    dp.data_mut(),
                    seg.k_len,
                    0.0,
                );
                // dV += P^T * dO
                gemm(
                    seg.k_len,
                    seg.q_len,
                    dh,
                    MatRef::new(p.data(), 1, seg.k_len),
                    MatRef::new(&dy.data()[seg.q_start * d + off..], d, 1),
                    &mut dv.data_mut()[seg.k_start * d + off..],
                    d,
                    1.0,
                );
                // dS = P * (dP - rowsum(dP * P)), folded with the score scale.
                for i in 0..seg.q_len {
                    let pr = p.row(i);
                    let dpr = dp.row_mut(i);
                    let dot: f64 = pr.iter().zip(dpr.iter()).map(|(a, b)| a * b).sum();
                    for (g, &pv) in dpr.iter_mut().zip(pr) {
                        *g = pv * (*g - dot) * scale;
                    }
                }
                // dQ += dS * K
                gemm(
                    seg.q_len,
                    seg.k_len,
                    dh,
                    MatRef::new(dp.data(), seg.k_len, 1),
                    MatRef::new(&kv.data()[seg.k_start * d + off..], d, 1),
                    &mut dq.data_mut()[seg.q_start * d + off..],
                    d,
                    1.0,
                );
                // dK += dS^T * Q
                gemm(
                    seg.k_len,
                    seg.q_len,
                    dh,
                    MatRef::new(dp.data(), 1, seg.k_len),
                    MatRef::new(&qv.data()[seg.q_start * d + off..], d, 1),
                    &mut dk.data_mut()[seg.k_start * d + off..],
                    d,
                    1.0,
                );
            }
        }
        (dq, dk, dv)
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
