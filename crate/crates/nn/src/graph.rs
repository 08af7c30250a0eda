//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op as it is evaluated; [`Graph::backward`] walks
//! the tape in reverse. Graphs are built fresh for each step and dropped.

use std::collections::HashMap;

use crate::kernels::{self, ConvGeom};
use crate::{Float, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row span of one independent sequence inside a packed `[rows, d]` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Abs(Var),
    Square(Var),
    Silu(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    GatherRows {
        inputs: Vec<Var>,
        picks: Vec<(usize, usize)>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Upsample2x(Var),
    NchwToRows(Var),
    RowsToNchw(Var),
    CausalAttention {
        qkv: Var,
        heads: usize,
        segments: Vec<Segment>,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
    },
    StraightThrough(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradients (for checks against inputs).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Inserts a parameter once per graph; frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, store.is_trainable(id));
        self.params.insert(id, v);
        v
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, what: &str) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "{what}: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x + y, "add");
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x - y, "sub");
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x * y, "mul");
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// `x[..., n] + b[n]`, broadcasting over all leading axes.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let tx = self.value(x);
        let tb = self.value(b);
        let n = tb.numel();
        assert_eq!(*tx.shape().last().unwrap(), n, "add_bias: bias length mismatch");
        let mut t = tx.clone();
        for row in t.data_mut().chunks_exact_mut(n) {
            for (v, &bv) in row.iter_mut().zip(tb.data()) {
                *v += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(t, Op::AddBias(x, b), rg)
    }

    /// `[m, k] @ [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape().len(), 2, "matmul: lhs must be 2-D");
        assert_eq!(tb.shape().len(), 2, "matmul: rhs must be 2-D");
        let (m, k) = (ta.dim(0), ta.dim(1));
        let (k2, n) = (tb.dim(0), tb.dim(1));
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut out = vec![T::ZERO; m * n];
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            (ta.data(), k as isize, 1),
            (tb.data(), n as isize, 1),
            T::ZERO,
            (&mut out, n as isize, 1),
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new([m, n], out), Op::MatMul(a, b), rg)
    }

    /// `x @ w + b` for `x: [m, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_bias(y, b),
            None => y,
        }
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::silu, Op::Silu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::gelu, Op::Gelu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert!(t.numel() > 0, "mean of an empty tensor");
        let s = t.sum() / T::from_f64(t.numel() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshape(shape.to_vec());
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg)
    }

    /// Builds a `[picks.len(), d]` tensor whose row `r` is row `picks[r].1` of
    /// `inputs[picks[r].0]`. All inputs must be 2-D with the same width.
    pub fn gather_rows(&mut self, inputs: &[Var], picks: Vec<(usize, usize)>) -> Var {
        assert!(!inputs.is_empty(), "gather_rows needs at least one input");
        let d = self.value(inputs[0]).dim(1);
        for &v in inputs {
            let s = self.shape(v);
            assert!(s.len() == 2 && s[1] == d, "gather_rows: inputs must be [_, {d}], got {s:?}");
        }
        let mut data = Vec::with_capacity(picks.len() * d);
        for &(src, row) in &picks {
            data.extend_from_slice(self.value(inputs[src]).row(row));
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        let t = Tensor::new([picks.len(), d], data);
        self.push(
            t,
            Op::GatherRows {
                inputs: inputs.to_vec(),
                picks,
            },
            rg,
        )
    }

    /// Embedding lookup / row selection from a single table.
    pub fn index_rows(&mut self, table: Var, rows: &[usize]) -> Var {
        self.gather_rows(&[table], rows.iter().map(|&r| (0, r)).collect())
    }

    /// Layer normalization over the last axis of a 2-D tensor.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.shape().len(), 2, "layer_norm expects [rows, d]");
        let d = tx.dim(1);
        let (mean, rstd) = kernels::group_stats(tx.data(), d, eps);
        let (tg, tb) = (self.value(gamma), self.value(beta));
        let mut out = tx.clone();
        for (r, row) in out.data_mut().chunks_exact_mut(d).enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[r]) * rstd[r] * tg.data()[j] + tb.data()[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            rg,
        )
    }

    /// Group normalization of an NCHW tensor with per-channel affine terms.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let tx = self.value(x);
        let [_, c, h, w] = dims4(tx.shape());
        assert!(c % groups == 0, "group_norm: {c} channels not divisible by {groups} groups");
        let group_len = (c / groups) * h * w;
        let (mean, rstd) = kernels::group_stats(tx.data(), group_len, eps);
        let (tg, tb) = (self.value(gamma), self.value(beta));
        let mut out = tx.clone();
        for (plane_idx, plane) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
            let ch = plane_idx % c;
            let grp = plane_idx / (c / groups);
            let (m, r) = (mean[grp], rstd[grp]);
            let (gv, bv) = (tg.data()[ch], tb.data()[ch]);
            for v in plane.iter_mut() {
                *v = (*v - m) * r * gv + bv;
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            rg,
        )
    }

    /// NCHW convolution with square kernel; `w: [Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let tx = self.value(x);
        let tw = self.value(w);
        let [n, c, h, wd] = dims4(tx.shape());
        let [cout, cin, k, k2] = dims4(tw.shape());
        assert_eq!(c, cin, "conv2d: input has {c} channels, weight expects {cin}");
        assert_eq!(k, k2, "conv2d: only square kernels");
        let geom = ConvGeom::new(c, h, wd, k, stride, pad);
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv2d_forward(tx.data(), n, &geom, tw.data(), bias, cout);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::new([n, cout, geom.out_h, geom.out_w], out),
            Op::Conv2d { x, w, b, geom },
            rg,
        )
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let [n, c, h, w] = dims4(tx.shape());
        let mut out = vec![T::ZERO; n * c * 4 * h * w];
        for (p, plane) in tx.data().chunks_exact(h * w).enumerate() {
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new([n, c, 2 * h, 2 * w], out), Op::Upsample2x(x), rg)
    }

    /// `[N, C, H, W]` -> `[N*H*W, C]` (one row per spatial position, row-major).
    pub fn nchw_to_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let t = nchw_to_rows_data(tx);
        let rg = self.rg(x);
        self.push(t, Op::NchwToRows(x), rg)
    }

    /// Inverse of [`Graph::nchw_to_rows`].
    pub fn rows_to_nchw(&mut self, x: Var, n: usize, h: usize, w: usize) -> Var {
        let t = rows_to_nchw_data(self.value(x), n, h, w);
        let rg = self.rg(x);
        self.push(t, Op::RowsToNchw(x), rg)
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `qkv` is `[rows, 3d]` laid out as `[q | k | v]`; each segment attends
    /// only within itself, position `t` to positions `<= t`.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize, segments: &[Segment]) -> Var {
        let t = self.value(qkv);
        let rows = t.dim(0);
        let d3 = t.dim(1);
        assert!(d3 % 3 == 0, "causal_attention: width {d3} is not 3*d");
        let d = d3 / 3;
        assert!(d % heads == 0, "causal_attention: d={d} not divisible by {heads} heads");
        check_segments(segments, rows);
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let prob_len: usize = segments.iter().map(|s| s.len * s.len).sum::<usize>() * heads;
        let mut probs = vec![T::ZERO; prob_len];
        let mut out = vec![T::ZERO; rows * d];
        let src = t.data();
        let mut off = 0;
        for seg in segments {
            let l = seg.len;
            for hd in 0..heads {
                let p = &mut probs[off..off + l * l];
                off += l * l;
                let q = &src[seg.start * d3 + hd * dh..];
                let k = &src[seg.start * d3 + d + hd * dh..];
                let v = &src[seg.start * d3 + 2 * d + hd * dh..];
                T::gemm(l, dh, l, scale, (q, d3 as isize, 1), (k, 1, d3 as isize), T::ZERO, (p, l as isize, 1));
                for r in 0..l {
                    let row = &mut p[r * l..(r + 1) * l];
                    kernels::softmax_in_place(&mut row[..=r]);
                    row[r + 1..].fill(T::ZERO);
                }
                let o = &mut out[seg.start * d + hd * dh..];
                T::gemm(l, l, dh, T::ONE, (p, l as isize, 1), (v, d3 as isize, 1), T::ZERO, (o, d as isize, 1));
            }
        }
        let rg = self.rg(qkv);
        self.push(
            Tensor::new([rows, d], out),
            Op::CausalAttention {
                qkv,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Summed softmax cross-entropy over the rows that carry a target.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let t = self.value(logits);
        assert_eq!(t.shape().len(), 2, "cross_entropy expects [rows, classes]");
        let (rows, classes) = (t.dim(0), t.dim(1));
        assert_eq!(rows, targets.len(), "cross_entropy: one target slot per row");
        let mut probs = t.data().to_vec();
        let mut total = T::ZERO;
        for (r, target) in targets.iter().enumerate() {
            let Some(tgt) = *target else { continue };
            assert!(tgt < classes, "cross_entropy: target {tgt} >= {classes} classes");
            let row = &mut probs[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::from_f64(f64::NEG_INFINITY), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[tgt];
            kernels::softmax_in_place(row);
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Forward value `value`, gradient passed unchanged to `x` (straight-through).
    pub fn straight_through(&mut self, x: Var, value: Tensor<T>) -> Var {
        assert_eq!(self.shape(x), value.shape(), "straight_through: shape mismatch");
        let rg = self.rg(x);
        self.push(value, Op::StraightThrough(x), rg)
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![T::ONE]));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads {
            grads,
            params: self.params.clone(),
        }
    }

    fn backward_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, zip_map(g, tb, |gv, bv| gv * bv));
                }
                if self.rg(*b) {
                    acc(*b, zip_map(g, ta, |gv, av| gv * av));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|v| v * *s)),
            Op::AddBias(x, b) => {
                acc(*x, g.clone());
                if self.rg(*b) {
                    let n = self.value(*b).numel();
                    let mut db = vec![T::ZERO; n];
                    for row in g.data().chunks_exact(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*b, Tensor::new(self.shape(*b).to_vec(), db));
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.dim(0), ta.dim(1), tb.dim(1));
                if self.rg(*a) {
                    let mut da = vec![T::ZERO; m * k];
                    T::gemm(m, n, k, T::ONE, (g.data(), n as isize, 1), (tb.data(), 1, n as isize), T::ZERO, (&mut da, k as isize, 1));
                    acc(*a, Tensor::new([m, k], da));
                }
                if self.rg(*b) {
                    let mut db = vec![T::ZERO; k * n];
                    T::gemm(k, m, n, T::ONE, (ta.data(), 1, k as isize), (g.data(), n as isize, 1), T::ZERO, (&mut db, n as isize, 1));
                    acc(*b, Tensor::new([k, n], db));
                }
            }
            Op::Abs(a) => {
                let ta = self.value(*a);
                acc(*a, zip_map(g, ta, |gv, x| if x > T::ZERO { gv } else if x < T::ZERO { -gv } else { T::ZERO }));
            }
            Op::Square(a) => {
                let two = T::from_f64(2.0);
                acc(*a, zip_map(g, self.value(*a), |gv, x| two * x * gv));
            }
            Op::Silu(a) => acc(*a, zip_map(g, self.value(*a), |gv, x| gv * kernels::silu_grad(x))),
            Op::Gelu(a) => acc(*a, zip_map(g, self.value(*a), |gv, x| gv * kernels::gelu_grad(x))),
            Op::Sum(a) => {
                let gv = g.item();
                acc(*a, Tensor::full(self.shape(*a).to_vec(), gv));
            }
            Op::Mean(a) => {
                let n = T::from_f64(self.value(*a).numel() as f64);
                acc(*a, Tensor::full(self.shape(*a).to_vec(), g.item() / n));
            }
            Op::Reshape(a) => acc(*a, g.clone().reshape(self.shape(*a).to_vec())),
            Op::GatherRows { inputs, picks } => {
                let d = g.dim(1);
                let mut parts: Vec<Option<Tensor<T>>> = inputs
                    .iter()
                    .map(|&v| self.rg(v).then(|| Tensor::zeros(self.shape(v).to_vec())))
                    .collect();
                for (r, &(src, row)) in picks.iter().enumerate() {
                    if let Some(part) = parts[src].as_mut() {
                        let dst = &mut part.data_mut()[row * d..(row + 1) * d];
                        for (o, &v) in dst.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                for (&v, part) in inputs.iter().zip(parts) {
                    if let Some(p) = part {
                        acc(v, p);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let tx = self.value(*x);
                let tg = self.value(*gamma);
                let d = tx.dim(1);
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![T::ZERO; d];
                    let mut dbeta = vec![T::ZERO; d];
                    for (r, (xr, gr)) in tx.data().chunks_exact(d).zip(g.data().chunks_exact(d)).enumerate() {
                        for j in 0..d {
                            dg[j] += gr[j] * (xr[j] - mean[r]) * rstd[r];
                            dbeta[j] += gr[j];
                        }
                    }
                    acc(*gamma, Tensor::new([d], dg));
                    acc(*beta, Tensor::new([d], dbeta));
                }
                if self.rg(*x) {
                    let mut dx = vec![T::ZERO; tx.numel()];
                    let mut dxhat = vec![T::ZERO; d];
                    for (r, ((xr, gr), dxr)) in tx
                        .data()
                        .chunks_exact(d)
                        .zip(g.data().chunks_exact(d))
                        .zip(dx.chunks_exact_mut(d))
                        .enumerate()
                    {
                        for j in 0..d {
                            dxhat[j] = gr[j] * tg.data()[j];
                        }
                        kernels::norm_backward_group(xr, &dxhat, mean[r], rstd[r], dxr);
                    }
                    acc(*x, Tensor::new(tx.shape().to_vec(), dx));
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let tx = self.value(*x);
                let tg = self.value(*gamma);
                let [_, c, h, w] = dims4(tx.shape());
                let hw = h * w;
                let cpg = c / groups;
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![T::ZERO; c];
                    let mut dbeta = vec![T::ZERO; c];
                    for (p, (xp, gp)) in tx.data().chunks_exact(hw).zip(g.data().chunks_exact(hw)).enumerate() {
                        let ch = p % c;
                        let grp = p / cpg;
                        for (&xv, &gv) in xp.iter().zip(gp) {
                            dg[ch] += gv * (xv - mean[grp]) * rstd[grp];
                            dbeta[ch] += gv;
                        }
                    }
                    acc(*gamma, Tensor::new([c], dg));
                    acc(*beta, Tensor::new([c], dbeta));
                }
                if self.rg(*x) {
                    let group_len = cpg * hw;
                    let mut dx = vec![T::ZERO; tx.numel()];
                    let mut dxhat = vec![T::ZERO; group_len];
                    for (grp, ((xg, gg), dxg)) in tx
                        .data()
                        .chunks_exact(group_len)
                        .zip(g.data().chunks_exact(group_len))
                        .zip(dx.chunks_exact_mut(group_len))
                        .enumerate()
                    {
                        let first_ch = (grp % groups) * cpg;
                        for (i, d) in dxhat.iter_mut().enumerate() {
                            *d = gg[i] * tg.data()[first_ch + i / hw];
                        }
                        kernels::norm_backward_group(xg, &dxhat, mean[grp], rstd[grp], dxg);
                    }
                    acc(*x, Tensor::new(tx.shape().to_vec(), dx));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let tx = self.value(*x);
                let tw = self.value(*w);
                let n = tx.dim(0);
                let cout = tw.dim(0);
                let mut dx = self.rg(*x).then(|| vec![T::ZERO; tx.numel()]);
                let mut dw = self.rg(*w).then(|| vec![T::ZERO; tw.numel()]);
                let mut db = b.filter(|b| self.rg(*b)).map(|_| vec![T::ZERO; cout]);
                kernels::conv2d_backward(
                    tx.data(),
                    n,
                    geom,
                    tw.data(),
                    cout,
                    g.data(),
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    acc(*x, Tensor::new(tx.shape().to_vec(), dx));
                }
                if let Some(dw) = dw {
                    acc(*w, Tensor::new(tw.shape().to_vec(), dw));
                }
                if let (Some(b), Some(db)) = (b, db) {
                    acc(*b, Tensor::new([cout], db));
                }
            }
            Op::Upsample2x(x) => {
                let [n, c, h, w] = dims4(self.shape(*x));
                let mut dx = vec![T::ZERO; n * c * h * w];
                for (p, gp) in g.data().chunks_exact(4 * h * w).enumerate() {
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += gp[y * 2 * w + xx];
                        }
                    }
                }
                acc(*x, Tensor::new([n, c, h, w], dx));
            }
            Op::NchwToRows(x) => {
                let [n, _, h, w] = dims4(self.shape(*x));
                acc(*x, rows_to_nchw_data(g, n, h, w));
            }
            Op::RowsToNchw(x) => acc(*x, nchw_to_rows_data(g)),
            Op::CausalAttention {
                qkv,
                heads,
                segments,
                probs,
            } => {
                let t = self.value(*qkv);
                let d3 = t.dim(1);
                let d = d3 / 3;
                let dh = d / heads;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let src = t.data();
                let go = g.data();
                let mut dqkv = vec![T::ZERO; t.numel()];
                let maxl = segments.iter().map(|s| s.len).max().unwrap_or(0);
                let mut dp = vec![T::ZERO; maxl * maxl];
                let mut off = 0;
                for seg in segments {
                    let l = seg.len;
                    for hd in 0..*heads {
                        let p = &probs[off..off + l * l];
                        off += l * l;
                        let base = seg.start * d3 + hd * dh;
                        let obase = seg.start * d + hd * dh;
                        let dpl = &mut dp[..l * l];
                        // dP = dO @ V^T
                        T::gemm(l, dh, l, T::ONE, (&go[obase..], d as isize, 1), (&src[base + 2 * d..], 1, d3 as isize), T::ZERO, (dpl, l as isize, 1));
                        // dS = P * (dP - rowsum(dP * P)), folded with the score scale.
                        for r in 0..l {
                            let pr = &p[r * l..(r + 1) * l];
                            let dr = &mut dpl[r * l..(r + 1) * l];
                            let dot: T = pr[..=r].iter().zip(&dr[..=r]).map(|(&a, &b)| a * b).sum();
                            for c in 0..=r {
                                dr[c] = pr[c] * (dr[c] - dot) * scale;
                            }
                            dr[r + 1..].fill(T::ZERO);
                        }
                        let ds: &[T] = dpl;
                        // dQ = dS @ K
                        T::gemm(l, l, dh, T::ONE, (ds, l as isize, 1), (&src[base + d..], d3 as isize, 1), T::ONE, (&mut dqkv[base..], d3 as isize, 1));
                        // dK = dS^T @ Q
                        T::gemm(l, l, dh, T::ONE, (ds, 1, l as isize), (&src[base..], d3 as isize, 1), T::ONE, (&mut dqkv[base + d..], d3 as isize, 1));
                        // dV = P^T @ dO
                        T::gemm(l, l, dh, T::ONE, (p, 1, l as isize), (&go[obase..], d as isize, 1), T::ONE, (&mut dqkv[base + 2 * d..], d3 as isize, 1));
                    }
                }
                acc(*qkv, Tensor::new(t.shape().to_vec(), dqkv));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let t = self.value(*logits);
                let classes = t.dim(1);
                let gv = g.item();
                let mut dl = vec![T::ZERO; t.numel()];
                for (r, target) in targets.iter().enumerate() {
                    let Some(tgt) = *target else { continue };
                    let dst = &mut dl[r * classes..(r + 1) * classes];
                    for (o, &p) in dst.iter_mut().zip(&probs[r * classes..(r + 1) * classes]) {
                        *o = p * gv;
                    }
                    dst[tgt] -= gv;
                }
                acc(*logits, Tensor::new(t.shape().to_vec(), dl));
            }
            Op::StraightThrough(x) => acc(*x, g.clone()),
        }
    }
}

fn zip_map<T: Float>(g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new(
        g.shape().to_vec(),
        g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect(),
    )
}

fn dims4(shape: &[usize]) -> [usize; 4] {
    shape
        .try_into()
        .unwrap_or_else(|_| panic!("expected a 4-D tensor, got shape {shape:?}"))
}

fn check_segments(segments: &[Segment], rows: usize) {
    let mut next = 0;
    for s in segments {
        assert!(s.start >= next, "segments must be sorted and disjoint");
        next = s.start + s.len;
    }
    assert!(next <= rows, "segments exceed {rows} rows");
}

fn nchw_to_rows_data<T: Float>(t: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = dims4(t.shape());
    let hw = h * w;
    let mut out = vec![T::ZERO; t.numel()];
    for b in 0..n {
        for ch in 0..c {
            let plane = &t.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for (p, &v) in plane.iter().enumerate() {
                out[(b * hw + p) * c + ch] = v;
            }
        }
    }
    Tensor::new([n * hw, c], out)
}

fn rows_to_nchw_data<T: Float>(t: &Tensor<T>, n: usize, h: usize, w: usize) -> Tensor<T> {
    assert_eq!(t.shape().len(), 2, "rows_to_nchw expects [rows, c]");
    let c = t.dim(1);
    assert_eq!(t.dim(0), n * h * w, "rows_to_nchw: row count mismatch");
    let hw = h * w;
    let mut out = vec![T::ZERO; t.numel()];
    for b in 0..n {
        for p in 0..hw {
            let row = t.row(b * hw + p);
            for (ch, &v) in row.iter().enumerate() {
                out[(b * c + ch) * hw + p] = v;
            }
        }
    }
    Tensor::new([n, c, h, w], out)
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Float> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter that took part in the graph, if any reached it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&v| self.get(v))
    }

    /// All parameter gradients, ordered by parameter id.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Tensor<T>)> {
        let mut ids: Vec<_> = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        ids.sort_by_key(|(id, _)| *id);
        ids.into_iter()
            .filter_map(|(id, v)| self.grads[v.0].take().map(|g| (id, g)))
            .collect()
    }
}
