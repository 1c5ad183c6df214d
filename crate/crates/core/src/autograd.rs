//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a weight set rather than copied; [`Graph::backward`] walks the
//! tape in reverse and returns exact gradients for every parameter.

use crate::error::{Error, Result};
use crate::scalar::sigmoid;
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, strides, Tensor};
use crate::Scalar;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value<T> {
    Owned(Tensor<T>),
    Param(usize),
}

enum Op<T> {
    Input,
    Param(usize),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Silu(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Softmax(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Upsample(Var),
    WeightedMse {
        pred: Var,
        target: Tensor<T>,
        weights: Option<Tensor<T>>,
        denom: T,
    },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
}

pub struct Graph<'w, T> {
    params: &'w [Tensor<T>],
    nodes: Vec<Node<T>>,
}

/// Result of a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of parameter `idx`; `None` when the loss does not depend on it.
    pub fn param(&self, idx: usize) -> Option<&Tensor<T>> {
        self.params.get(idx).and_then(|g| g.as_ref())
    }

    pub fn var(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Dense gradients in parameter order, zero-filled where absent.
    pub fn into_param_grads(self, params: &[Tensor<T>]) -> Vec<Tensor<T>> {
        self.params
            .into_iter()
            .zip(params)
            .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }
}

impl<'w, T: Scalar> Graph<'w, T> {
    pub fn new(params: &'w [Tensor<T>]) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(i) => &self.params[*i],
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, idx: usize) -> Var {
        assert!(idx < self.params.len(), "parameter {idx} out of range");
        self.nodes.push(Node {
            value: Value::Param(idx),
            op: Op::Param(idx),
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, ())> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(ta.shape(), tb.shape())?;
        let sa = broadcast_strides(ta.shape(), &out_shape);
        let sb = broadcast_strides(tb.shape(), &out_shape);
        let (da, db) = (ta.data(), tb.data());
        let mut out = Tensor::zeros(&out_shape);
        let od = out.data_mut();
        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| od[o] = f(da[ia], db[ib]));
        Ok((out, ()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(crate::scalar::silu);
        self.push(out, Op::Silu(a))
    }

    /// `x[..., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let ws = tw.shape();
        let xs = tx.shape();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(Error::Shape(format!("linear: input {xs:?} vs weight {ws:?}")));
        }
        let (fin, fout) = (ws[0], ws[1]);
        let rows = tx.len() / fin;
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = fout;
        let mut out = vec![T::zero(); rows * fout];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.len() != fout {
                return Err(Error::Shape(format!("linear bias {:?} vs out {fout}", tb.shape())));
            }
            for r in 0..rows {
                out[r * fout..(r + 1) * fout].copy_from_slice(tb.data());
            }
        }
        matmul_acc(tx.data(), tw.data(), &mut out, rows, fin, fout);
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    /// 1D convolution over the last axis of `x[N, C_in, L]` with `w[C_out, C_in, K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(Error::Shape(format!("conv1d: input {xs:?} vs kernel {ws:?}")));
        }
        let (n, ci, l) = (xs[0], xs[1], xs[2]);
        let (co, k) = (ws[0], ws[2]);
        if l + 2 * pad < k || stride == 0 {
            return Err(Error::Shape(format!("conv1d: length {l} too short for kernel {k}")));
        }
        let lo = (l + 2 * pad - k) / stride + 1;
        let mut out = vec![T::zero(); n * co * lo];
        let (xd, wd) = (tx.data(), tw.data());
        let bias = b.map(|b| self.value(b).data());
        for ni in 0..n {
            for c in 0..co {
                let orow = &mut out[(ni * co + c) * lo..(ni * co + c + 1) * lo];
                if let Some(bd) = bias {
                    orow.iter_mut().for_each(|v| *v = bd[c]);
                }
                for cin in 0..ci {
                    let xrow = &xd[(ni * ci + cin) * l..(ni * ci + cin + 1) * l];
                    let wrow = &wd[(c * ci + cin) * k..(c * ci + cin + 1) * k];
                    for (o, ov) in orow.iter_mut().enumerate() {
                        let base = o * stride;
                        let mut acc = T::zero();
                        for (kk, &wv) in wrow.iter().enumerate() {
                            let pos = base + kk;
                            if pos >= pad && pos - pad < l {
                                acc = acc + wv * xrow[pos - pad];
                            }
                        }
                        *ov = *ov + acc;
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, co, lo], out)?;
        Ok(self.push(out, Op::Conv1d { x, w, b, stride, pad }))
    }

    /// Group normalization of `x[N, C, L]` with per-channel affine parameters.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let tx = self.value(x);
        let xs = tx.shape();
        if xs.len() != 3 || groups == 0 || xs[1] % groups != 0 {
            return Err(Error::Shape(format!("group_norm: input {xs:?} with {groups} groups")));
        }
        let (n, c, l) = (xs[0], xs[1], xs[2]);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        if g.len() != c || b.len() != c {
            return Err(Error::Shape("group_norm: affine parameters do not match channels".into()));
        }
        let cpg = c / groups;
        let m = T::from_usize_lossy(cpg * l);
        let eps = T::c(1e-5);
        let xd = tx.data();
        let mut out = vec![T::zero(); xd.len()];
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        for ni in 0..n {
            for gi in 0..groups {
                let start = (ni * c + gi * cpg) * l;
                let seg = &xd[start..start + cpg * l];
                let mean = seg.iter().copied().sum::<T>() / m;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
                let rstd = T::one() / (var + eps).sqrt();
                for ch in 0..cpg {
                    let cc = gi * cpg + ch;
                    for j in 0..l {
                        let idx = start + ch * l + j;
                        out[idx] = (xd[idx] - mean) * rstd * g[cc] + b[cc];
                    }
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        let out = Tensor::new(xs.to_vec(), out)?;
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
        ))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let out = permute_tensor(tx, perm)?;
        Ok(self.push(out, Op::Permute(x, perm.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Batched matrix product `a[B, M, K] · b[B, K, N]` (or `b[B, N, K]ᵀ`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::Shape(format!("bmm: {sa:?} x {sb:?}")));
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, nn) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::Shape(format!("bmm inner dims: {sa:?} x {sb:?} (trans {trans_b})")));
        }
        let mut out = vec![T::zero(); bt * m * nn];
        for bi in 0..bt {
            let ad = &ta.data()[bi * m * k..(bi + 1) * m * k];
            let bd = &tb.data()[bi * k * nn..(bi + 1) * k * nn];
            let od = &mut out[bi * m * nn..(bi + 1) * m * nn];
            if trans_b {
                for i in 0..m {
                    for j in 0..nn {
                        let mut acc = T::zero();
                        for p in 0..k {
                            acc = acc + ad[i * k + p] * bd[j * k + p];
                        }
                        od[i * nn + j] = acc;
                    }
                }
            } else {
                matmul_acc(ad, bd, od, m, k, nn);
            }
        }
        let out = Tensor::new(vec![bt, m, nn], out)?;
        Ok(self.push(out, Op::Bmm { a, b, trans_b }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let l = *tx.shape().last().unwrap();
        let mut out = tx.clone();
        for row in out.data_mut().chunks_exact_mut(l) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        self.push(out, Op::Softmax(x))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} on rank {}", first.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::Shape(format!("concat: {first:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let w = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Nearest-neighbour resampling of the last axis to `out_len`.
    pub fn upsample_nearest(&mut self, x: Var, out_len: usize) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        let lin = *s.last().ok_or_else(|| Error::Shape("upsample of scalar".into()))?;
        let rows = tx.len() / lin;
        let mut out = Vec::with_capacity(rows * out_len);
        for r in 0..rows {
            let row = &tx.data()[r * lin..(r + 1) * lin];
            out.extend((0..out_len).map(|o| row[o * lin / out_len]));
        }
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = out_len;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Upsample(x)))
    }

    /// `Σ w·(pred − target)² / Σ w` (plain mean when `weights` is `None`).
    pub fn weighted_mse(&mut self, pred: Var, target: Tensor<T>, weights: Option<Tensor<T>>) -> Result<Var> {
        let tp = self.value(pred);
        if tp.shape() != target.shape() {
            return Err(Error::Shape(format!("mse: {:?} vs {:?}", tp.shape(), target.shape())));
        }
        let (num, denom) = match &weights {
            Some(w) => {
                if w.shape() != target.shape() {
                    return Err(Error::Shape("mse weights shape".into()));
                }
                let mut num = T::zero();
                for ((&p, &t), &wv) in tp.data().iter().zip(target.data()).zip(w.data()) {
                    num = num + wv * (p - t) * (p - t);
                }
                (num, w.sum())
            }
            None => {
                let num = tp
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| (p - t) * (p - t))
                    .sum::<T>();
                (num, T::from_usize_lossy(tp.len()))
            }
        };
        if !(denom > T::zero()) {
            return Err(Error::Config("mse has no weighted elements".into()));
        }
        let out = Tensor::scalar(num / denom);
        Ok(self.push(
            out,
            Op::WeightedMse {
                pred,
                target,
                weights,
                denom,
            },
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!("backward from non-scalar {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params: Vec<Option<Tensor<T>>> = (0..self.params.len()).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(p), Some(g)) = (&node.op, &grads[i]) {
                match &mut params[*p] {
                    Some(acc) => acc.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(a) => a.add_assign(&t),
            slot => *slot = Some(t),
        };
        let out_shape = g.shape();
        match &self.nodes[i].op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    let s = self.value(v).shape().to_vec();
                    let st = broadcast_strides(&s, out_shape);
                    let mut gv = Tensor::zeros(&s);
                    let gd = gv.data_mut();
                    for_each_broadcast(out_shape, &st, &st, |o, iv, _| gd[iv] = gd[iv] + g.data()[o]);
                    acc(grads, v, gv);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let sa = broadcast_strides(ta.shape(), out_shape);
                let sb = broadcast_strides(tb.shape(), out_shape);
                let mut ga = Tensor::zeros(ta.shape());
                let mut gb = Tensor::zeros(tb.shape());
                {
                    let (gad, gbd) = (ga.data_mut(), gb.data_mut());
                    let (ad, bd) = (ta.data(), tb.data());
                    for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| {
                        gad[ia] = gad[ia] + g.data()[o] * bd[ib];
                        gbd[ib] = gbd[ib] + g.data()[o] * ad[ia];
                    });
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc(grads, *a, g.map(|v| v * c));
            }
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::Silu(a) => {
                let x = self.value(*a);
                let mut gx = g.clone();
                for (gv, &xv) in gx.data_mut().iter_mut().zip(x.data()) {
                    let s = sigmoid(xv);
                    *gv = *gv * s * (T::one() + xv * (T::one() - s));
                }
                acc(grads, *a, gx);
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (fin, fout) = (tw.shape()[0], tw.shape()[1]);
                let rows = tx.len() / fin;
                let (xd, wd, gd) = (tx.data(), tw.data(), g.data());
                let mut gx = vec![T::zero(); rows * fin];
                for r in 0..rows {
                    let grow = &gd[r * fout..(r + 1) * fout];
                    let gxr = &mut gx[r * fin..(r + 1) * fin];
                    for (p, gxv) in gxr.iter_mut().enumerate() {
                        let wrow = &wd[p * fout..(p + 1) * fout];
                        let mut s = T::zero();
                        for (&a, &b) in grow.iter().zip(wrow) {
                            s = s + a * b;
                        }
                        *gxv = s;
                    }
                }
                let mut gw = vec![T::zero(); fin * fout];
                for r in 0..rows {
                    let grow = &gd[r * fout..(r + 1) * fout];
                    for p in 0..fin {
                        let xv = xd[r * fin + p];
                        if xv == T::zero() {
                            continue;
                        }
                        let gwr = &mut gw[p * fout..(p + 1) * fout];
                        for (gwv, &gv) in gwr.iter_mut().zip(grow) {
                            *gwv = *gwv + xv * gv;
                        }
                    }
                }
                acc(grads, *x, Tensor::new(tx.shape().to_vec(), gx).unwrap());
                acc(grads, *w, Tensor::new(tw.shape().to_vec(), gw).unwrap());
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); fout];
                    for row in gd.chunks_exact(fout) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    acc(grads, *b, Tensor::new(vec![fout], gb).unwrap());
                }
            }
            Op::Conv1d { x, w, b, stride, pad } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, ci, l) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (co, k) = (tw.shape()[0], tw.shape()[2]);
                let lo = out_shape[2];
                let (xd, wd, gd) = (tx.data(), tw.data(), g.data());
                let mut gx = vec![T::zero(); xd.len()];
                let mut gw = vec![T::zero(); wd.len()];
                for ni in 0..n {
                    for c in 0..co {
                        let grow = &gd[(ni * co + c) * lo..(ni * co + c + 1) * lo];
                        for cin in 0..ci {
                            let xo = (ni * ci + cin) * l;
                            let wo = (c * ci + cin) * k;
                            for (o, &gv) in grow.iter().enumerate() {
                                let base = o * stride;
                                for kk in 0..k {
                                    let pos = base + kk;
                                    if pos >= *pad && pos - pad < l {
                                        let xi = xo + pos - pad;
                                        gx[xi] = gx[xi] + gv * wd[wo + kk];
                                        gw[wo + kk] = gw[wo + kk] + gv * xd[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, Tensor::new(tx.shape().to_vec(), gx).unwrap());
                acc(grads, *w, Tensor::new(tw.shape().to_vec(), gw).unwrap());
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); co];
                    for ni in 0..n {
                        for (c, gbv) in gb.iter_mut().enumerate() {
                            *gbv = *gbv + gd[(ni * co + c) * lo..(ni * co + c + 1) * lo].iter().copied().sum::<T>();
                        }
                    }
                    acc(grads, *b, Tensor::new(vec![co], gb).unwrap());
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
                let gam = self.value(*gamma).data();
                let (n, c, l) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let cpg = c / groups;
                let m = T::from_usize_lossy(cpg * l);
                let (xd, gd) = (tx.data(), g.data());
                let mut gx = vec![T::zero(); xd.len()];
                let mut ggam = vec![T::zero(); c];
                let mut gbet = vec![T::zero(); c];
                for ni in 0..n {
                    for gi in 0..*groups {
                        let (mu, rs) = (mean[ni * groups + gi], rstd[ni * groups + gi]);
                        let start = (ni * c + gi * cpg) * l;
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for ch in 0..cpg {
                            let cc = gi * cpg + ch;
                            for j in 0..l {
                                let idx = start + ch * l + j;
                                let xhat = (xd[idx] - mu) * rs;
                                let d = gd[idx] * gam[cc];
                                sum_d = sum_d + d;
                                sum_dx = sum_dx + d * xhat;
                                ggam[cc] = ggam[cc] + gd[idx] * xhat;
                                gbet[cc] = gbet[cc] + gd[idx];
                            }
                        }
                        for ch in 0..cpg {
                            let cc = gi * cpg + ch;
                            for j in 0..l {
                                let idx = start + ch * l + j;
                                let xhat = (xd[idx] - mu) * rs;
                                let d = gd[idx] * gam[cc];
                                gx[idx] = rs / m * (m * d - sum_d - xhat * sum_dx);
                            }
                        }
                    }
                }
                acc(grads, *x, Tensor::new(tx.shape().to_vec(), gx).unwrap());
                acc(grads, *gamma, Tensor::new(vec![c], ggam).unwrap());
                acc(grads, *beta, Tensor::new(vec![c], gbet).unwrap());
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                acc(grads, *x, permute_tensor(g, &inv).unwrap());
            }
            Op::Reshape(x) => {
                let s = self.value(*x).shape().to_vec();
                acc(grads, *x, g.clone().reshaped(&s).unwrap());
            }
            Op::Bmm { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bt, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let nn = out_shape[2];
                let mut ga = vec![T::zero(); ta.len()];
                let mut gb = vec![T::zero(); tb.len()];
                for bi in 0..bt {
                    let ad = &ta.data()[bi * m * k..(bi + 1) * m * k];
                    let bd = &tb.data()[bi * k * nn..(bi + 1) * k * nn];
                    let gd = &g.data()[bi * m * nn..(bi + 1) * m * nn];
                    let gad = &mut ga[bi * m * k..(bi + 1) * m * k];
                    let gbd = &mut gb[bi * k * nn..(bi + 1) * k * nn];
                    for i in 0..m {
                        for j in 0..nn {
                            let gv = gd[i * nn + j];
                            for p in 0..k {
                                let bidx = if *trans_b { j * k + p } else { p * nn + j };
                                gad[i * k + p] = gad[i * k + p] + gv * bd[bidx];
                                gbd[bidx] = gbd[bidx] + gv * ad[i * k + p];
                            }
                        }
                    }
                }
                acc(grads, *a, Tensor::new(ta.shape().to_vec(), ga).unwrap());
                acc(grads, *b, Tensor::new(tb.shape().to_vec(), gb).unwrap());
            }
            Op::Softmax(x) => {
                let y = self.value(Var(i));
                let l = *out_shape.last().unwrap();
                let mut gx = g.clone();
                for (grow, yrow) in gx.data_mut().chunks_exact_mut(l).zip(y.data().chunks_exact(l)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - dot);
                    }
                }
                acc(grads, *x, gx);
            }
            Op::Concat { parts, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let s = self.value(p).shape().to_vec();
                    let w = s[*axis] * inner;
                    let mut gp = Vec::with_capacity(outer * w);
                    for o in 0..outer {
                        gp.extend_from_slice(&g.data()[o * total + offset..o * total + offset + w]);
                    }
                    offset += w;
                    acc(grads, p, Tensor::new(s, gp).unwrap());
                }
            }
            Op::Upsample(x) => {
                let tx = self.value(*x);
                let lin = *tx.shape().last().unwrap();
                let lout = *out_shape.last().unwrap();
                let mut gx = vec![T::zero(); tx.len()];
                for (r, grow) in g.data().chunks_exact(lout).enumerate() {
                    for (o, &gv) in grow.iter().enumerate() {
                        let idx = r * lin + o * lin / lout;
                        gx[idx] = gx[idx] + gv;
                    }
                }
                acc(grads, *x, Tensor::new(tx.shape().to_vec(), gx).unwrap());
            }
            Op::WeightedMse {
                pred,
                target,
                weights,
                denom,
            } => {
                let tp = self.value(*pred);
                let scale = g.data()[0] * T::c(2.0) / *denom;
                let mut gp = Vec::with_capacity(tp.len());
                for (j, (&p, &t)) in tp.data().iter().zip(target.data()).enumerate() {
                    let w = weights.as_ref().map_or(T::one(), |w| w.data()[j]);
                    gp.push(scale * w * (p - t));
                }
                acc(grads, *pred, Tensor::new(tp.shape().to_vec(), gp).unwrap());
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`.
fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

pub(crate) fn permute_tensor<T: Scalar>(t: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let s = t.shape();
    let mut check = perm.to_vec();
    check.sort_unstable();
    if perm.len() != s.len() || check.iter().enumerate().any(|(i, &p)| i != p) {
        return Err(Error::Shape(format!("bad permutation {perm:?} for {s:?}")));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let in_strides = strides(s);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zero = vec![0; out_shape.len()];
    let mut out = vec![T::zero(); t.len()];
    let d = t.data();
    for_each_broadcast(&out_shape, &src_strides, &zero, |o, src, _| out[o] = d[src]);
    Tensor::new(out_shape, out)
}
