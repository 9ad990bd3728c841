//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward value and
//! whatever it needs for the backward pass. [`Graph::backward`] walks the tape in reverse
//! and accumulates gradients into every node that (transitively) depends on a leaf created
//! with `requires_grad`. Parameters are bound by [`ParamId`], once per graph, so a layer
//! used twice accumulates into a single gradient.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::params::{ParamId, ParamStore, StatUpdate};
use crate::numerics::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const COSINE_EPS: f64 = 1e-8;
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Batch-norm running statistics as read from the owning store.
pub struct BnStats<'a, T> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: &'a [T],
    pub var: &'a [T],
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Square(Var),
    Relu(Var),
    Sigmoid(Var),
    LogFloor(Var, T),
    Sum(Var),
    Mean(Var),
    MeanPerSample(Var),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        cols: Option<Vec<T>>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Concat(Var, Var),
    SliceChannels {
        x: Var,
        start: usize,
    },
    BroadcastTime(Var),
    MulFrames(Var, Var),
    MeanTime(Var),
    AvgPool2(Var),
    Reshape(Var),
    L2Normalize(Var),
    CosineRows(Var, Var),
    RepeatRows(Var, usize),
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    MinPair {
        a: Var,
        b: Var,
        pick_b: Vec<bool>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    bound: HashMap<ParamId, Var>,
    stat_updates: Vec<StatUpdate<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims3(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [b, c, t] => Some((b, c, t)),
        [b, c] => Some((b, c, 1)),
        _ => None,
    }
}

/// Logistic function clamped to the open interval (0, 1) at the type's precision.
fn sigmoid<T: Real>(v: T) -> T {
    let s = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    s.max(T::min_positive_value()).min(T::one() - T::epsilon())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: HashMap::new(),
            stat_updates: Vec::new(),
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

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.input(t, false)
    }

    /// Binds a stored parameter as a leaf. Repeated binds of the same id return the same
    /// node; `trainable = false` binds it as a constant.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId, trainable: bool) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.input(store.get(id).clone(), trainable);
        self.bound.insert(id, v);
        v
    }

    /// Gradients of every trainable parameter bound into this graph.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<T>)> {
        let mut out: Vec<(ParamId, Vec<T>)> = self
            .bound
            .iter()
            .filter(|(_, v)| self.rg(**v))
            .filter_map(|(id, v)| self.grad(*v).map(|g| (*id, g.to_vec())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.stat_updates)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let t = &self.nodes[x.0].value;
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect())
            .expect("shape preserved");
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(ta.shape(), data).expect("shape preserved");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.map(x, Op::Relu(x), |v| v.max(T::zero())),
            Activation::Sigmoid => self.map(x, Op::Sigmoid(x), sigmoid),
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// `ln(max(x, floor))`; zero gradient where the floor is active.
    pub fn log_floor(&mut self, x: Var, floor: T) -> Var {
        self.map(x, Op::LogFloor(x, floor), |v| v.max(floor).ln())
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = T::lit(t.len().max(1) as f64);
        let s: T = t.data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s / n), Op::Mean(x), rg)
    }

    /// Mean over every axis but the first: `[B, ...] -> [B]`.
    pub fn mean_per_sample(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let b = *t.shape().first().ok_or(Error::Argument("empty shape".into()))?;
        let per = t.len() / b.max(1);
        let n = T::lit(per.max(1) as f64);
        let data = t
            .data()
            .chunks(per.max(1))
            .map(|c| c.iter().copied().sum::<T>() / n)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[b], data)?, Op::MeanPerSample(x), rg))
    }

    /// `y = x·wᵀ + b` with `x: [B, Cin]`, `w: [Cout, Cin]`, `b: [Cout]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let (batch, cin, cout) = match (xs, ws, bs) {
            ([bt, ci], [co, wi], [bo]) if ci == wi && co == bo => (*bt, *ci, *co),
            _ => return Err(Error::dim("dense", xs, ws)),
        };
        let mut out = vec![T::zero(); batch * cout];
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(self.value(b).data());
        }
        T::gemm(
            batch,
            cin,
            cout,
            self.value(x).data(),
            (cin as isize, 1),
            self.value(w).data(),
            (1, cin as isize),
            &mut out,
            true,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::new(&[batch, cout], out)?,
            Op::Dense { x, w, b },
            rg,
        ))
    }

    /// "Same" 1-D cross-correlation along the last axis with zero padding `(K-1)/2`.
    /// `x: [B, Cin, T]`, `w: [Cout, Cin, K]`, `b: [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let (batch, cin, len, cout, k) = match (xs, ws, bs) {
            ([bt, ci, t], [co, wi, k], [bo]) if ci == wi && co == bo => (*bt, *ci, *t, *co, *k),
            _ => return Err(Error::dim("conv1d", xs, ws)),
        };
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel size must be odd, got {k}")));
        }
        let pad = (k - 1) / 2;
        let ck = cin * k;
        let xd = self.value(x).data();
        let cols = if k == 1 {
            None
        } else {
            let mut cols = vec![T::zero(); batch * ck * len];
            cols.par_chunks_mut(ck * len)
                .enumerate()
                .for_each(|(bi, cb)| im2col(&xd[bi * cin * len..(bi + 1) * cin * len], cin, len, k, pad, cb));
            Some(cols)
        };
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); batch * cout * len];
        out.par_chunks_mut(cout * len)
            .enumerate()
            .for_each(|(bi, yb)| {
                for (co, row) in yb.chunks_mut(len).enumerate() {
                    row.iter_mut().for_each(|v| *v = bd[co]);
                }
                let src = match &cols {
                    Some(c) => &c[bi * ck * len..(bi + 1) * ck * len],
                    None => &xd[bi * cin * len..(bi + 1) * cin * len],
                };
                T::gemm(cout, ck, len, wd, (ck as isize, 1), src, (len as isize, 1), yb, true);
            });
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::new(&[batch, cout, len], out)?,
            Op::Conv1d {
                x,
                w,
                b,
                kernel: k,
                cols,
            },
            rg,
        ))
    }

    /// Per-channel normalization of `[B, C]` or `[B, C, T]`. Training mode normalizes by
    /// batch statistics and records a running-statistics update; evaluation mode uses the
    /// supplied running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_, T>,
        train: bool,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, c, len) = dims3(&xs).ok_or_else(|| Error::dim("batch_norm", &xs, &[]))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("batch_norm", &xs, self.shape(gamma)));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::dim("batch_norm stats", &xs, &[stats.mean.len()]));
        }
        let n = batch * len;
        let eps = T::lit(BN_EPS);
        let xd = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let mut pending = None;
        if train {
            let nf = T::lit(n as f64);
            for ch in 0..c {
                let mut s = T::zero();
                for bi in 0..batch {
                    let o = (bi * c + ch) * len;
                    s += xd[o..o + len].iter().copied().sum::<T>();
                }
                let m = s / nf;
                let mut v = T::zero();
                for bi in 0..batch {
                    let o = (bi * c + ch) * len;
                    for &e in &xd[o..o + len] {
                        v += (e - m) * (e - m);
                    }
                }
                mean[ch] = m;
                var[ch] = v / nf;
            }
            let unbias = if n > 1 {
                T::lit(n as f64 / (n - 1) as f64)
            } else {
                T::one()
            };
            pending = Some(StatUpdate {
                mean: stats.mean_id,
                var: stats.var_id,
                batch_mean: mean.clone(),
                batch_var: var.iter().map(|&v| v * unbias).collect(),
            });
        } else {
            mean.copy_from_slice(stats.mean);
            var.copy_from_slice(stats.var);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..batch {
            for ch in 0..c {
                let o = (bi * c + ch) * len;
                for i in o..o + len {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gd[ch] * h + bd[ch];
                }
            }
        }
        self.stat_updates.extend(pending);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(&xs, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    /// Concatenation along axis 1 of `[B, Ca, T]` and `[B, Cb, T]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ((ba, ca, ta), (bb, cb, tb)) = match (dims3(sa), dims3(sb)) {
            (Some(x), Some(y)) if sa.len() == sb.len() => (x, y),
            _ => return Err(Error::dim("concat_channels", sa, sb)),
        };
        if ba != bb || ta != tb {
            return Err(Error::dim("concat_channels", sa, sb));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ba * (ca + cb) * ta);
        for bi in 0..ba {
            out.extend_from_slice(&da[bi * ca * ta..(bi + 1) * ca * ta]);
            out.extend_from_slice(&db[bi * cb * ta..(bi + 1) * cb * ta]);
        }
        let shape: Vec<usize> = if sa.len() == 3 {
            vec![ba, ca + cb, ta]
        } else {
            vec![ba, ca + cb]
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat(a, b), rg))
    }

    /// Channels `start..start+len` of a `[B, C, T]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (b, c, t) = match s[..] {
            [b, c, t] if start + count <= c => (b, c, t),
            _ => return Err(Error::dim("slice_channels", &s, &[start, count])),
        };
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(b * count * t);
        for bi in 0..b {
            let o = (bi * c + start) * t;
            out.extend_from_slice(&d[o..o + count * t]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[b, count, t], out)?,
            Op::SliceChannels { x, start },
            rg,
        ))
    }

    /// `[B, C] -> [B, C, T]` by repeating every vector along time.
    pub fn broadcast_time(&mut self, v: Var, len: usize) -> Result<Var> {
        let s = self.shape(v).to_vec();
        let (b, c) = match s[..] {
            [b, c] => (b, c),
            _ => return Err(Error::dim("broadcast_time", &s, &[len])),
        };
        let d = self.value(v).data();
        let mut out = Vec::with_capacity(b * c * len);
        for &e in d {
            out.extend(std::iter::repeat_n(e, len));
        }
        let rg = self.rg(v);
        Ok(self.push(Tensor::new(&[b, c, len], out)?, Op::BroadcastTime(v), rg))
    }

    /// Scales every frame of `x: [B, C, T]` by `w: [B, 1, T]`.
    pub fn mul_frames(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (b, c, t) = match (&sx[..], &sw[..]) {
            ([b, c, t], [wb, 1, wt]) if b == wb && t == wt => (*b, *c, *t),
            _ => return Err(Error::dim("mul_frames", &sx, &sw)),
        };
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            let wr = &wd[bi * t..(bi + 1) * t];
            for ch in 0..c {
                let o = (bi * c + ch) * t;
                for i in 0..t {
                    out[o + i] = xd[o + i] * wr[i];
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(&sx, out)?, Op::MulFrames(x, w), rg))
    }

    /// `[B, C, T] -> [B, C]`.
    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (b, c, t) = match s[..] {
            [b, c, t] if t > 0 => (b, c, t),
            _ => return Err(Error::dim("mean_time", &s, &[])),
        };
        let tf = T::lit(t as f64);
        let out = self
            .value(x)
            .data()
            .chunks(t)
            .map(|r| r.iter().copied().sum::<T>() / tf)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[b, c], out)?, Op::MeanTime(x), rg))
    }

    /// Non-overlapping average pooling by 2 along time; an odd trailing frame is dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (b, c, t) = match s[..] {
            [b, c, t] if t >= 2 => (b, c, t),
            _ => return Err(Error::dim("avg_pool2", &s, &[])),
        };
        let half = T::lit(0.5);
        let to = t / 2;
        let mut out = Vec::with_capacity(b * c * to);
        for r in self.value(x).data().chunks(t) {
            out.extend((0..to).map(|i| (r[2 * i] + r[2 * i + 1]) * half));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[b, c, to], out)?, Op::AvgPool2(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Row-wise L2 normalization of `[B, D]`.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = match s[..] {
            [_, d] if d > 0 => d,
            _ => return Err(Error::dim("l2_normalize", &s, &[])),
        };
        let eps = T::lit(NORMALIZE_EPS);
        let mut out = Vec::with_capacity(self.value(x).len());
        for r in self.value(x).data().chunks(d) {
            let n = r.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            out.extend(r.iter().map(|&v| v / n));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&s, out)?, Op::L2Normalize(x), rg))
    }

    /// Row-wise `a·b / (‖a‖‖b‖ + 1e-8)` of two `[B, D]` tensors, giving `[B]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine", a, b)?;
        let s = self.shape(a).to_vec();
        let (rows, d) = match s[..] {
            [r, d] if d > 0 => (r, d),
            [d] if d > 0 => (1, d),
            _ => return Err(Error::dim("cosine", &s, &[])),
        };
        let eps = T::lit(COSINE_EPS);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows);
        for (ra, rb) in da.chunks(d).zip(db.chunks(d)) {
            let dot: T = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
            let na = ra.iter().map(|&v| v * v).sum::<T>().sqrt();
            let nb = rb.iter().map(|&v| v * v).sum::<T>().sqrt();
            if na == T::zero() && nb == T::zero() {
                log::warn!("cosine similarity of two all-zero vectors; returning 0");
            }
            out.push(dot / (na * nb + eps));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[rows], out)?, Op::CosineRows(a, b), rg))
    }

    /// `[B, D] -> [B·n, D]`, each row repeated `n` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (b, d) = match s[..] {
            [b, d] => (b, d),
            _ => return Err(Error::dim("repeat_rows", &s, &[n])),
        };
        let mut out = Vec::with_capacity(b * n * d);
        for r in self.value(x).data().chunks(d) {
            for _ in 0..n {
                out.extend_from_slice(r);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[b * n, d], out)?, Op::RepeatRows(x, n), rg))
    }

    /// Mean over rows of `-ln softmax(logits_row)[target_row]`, stabilized by max
    /// subtraction. `logits: [B, N]` or `[N]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let (rows, n) = match s[..] {
            [r, n] => (r, n),
            [n] => (1, n),
            _ => return Err(Error::dim("softmax_cross_entropy", &s, &[])),
        };
        if targets.len() != rows {
            return Err(Error::dim("softmax_cross_entropy", &s, &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Argument(format!(
                "target index {bad} out of range for {n} classes"
            )));
        }
        let d = self.value(logits).data();
        let mut probs = Vec::with_capacity(rows * n);
        let mut loss = T::zero();
        for (r, &tgt) in d.chunks(n).zip(targets) {
            let m = r.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = r.iter().map(|&v| (v - m).exp()).sum();
            let lz = z.ln() + m;
            loss += lz - r[tgt];
            probs.extend(r.iter().map(|&v| (v - lz).exp()));
        }
        let out = loss / T::lit(rows as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(out),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Elementwise minimum of two `[B]` vectors; ties pick `a`.
    pub fn min_pair(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("min_pair", a, b)?;
        let pick_b: Vec<bool> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| y < x)
            .collect();
        let out = self.zip(a, b, Op::Leaf, |x, y| if y < x { y } else { x });
        self.nodes[out.0].op = Op::MinPair { a, b, pick_b };
        Ok(out)
    }

    /// For every element of the min: whether the second operand was selected.
    pub fn min_pair_choice(&self, v: Var) -> Option<&[bool]> {
        match &self.nodes[v.0].op {
            Op::MinPair { pick_b, .. } => Some(pick_b),
            _ => None,
        }
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", self.shape(loss), &[1]));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                self.grads[i] = Some(gy);
                continue;
            }
            self.backward_node(i, &gy)?;
            self.grads[i] = Some(gy);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&[T], &mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let mut g = self.grads[v.0].take().unwrap_or_else(|| vec![T::zero(); n]);
        f(self.nodes[v.0].value.data(), &mut g);
        self.grads[v.0] = Some(g);
    }

    fn backward_node(&mut self, i: usize, gy: &[T]) -> Result<()> {
        // Temporarily move the op out so that node values can be read while grads mutate.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let result = self.backward_op(i, &op, gy);
        self.nodes[i].op = op;
        result
    }

    fn backward_op(&mut self, i: usize, op: &Op<T>, gy: &[T]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(a, |_, g| add_into(g, gy));
                self.acc(b, |_, g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                self.acc(a, |_, g| add_into(g, gy));
                self.acc(b, |_, g| g.iter_mut().zip(gy).for_each(|(d, &s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let va = self.value(a).data().to_vec();
                let vb = self.value(b).data().to_vec();
                self.acc(a, |_, g| {
                    for ((d, &s), &o) in g.iter_mut().zip(gy).zip(&vb) {
                        *d += s * o;
                    }
                });
                self.acc(b, |_, g| {
                    for ((d, &s), &o) in g.iter_mut().zip(gy).zip(&va) {
                        *d += s * o;
                    }
                });
            }
            Op::Scale(a, s) => self.acc(a, |_, g| {
                g.iter_mut().zip(gy).for_each(|(d, &u)| *d += u * s)
            }),
            Op::Square(a) => self.acc(a, |x, g| {
                for ((d, &u), &v) in g.iter_mut().zip(gy).zip(x) {
                    *d += u * (v + v);
                }
            }),
            Op::Relu(a) => self.acc(a, |x, g| {
                for ((d, &u), &v) in g.iter_mut().zip(gy).zip(x) {
                    if v > T::zero() {
                        *d += u;
                    }
                }
            }),
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc(a, |_, g| {
                    for ((d, &u), &s) in g.iter_mut().zip(gy).zip(&y) {
                        *d += u * s * (T::one() - s);
                    }
                })
            }
            Op::LogFloor(a, floor) => self.acc(a, |x, g| {
                for ((d, &u), &v) in g.iter_mut().zip(gy).zip(x) {
                    if v > floor {
                        *d += u / v;
                    }
                }
            }),
            Op::Sum(a) => self.acc(a, |_, g| g.iter_mut().for_each(|d| *d += gy[0])),
            Op::Mean(a) => self.acc(a, |_, g| {
                let s = gy[0] / T::lit(g.len().max(1) as f64);
                g.iter_mut().for_each(|d| *d += s)
            }),
            Op::MeanPerSample(a) => self.acc(a, |_, g| {
                let per = g.len() / gy.len().max(1);
                let n = T::lit(per.max(1) as f64);
                for (c, &u) in g.chunks_mut(per.max(1)).zip(gy) {
                    c.iter_mut().for_each(|d| *d += u / n);
                }
            }),
            Op::Dense { x, w, b } => {
                let (batch, cin) = (self.shape(x)[0], self.shape(x)[1]);
                let cout = self.shape(w)[0];
                let wd = self.value(w).data().to_vec();
                let xd = self.value(x).data().to_vec();
                self.acc(x, |_, g| {
                    T::gemm(batch, cout, cin, gy, (cout as isize, 1), &wd, (cin as isize, 1), g, true)
                });
                self.acc(w, |_, g| {
                    T::gemm(cout, batch, cin, gy, (1, cout as isize), &xd, (cin as isize, 1), g, true)
                });
                self.acc(b, |_, g| {
                    for r in gy.chunks(cout) {
                        add_into(g, r);
                    }
                });
            }
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                ref cols,
            } => {
                let (batch, cin, len) = dims3(self.shape(x)).expect("checked in forward");
                let cout = self.shape(w)[0];
                let ck = cin * kernel;
                let pad = (kernel - 1) / 2;
                let xd = self.value(x).data();
                let src = |bi: usize| -> &[T] {
                    match cols {
                        Some(c) => &c[bi * ck * len..(bi + 1) * ck * len],
                        None => &xd[bi * cin * len..(bi + 1) * cin * len],
                    }
                };
                let gw = if self.rg(w) {
                    let mut acc = vec![T::zero(); cout * ck];
                    for bi in 0..batch {
                        let dy = &gy[bi * cout * len..(bi + 1) * cout * len];
                        T::gemm(cout, len, ck, dy, (len as isize, 1), src(bi), (1, len as isize), &mut acc, true);
                    }
                    Some(acc)
                } else {
                    None
                };
                let gx = if self.rg(x) {
                    let wd = self.value(w).data();
                    let mut gx = vec![T::zero(); batch * cin * len];
                    gx.par_chunks_mut(cin * len)
                        .enumerate()
                        .for_each(|(bi, gxb)| {
                            let dy = &gy[bi * cout * len..(bi + 1) * cout * len];
                            if kernel == 1 {
                                T::gemm(cin, cout, len, wd, (1, ck as isize), dy, (len as isize, 1), gxb, true);
                            } else {
                                let mut dcols = vec![T::zero(); ck * len];
                                T::gemm(ck, cout, len, wd, (1, ck as isize), dy, (len as isize, 1), &mut dcols, false);
                                col2im(&dcols, cin, len, kernel, pad, gxb);
                            }
                        });
                    Some(gx)
                } else {
                    None
                };
                if let Some(gw) = gw {
                    self.acc(w, |_, g| add_into(g, &gw));
                }
                if let Some(gx) = gx {
                    self.acc(x, |_, g| add_into(g, &gx));
                }
                self.acc(b, |_, g| {
                    for bi in 0..batch {
                        for (co, d) in g.iter_mut().enumerate() {
                            let o = (bi * cout + co) * len;
                            *d += gy[o..o + len].iter().copied().sum::<T>();
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                ref xhat,
                ref inv_std,
                train,
            } => {
                let (batch, c, len) = dims3(self.shape(x)).expect("checked in forward");
                let gd = self.value(gamma).data().to_vec();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for bi in 0..batch {
                    for ch in 0..c {
                        let o = (bi * c + ch) * len;
                        for k in o..o + len {
                            sum_dy[ch] += gy[k];
                            sum_dy_xhat[ch] += gy[k] * xhat[k];
                        }
                    }
                }
                self.acc(gamma, |_, g| add_into(g, &sum_dy_xhat));
                self.acc(beta, |_, g| add_into(g, &sum_dy));
                let nf = T::lit((batch * len) as f64);
                self.acc(x, |_, g| {
                    for bi in 0..batch {
                        for ch in 0..c {
                            let o = (bi * c + ch) * len;
                            let scale = gd[ch] * inv_std[ch];
                            for k in o..o + len {
                                if train {
                                    g[k] += scale
                                        * (gy[k]
                                            - sum_dy[ch] / nf
                                            - xhat[k] * sum_dy_xhat[ch] / nf);
                                } else {
                                    g[k] += scale * gy[k];
                                }
                            }
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let (batch, ca, t) = dims3(self.shape(a)).expect("checked in forward");
                let cb = dims3(self.shape(b)).expect("checked in forward").1;
                let cc = ca + cb;
                self.acc(a, |_, g| {
                    for bi in 0..batch {
                        add_into(
                            &mut g[bi * ca * t..(bi + 1) * ca * t],
                            &gy[bi * cc * t..(bi * cc + ca) * t],
                        );
                    }
                });
                self.acc(b, |_, g| {
                    for bi in 0..batch {
                        add_into(
                            &mut g[bi * cb * t..(bi + 1) * cb * t],
                            &gy[(bi * cc + ca) * t..(bi + 1) * cc * t],
                        );
                    }
                });
            }
            Op::SliceChannels { x, start } => {
                let (batch, c, t) = dims3(self.shape(x)).expect("checked in forward");
                let count = self.nodes[i].value.shape()[1];
                self.acc(x, |_, g| {
                    for bi in 0..batch {
                        let o = (bi * c + start) * t;
                        add_into(
                            &mut g[o..o + count * t],
                            &gy[bi * count * t..(bi + 1) * count * t],
                        );
                    }
                });
            }
            Op::BroadcastTime(v) => {
                let t = self.nodes[i].value.shape()[2];
                self.acc(v, |_, g| {
                    for (d, r) in g.iter_mut().zip(gy.chunks(t)) {
                        *d += r.iter().copied().sum::<T>();
                    }
                });
            }
            Op::MulFrames(x, w) => {
                let (batch, c, t) = dims3(self.shape(x)).expect("checked in forward");
                let xd = self.value(x).data().to_vec();
                let wd = self.value(w).data().to_vec();
                self.acc(x, |_, g| {
                    for bi in 0..batch {
                        for ch in 0..c {
                            let o = (bi * c + ch) * t;
                            for k in 0..t {
                                g[o + k] += gy[o + k] * wd[bi * t + k];
                            }
                        }
                    }
                });
                self.acc(w, |_, g| {
                    for bi in 0..batch {
                        for ch in 0..c {
                            let o = (bi * c + ch) * t;
                            for k in 0..t {
                                g[bi * t + k] += gy[o + k] * xd[o + k];
                            }
                        }
                    }
                });
            }
            Op::MeanTime(x) => {
                let t = self.shape(x)[2];
                let tf = T::lit(t as f64);
                self.acc(x, |_, g| {
                    for (r, &u) in g.chunks_mut(t).zip(gy) {
                        r.iter_mut().for_each(|d| *d += u / tf);
                    }
                });
            }
            Op::AvgPool2(x) => {
                let t = self.shape(x)[2];
                let to = t / 2;
                let half = T::lit(0.5);
                self.acc(x, |_, g| {
                    for (r, u) in g.chunks_mut(t).zip(gy.chunks(to)) {
                        for k in 0..to {
                            r[2 * k] += u[k] * half;
                            r[2 * k + 1] += u[k] * half;
                        }
                    }
                });
            }
            Op::Reshape(x) => self.acc(x, |_, g| add_into(g, gy)),
            Op::L2Normalize(x) => {
                let d = self.shape(x)[1];
                let y = self.nodes[i].value.data().to_vec();
                let eps = T::lit(NORMALIZE_EPS);
                self.acc(x, |xv, g| {
                    for ((gr, xr), (yr, ur)) in g
                        .chunks_mut(d)
                        .zip(xv.chunks(d))
                        .zip(y.chunks(d).zip(gy.chunks(d)))
                    {
                        let n = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                        if n <= eps {
                            ur.iter().zip(gr.iter_mut()).for_each(|(&u, g)| *g += u / eps);
                            continue;
                        }
                        let proj: T = yr.iter().zip(ur).map(|(&a, &b)| a * b).sum();
                        for k in 0..d {
                            gr[k] += (ur[k] - yr[k] * proj) / n;
                        }
                    }
                });
            }
            Op::CosineRows(a, b) => {
                let d = *self.shape(a).last().expect("checked in forward");
                let va = self.value(a).data().to_vec();
                let vb = self.value(b).data().to_vec();
                let eps = T::lit(COSINE_EPS);
                // d/da [dot / (na nb + eps)] = b/den - dot·nb·(a/na)/den²
                let grad_wrt = |x: &[T], y: &[T], g: &mut [T]| {
                    for ((gr, (xr, yr)), &u) in g
                        .chunks_mut(d)
                        .zip(x.chunks(d).zip(y.chunks(d)))
                        .zip(gy)
                    {
                        let dot: T = xr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                        let nx = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                        let ny = yr.iter().map(|&v| v * v).sum::<T>().sqrt();
                        let den = nx * ny + eps;
                        for k in 0..d {
                            let radial = if nx > T::zero() {
                                dot * ny * xr[k] / (nx * den * den)
                            } else {
                                T::zero()
                            };
                            gr[k] += u * (yr[k] / den - radial);
                        }
                    }
                };
                self.acc(a, |_, g| grad_wrt(&va, &vb, g));
                self.acc(b, |_, g| grad_wrt(&vb, &va, g));
            }
            Op::RepeatRows(x, n) => {
                let d = self.shape(x)[1];
                self.acc(x, |_, g| {
                    for (r, u) in g.chunks_mut(d).zip(gy.chunks(d * n)) {
                        for rep in u.chunks(d) {
                            add_into(r, rep);
                        }
                    }
                });
            }
            Op::SoftmaxXent {
                logits,
                ref targets,
                ref probs,
            } => {
                let n = *self.shape(logits).last().expect("checked in forward");
                let rows = targets.len();
                let s = gy[0] / T::lit(rows as f64);
                self.acc(logits, |_, g| {
                    for (r, (pr, &tgt)) in g.chunks_mut(n).zip(probs.chunks(n).zip(targets)) {
                        for k in 0..n {
                            let onehot = if k == tgt { T::one() } else { T::zero() };
                            r[k] += s * (pr[k] - onehot);
                        }
                    }
                });
            }
            Op::MinPair { a, b, ref pick_b } => {
                self.acc(a, |_, g| {
                    for ((d, &u), &pb) in g.iter_mut().zip(gy).zip(pick_b) {
                        if !pb {
                            *d += u;
                        }
                    }
                });
                self.acc(b, |_, g| {
                    for ((d, &u), &pb) in g.iter_mut().zip(gy).zip(pick_b) {
                        if pb {
                            *d += u;
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn im2col<T: Real>(x: &[T], cin: usize, len: usize, k: usize, pad: usize, cols: &mut [T]) {
    for ci in 0..cin {
        let row = &x[ci * len..(ci + 1) * len];
        for kk in 0..k {
            let dst = &mut cols[(ci * k + kk) * len..(ci * k + kk + 1) * len];
            // dst[t] = row[t + kk - pad]
            let shift = kk as isize - pad as isize;
            for (t, d) in dst.iter_mut().enumerate() {
                let s = t as isize + shift;
                *d = if s >= 0 && (s as usize) < len {
                    row[s as usize]
                } else {
                    T::zero()
                };
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], cin: usize, len: usize, k: usize, pad: usize, gx: &mut [T]) {
    for ci in 0..cin {
        let row = &mut gx[ci * len..(ci + 1) * len];
        for kk in 0..k {
            let src = &cols[(ci * k + kk) * len..(ci * k + kk + 1) * len];
            let shift = kk as isize - pad as isize;
            for (t, &v) in src.iter().enumerate() {
                let s = t as isize + shift;
                if s >= 0 && (s as usize) < len {
                    row[s as usize] += v;
                }
            }
        }
    }
}
