use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tape::{BackwardCtx, Tape, TensorId};
use super::{Mask, Scalar, Tensor};

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Silu,
    /// Tanh approximation used by GPT-2.
    Gelu,
}

const GELU_COEF: f64 = 0.044_715;

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Silu => x * sigmoid(x),
            Activation::Gelu => {
                let c = T::of((2.0 / std::f64::consts::PI).sqrt());
                let u = c * (x + T::of(GELU_COEF) * x * x * x);
                T::of(0.5) * x * (T::one() + u.tanh())
            }
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Gelu => {
                let c = T::of((2.0 / std::f64::consts::PI).sqrt());
                let k = T::of(GELU_COEF);
                let u = c * (x + k * x * x * x);
                let th = u.tanh();
                let du = c * (T::one() + T::of(3.0) * k * x * x);
                T::of(0.5) * (T::one() + th) + T::of(0.5) * x * (T::one() - th * th) * du
            }
        }
    }
}

fn leading(shape: &[usize], keep: usize) -> usize {
    shape[..shape.len() - keep].iter().product()
}

impl<T: Scalar> Tape<T> {
    /// Matrix product over the last two axes.
    ///
    /// `a` is `[..., m, k]`. `b` is either a `[k, n]` matrix shared by every
    /// leading index of `a`, or `[..., k, n]` with the same leading axes.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes; `b` is `[n, k]` or `[..., n, k]`.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: TensorId, b: TensorId, b_transposed: bool) -> Result<TensorId> {
        let op = if b_transposed { "matmul_nt" } else { "matmul" };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(op, &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        let (kb, n) = if b_transposed {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(Error::shape(op, &sa, &sb));
        }
        let shared_b = sb.len() == 2;
        if !shared_b && (sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(Error::shape(op, &sa, &sb));
        }
        // Shared right operand: fold all leading axes of `a` into rows.
        let (batch, m) = if shared_b {
            (1, leading(&sa, 1))
        } else {
            (leading(&sa, 2), sa[sa.len() - 2])
        };
        let b_stride = if shared_b { 0 } else { k * n };
        // strides of the k×n operand view
        let bview: (isize, isize) = if b_transposed {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };

        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for p in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[p * m * k..],
                    (k as isize, 1),
                    &bv[p * b_stride..],
                    bview,
                    &mut out[p * m * n..],
                    false,
                );
            }
        }
        let backward = Box::new(move |ctx: &BackwardCtx<'_, T>, g: &[T]| {
            let (av, bv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let da = ctx.needs[0].then(|| {
                // dA = G · Bᵀ, where Bᵀ is the n×k view of the k×n operand
                let mut da = vec![T::zero(); batch * m * k];
                let btv = (bview.1, bview.0);
                for p in 0..batch {
                    T::gemm(m, n, k, &g[p * m * n..], (n as isize, 1), &bv[p * b_stride..], btv, &mut da[p * m * k..], false);
                }
                da
            });
            let db = ctx.needs[1].then(|| {
                let mut db = vec![T::zero(); if shared_b { k * n } else { batch * k * n }];
                for p in 0..batch {
                    let dst = if shared_b { 0 } else { p * k * n };
                    if b_transposed {
                        // d(Bstored n×k) = Gᵀ · A
                        T::gemm(n, m, k, &g[p * m * n..], (1, n as isize), &av[p * m * k..], (k as isize, 1), &mut db[dst..], shared_b && p > 0);
                    } else {
                        // dB = Aᵀ · G
                        T::gemm(k, m, n, &av[p * m * k..], (1, k as isize), &g[p * m * n..], (n as isize, 1), &mut db[dst..], shared_b && p > 0);
                    }
                }
                db
            });
            vec![da, db]
        });
        Ok(self.push(Tensor::new(out_shape, out)?, &[a, b], backward))
    }

    /// Affine map `x · wᵀ + bias` with `w` stored as `[out, in]`.
    pub fn linear(&mut self, x: TensorId, w: TensorId, bias: Option<TensorId>) -> Result<TensorId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || sx.is_empty() || sx[sx.len() - 1] != sw[1] {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let (n_out, n_in) = (sw[0], sw[1]);
        if let Some(b) = bias {
            if self.shape(b) != [n_out] {
                return Err(Error::shape("linear bias", &sw, self.shape(b)));
            }
        }
        let rows = leading(&sx, 1);
        let mut out = vec![T::zero(); rows * n_out];
        T::gemm(rows, n_in, n_out, self.value(x).data(), (n_in as isize, 1), self.value(w).data(), (1, n_in as isize), &mut out, false);
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(n_out) {
                row.iter_mut().zip(bv).for_each(|(o, &bb)| *o += bb);
            }
        }
        let mut out_shape = sx.clone();
        *out_shape.last_mut().unwrap() = n_out;
        let backward = Box::new(move |ctx: &BackwardCtx<'_, T>, g: &[T]| {
            let (xv, wv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let dx = ctx.needs[0].then(|| {
                let mut dx = vec![T::zero(); rows * n_in];
                T::gemm(rows, n_out, n_in, g, (n_out as isize, 1), wv, (n_in as isize, 1), &mut dx, false);
                dx
            });
            let dw = ctx.needs[1].then(|| {
                let mut dw = vec![T::zero(); n_out * n_in];
                T::gemm(n_out, rows, n_in, g, (1, n_out as isize), xv, (n_in as isize, 1), &mut dw, false);
                dw
            });
            let mut grads = vec![dx, dw];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs[2].then(|| {
                    let mut db = vec![T::zero(); n_out];
                    for row in g.chunks_exact(n_out) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    db
                }));
            }
            grads
        });
        let inputs: Vec<TensorId> = [x, w].into_iter().chain(bias).collect();
        Ok(self.push(Tensor::new(out_shape, out)?, &inputs, backward))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let backward = Box::new(|ctx: &BackwardCtx<'_, T>, g: &[T]| {
            vec![ctx.needs[0].then(|| g.to_vec()), ctx.needs[1].then(|| g.to_vec())]
        });
        Ok(self.push(Tensor::new(shape, out)?, &[a, b], backward))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let backward = Box::new(|ctx: &BackwardCtx<'_, T>, g: &[T]| {
            let (av, bv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            vec![
                ctx.needs[0].then(|| g.iter().zip(bv).map(|(&g, &b)| g * b).collect()),
                ctx.needs[1].then(|| g.iter().zip(av).map(|(&g, &a)| g * a).collect()),
            ]
        });
        Ok(self.push(Tensor::new(shape, out)?, &[a, b], backward))
    }

    pub fn scale(&mut self, a: TensorId, c: T) -> TensorId {
        let v = self.value(a);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x * c).collect()).expect("same shape");
        let backward = Box::new(move |_: &BackwardCtx<'_, T>, g: &[T]| vec![Some(g.iter().map(|&x| x * c).collect())]);
        self.push(out, &[a], backward)
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let total = self.value(a).data().iter().copied().sum();
        let n = self.value(a).numel();
        let backward = Box::new(move |_: &BackwardCtx<'_, T>, g: &[T]| vec![Some(vec![g[0]; n])]);
        self.push(Tensor::scalar(total), &[a], backward)
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        let out = self.value(a).clone().with_requires_grad(false);
        let out = Tensor::new(shape.to_vec(), out.into_data()).map_err(|_| Error::shape("reshape", self.shape(a), shape))?;
        let backward = Box::new(|_: &BackwardCtx<'_, T>, g: &[T]| vec![Some(g.to_vec())]);
        Ok(self.push(out, &[a], backward))
    }

    pub fn activation(&mut self, a: TensorId, kind: Activation) -> TensorId {
        let v = self.value(a);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| kind.apply(x)).collect()).expect("same shape");
        let backward = Box::new(move |ctx: &BackwardCtx<'_, T>, g: &[T]| {
            vec![Some(ctx.inputs[0].data().iter().zip(g).map(|(&x, &g)| g * kind.derivative(x)).collect())]
        });
        self.push(out, &[a], backward)
    }

    /// Per-row normalization to zero mean and unit variance, then `gain` and
    /// `bias` over the last axis.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: f64) -> Result<TensorId> {
        self.norm_impl(x, gain, Some(bias), eps, true)
    }

    /// Root-mean-square normalization: no centering and no bias.
    pub fn rms_norm(&mut self, x: TensorId, gain: TensorId, eps: f64) -> Result<TensorId> {
        self.norm_impl(x, gain, None, eps, false)
    }

    fn norm_impl(&mut self, x: TensorId, gain: TensorId, bias: Option<TensorId>, eps: f64, center: bool) -> Result<TensorId> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if xv.ndim() == 0 || d < 2 {
            return Err(Error::Contract(format!("normalization over last axis of {:?} needs d > 1", xv.shape())));
        }
        if self.shape(gain) != [d] {
            return Err(Error::shape("norm gain", xv.shape(), self.shape(gain)));
        }
        if let Some(b) = bias {
            if self.shape(b) != [d] {
                return Err(Error::shape("norm bias", xv.shape(), self.shape(b)));
            }
        }
        let rows = xv.rows();
        let eps = T::of(eps);
        let dt = T::of(d as f64);
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = if center { row.iter().copied().sum::<T>() / dt } else { T::zero() };
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let gv = self.value(gain).data();
        let bv = bias.map(|b| self.value(b).data());
        let mut out = xhat.clone();
        for row in out.chunks_exact_mut(d) {
            for (j, o) in row.iter_mut().enumerate() {
                *o = *o * gv[j] + bv.map_or(T::zero(), |b| b[j]);
            }
        }
        let shape = xv.shape().to_vec();
        let backward = Box::new(move |ctx: &BackwardCtx<'_, T>, g: &[T]| {
            let gv = ctx.inputs[1].data();
            let dx = ctx.needs[0].then(|| {
                let mut dx = vec![T::zero(); rows * d];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_xhat = T::zero();
                    for j in 0..d {
                        dxhat[j] = gr[j] * gv[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xr[j];
                    }
                    mean_dxhat = if center { mean_dxhat / dt } else { T::zero() };
                    mean_dxhat_xhat = mean_dxhat_xhat / dt;
                    for j in 0..d {
                        dx[r * d + j] = rstd[r] * (dxhat[j] - mean_dxhat - xr[j] * mean_dxhat_xhat);
                    }
                }
                dx
            });
            let dgain = ctx.needs[1].then(|| {
                let mut dg = vec![T::zero(); d];
                for (gr, xr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        dg[j] += gr[j] * xr[j];
                    }
                }
                dg
            });
            let mut grads = vec![dx, dgain];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs[2].then(|| {
                    let mut db = vec![T::zero(); d];
                    for gr in g.chunks_exact(d) {
                        db.iter_mut().zip(gr).for_each(|(a, &b)| *a += b);
                    }
                    db
                }));
            }
            grads
        });
        let inputs: Vec<TensorId> = [x, gain].into_iter().chain(bias).collect();
        Ok(self.push(Tensor::new(shape, out)?, &inputs, backward))
    }

    /// Softmax over the last axis with optional masking.
    ///
    /// Masked entries are exactly zero. Rows are shifted by their visible
    /// maximum before exponentiation.
    pub fn softmax_lastdim(&mut self, x: TensorId, mask: Option<&Mask>) -> Result<TensorId> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if let Some(m) = mask {
            if m.cols() != n {
                return Err(Error::shape("softmax mask", xv.shape(), &[m.rows(), m.cols()]));
            }
        }
        let rows = xv.rows();
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            let row = xv.row(r);
            let vis = mask.map(|m| m.row_slice(r));
            let visible = |j: usize| vis.is_none_or(|v| v[j]);
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if visible(j) && v > max {
                    max = v;
                }
            }
            let o = &mut out[r * n..(r + 1) * n];
            if max == T::neg_infinity() {
                if !(0..n).any(visible) {
                    return Err(Error::InvalidMask(format!("row {r} has no visible entry")));
                }
                // Every visible entry is NaN or −∞: nothing to normalize.
                (0..n).filter(|&j| visible(j)).for_each(|j| o[j] = T::nan());
                continue;
            }
            let mut total = T::zero();
            for j in 0..n {
                if visible(j) {
                    o[j] = (row[j] - max).exp();
                    total += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v = *v / total);
        }
        let shape = xv.shape().to_vec();
        let backward = Box::new(move |ctx: &BackwardCtx<'_, T>, g: &[T]| {
            let y = ctx.output.data();
            let mut dx = vec![T::zero(); rows * n];
            for r in 0..rows {
                let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..n {
                    dx[r * n + j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(dx)]
        });
        Ok(self.push(Tensor::new(shape, out)?, &[x], backward))
    }

    /// `sigmoid(x + bias)` on visible entries; masked entries are exactly 0.
    pub fn masked_sigmoid(&mut self, x: TensorId, bias: T, mask: Option<&Mask>) -> Result<TensorId> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if let Some(m) = mask {
            if m.cols() != n {
                return Err(Error::shape("sigmoid mask", xv.shape(), &[m.rows(), m.cols()]));
            }
        }
        let rows = xv.rows();
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            let row = xv.row(r);
            let vis = mask.map(|m| m.row_slice(r));
            for j in 0..n {
                if vis.is_none_or(|v| v[j]) {
                    out[r * n + j] = sigmoid(row[j] + bias);
                }
            }
        }
        let shape = xv.shape().to_vec();
        let backward = Box::new(|ctx: &BackwardCtx<'_, T>, g: &[T]| {
            // masked outputs are 0, so y(1-y) vanishes there as well
            vec![Some(ctx.output.data().iter().zip(g).map(|(&y, &g)| g * y * (T::one() - y)).collect())]
        });
        Ok(self.push(Tensor::new(shape, out)?, &[x], backward))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`[N, V]`).
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let n = lv.rows();
        if lv.ndim() != 2 || targets.len() != n || n == 0 {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index { index: bad, bound: v });
        }
        let mut probs = vec![T::zero(); n * v];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[r * v..(r + 1) * v];
            let mut z = T::zero();
            for (pj, &x) in p.iter_mut().zip(row) {
                *pj = (x - max).exp();
                z += *pj;
            }
            p.iter_mut().for_each(|pj| *pj = *pj / z);
            total += z.ln() + max - row[t];
        }
        let nt = T::of(n as f64);
        let targets = targets.to_vec();
        let backward = Box::new(move |_: &BackwardCtx<'_, T>, g: &[T]| {
            let s = g[0] / nt;
            let mut dx: Vec<T> = probs.iter().map(|&p| p * s).collect();
            for (r, &t) in targets.iter().enumerate() {
                dx[r * v + t] -= s;
            }
            vec![Some(dx)]
        });
        Ok(self.push(Tensor::scalar(total / nt), &[logits], backward))
    }

    /// Gathers rows of `table` (`[V, D]`); output shape is `prefix + [D]`.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize], prefix: &[usize]) -> Result<TensorId> {
        let tv = self.value(table);
        if tv.ndim() != 2 || prefix.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding", tv.shape(), prefix));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index { index: bad, bound: vocab });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let ids = ids.to_vec();
        let backward = Box::new(move |_: &BackwardCtx<'_, T>, g: &[T]| {
            let mut dt = vec![T::zero(); vocab * d];
            for (r, &i) in ids.iter().enumerate() {
                dt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, &b)| *a += b);
            }
            vec![Some(dt)]
        });
        Ok(self.push(Tensor::new(shape, out)?, &[table], backward))
    }

    /// `[B, T, H·dh]` → `[B, H, T, dh]`.
    pub fn split_heads(&mut self, x: TensorId, heads: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(Error::shape("split_heads", &s, &[heads]));
        }
        let (b, t, dh) = (s[0], s[1], s[2] / heads);
        let out = permute_bthd(self.value(x).data(), b, t, heads, dh, false);
        let backward = Box::new(move |_: &BackwardCtx<'_, T>, g: &[T]| vec![Some(permute_bthd(g, b, t, heads, dh, true))]);
        Ok(self.push(Tensor::new([b, heads, t, dh], out)?, &[x], backward))
    }

    /// `[B, H, T, dh]` → `[B, T, H·dh]`.
    pub fn merge_heads(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("merge_heads", &s, &[]));
        }
        let (b, heads, t, dh) = (s[0], s[1], s[2], s[3]);
        let out = permute_bthd(self.value(x).data(), b, t, heads, dh, true);
        let backward = Box::new(move |_: &BackwardCtx<'_, T>, g: &[T]| vec![Some(permute_bthd(g, b, t, heads, dh, false))]);
        Ok(self.push(Tensor::new([b, t, heads * dh], out)?, &[x], backward))
    }

    /// Adds row `l % G` of `p` (`[G, d]` or `[d]`) to every row of slice `l`
    /// of `x` (`[..., R, d]`).
    pub fn add_group_bias(&mut self, x: TensorId, p: TensorId) -> Result<TensorId> {
        let (slices, r, d, g) = self.group_dims("add_group_bias", x, p)?;
        let mut out = self.value(x).data().to_vec();
        let pv = self.value(p).data();
        for l in 0..slices {
            let prow = &pv[(l % g) * d..(l % g + 1) * d];
            for row in out[l * r * d..(l + 1) * r * d].chunks_exact_mut(d) {
                row.iter_mut().zip(prow).for_each(|(o, &b)| *o += b);
            }
        }
        let shape = self.shape(x).to_vec();
        let backward = Box::new(move |ctx: &BackwardCtx<'_, T>, gr: &[T]| {
            let dp = ctx.needs[1].then(|| {
                let mut dp = vec![T::zero(); g * d];
                for l in 0..slices {
                    let dst = &mut dp[(l % g) * d..(l % g + 1) * d];
                    for row in gr[l * r * d..(l + 1) * r * d].chunks_exact(d) {
                        dst.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                }
                dp
            });
            vec![ctx.needs[0].then(|| gr.to_vec()), dp]
        });
        Ok(self.push(Tensor::new(shape, out)?, &[x, p], backward))
    }

    /// Appends row `l % G` of `p` as an extra trailing row of slice `l` of
    /// `x`: `[..., R, d]` → `[..., R + 1, d]`.
    pub fn append_group_row(&mut self, x: TensorId, p: TensorId) -> Result<TensorId> {
        let (slices, r, d, g) = self.group_dims("append_group_row", x, p)?;
        let xv = self.value(x).data();
        let pv = self.value(p).data();
        let mut out = Vec::with_capacity(slices * (r + 1) * d);
        for l in 0..slices {
            out.extend_from_slice(&xv[l * r * d..(l + 1) * r * d]);
            out.extend_from_slice(&pv[(l % g) * d..(l % g + 1) * d]);
        }
        let mut shape = self.shape(x).to_vec();
        let n = shape.len();
        shape[n - 2] += 1;
        let backward = Box::new(move |ctx: &BackwardCtx<'_, T>, gr: &[T]| {
            let dx = ctx.needs[0].then(|| {
                let mut dx = Vec::with_capacity(slices * r * d);
                for l in 0..slices {
                    dx.extend_from_slice(&gr[l * (r + 1) * d..(l * (r + 1) + r) * d]);
                }
                dx
            });
            let dp = ctx.needs[1].then(|| {
                let mut dp = vec![T::zero(); g * d];
                for l in 0..slices {
                    let src = &gr[(l * (r + 1) + r) * d..(l + 1) * (r + 1) * d];
                    dp[(l % g) * d..(l % g + 1) * d].iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                }
                dp
            });
            vec![dx, dp]
        });
        Ok(self.push(Tensor::new(shape, out)?, &[x, p], backward))
    }

    fn group_dims(&self, op: &'static str, x: TensorId, p: TensorId) -> Result<(usize, usize, usize, usize)> {
        let (sx, sp) = (self.shape(x), self.shape(p));
        if sx.len() < 2 {
            return Err(Error::shape(op, sx, sp));
        }
        let d = sx[sx.len() - 1];
        let r = sx[sx.len() - 2];
        let slices = leading(sx, 2);
        let g = match sp {
            [pd] if *pd == d => 1,
            [pg, pd] if *pd == d && *pg > 0 && slices % *pg == 0 => *pg,
            _ => return Err(Error::shape(op, sx, sp)),
        };
        Ok((slices, r, d, g))
    }

    /// Multiplies each row of `x` (`[..., n]`) by the matching entry of `s`
    /// (`[..., 1]`).
    pub fn scale_rows(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        let (xv, sv) = (self.value(x), self.value(s));
        let n = xv.last_dim();
        if sv.last_dim() != 1 || sv.numel() != xv.rows() || xv.ndim() == 0 {
            return Err(Error::shape("scale_rows", xv.shape(), sv.shape()));
        }
        let mut out = xv.data().to_vec();
        for (row, &f) in out.chunks_exact_mut(n).zip(sv.data()) {
            row.iter_mut().for_each(|v| *v = *v * f);
        }
        let shape = xv.shape().to_vec();
        let backward = Box::new(move |ctx: &BackwardCtx<'_, T>, g: &[T]| {
            let (xv, sv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let dx = ctx.needs[0].then(|| {
                let mut dx = g.to_vec();
                for (row, &f) in dx.chunks_exact_mut(n).zip(sv) {
                    row.iter_mut().for_each(|v| *v = *v * f);
                }
                dx
            });
            let ds = ctx.needs[1].then(|| {
                g.chunks_exact(n)
                    .zip(xv.chunks_exact(n))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(&a, &b)| a * b).sum())
                    .collect()
            });
            vec![dx, ds]
        });
        Ok(self.push(Tensor::new(shape, out)?, &[x, s], backward))
    }
}

/// Moves axis layout between `[B, T, H, dh]` and `[B, H, T, dh]`.
fn permute_bthd<T: Copy + Default>(src: &[T], b: usize, t: usize, h: usize, dh: usize, from_heads: bool) -> Vec<T> {
    let mut out = vec![T::default(); src.len()];
    for bi in 0..b {
        for ti in 0..t {
            for hi in 0..h {
                let bthd = ((bi * t + ti) * h + hi) * dh;
                let bhtd = ((bi * h + hi) * t + ti) * dh;
                let (s, d) = if from_heads { (bhtd, bthd) } else { (bthd, bhtd) };
                out[d..d + dh].copy_from_slice(&src[s..s + dh]);
            }
        }
    }
    out
}
