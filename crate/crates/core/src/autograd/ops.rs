use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::Rng;

use super::kernels;
use super::{AutogradError, Op, Tape, Tensor, Var};

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutogradError {
    AutogradError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

impl Tape {
    fn grad_any(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn record(&mut self, value: Tensor, inputs: &[usize], op: Op) -> Var {
        let rg = self.grad_any(inputs);
        self.push(value, rg, op)
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = alloc::vec![0.0; m * n];
        kernels::mm(self.nodes[ia].value.data(), self.nodes[ib].value.data(), &mut out, m, k, n);
        Ok(self.record(Tensor { shape: alloc::vec![m, n], data: Arc::new(out) }, &[ia, ib], Op::MatMul { a: ia, b: ib, m, k, n }))
    }

    /// Batched product of `[B,m,k]` with `[B,k,n]`, or with `[B,n,k]`
    /// transposed when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, AutogradError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch("batch_matmul", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(mismatch("batch_matmul", sa, sb));
        }
        let mut out = alloc::vec![0.0; batch * m * n];
        let (da, db) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        for bi in 0..batch {
            let a_s = &da[bi * m * k..(bi + 1) * m * k];
            let b_s = &db[bi * k * n..(bi + 1) * k * n];
            let c_s = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                kernels::mm_bt(a_s, b_s, c_s, m, k, n);
            } else {
                kernels::mm(a_s, b_s, c_s, m, k, n);
            }
        }
        let value = Tensor { shape: alloc::vec![batch, m, n], data: Arc::new(out) };
        Ok(self.record(value, &[ia, ib], Op::BatchMatMul { a: ia, b: ib, batch, m, k, n, trans_b }))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor), AutogradError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ia, ib, Tensor { shape: ta.shape().to_vec(), data: Arc::new(data) }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        let (ia, ib, value) = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.record(value, &[ia, ib], Op::Add { a: ia, b: ib }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        let (ia, ib, value) = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.record(value, &[ia, ib], Op::Mul { a: ia, b: ib }))
    }

    /// Adds a `[d]` vector to every row of a `[..., d]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, AutogradError> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let (tx, tb) = (&self.nodes[ix].value, &self.nodes[ib].value);
        let d = tb.numel();
        if tb.rank() != 1 || tx.shape().last() != Some(&d) {
            return Err(mismatch("add_bias", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, &b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let value = Tensor { shape: tx.shape().to_vec(), data: Arc::new(data) };
        Ok(self.record(value, &[ix, ib], Op::AddBias { x: ix, bias: ib }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, AutogradError> {
        let ix = self.check(x)?;
        let t = &self.nodes[ix].value;
        let value = Tensor { shape: t.shape().to_vec(), data: Arc::new(t.data().iter().map(|v| v * factor).collect()) };
        Ok(self.record(value, &[ix], Op::Scale { x: ix, factor }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutogradError> {
        let ix = self.check(x)?;
        let t = &self.nodes[ix].value;
        if shape.iter().product::<usize>() != t.numel() {
            return Err(mismatch("reshape", t.shape(), shape));
        }
        let value = Tensor { shape: shape.to_vec(), data: t.data.clone() };
        Ok(self.record(value, &[ix], Op::Reshape { x: ix }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, AutogradError> {
        let ix = self.check(x)?;
        let t = &self.nodes[ix].value;
        let rank = t.rank();
        let mut seen = alloc::vec![false; rank];
        if axes.len() != rank {
            return Err(mismatch("permute", t.shape(), axes));
        }
        for &a in axes {
            if a >= rank || seen[a] {
                return Err(mismatch("permute", t.shape(), axes));
            }
            seen[a] = true;
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape()[a]).collect();
        let data = permute_data(t.data(), t.shape(), axes);
        let value = Tensor { shape: out_shape, data: Arc::new(data) };
        Ok(self.record(value, &[ix], Op::Permute { x: ix, axes: axes.to_vec() }))
    }

    /// Selects rows of a tensor viewed as `[rows, last_dim]`; used for
    /// embedding lookups and pooling.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var, AutogradError> {
        let it = self.check(table)?;
        let t = &self.nodes[it].value;
        let width = t.shape().last().copied().unwrap_or(1);
        let n_rows = t.numel() / width.max(1);
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= n_rows {
                return Err(AutogradError::RowOutOfRange { index: r, rows: n_rows });
            }
            data.extend_from_slice(t.row(r));
        }
        let value = Tensor { shape: alloc::vec![rows.len(), width], data: Arc::new(data) };
        Ok(self.record(value, &[it], Op::GatherRows { table: it, rows: rows.to_vec() }))
    }

    /// Replaces positions where `mask` is true with [`super::MASKED_LOGIT`].
    pub fn masked_fill(&mut self, x: Var, mask: &[bool]) -> Result<Var, AutogradError> {
        let ix = self.check(x)?;
        let t = &self.nodes[ix].value;
        if mask.len() != t.numel() {
            return Err(mismatch("masked_fill", t.shape(), &[mask.len()]));
        }
        let data = t.data().iter().zip(mask).map(|(&v, &m)| if m { super::MASKED_LOGIT } else { v }).collect();
        let value = Tensor { shape: t.shape().to_vec(), data: Arc::new(data) };
        Ok(self.record(value, &[ix], Op::MaskedFill { x: ix, mask: mask.to_vec() }))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, AutogradError> {
        let ix = self.check(x)?;
        let t = &self.nodes[ix].value;
        let rank = t.rank();
        if axis >= rank {
            return Err(AutogradError::InvalidAxis { axis, rank });
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let n = t.shape()[axis];
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let mut data = t.data().to_vec();
        softmax_in_place(&mut data, outer, n, inner);
        let value = Tensor { shape: t.shape().to_vec(), data: Arc::new(data) };
        Ok(self.record(value, &[ix], Op::Softmax { x: ix, outer, n, inner }))
    }

    /// Normalizes each row of the last dimension, then applies `gain` and
    /// `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, AutogradError> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let (tx, tg, tb) = (&self.nodes[ix].value, &self.nodes[ig].value, &self.nodes[ib].value);
        let d = tx.shape().last().copied().unwrap_or(0);
        if d == 0 || tg.shape() != [d] || tb.shape() != [d] {
            return Err(mismatch("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.numel() / d;
        let mut xhat = alloc::vec![0.0; tx.numel()];
        let mut inv_std = alloc::vec![0.0; rows];
        let mut out = alloc::vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(var + eps);
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor { shape: tx.shape().to_vec(), data: Arc::new(out) };
        Ok(self.record(value, &[ix, ig, ib], Op::LayerNorm { x: ix, gain: ig, bias: ib, xhat, inv_std }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, AutogradError> {
        let ix = self.check(x)?;
        let t = &self.nodes[ix].value;
        let value = Tensor { shape: t.shape().to_vec(), data: Arc::new(t.data().iter().map(|&v| kernels::gelu(v)).collect()) };
        Ok(self.record(value, &[ix], Op::Gelu { x: ix }))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, AutogradError> {
        let ix = self.check(x)?;
        let t = &self.nodes[ix].value;
        let value = Tensor { shape: t.shape().to_vec(), data: Arc::new(t.data().iter().map(|&v| libm::tanh(v)).collect()) };
        Ok(self.record(value, &[ix], Op::Tanh { x: ix }))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var, AutogradError> {
        let ix = self.check(x)?;
        let s = self.nodes[ix].value.data().iter().sum();
        Ok(self.record(Tensor::scalar(s), &[ix], Op::Sum { x: ix }))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `[batch, classes]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, AutogradError> {
        let il = self.check(logits)?;
        let t = &self.nodes[il].value;
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(mismatch("cross_entropy", t.shape(), &[labels.len()]));
        }
        let (batch, classes) = (t.shape()[0], t.shape()[1]);
        if batch == 0 {
            return Err(AutogradError::EmptyBatch("cross_entropy"));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(AutogradError::LabelOutOfRange { label, classes });
        }
        let mut probs = t.data().to_vec();
        softmax_in_place(&mut probs, batch, classes, 1);
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
            loss += lse - row[label];
        }
        loss /= batch as f64;
        Ok(self.record(Tensor::scalar(loss), &[il], Op::CrossEntropy { logits: il, labels: labels.to_vec(), probs }))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1 / (1 - p)`. Identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var, AutogradError> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutogradError::BadDropout(p));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let ix = self.check(x)?;
        let shape = self.nodes[ix].value.shape().to_vec();
        let n = self.nodes[ix].value.numel();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let m = self.constant(Tensor { shape, data: Arc::new(mask) });
        self.mul(x, m)
    }
}

/// Softmax over the middle axis of a `[outer, n, inner]` layout.
pub(crate) fn softmax_in_place(data: &mut [f64], outer: usize, n: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                max = max.max(data[at(j)]);
            }
            let mut sum = 0.0;
            for j in 0..n {
                let e = libm::exp(data[at(j)] - max);
                data[at(j)] = e;
                sum += e;
            }
            for j in 0..n {
                data[at(j)] /= sum;
            }
        }
    }
}

pub(crate) fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = alloc::vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = alloc::vec![0usize; rank];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}
