use super::conv::{self, ConvGeometry};
use super::scalar::matmul_rm;
use super::tensor::{note_zero_norm, numel};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Recorded operation plus whatever the backward pass needs beyond the
/// parents' values.
pub(crate) enum Op<T: Scalar> {
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    AddRowBias,
    Scale(T),
    AddConst,
    MulScalar,
    Relu,
    Sigmoid,
    Log,
    Exp,
    Sum,
    Mean,
    L2Norm,
    Reshape,
    Element(usize),
    ConcatCols(Vec<usize>),
    GatherRows(Vec<usize>),
    GroupMeanRows(usize),
    MeanRows,
    NormalizeRows(Vec<T>),
    SoftmaxRows,
    SoftmaxCrossEntropy { probs: Vec<T>, targets: Vec<usize> },
    Nll(Vec<usize>),
    Cosine { norm_u: T, norm_v: T },
    Conv2d { geom: ConvGeometry, cols: Vec<T> },
    MaxPool2 { argmax: Vec<usize> },
    GlobalAvgPool,
}

fn dim_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{what}: incompatible shapes {a:?} and {b:?}"))
}

fn map<T: Scalar>(x: &[T], f: impl Fn(T) -> T) -> Vec<T> {
    x.iter().map(|&v| f(v)).collect()
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn dims2(t: &Tensor<impl Scalar>, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [m, n] => Ok((m, n)),
        ref s => Err(Error::Dimension(format!("{what}: expected a matrix, got shape {s:?}"))),
    }
}

fn transpose_buf<T: Scalar>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = dims2(self, "matmul")?;
        let (k2, n) = dims2(other, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(), other.shape()));
        }
        let out = matmul_rm(m, k, n, &self.data(), &other.data());
        Ok(Tensor::from_op(vec![m, n], out, Op::MatMul, vec![self.clone(), other.clone()]))
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (m, n) = dims2(self, "transpose")?;
        let out = transpose_buf(&self.data(), m, n);
        Ok(Tensor::from_op(vec![n, m], out, Op::Transpose, vec![self.clone()]))
    }

    fn same_shape(&self, other: &Tensor<T>, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(dim_err(what, self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_shape(other, "add")?;
        let out = zip_map(&self.data(), &other.data(), |a, b| a + b);
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Add, vec![self.clone(), other.clone()]))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_shape(other, "sub")?;
        let out = zip_map(&self.data(), &other.data(), |a, b| a - b);
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Sub, vec![self.clone(), other.clone()]))
    }

    /// Element-wise product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_shape(other, "mul")?;
        let out = zip_map(&self.data(), &other.data(), |a, b| a * b);
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Mul, vec![self.clone(), other.clone()]))
    }

    /// `x[i, :] + bias` for every row of a matrix.
    pub fn add_row_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, n) = dims2(self, "add_row_bias")?;
        if bias.numel() != n || bias.rank() != 1 {
            return Err(dim_err("add_row_bias", self.shape(), bias.shape()));
        }
        let b = bias.data();
        let mut out = self.to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(b.iter()).for_each(|(v, &bb)| *v = *v + bb);
        }
        drop(b);
        Ok(Tensor::from_op(vec![m, n], out, Op::AddRowBias, vec![self.clone(), bias.clone()]))
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        let out = map(&self.data(), |v| v * c);
        Tensor::from_op(self.shape().to_vec(), out, Op::Scale(c), vec![self.clone()])
    }

    pub fn add_const(&self, c: T) -> Tensor<T> {
        let out = map(&self.data(), |v| v + c);
        Tensor::from_op(self.shape().to_vec(), out, Op::AddConst, vec![self.clone()])
    }

    /// Every element times a one-element tensor.
    pub fn mul_scalar(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        if s.numel() != 1 {
            return Err(dim_err("mul_scalar", self.shape(), s.shape()));
        }
        let c = s.item();
        let out = map(&self.data(), |v| v * c);
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::MulScalar, vec![self.clone(), s.clone()]))
    }

    pub fn relu(&self) -> Tensor<T> {
        let out = map(&self.data(), |v| v.max(T::zero()));
        Tensor::from_op(self.shape().to_vec(), out, Op::Relu, vec![self.clone()])
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let out = map(&self.data(), |v| {
            // Branch keeps exp() from overflowing for large |v|.
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        Tensor::from_op(self.shape().to_vec(), out, Op::Sigmoid, vec![self.clone()])
    }

    pub fn log(&self) -> Result<Tensor<T>> {
        let data = self.data();
        if let Some(bad) = data.iter().find(|v| !(**v > T::zero())) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let out = map(&data, |v| v.ln());
        drop(data);
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Log, vec![self.clone()]))
    }

    pub fn exp(&self) -> Tensor<T> {
        let out = map(&self.data(), |v| v.exp());
        Tensor::from_op(self.shape().to_vec(), out, Op::Exp, vec![self.clone()])
    }

    pub fn sum(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        Tensor::from_op(vec![], vec![s], Op::Sum, vec![self.clone()])
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::of(self.numel() as f64);
        let s: T = self.data().iter().copied().sum();
        Tensor::from_op(vec![], vec![s / n], Op::Mean, vec![self.clone()])
    }

    /// Euclidean norm of all elements. The gradient at zero is taken as zero.
    pub fn l2_norm(&self) -> Tensor<T> {
        let n = self.data().iter().map(|&v| v * v).sum::<T>().sqrt();
        Tensor::from_op(vec![], vec![n], Op::L2Norm, vec![self.clone()])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(dim_err("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), Op::Reshape, vec![self.clone()]))
    }

    /// The `i`-th element (flat index) as a scalar.
    pub fn element(&self, i: usize) -> Result<Tensor<T>> {
        if i >= self.numel() {
            return Err(Error::Index(format!("element {i} of shape {:?}", self.shape())));
        }
        let v = self.data()[i];
        Ok(Tensor::from_op(vec![], vec![v], Op::Element(i), vec![self.clone()]))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (m, _) = dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = dims2(p, "concat_cols")?;
            if pm != m {
                return Err(dim_err("concat_cols", first.shape(), p.shape()));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for i in 0..m {
            for (d, &w) in datas.iter().zip(&widths) {
                out.extend_from_slice(&d[i * w..(i + 1) * w]);
            }
        }
        drop(datas);
        Ok(Tensor::from_op(vec![m, total], out, Op::ConcatCols(widths), parts.to_vec()))
    }

    /// Rows picked by index, repeats allowed.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let (m, n) = dims2(self, "gather_rows")?;
        if indices.is_empty() {
            return Err(Error::Index("gather_rows with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::Index(format!("row {bad} of a {m}-row matrix")));
        }
        let data = self.data();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(&data[i * n..(i + 1) * n]);
        }
        drop(data);
        Ok(Tensor::from_op(
            vec![indices.len(), n],
            out,
            Op::GatherRows(indices.to_vec()),
            vec![self.clone()],
        ))
    }

    /// Averages consecutive blocks of `group` rows: `[g·m × n] → [m × n]`.
    pub fn group_mean_rows(&self, group: usize) -> Result<Tensor<T>> {
        let (rows, n) = dims2(self, "group_mean_rows")?;
        if group == 0 || rows % group != 0 {
            return Err(Error::Dimension(format!(
                "group_mean_rows: {rows} rows not divisible into groups of {group}"
            )));
        }
        let m = rows / group;
        let inv = T::one() / T::of(group as f64);
        let data = self.data();
        let mut out = vec![T::zero(); m * n];
        for (r, row) in data.chunks(n).enumerate() {
            let dst = &mut out[(r / group) * n..(r / group + 1) * n];
            dst.iter_mut().zip(row).for_each(|(o, &v)| *o = *o + v * inv);
        }
        drop(data);
        Ok(Tensor::from_op(vec![m, n], out, Op::GroupMeanRows(group), vec![self.clone()]))
    }

    /// Column means of a matrix: `[m × n] → [n]`.
    pub fn mean_rows(&self) -> Result<Tensor<T>> {
        let (m, n) = dims2(self, "mean_rows")?;
        let inv = T::one() / T::of(m as f64);
        let mut out = vec![T::zero(); n];
        for row in self.data().chunks(n) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o = *o + v * inv);
        }
        Ok(Tensor::from_op(vec![n], out, Op::MeanRows, vec![self.clone()]))
    }

    /// Scales each row to unit length. All-zero rows map to zero rows with a
    /// zero gradient.
    pub fn normalize_rows(&self) -> Result<Tensor<T>> {
        let (m, n) = dims2(self, "normalize_rows")?;
        let data = self.data();
        let mut out = vec![T::zero(); m * n];
        let mut norms = Vec::with_capacity(m);
        for (row, dst) in data.chunks(n).zip(out.chunks_mut(n)) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm > T::zero() {
                dst.iter_mut().zip(row).for_each(|(o, &v)| *o = v / norm);
            } else {
                note_zero_norm();
            }
            norms.push(norm);
        }
        drop(data);
        Ok(Tensor::from_op(vec![m, n], out, Op::NormalizeRows(norms), vec![self.clone()]))
    }

    pub fn softmax_rows(&self) -> Result<Tensor<T>> {
        let (m, n) = dims2(self, "softmax_rows")?;
        let mut out = vec![T::zero(); m * n];
        for (row, dst) in self.data().chunks(n).zip(out.chunks_mut(n)) {
            softmax_row(row, dst);
        }
        Ok(Tensor::from_op(vec![m, n], out, Op::SoftmaxRows, vec![self.clone()]))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&self, targets: &[usize]) -> Result<Tensor<T>> {
        let (b, c) = dims2(self, "softmax_cross_entropy")?;
        if targets.len() != b {
            return Err(Error::Dimension(format!(
                "softmax_cross_entropy: {b} rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Label { label: bad, classes: c });
        }
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for ((row, dst), &t) in self.data().chunks(c).zip(probs.chunks_mut(c)).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss = loss + lse - row[t];
            softmax_row(row, dst);
        }
        let loss = loss / T::of(b as f64);
        Ok(Tensor::from_op(
            vec![],
            vec![loss],
            Op::SoftmaxCrossEntropy { probs, targets: targets.to_vec() },
            vec![self.clone()],
        ))
    }

    /// Mean negative log of the probability assigned to each target.
    pub fn nll_from_probs(&self, targets: &[usize]) -> Result<Tensor<T>> {
        let (b, c) = dims2(self, "nll_from_probs")?;
        if targets.len() != b {
            return Err(Error::Dimension(format!(
                "nll_from_probs: {b} rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Label { label: bad, classes: c });
        }
        let data = self.data();
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let p = data[i * c + t];
            if !(p > T::zero()) {
                return Err(Error::Domain(format!("log of non-positive probability {p}")));
            }
            loss = loss - p.ln();
        }
        drop(data);
        let loss = loss / T::of(b as f64);
        Ok(Tensor::from_op(vec![], vec![loss], Op::Nll(targets.to_vec()), vec![self.clone()]))
    }

    /// Cosine of the angle between two equally sized tensors, taken as flat
    /// vectors. Defined as 0 (with zero gradient) when either is all zeros.
    pub fn cosine_similarity(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.numel() != other.numel() {
            return Err(dim_err("cosine_similarity", self.shape(), other.shape()));
        }
        let (u, v) = (self.data(), other.data());
        let dot: T = u.iter().zip(v.iter()).map(|(&a, &b)| a * b).sum();
        let norm_u = u.iter().map(|&a| a * a).sum::<T>().sqrt();
        let norm_v = v.iter().map(|&a| a * a).sum::<T>().sqrt();
        let value = if norm_u > T::zero() && norm_v > T::zero() {
            (dot / (norm_u * norm_v)).max(-T::one()).min(T::one())
        } else {
            note_zero_norm();
            T::zero()
        };
        drop((u, v));
        Ok(Tensor::from_op(
            vec![],
            vec![value],
            Op::Cosine { norm_u, norm_v },
            vec![self.clone(), other.clone()],
        ))
    }

    /// Cross-correlation of `[batch×cin×h×w]` input with a
    /// `[cout×cin×kh×kw]` kernel.
    pub fn conv2d(&self, kernel: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
        let geom = ConvGeometry::new(self.shape(), kernel.shape(), stride, padding)?;
        let (out, cols) = conv::forward(&geom, &self.data(), &kernel.data());
        let shape = geom.output_shape().to_vec();
        Ok(Tensor::from_op(shape, out, Op::Conv2d { geom, cols }, vec![self.clone(), kernel.clone()]))
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&self) -> Result<Tensor<T>> {
        let (out, argmax, shape) = conv::max_pool2(self.shape(), &self.data())?;
        Ok(Tensor::from_op(shape, out, Op::MaxPool2 { argmax }, vec![self.clone()]))
    }

    /// `[batch×c×h×w] → [batch×c]` spatial mean.
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        let [b, c, h, w] = *self.shape() else {
            return Err(Error::Dimension(format!(
                "global_avg_pool expects rank 4, got {:?}",
                self.shape()
            )));
        };
        let inv = T::one() / T::of((h * w) as f64);
        let out = self
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(Tensor::from_op(vec![b, c], out, Op::GlobalAvgPool, vec![self.clone()]))
    }
}

impl<T: Scalar> Op<T> {
    /// Gradients for each parent given the output gradient. Entries are
    /// `None` for parents that do not track gradients.
    pub(crate) fn backward(&self, g: &[T], parents: &[Tensor<T>], out: &Tensor<T>) -> Vec<Option<Vec<T>>> {
        let need = |i: usize| parents[i].requires_grad();
        match self {
            Op::MatMul => {
                let (a, b) = (&parents[0], &parents[1]);
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let da = need(0).then(|| {
                    // G[m×n] · Bᵀ
                    let mut da = vec![T::zero(); m * k];
                    T::gemm_raw(m, n, k, g, (n as isize, 1), &b.data(), (1, n as isize), T::zero(), &mut da);
                    da
                });
                let db = need(1).then(|| {
                    // Aᵀ · G[m×n]
                    let mut db = vec![T::zero(); k * n];
                    T::gemm_raw(k, m, n, &a.data(), (1, k as isize), g, (n as isize, 1), T::zero(), &mut db);
                    db
                });
                vec![da, db]
            }
            Op::Transpose => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                vec![Some(transpose_buf(g, m, n))]
            }
            Op::Add => vec![need(0).then(|| g.to_vec()), need(1).then(|| g.to_vec())],
            Op::Sub => vec![need(0).then(|| g.to_vec()), need(1).then(|| map(g, |v| -v))],
            Op::Mul => {
                let (a, b) = (&parents[0], &parents[1]);
                vec![
                    need(0).then(|| zip_map(g, &b.data(), |gg, bb| gg * bb)),
                    need(1).then(|| zip_map(g, &a.data(), |gg, aa| gg * aa)),
                ]
            }
            Op::AddRowBias => {
                let n = parents[1].numel();
                let db = need(1).then(|| {
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                    }
                    db
                });
                vec![need(0).then(|| g.to_vec()), db]
            }
            Op::Scale(c) => vec![Some(map(g, |v| v * *c))],
            Op::AddConst | Op::Reshape => vec![Some(g.to_vec())],
            Op::MulScalar => {
                let (x, s) = (&parents[0], &parents[1]);
                let c = s.item();
                vec![
                    need(0).then(|| map(g, |v| v * c)),
                    need(1).then(|| vec![g.iter().zip(x.data().iter()).map(|(&gg, &xx)| gg * xx).sum()]),
                ]
            }
            Op::Relu => vec![Some(zip_map(g, &parents[0].data(), |gg, x| {
                if x > T::zero() {
                    gg
                } else {
                    T::zero()
                }
            }))],
            Op::Sigmoid => vec![Some(zip_map(g, &out.data(), |gg, y| gg * y * (T::one() - y)))],
            Op::Log => vec![Some(zip_map(g, &parents[0].data(), |gg, x| gg / x))],
            Op::Exp => vec![Some(zip_map(g, &out.data(), |gg, y| gg * y))],
            Op::Sum => vec![Some(vec![g[0]; parents[0].numel()])],
            Op::Mean => {
                let n = parents[0].numel();
                vec![Some(vec![g[0] / T::of(n as f64); n])]
            }
            Op::L2Norm => {
                let norm = out.item();
                let x = parents[0].data();
                if norm > T::zero() {
                    vec![Some(map(&x, |v| g[0] * v / norm))]
                } else {
                    vec![Some(vec![T::zero(); x.len()])]
                }
            }
            Op::Element(i) => {
                let mut d = vec![T::zero(); parents[0].numel()];
                d[*i] = g[0];
                vec![Some(d)]
            }
            Op::ConcatCols(widths) => {
                let total: usize = widths.iter().sum();
                let m = out.shape()[0];
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (pi, &w) in widths.iter().enumerate() {
                    grads.push(need(pi).then(|| {
                        let mut d = Vec::with_capacity(m * w);
                        for i in 0..m {
                            d.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        d
                    }));
                    offset += w;
                }
                grads
            }
            Op::GatherRows(indices) => {
                let n = out.shape()[1];
                let mut d = vec![T::zero(); parents[0].numel()];
                for (r, &i) in indices.iter().enumerate() {
                    let dst = &mut d[i * n..(i + 1) * n];
                    dst.iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(a, &b)| *a = *a + b);
                }
                vec![Some(d)]
            }
            Op::GroupMeanRows(group) => {
                let n = out.shape()[1];
                let inv = T::one() / T::of(*group as f64);
                let rows = parents[0].shape()[0];
                let mut d = Vec::with_capacity(rows * n);
                for r in 0..rows {
                    let src = &g[(r / group) * n..(r / group + 1) * n];
                    d.extend(src.iter().map(|&v| v * inv));
                }
                vec![Some(d)]
            }
            Op::MeanRows => {
                let m = parents[0].shape()[0];
                let inv = T::one() / T::of(m as f64);
                let row: Vec<T> = map(g, |v| v * inv);
                vec![Some(row.iter().copied().cycle().take(m * row.len()).collect())]
            }
            Op::NormalizeRows(norms) => {
                let n = out.shape()[1];
                let y = out.data();
                let mut d = vec![T::zero(); y.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    if norm > T::zero() {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            d[r * n + j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                }
                vec![Some(d)]
            }
            Op::SoftmaxRows => {
                let n = out.shape()[1];
                let y = out.data();
                let mut d = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(d.chunks_mut(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(d)]
            }
            Op::SoftmaxCrossEntropy { probs, targets } => {
                let c = parents[0].shape()[1];
                let scale = g[0] / T::of(targets.len() as f64);
                let mut d = map(probs, |p| p * scale);
                for (i, &t) in targets.iter().enumerate() {
                    d[i * c + t] = d[i * c + t] - scale;
                }
                vec![Some(d)]
            }
            Op::Nll(targets) => {
                let c = parents[0].shape()[1];
                let x = parents[0].data();
                let scale = g[0] / T::of(targets.len() as f64);
                let mut d = vec![T::zero(); x.len()];
                for (i, &t) in targets.iter().enumerate() {
                    d[i * c + t] = d[i * c + t] - scale / x[i * c + t];
                }
                vec![Some(d)]
            }
            Op::Cosine { norm_u, norm_v } => {
                let (nu, nv) = (*norm_u, *norm_v);
                if !(nu > T::zero() && nv > T::zero()) {
                    return vec![
                        need(0).then(|| vec![T::zero(); parents[0].numel()]),
                        need(1).then(|| vec![T::zero(); parents[1].numel()]),
                    ];
                }
                let cos = out.item();
                let (u, v) = (parents[0].data(), parents[1].data());
                let grad_for = |a: &[T], b: &[T], na: T| {
                    a.iter()
                        .zip(b)
                        .map(|(&x, &y)| g[0] * (y / (nu * nv) - cos * x / (na * na)))
                        .collect::<Vec<T>>()
                };
                vec![need(0).then(|| grad_for(&u, &v, nu)), need(1).then(|| grad_for(&v, &u, nv))]
            }
            Op::Conv2d { geom, cols } => {
                let (dx, dk) = conv::backward(geom, g, cols, &parents[1].data(), need(0), need(1));
                vec![dx, dk]
            }
            Op::MaxPool2 { argmax } => {
                let mut d = vec![T::zero(); parents[0].numel()];
                for (&i, &gg) in argmax.iter().zip(g) {
                    d[i] = d[i] + gg;
                }
                vec![Some(d)]
            }
            Op::GlobalAvgPool => {
                let s = parents[0].shape();
                let hw = s[2] * s[3];
                let inv = T::one() / T::of(hw as f64);
                vec![Some(g.iter().flat_map(|&v| std::iter::repeat_n(v * inv, hw)).collect())]
            }
        }
    }
}
