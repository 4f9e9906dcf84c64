//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the nodes in reverse and accumulates gradients into the tape's
//! per-parameter and per-leaf buffers; calling it twice without
//! [`Tape::zero_grad`] doubles them.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Fixed sparse linear map `out[i] = Σ w · src[j]` in compressed-row form.
#[derive(Clone, Debug)]
pub struct SparseMap<T> {
    src_len: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<T>,
}

impl<T: Scalar> SparseMap<T> {
    pub fn from_rows(src_len: usize, rows: &[Vec<(usize, T)>]) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for row in rows {
            for &(j, w) in row {
                debug_assert!(j < src_len);
                cols.push(j);
                weights.push(w);
            }
            offsets.push(cols.len());
        }
        Self {
            src_len,
            offsets,
            cols,
            weights,
        }
    }

    pub fn out_len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn src_len(&self) -> usize {
        self.src_len
    }

    pub fn apply(&self, src: &[T]) -> Vec<T> {
        (0..self.out_len())
            .map(|i| {
                let mut acc = T::zero();
                for p in self.offsets[i]..self.offsets[i + 1] {
                    acc += self.weights[p] * src[self.cols[p]];
                }
                acc
            })
            .collect()
    }

    fn apply_transpose(&self, grad: &[T], out: &mut [T]) {
        for i in 0..self.out_len() {
            let g = grad[i];
            for p in self.offsets[i]..self.offsets[i + 1] {
                out[self.cols[p]] += self.weights[p] * g;
            }
        }
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    AvgPool2(Var),
    Upsample2(Var),
    FieldSum {
        x: Var,
        n: usize,
    },
    Reshape(Var),
    Gather {
        src: Var,
        index: Arc<[usize]>,
    },
    Linear {
        src: Var,
        map: Arc<SparseMap<T>>,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    NormalizeRows {
        x: Var,
        inv_std: Vec<T>,
    },
    NormalizeGroups {
        x: Var,
        groups: Arc<[usize]>,
        inv_std: Vec<T>,
    },
    ScaleShift {
        x: Var,
        scale: Option<Var>,
        shift: Option<Var>,
        axis: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Per-group batch statistics produced by [`Tape::normalize_groups`].
#[derive(Clone, Debug)]
pub struct GroupStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Elements pooled per group, for unbiased variance estimates.
    pub count: usize,
}

/// Gradients for every entry of a [`ParamStore`], plus the names of
/// trainable parameters the loss never touched (their gradient is zero).
#[derive(Clone, Debug)]
pub struct GradientReport<T> {
    pub grads: Vec<Tensor<T>>,
    pub untouched: Vec<String>,
}

impl<T: Scalar> GradientReport<T> {
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.index()]
    }
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    param_grads: BTreeMap<ParamId, Tensor<T>>,
    leaf_grads: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            param_grads: BTreeMap::new(),
            leaf_grads: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf holding `value`; it collects a gradient iff
    /// `value.requires_grad()`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let tracked = value.requires_grad();
        self.push(value, Op::Leaf, tracked)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value.with_requires_grad(false), Op::Leaf, false)
    }

    /// The tape variable for a stored parameter. Repeated calls return the
    /// same variable, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.bound.insert(id, v);
        v
    }

    /// Routes later `param(_, id)` lookups to an existing variable.
    pub fn bind_param(&mut self, id: ParamId, v: Var) {
        self.bound.insert(id, v);
    }

    pub fn grad(&self, leaf: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(&leaf.0)
    }

    pub fn zero_grad(&mut self) {
        self.param_grads.clear();
        self.leaf_grads.clear();
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(v, Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(v, Op::Sub(a, b), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(v, Op::Mul(a, b), t))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        let t = self.tracked(a);
        self.push(v, Op::Scale(a, c), t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let t = self.tracked(a);
        self.push(v, Op::Relu(a), t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let t = self.tracked(a);
        self.push(v, Op::Sum(a), t)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let v = Tensor::scalar(self.value(a).sum() / T::of(n as f64));
        let t = self.tracked(a);
        self.push(v, Op::Mean(a), t)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let v = tensor::conv2d(self.value(input), self.value(kernel), stride, padding)?;
        let t = self.tracked(input) || self.tracked(kernel);
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            t,
        ))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let v = tensor::avg_pool2(self.value(x))?;
        let t = self.tracked(x);
        Ok(self.push(v, Op::AvgPool2(x), t))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let v = tensor::upsample2(self.value(x))?;
        let t = self.tracked(x);
        Ok(self.push(v, Op::Upsample2(x), t))
    }

    /// Sums each run of `n` consecutive channels of an `[b, f·n, h, w]`
    /// input. Terms are added in sorted order, so the result is bit-identical
    /// under any reordering within a run.
    pub fn field_sum(&mut self, x: Var, n: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || n == 0 || !s[1].is_multiple_of(n) {
            return Err(Error::shape("field_sum", format!("{s:?} in runs of {n}")));
        }
        let (b, f, hw) = (s[0], s[1] / n, s[2] * s[3]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * f * hw);
        let mut terms = vec![T::zero(); n];
        for bi in 0..b {
            for fi in 0..f {
                let base = (bi * f + fi) * n * hw;
                for p in 0..hw {
                    for (j, t) in terms.iter_mut().enumerate() {
                        *t = src[base + j * hw + p];
                    }
                    terms.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                    out.push(terms.iter().fold(T::zero(), |acc, &v| acc + v));
                }
            }
        }
        let v = Tensor::new(&[b, f, s[2], s[3]], out)?;
        let t = self.tracked(x);
        Ok(self.push(v, Op::FieldSum { x, n }, t))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let t = self.tracked(x);
        Ok(self.push(v, Op::Reshape(x), t))
    }

    /// `out.flat[i] = src.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, src: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let n = self.value(src).len();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather", format!("index {bad} out of {n}")));
        }
        let data = self.value(src).data();
        let v = Tensor::new(shape, index.iter().map(|&i| data[i]).collect())?;
        let t = self.tracked(src);
        Ok(self.push(v, Op::Gather { src, index }, t))
    }

    /// Axis permutation, e.g. `[1, 0]` transposes a matrix.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if perm.len() != shape.len() {
            return Err(Error::shape("permute", format!("{perm:?} for {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut in_strides = vec![1usize; shape.len()];
        for d in (0..shape.len().saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * shape[d + 1];
        }
        let n: usize = shape.iter().product();
        let mut index = Vec::with_capacity(n);
        let mut coord = vec![0usize; shape.len()];
        for _ in 0..n {
            index.push(
                coord
                    .iter()
                    .zip(perm)
                    .map(|(&c, &p)| c * in_strides[p])
                    .sum(),
            );
            for d in (0..coord.len()).rev() {
                coord[d] += 1;
                if coord[d] < out_shape[d] {
                    break;
                }
                coord[d] = 0;
            }
        }
        self.gather(x, index.into(), &out_shape)
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {end}) on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut index = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            for a in start..end {
                let base = (o * len + a) * inner;
                index.extend(base..base + inner);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        self.gather(x, index.into(), &out_shape)
    }

    pub fn linear_map(&mut self, src: Var, map: Arc<SparseMap<T>>, shape: &[usize]) -> Result<Var> {
        if map.src_len() != self.value(src).len() {
            return Err(Error::shape(
                "linear_map",
                format!("map expects {} inputs, got {}", map.src_len(), self.value(src).len()),
            ));
        }
        let v = Tensor::new(shape, map.apply(self.value(src).data()))?;
        let t = self.tracked(src);
        Ok(self.push(v, Op::Linear { src, map }, t))
    }

    /// Batched matrix product. `a` is `[b, m, k]` (or `[m, k]`), `b` is
    /// `[b, k, n]`, or `[b, n, k]` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) => {
                let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
                (1, sa[0], sa[1], n, vec![sa[0], n]).check_k(kb)?
            }
            (3, 3) if sa[0] == sb[0] => {
                let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
                (sa[0], sa[1], sa[2], n, vec![sa[0], sa[1], n]).check_k(kb)?
            }
            _ => {
                return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
            }
        };
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let v = Tensor::new(&out_shape, out)?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(v, Op::MatMul { a, b, trans_b }, t))
    }

    fn rows_of(&self, x: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(x);
        let cols = *s
            .last()
            .ok_or_else(|| Error::shape(op, "scalar input has no rows"))?;
        if cols == 0 {
            return Err(Error::shape(op, "empty rows"));
        }
        Ok((self.value(x).len() / cols, cols))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = self.rows_of(x, "softmax_rows")?;
        let v = softmax_last(self.value(x), cols, false);
        let t = self.tracked(x);
        Ok(self.push(v, Op::SoftmaxRows(x), t))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = self.rows_of(x, "log_softmax_rows")?;
        let v = softmax_last(self.value(x), cols, true);
        let t = self.tracked(x);
        Ok(self.push(v, Op::LogSoftmaxRows(x), t))
    }

    /// Zero-mean, unit-variance normalization of every row of the last
    /// axis (biased variance), without affine parameters.
    pub fn normalize_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let (rows, cols) = self.rows_of(x, "normalize_rows")?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(rows);
        let nc = T::of(cols as f64);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / nc;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nc;
            let inv = T::one() / (var + eps).sqrt();
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let v = Tensor::new(self.shape(x), out)?;
        let t = self.tracked(x);
        Ok(self.push(v, Op::NormalizeRows { x, inv_std }, t))
    }

    /// Batch normalization statistics pooled over batch, space, and every
    /// channel mapped to the same group. `groups[c]` is the group of channel
    /// `c` of an `[n, c, h, w]` input.
    pub fn normalize_groups(
        &mut self,
        x: Var,
        groups: Arc<[usize]>,
        n_groups: usize,
        eps: T,
    ) -> Result<(Var, GroupStats<T>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || groups.len() != s[1] {
            return Err(Error::shape(
                "normalize_groups",
                format!("input {s:?} with {} channel groups", groups.len()),
            ));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let src = self.value(x).data();
        let mut sum = vec![T::zero(); n_groups];
        let mut count = vec![0usize; n_groups];
        for b in 0..n {
            for ch in 0..c {
                let plane = &src[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                sum[groups[ch]] += plane.iter().copied().sum::<T>();
                count[groups[ch]] += hw;
            }
        }
        let mean: Vec<T> = sum
            .iter()
            .zip(&count)
            .map(|(&s, &k)| s / T::of(k.max(1) as f64))
            .collect();
        let mut sq = vec![T::zero(); n_groups];
        for b in 0..n {
            for ch in 0..c {
                let g = groups[ch];
                let plane = &src[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                sq[g] += plane.iter().map(|&v| (v - mean[g]) * (v - mean[g])).sum::<T>();
            }
        }
        let var: Vec<T> = sq
            .iter()
            .zip(&count)
            .map(|(&s, &k)| s / T::of(k.max(1) as f64))
            .collect();
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..n {
            for ch in 0..c {
                let g = groups[ch];
                let off = (b * c + ch) * hw;
                for (o, &v) in out[off..off + hw].iter_mut().zip(&src[off..off + hw]) {
                    *o = (v - mean[g]) * inv_std[g];
                }
            }
        }
        let v = Tensor::new(&s, out)?;
        let t = self.tracked(x);
        let stats = GroupStats {
            mean,
            var,
            count: count.first().copied().unwrap_or(0),
        };
        Ok((self.push(v, Op::NormalizeGroups { x, groups, inv_std }, t), stats))
    }

    /// `x · scale[a] + shift[a]` where `a` is the index along `axis`.
    pub fn scale_shift(
        &mut self,
        x: Var,
        scale: Option<Var>,
        shift: Option<Var>,
        axis: usize,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("scale_shift", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        for p in [scale, shift].into_iter().flatten() {
            if self.value(p).len() != len {
                return Err(Error::shape(
                    "scale_shift",
                    format!("expected {len} coefficients, got {:?}", self.shape(p)),
                ));
            }
        }
        let src = self.value(x).data();
        let sc = scale.map(|s| self.value(s).data());
        let sh = shift.map(|s| self.value(s).data());
        let mut out = Vec::with_capacity(src.len());
        for o in 0..outer {
            for a in 0..len {
                let m = sc.map_or(T::one(), |s| s[a]);
                let b = sh.map_or(T::zero(), |s| s[a]);
                let base = (o * len + a) * inner;
                out.extend(src[base..base + inner].iter().map(|&v| v * m + b));
            }
        }
        let v = Tensor::new(&shape, out)?;
        let t = self.tracked(x)
            || scale.is_some_and(|s| self.tracked(s))
            || shift.is_some_and(|s| self.tracked(s));
        Ok(self.push(
            v,
            Op::ScaleShift {
                x,
                scale,
                shift,
                axis,
            },
            t,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Invalid("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let v = Tensor::new(&shape, out)?;
        let t = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            t,
        ))
    }

    /// Accumulates `d loss / d x` into every tracked parameter and leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {
                    let mut slot = self.leaf_grads.remove(&i);
                    add_into(&mut slot, g);
                    self.leaf_grads.insert(i, slot.expect("just filled"));
                }
                Op::Param(id) => {
                    let id = *id;
                    let mut slot = self.param_grads.remove(&id);
                    add_into(&mut slot, g);
                    self.param_grads.insert(id, slot.expect("just filled"));
                }
                _ => {
                    for (input, gi) in self.input_grads(i, &g)? {
                        if self.tracked(input) {
                            add_into(&mut grads[input.0], gi);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let need = |v: Var| self.tracked(v);
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    res.push((*a, g.zip_map(self.value(*b), |x, y| x * y)?));
                }
                if need(*b) {
                    res.push((*b, g.zip_map(self.value(*a), |x, y| x * y)?));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                res.push((*a, g.map(|v| v * c)));
            }
            Op::Relu(a) => {
                res.push((
                    *a,
                    g.zip_map(out, |gv, y| if y > T::zero() { gv } else { T::zero() })?,
                ));
            }
            Op::Sum(a) => {
                res.push((*a, Tensor::full(self.shape(*a), g.data()[0])));
            }
            Op::Mean(a) => {
                let n = T::of(self.value(*a).len().max(1) as f64);
                res.push((*a, Tensor::full(self.shape(*a), g.data()[0] / n)));
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (gi, gk) = tensor::conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    *stride,
                    *padding,
                    need(*input),
                    need(*kernel),
                )?;
                if let Some(gi) = gi {
                    res.push((*input, gi));
                }
                if let Some(gk) = gk {
                    res.push((*kernel, gk));
                }
            }
            Op::AvgPool2(x) => {
                res.push((*x, tensor::avg_pool2_backward(g, self.shape(*x))));
            }
            Op::Upsample2(x) => {
                res.push((*x, tensor::upsample2_backward(g, self.shape(*x))));
            }
            Op::FieldSum { x, n } => {
                let s = self.shape(*x);
                let (b, f, hw) = (s[0], s[1] / n, s[2] * s[3]);
                let mut acc = Vec::with_capacity(self.value(*x).len());
                for bi in 0..b {
                    for fi in 0..f {
                        let plane = &g.data()[(bi * f + fi) * hw..(bi * f + fi + 1) * hw];
                        for _ in 0..*n {
                            acc.extend_from_slice(plane);
                        }
                    }
                }
                res.push((*x, Tensor::new(s, acc)?));
            }
            Op::Reshape(x) => {
                res.push((*x, g.clone().reshape(self.shape(*x))?));
            }
            Op::Gather { src, index } => {
                let mut acc = Tensor::zeros(self.shape(*src));
                let d = acc.data_mut();
                for (&j, &gv) in index.iter().zip(g.data()) {
                    d[j] += gv;
                }
                res.push((*src, acc));
            }
            Op::Linear { src, map } => {
                let mut acc = Tensor::zeros(self.shape(*src));
                map.apply_transpose(g.data(), acc.data_mut());
                res.push((*src, acc));
            }
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let batched = sa.len() == 3;
                let batch = if batched { sa[0] } else { 1 };
                let (m, k) = if batched { (sa[1], sa[2]) } else { (sa[0], sa[1]) };
                let n = self.value(*b).len() / batch / k;
                let (ad, bd, gd) = (self.value(*a).data(), self.value(*b).data(), g.data());
                if need(*a) {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for t in 0..batch {
                        // dA = dC · Bᵀ  (or dC · S when B = Sᵀ)
                        T::gemm(
                            m,
                            n,
                            k,
                            &gd[t * m * n..(t + 1) * m * n],
                            false,
                            &bd[t * k * n..(t + 1) * k * n],
                            !*trans_b,
                            &mut ga[t * m * k..(t + 1) * m * k],
                            false,
                        );
                    }
                    res.push((*a, Tensor::new(sa, ga)?));
                }
                if need(*b) {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for t in 0..batch {
                        let (gs, as_) = (&gd[t * m * n..(t + 1) * m * n], &ad[t * m * k..(t + 1) * m * k]);
                        let dst = &mut gb[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            // dS = dCᵀ · A, S is [n, k]
                            T::gemm(n, m, k, gs, true, as_, false, dst, false);
                        } else {
                            // dB = Aᵀ · dC
                            T::gemm(k, m, n, as_, true, gs, false, dst, false);
                        }
                    }
                    res.push((*b, Tensor::new(sb, gb)?));
                }
            }
            Op::SoftmaxRows(x) => {
                let cols = *out.shape().last().expect("rows");
                let mut gx = vec![T::zero(); out.len()];
                for ((y, gr), dst) in out
                    .data()
                    .chunks(cols)
                    .zip(g.data().chunks(cols))
                    .zip(gx.chunks_mut(cols))
                {
                    let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dst.iter_mut().zip(y).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                res.push((*x, Tensor::new(out.shape(), gx)?));
            }
            Op::LogSoftmaxRows(x) => {
                let cols = *out.shape().last().expect("rows");
                let mut gx = vec![T::zero(); out.len()];
                for ((y, gr), dst) in out
                    .data()
                    .chunks(cols)
                    .zip(g.data().chunks(cols))
                    .zip(gx.chunks_mut(cols))
                {
                    let total: T = gr.iter().copied().sum();
                    for ((d, &yv), &gv) in dst.iter_mut().zip(y).zip(gr) {
                        *d = gv - yv.exp() * total;
                    }
                }
                res.push((*x, Tensor::new(out.shape(), gx)?));
            }
            Op::NormalizeRows { x, inv_std } => {
                let cols = *out.shape().last().expect("rows");
                let nc = T::of(cols as f64);
                let mut gx = vec![T::zero(); out.len()];
                for (r, ((y, gr), dst)) in out
                    .data()
                    .chunks(cols)
                    .zip(g.data().chunks(cols))
                    .zip(gx.chunks_mut(cols))
                    .enumerate()
                {
                    let mg = gr.iter().copied().sum::<T>() / nc;
                    let mgy = gr.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() / nc;
                    for ((d, &yv), &gv) in dst.iter_mut().zip(y).zip(gr) {
                        *d = inv_std[r] * (gv - mg - yv * mgy);
                    }
                }
                res.push((*x, Tensor::new(out.shape(), gx)?));
            }
            Op::NormalizeGroups { x, groups, inv_std } => {
                let s = out.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let ng = inv_std.len();
                let mut sg = vec![T::zero(); ng];
                let mut sgy = vec![T::zero(); ng];
                let mut cnt = vec![0usize; ng];
                let (yd, gd) = (out.data(), g.data());
                for b in 0..n {
                    for ch in 0..c {
                        let grp = groups[ch];
                        let off = (b * c + ch) * hw;
                        for p in off..off + hw {
                            sg[grp] += gd[p];
                            sgy[grp] += gd[p] * yd[p];
                        }
                        cnt[grp] += hw;
                    }
                }
                let mut gx = vec![T::zero(); out.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let grp = groups[ch];
                        let k = T::of(cnt[grp].max(1) as f64);
                        let (mg, mgy) = (sg[grp] / k, sgy[grp] / k);
                        let off = (b * c + ch) * hw;
                        for p in off..off + hw {
                            gx[p] = inv_std[grp] * (gd[p] - mg - yd[p] * mgy);
                        }
                    }
                }
                res.push((*x, Tensor::new(s, gx)?));
            }
            Op::ScaleShift {
                x,
                scale,
                shift,
                axis,
            } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let xd = self.value(*x).data();
                let gd = g.data();
                if need(*x) {
                    let mut gx = g.clone();
                    if let Some(s) = scale {
                        let sd = self.value(*s).data();
                        for o in 0..outer {
                            for a in 0..len {
                                let base = (o * len + a) * inner;
                                for v in &mut gx.data_mut()[base..base + inner] {
                                    *v *= sd[a];
                                }
                            }
                        }
                    }
                    res.push((*x, gx));
                }
                if let Some(s) = scale.filter(|&s| need(s)) {
                    let mut gs = vec![T::zero(); len];
                    for o in 0..outer {
                        for (a, acc) in gs.iter_mut().enumerate() {
                            let base = (o * len + a) * inner;
                            for p in base..base + inner {
                                *acc += gd[p] * xd[p];
                            }
                        }
                    }
                    res.push((s, Tensor::new(self.shape(s), gs)?));
                }
                if let Some(s) = shift.filter(|&s| need(s)) {
                    let mut gb = vec![T::zero(); len];
                    for o in 0..outer {
                        for (a, acc) in gb.iter_mut().enumerate() {
                            let base = (o * len + a) * inner;
                            *acc += gd[base..base + inner].iter().copied().sum::<T>();
                        }
                    }
                    res.push((s, Tensor::new(self.shape(s), gb)?));
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if need(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            gp.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        res.push((p, Tensor::new(self.shape(p), gp)?));
                    }
                    start += len;
                }
            }
        }
        Ok(res)
    }

    /// Gradient for every entry of `store`, zero for entries that never
    /// reached the tape. Trainable entries without a gradient are listed in
    /// `untouched`.
    pub fn gradients(&self, store: &ParamStore<T>) -> GradientReport<T> {
        let mut untouched = Vec::new();
        let grads = store
            .ids()
            .map(|id| match self.param_grads.get(&id) {
                Some(g) => g.clone(),
                None => {
                    if store.is_trainable(id) {
                        untouched.push(store.name(id).to_string());
                    }
                    Tensor::zeros(store.get(id).shape())
                }
            })
            .collect();
        GradientReport { grads, untouched }
    }
}

trait CheckK: Sized {
    fn check_k(self, kb: usize) -> Result<Self>;
}

impl CheckK for (usize, usize, usize, usize, Vec<usize>) {
    fn check_k(self, kb: usize) -> Result<Self> {
        if self.2 != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions {} and {kb} differ", self.2),
            ));
        }
        Ok(self)
    }
}

fn softmax_last<T: Scalar>(x: &Tensor<T>, cols: usize, log: bool) -> Tensor<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        if log {
            let lse = max + sum.ln();
            out.extend(row.iter().map(|&v| v - lse));
        } else {
            out.extend(row.iter().map(|&v| (v - max).exp() / sum));
        }
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

/// Result of a finite-difference gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares tape gradients of `f` against central differences
/// `(f(p + eps) − f(p − eps)) / (2·eps)` at every coordinate of `params`.
///
/// The error at a coordinate is `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn finite_diff_check<T, F>(mut f: F, params: &[Tensor<T>], eps: f64) -> Result<GradCheck>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut eval = |ps: &[Tensor<T>], with_grad: bool| -> Result<(f64, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps
            .iter()
            .map(|p| tape.leaf(p.clone().with_requires_grad(with_grad)))
            .collect();
        let loss = f(&mut tape, &vars)?;
        let value = tape.value(loss).item()?.f64();
        let mut grads = Vec::new();
        if with_grad {
            tape.backward(loss)?;
            grads = vars
                .iter()
                .zip(ps)
                .map(|(v, p)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
        }
        Ok((value, grads))
    };
    let (base, analytic) = eval(params, true)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("loss at the unperturbed parameters".into()));
    }
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for p in 0..params.len() {
        for j in 0..params[p].len() {
            let orig = params[p].data()[j];
            work[p].data_mut()[j] = T::of(orig.f64() + eps);
            let (plus, _) = eval(&work, false)?;
            work[p].data_mut()[j] = T::of(orig.f64() - eps);
            let (minus, _) = eval(&work, false)?;
            work[p].data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss perturbing parameter {p}, coordinate {j}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[p].data()[j].f64();
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            report.coordinates += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (p, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Central-difference check of a loss built from the parameters of `store`.
/// Up to `per_param` evenly spaced coordinates of every trainable tensor
/// are perturbed; `worst` reports (parameter id index, coordinate).
pub fn store_grad_check<T, F>(store: &ParamStore<T>, per_param: usize, eps: f64, mut f: F) -> Result<GradCheck>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    if !tape.value(loss).item()?.f64().is_finite() {
        return Err(Error::NonFinite("loss at the unperturbed parameters".into()));
    }
    tape.backward(loss)?;
    let analytic = tape.gradients(store);
    let mut eval = |s: &ParamStore<T>| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, s)?;
        Ok(t.value(l).item()?.f64())
    };
    let mut work = store.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    for id in ids {
        let n = store.get(id).len();
        let picks: Vec<usize> = if n <= per_param { (0..n).collect() } else { (0..per_param).map(|k| k * n / per_param).collect() };
        for j in picks {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = T::of(orig.f64() + eps);
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = T::of(orig.f64() - eps);
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).data()[j].f64();
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            report.coordinates += 1;
            if !(err <= report.max_rel_error) {
                report.max_rel_error = err;
                report.worst = (id.index(), j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[3], vec![1.0, -2.0, 5.0]).unwrap().with_requires_grad(true));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::new(&[2], vec![3.0, -1.0]).unwrap());
        let unused = store.add("unused", Tensor::zeros(&[1]));
        let mut tape = Tape::new();
        let v = tape.param(&store, w);
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        let report = tape.gradients(&store);
        assert_eq!(report.get(w).data(), &[12.0, -4.0]);
        assert_eq!(report.get(unused).data(), &[0.0]);
        assert_eq!(report.untouched, vec!["unused".to_string()]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2]).with_requires_grad(true));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn permute_transposes() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f32));
        let t = tape.permute(x, &[1, 0]).unwrap();
        assert_eq!(tape.shape(t), &[3, 2]);
        assert_eq!(tape.value(t).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn linear_function_check_is_exact() {
        let c = Tensor::<f64>::new(&[3], vec![0.5, -2.0, 4.0]).unwrap();
        let check = finite_diff_check(
            |tape, vars| {
                let k = tape.constant(c.clone());
                let p = tape.mul(vars[0], k)?;
                Ok(tape.sum(p))
            },
            &[Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap()],
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-8, "{check:?}");
    }

    #[test]
    fn quadratic_function_check() {
        let check = finite_diff_check(
            |tape, vars| {
                let sq = tape.mul(vars[0], vars[0])?;
                let s = tape.sum(sq);
                Ok(tape.scale(s, 0.5))
            },
            &[Tensor::<f64>::new(&[4], vec![1.0, -2.0, 0.3, 7.0]).unwrap()],
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-7, "{check:?}");
    }

    #[test]
    fn non_finite_loss_names_the_coordinate() {
        let err = finite_diff_check(
            |tape, vars| {
                let s = tape.sum(vars[0]);
                let blown = tape.value(vars[0]).data()[1] > 1.5;
                Ok(if blown { tape.scale(s, f64::INFINITY) } else { s })
            },
            &[Tensor::<f64>::new(&[2], vec![0.0, 1.0]).unwrap()],
            1.0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
    }
}
