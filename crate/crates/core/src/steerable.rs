//! Equivariant convolutions and batch normalization over cyclic-group
//! feature fields.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{SparseMap, Tape, Var};
use crate::error::{Error, Result};
use crate::group::{kernel_rotation_taps, CyclicGroup, FieldType};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Everything a forward pass needs: the tape, the parameters, the mode,
/// and the buffer updates collected in training mode.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub training: bool,
    pub updates: Vec<(ParamId, Tensor<T>)>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, training: bool) -> Self {
        Self {
            tape,
            store,
            training,
            updates: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

/// Writes collected running-statistic updates back into the store.
pub fn commit_updates<T: Scalar>(store: &mut ParamStore<T>, updates: Vec<(ParamId, Tensor<T>)>) {
    for (id, value) in updates {
        *store.get_mut(id) = value;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    /// Ordinary convolution; also every layer over the trivial group.
    Plain,
    /// Trivial input to regular output.
    Lift,
    /// Regular to regular.
    Group,
    /// Regular to trivial, 1×1 only.
    Readout,
}

impl ConvKind {
    pub fn infer(in_type: &FieldType, out_type: &FieldType) -> Result<Self> {
        if in_type.group() != out_type.group() {
            return Err(Error::Invalid(format!(
                "group mismatch: C_{} input, C_{} output",
                in_type.group().order(),
                out_type.group().order()
            )));
        }
        if in_type.group().order() == 1 {
            return Ok(ConvKind::Plain);
        }
        match (
            in_type.is_trivial(),
            in_type.is_regular(),
            out_type.is_trivial(),
            out_type.is_regular(),
        ) {
            (true, _, _, true) => Ok(ConvKind::Lift),
            (_, true, _, true) => Ok(ConvKind::Group),
            (_, true, true, _) => Ok(ConvKind::Readout),
            _ => Err(Error::Invalid(
                "unsupported field types: need trivial→regular, regular→regular or regular→trivial".into(),
            )),
        }
    }
}

/// Number of weights of a standard convolution.
pub fn standard_conv_params(c_in: usize, c_out: usize, k: usize, bias: bool) -> usize {
    c_out * c_in * k * k + if bias { c_out } else { 0 }
}

/// Convolution between field types whose filter bank is a fixed linear
/// function of free base weights. A stride of 2 is realized as a
/// stride-1 convolution followed by 2×2 average pooling, which commutes
/// with quarter turns on even-sized maps.
pub struct EquivConv<T: Scalar> {
    kind: ConvKind,
    in_type: FieldType,
    out_type: FieldType,
    k: usize,
    stride: usize,
    weight: ParamId,
    bias: Option<ParamId>,
    expansion: Option<Arc<SparseMap<T>>>,
}

impl<T: Scalar> EquivConv<T> {
    pub fn new<R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_type: FieldType,
        out_type: FieldType,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let kind = ConvKind::infer(&in_type, &out_type)?;
        if k.is_multiple_of(2) {
            return Err(Error::Invalid(format!("{name}: kernel size must be odd, got {k}")));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::Invalid(format!("{name}: stride must be 1 or 2, got {stride}")));
        }
        if kind == ConvKind::Readout && k != 1 {
            return Err(Error::Invalid(format!("{name}: readout kernels are 1×1, got {k}")));
        }
        if bias && matches!(kind, ConvKind::Lift | ConvKind::Group) {
            return Err(Error::Invalid(format!(
                "{name}: biases are only supported on trivial outputs"
            )));
        }
        let group = in_type.group();
        let n = group.order();
        let (c_in, c_out) = (in_type.channel_count(), out_type.channel_count());
        let kk = k * k;
        let (base_shape, expansion): (Vec<usize>, Option<SparseMap<T>>) = match kind {
            ConvKind::Plain => (vec![c_out, c_in, k, k], None),
            ConvKind::Readout => (vec![c_out, in_type.regular_fields()], None),
            ConvKind::Lift => {
                let f = out_type.regular_fields();
                let taps = rotation_taps::<T>(k, group)?;
                let mut rows = Vec::with_capacity(c_out * c_in * kk);
                for fi in 0..f {
                    for e in 0..n {
                        for c in 0..c_in {
                            let src = (fi * c_in + c) * kk;
                            for p in 0..kk {
                                rows.push(taps[e][p].iter().map(|&(j, w)| (src + j, w)).collect());
                            }
                        }
                    }
                }
                (vec![f, c_in, k, k], Some(SparseMap::from_rows(f * c_in * kk, &rows)))
            }
            ConvKind::Group => {
                let (fo, fi) = (out_type.regular_fields(), in_type.regular_fields());
                let taps = rotation_taps::<T>(k, group)?;
                let mut rows = Vec::with_capacity(c_out * c_in * kk);
                for f in 0..fo {
                    for e in 0..n {
                        for i in 0..fi {
                            for g in 0..n {
                                let src = (f * fi * n + i * n + (g + n - e) % n) * kk;
                                for p in 0..kk {
                                    rows.push(taps[e][p].iter().map(|&(j, w)| (src + j, w)).collect());
                                }
                            }
                        }
                    }
                }
                (vec![fo, fi * n, k, k], Some(SparseMap::from_rows(fo * fi * n * kk, &rows)))
            }
        };
        let fan_in = match kind {
            ConvKind::Readout => c_in,
            _ => c_in * kk,
        };
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&base_shape, std, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Ok(Self {
            kind,
            in_type,
            out_type,
            k,
            stride,
            weight,
            bias,
            expansion: expansion.map(Arc::new),
        })
    }

    pub fn kind(&self) -> ConvKind {
        self.kind
    }

    pub fn in_type(&self) -> &FieldType {
        &self.in_type
    }

    pub fn out_type(&self) -> &FieldType {
        &self.out_type
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn param_count(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).len() + self.bias.map_or(0, |b| store.get(b).len())
    }

    /// The filter bank actually convolved, `[c_out, c_in, k, k]`.
    pub fn expanded_filter(&self, store: &ParamStore<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store, false);
        let v = self.filter(&mut ctx)?;
        Ok(ctx.tape.value(v).clone())
    }

    fn filter(&self, ctx: &mut Ctx<'_, T>) -> Result<Var> {
        let w = ctx.param(self.weight);
        let (c_in, c_out) = (self.in_type.channel_count(), self.out_type.channel_count());
        match (&self.expansion, self.kind) {
            (Some(map), _) => ctx
                .tape
                .linear_map(w, map.clone(), &[c_out, c_in, self.k, self.k]),
            (None, ConvKind::Readout) => {
                let f = self.in_type.regular_fields();
                ctx.tape.reshape(w, &[c_out, f, 1, 1])
            }
            (None, _) => Ok(w),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x);
        if s.len() != 4 || s[1] != self.in_type.channel_count() {
            return Err(Error::shape(
                "equiv_conv",
                format!("expected {} input channels, got {s:?}", self.in_type.channel_count()),
            ));
        }
        let input = if self.kind == ConvKind::Readout {
            // a shared coefficient per field is a 1×1 conv on field sums
            ctx.tape.field_sum(x, self.in_type.group().order())?
        } else {
            x
        };
        let kernel = self.filter(ctx)?;
        let mut y = ctx.tape.conv2d(input, kernel, 1, self.k / 2)?;
        if self.stride == 2 {
            y = ctx.tape.avg_pool2(y)?;
        }
        if let Some(b) = self.bias {
            let b = ctx.param(b);
            y = ctx.tape.scale_shift(y, None, Some(b), 1)?;
        }
        Ok(y)
    }
}

fn rotation_taps<T: Scalar>(k: usize, group: CyclicGroup) -> Result<Vec<Vec<Vec<(usize, T)>>>> {
    group
        .elements()
        .map(|e| {
            Ok(kernel_rotation_taps(k, group, e)?
                .into_iter()
                .map(|row| row.into_iter().map(|(j, w)| (j, T::of(w))).collect())
                .collect())
        })
        .collect()
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization with one statistic, scale and bias per trivial
/// channel and per regular field.
pub struct InnerBatchNorm<T: Scalar> {
    field_type: FieldType,
    groups: Arc<[usize]>,
    multiplicity: Vec<usize>,
    weight: ParamId,
    bias: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    eps: T,
    momentum: T,
}

impl<T: Scalar> InnerBatchNorm<T> {
    pub fn new(store: &mut ParamStore<T>, name: &str, field_type: FieldType) -> Self {
        let (groups, n_groups) = field_type.channel_groups();
        let mut multiplicity = vec![0; n_groups];
        for &g in &groups {
            multiplicity[g] += 1;
        }
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::full(&[n_groups], T::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[n_groups])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[n_groups])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[n_groups], T::one())),
            field_type,
            groups: groups.into(),
            multiplicity,
            eps: T::of(BN_EPS),
            momentum: T::of(BN_MOMENTUM),
        }
    }

    pub fn field_type(&self) -> &FieldType {
        &self.field_type
    }

    pub fn param_count(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).len() + store.get(self.bias).len()
    }

    pub fn running_stats(&self, store: &ParamStore<T>) -> (Tensor<T>, Tensor<T>) {
        (store.get(self.running_mean).clone(), store.get(self.running_var).clone())
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.groups.len() {
            return Err(Error::shape(
                "inner_batch_norm",
                format!("expected {} channels, got {s:?}", self.groups.len()),
            ));
        }
        let n_groups = self.multiplicity.len();
        let c = self.groups.len();
        let normalized = if ctx.training {
            let (y, stats) = ctx
                .tape
                .normalize_groups(x, self.groups.clone(), n_groups, self.eps)?;
            let m = self.momentum;
            let rm = ctx.store.get(self.running_mean).data();
            let rv = ctx.store.get(self.running_var).data();
            let mut new_mean = Vec::with_capacity(n_groups);
            let mut new_var = Vec::with_capacity(n_groups);
            for g in 0..n_groups {
                let count = (s[0] * s[2] * s[3] * self.multiplicity[g]) as f64;
                let unbiased = if count > 1.0 {
                    stats.var[g] * T::of(count / (count - 1.0))
                } else {
                    stats.var[g]
                };
                new_mean.push((T::one() - m) * rm[g] + m * stats.mean[g]);
                new_var.push((T::one() - m) * rv[g] + m * unbiased);
            }
            ctx.updates
                .push((self.running_mean, Tensor::new(&[n_groups], new_mean)?));
            ctx.updates
                .push((self.running_var, Tensor::new(&[n_groups], new_var)?));
            y
        } else {
            let rm = ctx.store.get(self.running_mean).data();
            let rv = ctx.store.get(self.running_var).data();
            let mut scale = Vec::with_capacity(c);
            let mut shift = Vec::with_capacity(c);
            for &g in self.groups.iter() {
                let inv = T::one() / (rv[g] + self.eps).sqrt();
                scale.push(inv);
                shift.push(-rm[g] * inv);
            }
            let scale = ctx.tape.constant(Tensor::new(&[c], scale)?);
            let shift = ctx.tape.constant(Tensor::new(&[c], shift)?);
            ctx.tape.scale_shift(x, Some(scale), Some(shift), 1)?
        };
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        let wc = ctx.tape.gather(w, self.groups.clone(), &[c])?;
        let bc = ctx.tape.gather(b, self.groups.clone(), &[c])?;
        ctx.tape.scale_shift(normalized, Some(wc), Some(bc), 1)
    }
}
