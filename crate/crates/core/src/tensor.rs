//! Dense row-major tensors and the numeric kernels used by the layers.
//!
//! Tensors are plain values: a shape and a contiguous buffer. Gradient
//! tracking lives on the [`Tape`](crate::autodiff::Tape); the
//! `requires_grad` flag only tells the tape whether a leaf should collect
//! a gradient.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Floating point element type. `f32` is the working precision; `f64`
/// exists for gradient checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const BYTES: usize;

    /// `c = a·b (+ c)` for contiguous row-major matrices. `a` is `m×k`
    /// (stored `k×m` when `trans_a`), `b` is `k×n` (stored `n×k` when
    /// `trans_b`), `c` is `m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn gemm_strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // strides (row, col) of the logical matrix given its storage
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $f:path, $bytes:expr) => {
        impl Scalar for $t {
            const BYTES: usize = $bytes;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = gemm_strides(m, k, trans_a);
                let (rsb, csb) = gemm_strides(k, n, trans_b);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: bounds asserted above; strides describe contiguous
                // row-major storage of the given dimensions.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $bytes];
                buf.copy_from_slice(&bytes[..$bytes]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm, 4);
impl_scalar!(f64, matrixmultiply::dgemm, 8);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
            requires_grad: false,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            requires_grad: false,
        }
    }

    /// Standard normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::of(rng.gen_range(lo..hi)))
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::shape(
                "item",
                format!("expected one element, shape {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            requires_grad: false,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|a| a.f64().abs()).fold(0.0, f64::max)
    }

    /// Copy of `[.., i, ..]` along axis 0.
    pub fn index0(&self, i: usize) -> Result<Self> {
        if self.shape.is_empty() || i >= self.shape[0] {
            return Err(Error::shape("index0", format!("{i} out of {:?}", self.shape)));
        }
        let inner: usize = self.shape[1..].iter().product();
        Self::new(
            &self.shape[1..],
            self.data[i * inner..(i + 1) * inner].to_vec(),
        )
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Invalid("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Self::new(&shape, data)
    }
}

fn conv_out_dim(size: usize, k: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - k) / stride + 1
}

struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

fn conv_geom<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeom> {
    let (is, ks) = (input.shape(), kernel.shape());
    if is.len() != 4 || ks.len() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("expected 4-d input and kernel, got {is:?} and {ks:?}"),
        ));
    }
    if is[1] != ks[1] {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, kernel expects {}", is[1], ks[1]),
        ));
    }
    if ks[2] != ks[3] || ks[2] % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be square with odd size, got {ks:?}"),
        ));
    }
    if stride == 0 {
        return Err(Error::Invalid("conv2d stride must be positive".into()));
    }
    let k = ks[2];
    if is[2] + 2 * padding < k || is[3] + 2 * padding < k {
        return Err(Error::shape(
            "conv2d",
            format!("input {is:?} with padding {padding} smaller than kernel {k}"),
        ));
    }
    Ok(ConvGeom {
        batch: is[0],
        c_in: is[1],
        h: is[2],
        w: is[3],
        c_out: ks[0],
        k,
        stride,
        padding,
        ho: conv_out_dim(is[2], k, stride, padding),
        wo: conv_out_dim(is[3], k, stride, padding),
    })
}

fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let hw_out = g.ho * g.wo;
    for c in 0..g.c_in {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let hw_out = g.ho * g.wo;
    for c in 0..g.c_in {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding.
///
/// `input` is `[batch, c_in, h, w]`, `kernel` is `[c_out, c_in, k, k]` with
/// odd `k`. The output is `[batch, c_out, h', w']` with
/// `h' = (h + 2·padding − k) / stride + 1`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(input, kernel, stride, padding)?;
    let hw_out = g.ho * g.wo;
    let ckk = g.c_in * g.k * g.k;
    let in_plane = g.c_in * g.h * g.w;
    let mut out = vec![T::zero(); g.batch * g.c_out * hw_out];
    let mut cols = vec![T::zero(); ckk * hw_out];
    for n in 0..g.batch {
        let img = &input.data()[n * in_plane..(n + 1) * in_plane];
        let dst = &mut out[n * g.c_out * hw_out..(n + 1) * g.c_out * hw_out];
        if g.k == 1 && g.stride == 1 && g.padding == 0 {
            T::gemm(g.c_out, ckk, hw_out, kernel.data(), false, img, false, dst, false);
        } else {
            im2col(img, &g, &mut cols);
            T::gemm(g.c_out, ckk, hw_out, kernel.data(), false, &cols, false, dst, false);
        }
    }
    Tensor::new(&[g.batch, g.c_out, g.ho, g.wo], out)
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let g = conv_geom(input, kernel, stride, padding)?;
    let hw_out = g.ho * g.wo;
    let ckk = g.c_in * g.k * g.k;
    let in_plane = g.c_in * g.h * g.w;
    let direct = g.k == 1 && g.stride == 1 && g.padding == 0;
    let mut grad_in = need_input.then(|| vec![T::zero(); input.len()]);
    let mut grad_k = need_kernel.then(|| vec![T::zero(); kernel.len()]);
    let mut cols = vec![T::zero(); ckk * hw_out];
    for n in 0..g.batch {
        let go = &grad_out.data()[n * g.c_out * hw_out..(n + 1) * g.c_out * hw_out];
        let img = &input.data()[n * in_plane..(n + 1) * in_plane];
        if let Some(gk) = grad_k.as_mut() {
            if direct {
                T::gemm(g.c_out, hw_out, ckk, go, false, img, true, gk, true);
            } else {
                im2col(img, &g, &mut cols);
                T::gemm(g.c_out, hw_out, ckk, go, false, &cols, true, gk, true);
            }
        }
        if let Some(gi) = grad_in.as_mut() {
            let dst = &mut gi[n * in_plane..(n + 1) * in_plane];
            if direct {
                T::gemm(ckk, g.c_out, hw_out, kernel.data(), true, go, false, dst, true);
            } else {
                T::gemm(ckk, g.c_out, hw_out, kernel.data(), true, go, false, &mut cols, false);
                col2im(&cols, &g, dst);
            }
        }
    }
    Ok((
        grad_in.map(|d| Tensor::new(input.shape(), d)).transpose()?,
        grad_k.map(|d| Tensor::new(kernel.shape(), d)).transpose()?,
    ))
}

fn spatial4<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape(op, format!("expected [n, c, h, w], got {s:?}")));
    }
    Ok((s[0] * s[1], s[2], s[3]))
}

/// 2×2 average pooling with stride 2. Height and width must be even.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, h, w) = spatial4(x, "avg_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("avg_pool2", format!("odd spatial size {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                let i = 2 * y * w + 2 * xx;
                dst[y * wo + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
            }
        }
    }
    let s = x.shape();
    Tensor::new(&[s[0], s[1], ho, wo], out)
}

pub(crate) fn avg_pool2_backward<T: Scalar>(grad_out: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (planes, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &grad_out.data()[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * wo + xx / 2] * quarter;
            }
        }
    }
    Tensor {
        shape: in_shape.to_vec(),
        data: out,
        requires_grad: false,
    }
}

/// Nearest-neighbour ×2 upsampling: every pixel becomes a 2×2 block.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, h, w) = spatial4(x, "upsample2")?;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                dst[y * wo + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    let s = x.shape();
    Tensor::new(&[s[0], s[1], ho, wo], out)
}

pub(crate) fn upsample2_backward<T: Scalar>(grad_out: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (planes, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &grad_out.data()[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                dst[(y / 2) * w + xx / 2] += src[y * wo + xx];
            }
        }
    }
    Tensor {
        shape: in_shape.to_vec(),
        data: out,
        requires_grad: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (b, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, ks) = (k.shape()[0], k.shape()[2]);
        let ho = (h + 2 * pad - ks) / stride + 1;
        let wo = (w + 2 * pad - ks) / stride + 1;
        let mut out = Tensor::zeros(&[b, co, ho, wo]);
        for n in 0..b {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in 0..ks {
                                for kx in 0..ks {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x.data()[((n * ci + c) * h + iy as usize) * w + ix as usize]
                                            * k.data()[((o * ci + c) * ks + ky) * ks + kx];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((n * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn scalar_scaling_kernel() {
        let x = Tensor::<f32>::new(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let k = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 3]);
        assert_eq!(y.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::randn(&[2, 1, 6, 7], 1.0, &mut rng);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        assert_eq!(conv2d(&x, &k, 1, 1).unwrap(), x);
    }

    #[test]
    fn strided_conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn(&[1, 2, 5, 5], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let fast = conv2d(&x, &k, 2, 1).unwrap();
        let slow = brute_conv(&x, &k, 2, 1);
        assert_eq!(fast.shape(), &[1, 3, 3, 3]);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &k, 1, 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn conv_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::randn(&[1, 2, 6, 6], 1.0, &mut rng);
        let y = Tensor::<f32>::randn(&[1, 2, 6, 6], 1.0, &mut rng);
        let k = Tensor::<f32>::randn(&[2, 2, 3, 3], 1.0, &mut rng);
        let (a, b) = (0.7f32, -1.3f32);
        let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let lhs = conv2d(&mix, &k, 1, 1).unwrap();
        let cx = conv2d(&x, &k, 1, 1).unwrap();
        let cy = conv2d(&y, &k, 1, 1).unwrap();
        let rhs = cx.zip_map(&cy, |p, q| a * p + b * q).unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - r).abs() <= 1e-5 * r.abs().max(1.0));
        }
    }

    #[test]
    fn conv_commutes_with_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = Tensor::<f32>::zeros(&[1, 1, 10, 10]);
        let mut shifted = Tensor::<f32>::zeros(&[1, 1, 10, 10]);
        for y in 3..6 {
            for xx in 3..6 {
                let v: f32 = rng.gen();
                x.data_mut()[y * 10 + xx] = v;
                shifted.data_mut()[y * 10 + xx + 1] = v;
            }
        }
        let k = Tensor::<f32>::randn(&[1, 1, 3, 3], 1.0, &mut rng);
        let a = conv2d(&x, &k, 1, 1).unwrap();
        let b = conv2d(&shifted, &k, 1, 1).unwrap();
        for y in 0..10 {
            for xx in 0..9 {
                assert_eq!(a.data()[y * 10 + xx], b.data()[y * 10 + xx + 1]);
            }
        }
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let x = Tensor::<f32>::from_fn(&[1, 1, 4, 4], |i| i as f32);
        let p = avg_pool2(&x).unwrap();
        assert_eq!(p.data(), &[2.5, 4.5, 10.5, 12.5]);
        let u = upsample2(&p).unwrap();
        assert_eq!(u.shape(), &[1, 1, 4, 4]);
        assert_eq!(u.data()[5], 2.5);
        assert!(avg_pool2(&Tensor::<f32>::zeros(&[1, 1, 3, 4])).is_err());
    }
}
