//! The cyclic rotation groups C_N and their actions on images, feature
//! fields, and convolution kernels.
//!
//! Rotations are counter-clockwise as displayed (rows grow downward), so a
//! quarter turn is the `numpy.rot90` permutation. A regular field of C_N
//! occupies N consecutive channels; element `k` sends channel `j` to channel
//! `(j + k) mod N`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::image::bilinear_warp;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CyclicGroup {
    order: usize,
}

impl CyclicGroup {
    pub fn new(order: usize) -> Result<Self> {
        match order {
            1 | 4 | 8 => Ok(Self { order }),
            _ => Err(Error::Invalid(format!(
                "unsupported group order {order} (expected 1, 4, or 8)"
            ))),
        }
    }

    pub fn trivial() -> Self {
        Self { order: 1 }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn angle(&self, k: usize) -> f64 {
        2.0 * PI * (k % self.order) as f64 / self.order as f64
    }

    pub fn compose(&self, a: usize, b: usize) -> usize {
        (a + b) % self.order
    }

    pub fn inverse(&self, k: usize) -> usize {
        (self.order - k % self.order) % self.order
    }

    /// Number of quarter turns of `k`, if its angle is a multiple of 90°.
    pub fn quarter_turns(&self, k: usize) -> Option<usize> {
        let k = k % self.order;
        (4 * k).is_multiple_of(self.order).then(|| 4 * k / self.order)
    }

    /// Whether some element is not a multiple of 90°.
    pub fn has_non_quarter(&self) -> bool {
        self.order > 4
    }

    pub fn elements(&self) -> impl Iterator<Item = usize> {
        0..self.order
    }

    fn check(&self, k: usize) -> Result<()> {
        if k >= self.order {
            return Err(Error::Invalid(format!(
                "element {k} out of range for C_{}",
                self.order
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rep {
    Trivial(usize),
    Regular(usize),
}

/// Channel layout of a feature field: representation blocks in order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldType {
    group: CyclicGroup,
    reps: Vec<Rep>,
}

impl FieldType {
    pub fn new(group: CyclicGroup, reps: Vec<Rep>) -> Result<Self> {
        let ft = Self { group, reps };
        if ft.channel_count() == 0 {
            return Err(Error::Invalid("field type with no channels".into()));
        }
        Ok(ft)
    }

    pub fn trivial(group: CyclicGroup, width: usize) -> Result<Self> {
        Self::new(group, vec![Rep::Trivial(width)])
    }

    pub fn regular(group: CyclicGroup, fields: usize) -> Result<Self> {
        Self::new(group, vec![Rep::Regular(fields)])
    }

    pub fn group(&self) -> CyclicGroup {
        self.group
    }

    pub fn reps(&self) -> &[Rep] {
        &self.reps
    }

    pub fn channel_count(&self) -> usize {
        let n = self.group.order;
        self.reps
            .iter()
            .map(|r| match *r {
                Rep::Trivial(w) => w,
                Rep::Regular(f) => f * n,
            })
            .sum()
    }

    pub fn is_trivial(&self) -> bool {
        self.reps.iter().all(|r| matches!(r, Rep::Trivial(_)))
    }

    pub fn is_regular(&self) -> bool {
        self.reps.iter().all(|r| matches!(r, Rep::Regular(_)))
    }

    /// Total number of regular fields.
    pub fn regular_fields(&self) -> usize {
        self.reps
            .iter()
            .map(|r| if let Rep::Regular(f) = r { *f } else { 0 })
            .sum()
    }

    pub fn trivial_width(&self) -> usize {
        self.reps
            .iter()
            .map(|r| if let Rep::Trivial(w) = r { *w } else { 0 })
            .sum()
    }

    /// Normalization granularity: one group per trivial channel and one per
    /// regular field. Returns the group index of each channel and the
    /// number of groups.
    pub fn channel_groups(&self) -> (Vec<usize>, usize) {
        let n = self.group.order;
        let mut groups = Vec::with_capacity(self.channel_count());
        let mut next = 0;
        for r in &self.reps {
            match *r {
                Rep::Trivial(w) => {
                    groups.extend(next..next + w);
                    next += w;
                }
                Rep::Regular(f) => {
                    for field in 0..f {
                        groups.extend(std::iter::repeat_n(next + field, n));
                    }
                    next += f;
                }
            }
        }
        (groups, next)
    }

    /// Channel permutation of element `k`: channel `c` moves to `perm[c]`.
    pub fn channel_permutation(&self, k: usize) -> Vec<usize> {
        let n = self.group.order;
        let base = regular_permutation(n, k % n).expect("k reduced mod n");
        let mut perm = Vec::with_capacity(self.channel_count());
        let mut offset = 0;
        for r in &self.reps {
            match *r {
                Rep::Trivial(w) => {
                    perm.extend(offset..offset + w);
                    offset += w;
                }
                Rep::Regular(f) => {
                    for _ in 0..f {
                        perm.extend(base.iter().map(|&j| offset + j));
                        offset += n;
                    }
                }
            }
        }
        perm
    }
}

/// Left regular action of C_N: channel `j` goes to `(j + k) mod N`.
pub fn regular_permutation(n: usize, k: usize) -> Result<Vec<usize>> {
    if n == 0 || k >= n {
        return Err(Error::Invalid(format!("element {k} out of range for C_{n}")));
    }
    Ok((0..n).map(|j| (j + k) % n).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RotationMode {
    /// Pure index permutation; only for multiples of 90°.
    Exact,
    /// Same-size canvas rotated about the center, bilinear sampling.
    Bilinear,
}

/// A group element together with how it acts on pixel grids.
#[derive(Clone, Copy, Debug)]
pub struct GroupAction {
    pub group: CyclicGroup,
    pub element: usize,
    pub mode: RotationMode,
    pub fill: f64,
}

impl GroupAction {
    pub fn new(group: CyclicGroup, element: usize, mode: RotationMode) -> Result<Self> {
        group.check(element)?;
        Ok(Self {
            group,
            element,
            mode,
            fill: 0.0,
        })
    }

    /// The inverse element with the same mode and fill.
    pub fn inverse(&self) -> Self {
        Self {
            element: self.group.inverse(self.element),
            ..*self
        }
    }

    /// Rotates every channel of `img` (`[c, h, w]`) counter-clockwise by the
    /// element's angle. Exact mode swaps `h` and `w` for odd quarter turns.
    pub fn rotate_image<T: Scalar>(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        match self.mode {
            RotationMode::Exact => {
                let q = self.group.quarter_turns(self.element).ok_or_else(|| {
                    Error::Invalid(format!(
                        "exact rotation needs a multiple of 90°, got {:.1}°",
                        self.group.angle(self.element).to_degrees()
                    ))
                })?;
                rotate_quarter(img, q)
            }
            RotationMode::Bilinear => {
                let (h, w) = match img.shape() {
                    &[_, h, w] => (h, w),
                    s => return Err(Error::shape("rotate_image", format!("{s:?}"))),
                };
                if self.element == 0 {
                    return Ok(img.clone());
                }
                let theta = self.group.angle(self.element);
                let to_src = Homography::rotation_about(w as f64 / 2.0, h as f64 / 2.0, -theta);
                bilinear_warp(img, &to_src, h, w, T::of(self.fill))
            }
        }
    }

    /// Spatial rotation of every channel, then the representation's channel
    /// permutation within each regular field.
    pub fn act_on_field<T: Scalar>(&self, field: &Tensor<T>, ft: &FieldType) -> Result<Tensor<T>> {
        let c = field.shape().first().copied().unwrap_or(0);
        if field.ndim() != 3 || c != ft.channel_count() {
            return Err(Error::shape(
                "act_on_field",
                format!(
                    "field {:?} does not carry {} channels",
                    field.shape(),
                    ft.channel_count()
                ),
            ));
        }
        if ft.group() != self.group {
            return Err(Error::Invalid("field type over a different group".into()));
        }
        let rotated = self.rotate_image(field)?;
        Ok(permute_channels(&rotated, &ft.channel_permutation(self.element)))
    }
}

/// Moves channel `c` of a `[c, ...]` tensor to `perm[c]`.
pub fn permute_channels<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let plane = x.len() / perm.len().max(1);
    let mut out = vec![T::zero(); x.len()];
    for (c, &dst) in perm.iter().enumerate() {
        out[dst * plane..(dst + 1) * plane].copy_from_slice(&x.data()[c * plane..(c + 1) * plane]);
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

/// Exact counter-clockwise rotation by `q` quarter turns of the last two
/// axes of `x`.
pub fn rotate_quarter<T: Scalar>(x: &Tensor<T>, q: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::shape("rotate_quarter", format!("{s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = x.len() / (h * w).max(1);
    let q = q % 4;
    let (ho, wo) = if q % 2 == 1 { (w, h) } else { (h, w) };
    let mut out = vec![T::zero(); x.len()];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                let (si, sj) = match q {
                    0 => (i, j),
                    1 => (j, w - 1 - i),
                    2 => (h - 1 - i, w - 1 - j),
                    _ => (h - 1 - j, i),
                };
                dst[i * wo + j] = src[si * w + sj];
            }
        }
    }
    let mut shape = s.to_vec();
    let n = shape.len();
    shape[n - 2] = ho;
    shape[n - 1] = wo;
    Tensor::new(&shape, out)
}

/// Linear map rotating a `k × k` kernel grid by group element `elem`: for
/// every output tap, the source taps and their weights. Quarter turns are
/// exact; the 45° remainder of C_8 elements splats each source tap
/// bilinearly onto the grid, which keeps kernel mass and centroid. Groups with
/// non-quarter elements apply a circular support mask of radius
/// `(k − 1)/2 + 0.5` to every element, which keeps the family closed under
/// quarter turns.
pub fn kernel_rotation_taps(k: usize, group: CyclicGroup, elem: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    if k.is_multiple_of(2) {
        return Err(Error::Invalid(format!("kernel size must be odd, got {k}")));
    }
    group.check(elem)?;
    if k == 1 {
        return Ok(vec![vec![(0, 1.0)]]);
    }
    let center = (k / 2) as f64;
    let radius = center + 0.5;
    let masked = group.has_non_quarter();
    let inside = |r: usize, c: usize| {
        !masked || ((r as f64 - center).powi(2) + (c as f64 - center).powi(2)).sqrt() <= radius + 1e-9
    };
    let angle = group.angle(elem);
    let quarters = ((angle / (PI / 2.0)) + 1e-9).floor() as usize;
    let residual = angle - quarters as f64 * PI / 2.0;

    // residual (sub-90°) rotation by bilinear splatting: every source tap
    // is pushed to its rotated position and shared among the four
    // surrounding grid taps, renormalized over the ones kept
    let mut residual_taps = vec![Vec::new(); k * k];
    for r in 0..k {
        for c in 0..k {
            if !inside(r, c) {
                continue;
            }
            if residual.abs() < 1e-12 {
                residual_taps[r * k + c].push((r * k + c, 1.0));
                continue;
            }
            let (dx, dy) = (c as f64 - center, r as f64 - center);
            let (s, co) = residual.sin_cos();
            let tx = co * dx + s * dy + center;
            let ty = -s * dx + co * dy + center;
            // cells past the border extrapolate linearly from the last pair,
            // so mass and centroid are kept
            let last = (k - 2) as f64;
            let (x0, y0) = (tx.floor().clamp(0.0, last), ty.floor().clamp(0.0, last));
            let (fx, fy) = (tx - x0, ty - y0);
            let mut kept = Vec::with_capacity(4);
            for (yy, wy) in [(y0, 1.0 - fy), (y0 + 1.0, fy)] {
                for (xx, wx) in [(x0, 1.0 - fx), (x0 + 1.0, fx)] {
                    let wgt = wx * wy;
                    if wgt.abs() < 1e-12 {
                        continue;
                    }
                    let (yi, xi) = (yy as usize, xx as usize);
                    if inside(yi, xi) {
                        kept.push((yi * k + xi, wgt));
                    }
                }
            }
            let total: f64 = kept.iter().map(|&(_, w)| w).sum();
            for (o, w) in kept {
                residual_taps[o].push((r * k + c, w / total));
            }
        }
    }
    // then the exact quarter turns
    let mut taps = vec![Vec::new(); k * k];
    for i in 0..k {
        for j in 0..k {
            let (si, sj) = match quarters % 4 {
                0 => (i, j),
                1 => (j, k - 1 - i),
                2 => (k - 1 - i, k - 1 - j),
                _ => (k - 1 - j, i),
            };
            taps[i * k + j] = residual_taps[si * k + sj].clone();
        }
    }
    Ok(taps)
}

/// Rotates the trailing `k × k` spatial grid of `kernel` by `elem`.
pub fn rotate_kernel<T: Scalar>(kernel: &Tensor<T>, group: CyclicGroup, elem: usize) -> Result<Tensor<T>> {
    let s = kernel.shape();
    if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
        return Err(Error::shape("rotate_kernel", format!("non-square kernel {s:?}")));
    }
    let k = s[s.len() - 1];
    let taps = kernel_rotation_taps(k, group, elem)?;
    let planes = kernel.len() / (k * k);
    let mut out = vec![T::zero(); kernel.len()];
    for p in 0..planes {
        let src = &kernel.data()[p * k * k..(p + 1) * k * k];
        for (o, row) in taps.iter().enumerate() {
            let mut acc = T::zero();
            for &(j, wgt) in row {
                acc += T::of(wgt) * src[j];
            }
            out[p * k * k + o] = acc;
        }
    }
    Tensor::new(s, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c4() -> CyclicGroup {
        CyclicGroup::new(4).unwrap()
    }

    #[test]
    fn quarter_turn_of_two_by_two() {
        let img = Tensor::<f32>::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let act = GroupAction::new(c4(), 1, RotationMode::Exact).unwrap();
        assert_eq!(act.rotate_image(&img).unwrap().data(), &[2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn identity_element_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::<f32>::randn(&[2, 5, 3], 1.0, &mut rng);
        for mode in [RotationMode::Exact, RotationMode::Bilinear] {
            let act = GroupAction::new(CyclicGroup::new(8).unwrap(), 0, mode).unwrap();
            assert_eq!(act.rotate_image(&img).unwrap(), img);
        }
    }

    #[test]
    fn exact_mode_rejects_eighth_turns() {
        let act = GroupAction::new(CyclicGroup::new(8).unwrap(), 1, RotationMode::Exact).unwrap();
        assert!(act.rotate_image(&Tensor::<f32>::zeros(&[1, 4, 4])).is_err());
    }

    #[test]
    fn odd_quarter_turn_swaps_dims() {
        let img = Tensor::<f32>::from_fn(&[1, 2, 3], |i| i as f32);
        let act = GroupAction::new(c4(), 3, RotationMode::Exact).unwrap();
        let out = act.rotate_image(&img).unwrap();
        assert_eq!(out.shape(), &[1, 3, 2]);
        let mut a = out.data().to_vec();
        let mut b = img.data().to_vec();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn eighth_turn_round_trip_is_close_in_the_interior() {
        let h = 48;
        let img = Tensor::<f64>::from_fn(&[1, h, h], |i| {
            let (y, x) = ((i / h) as f64, (i % h) as f64);
            1.0 + 0.3 * (x * 0.25).sin() * (y * 0.2).cos() + 0.2 * ((x + y) * 0.1).sin()
        });
        let g = CyclicGroup::new(8).unwrap();
        let fwd = GroupAction::new(g, 1, RotationMode::Bilinear).unwrap();
        let back = GroupAction::new(g, 7, RotationMode::Bilinear).unwrap();
        let round = back.rotate_image(&fwd.rotate_image(&img).unwrap()).unwrap();
        let c = h as f64 / 2.0;
        for r in 0..h {
            for col in 0..h {
                let d = ((r as f64 + 0.5 - c).powi(2) + (col as f64 + 0.5 - c).powi(2)).sqrt();
                if d < 0.35 * h as f64 {
                    let (a, b) = (round.data()[r * h + col], img.data()[r * h + col]);
                    assert!((a - b).abs() <= 0.05 * b.abs(), "({r}, {col}): {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn regular_permutation_convention() {
        assert_eq!(regular_permutation(4, 0).unwrap(), vec![0, 1, 2, 3]);
        let perm = regular_permutation(4, 1).unwrap();
        let src = ['a', 'b', 'c', 'd'];
        let mut out = [' '; 4];
        for (j, &p) in perm.iter().enumerate() {
            out[p] = src[j];
        }
        assert_eq!(out, ['d', 'a', 'b', 'c']);
        let twice: Vec<usize> = perm.iter().map(|&p| perm[p]).collect();
        assert_eq!(twice, regular_permutation(4, 2).unwrap());
        assert!(regular_permutation(4, 4).is_err());
    }

    #[test]
    fn trivial_field_action_is_plain_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f32>::randn(&[3, 4, 4], 1.0, &mut rng);
        let ft = FieldType::trivial(c4(), 3).unwrap();
        let act = GroupAction::new(c4(), 1, RotationMode::Exact).unwrap();
        assert_eq!(act.act_on_field(&x, &ft).unwrap(), act.rotate_image(&x).unwrap());
    }

    #[test]
    fn constant_regular_field_only_shifts_channels() {
        let x = Tensor::<f32>::from_fn(&[4, 3, 3], |i| (i / 9) as f32);
        let ft = FieldType::regular(c4(), 1).unwrap();
        let act = GroupAction::new(c4(), 1, RotationMode::Exact).unwrap();
        let y = act.act_on_field(&x, &ft).unwrap();
        for c in 0..4 {
            assert!(y.data()[c * 9..(c + 1) * 9].iter().all(|&v| v == ((c + 3) % 4) as f32));
        }
    }

    #[test]
    fn field_action_round_trip_and_homomorphism() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ft = FieldType::new(c4(), vec![Rep::Trivial(2), Rep::Regular(2)]).unwrap();
        let x = Tensor::<f32>::randn(&[10, 5, 5], 1.0, &mut rng);
        for k1 in 0..4 {
            let a1 = GroupAction::new(c4(), k1, RotationMode::Exact).unwrap();
            assert_eq!(a1.inverse().act_on_field(&a1.act_on_field(&x, &ft).unwrap(), &ft).unwrap(), x);
            for k2 in 0..4 {
                let a2 = GroupAction::new(c4(), k2, RotationMode::Exact).unwrap();
                let a12 = GroupAction::new(c4(), (k1 + k2) % 4, RotationMode::Exact).unwrap();
                let lhs = a1.act_on_field(&a2.act_on_field(&x, &ft).unwrap(), &ft).unwrap();
                assert_eq!(lhs, a12.act_on_field(&x, &ft).unwrap());
            }
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let ft = FieldType::regular(c4(), 1).unwrap();
        let act = GroupAction::new(c4(), 1, RotationMode::Exact).unwrap();
        assert!(act.act_on_field(&Tensor::<f32>::zeros(&[3, 2, 2]), &ft).is_err());
    }

    #[test]
    fn quarter_turn_of_three_by_three_kernel() {
        let k = Tensor::<f32>::from_fn(&[3, 3], |i| (i + 1) as f32);
        let r = rotate_kernel(&k, c4(), 1).unwrap();
        assert_eq!(r.data(), &[3.0, 6.0, 9.0, 2.0, 5.0, 8.0, 1.0, 4.0, 7.0]);
        assert_eq!(r.sum(), k.sum());
        assert_eq!(rotate_kernel(&k, c4(), 0).unwrap(), k);
        assert!(rotate_kernel(&Tensor::<f32>::zeros(&[4, 4]), c4(), 1).is_err());
    }

    #[test]
    fn eighth_turn_keeps_mass_and_rotates_centroid() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
        let g = CyclicGroup::new(8).unwrap();
        let r = rotate_kernel(&k, g, 1).unwrap();
        assert!((r.sum() - k.sum()).abs() < 1e-12);
        let moment = |t: &Tensor<f64>| {
            t.data().iter().enumerate().fold((0.0, 0.0), |(mx, my), (i, &v)| {
                (mx + v * ((i % 3) as f64 - 1.0), my + v * ((i / 3) as f64 - 1.0))
            })
        };
        let (mx, my) = moment(&k);
        let (rx, ry) = moment(&r);
        let (s, c) = std::f64::consts::FRAC_PI_4.sin_cos();
        assert!((rx - (c * mx + s * my)).abs() < 1e-12);
        assert!((ry - (-s * mx + c * my)).abs() < 1e-12);
        // two eighth turns equal one exact quarter turn
        let q = rotate_kernel(&k, g, 2).unwrap();
        assert_eq!(q, rotate_kernel(&k, c4(), 1).unwrap());
        assert_eq!(rotate_kernel(&k, g, 3).unwrap(), rotate_kernel(&r, c4(), 1).unwrap());
    }

    #[test]
    fn trivial_group_acts_as_identity() {
        let g = CyclicGroup::trivial();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f32>::randn(&[2, 3, 4], 1.0, &mut rng);
        let ft = FieldType::regular(g, 2).unwrap();
        let act = GroupAction::new(g, 0, RotationMode::Exact).unwrap();
        assert_eq!(act.act_on_field(&x, &ft).unwrap(), x);
    }
}
