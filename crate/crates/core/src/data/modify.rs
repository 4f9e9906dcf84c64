//! Canonical resizing and the rotated / corner-warped benchmark variants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sequence::{image_hw, Modification, Sequence};
use crate::error::{Error, Result};
use crate::geometry::{dlt, Homography, Point};
use crate::group::rotate_quarter;
use crate::image::{bilinear_warp, resize};
use crate::tensor::Tensor;

const WARP_RETRIES: usize = 100;

/// Target size for one image: landscape frames get `long × short`
/// (width × height), portrait frames the transpose.
pub fn canonical_hw(hw: (usize, usize), long_side: usize, short_side: usize) -> (usize, usize) {
    if hw.1 >= hw.0 {
        (short_side, long_side)
    } else {
        (long_side, short_side)
    }
}

fn scale_between(from: (usize, usize), to: (usize, usize)) -> Result<Homography> {
    Homography::scaling(to.1 as f64 / from.1 as f64, to.0 as f64 / from.0 as f64)
}

/// Resizes every image to its canonical orientation and conjugates the
/// ground truth, `H' = S_B · H · S_A⁻¹`.
pub fn resize_canonical(seq: &Sequence, long_side: usize, short_side: usize) -> Result<Sequence> {
    if long_side == 0 || short_side == 0 {
        return Err(Error::Invalid("canonical size must be positive".into()));
    }
    let a_hw = seq.hw_a();
    let a_to = canonical_hw(a_hw, long_side, short_side);
    let unchanged = a_hw == a_to && seq.images_b.iter().all(|b| image_hw(b) == canonical_hw(image_hw(b), long_side, short_side));
    if unchanged {
        return Ok(seq.clone());
    }
    let s_a = scale_between(a_hw, a_to)?;
    let mut images_b = Vec::with_capacity(seq.images_b.len());
    let mut homographies = Vec::with_capacity(seq.images_b.len());
    let mut b_sizes = Vec::with_capacity(seq.images_b.len());
    for (img, h) in seq.images_b.iter().zip(&seq.homographies) {
        let from = image_hw(img);
        let to = canonical_hw(from, long_side, short_side);
        images_b.push(resize(img, to.0, to.1)?);
        homographies.push(scale_between(from, to)?.compose(h).compose(&s_a.inverse()));
        b_sizes.push([to.0, to.1]);
    }
    let mut provenance = seq.provenance.clone();
    provenance.push(Modification::Resize {
        a: [a_to.0, a_to.1],
        b: b_sizes,
    });
    Ok(Sequence {
        image_a: resize(&seq.image_a, a_to.0, a_to.1)?,
        images_b,
        homographies,
        provenance,
        ..seq.clone()
    })
}

/// Counter-clockwise rotation by `degrees` about the center of an
/// `h × w` frame.
pub fn center_rotation(h: usize, w: usize, degrees: f64) -> Homography {
    Homography::rotation_about(w as f64 / 2.0, h as f64 / 2.0, degrees.to_radians())
}

/// Rotates each B image by `±a` degrees (sign drawn per image) on a
/// same-size canvas with zero fill; `H' = R · H`.
pub fn make_rotated(seq: &Sequence, a_degrees: f64, seed: u64) -> Result<Sequence> {
    if !(a_degrees > 0.0 && a_degrees <= 90.0) {
        return Err(Error::Invalid(format!("rotation angle must lie in (0, 90], got {a_degrees}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signs: Vec<i8> = (0..seq.images_b.len()).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
    let mut images_b = Vec::with_capacity(signs.len());
    let mut homographies = Vec::with_capacity(signs.len());
    for ((img, h), &sign) in seq.images_b.iter().zip(&seq.homographies).zip(&signs) {
        let (ih, iw) = image_hw(img);
        let angle = sign as f64 * a_degrees;
        let r = center_rotation(ih, iw, angle);
        let rotated = if a_degrees == 90.0 && ih == iw {
            rotate_quarter(img, if sign > 0 { 1 } else { 3 })?
        } else {
            bilinear_warp(img, &r.inverse(), ih, iw, 0.0)?
        };
        images_b.push(rotated);
        homographies.push(r.compose(h));
    }
    let mut provenance = seq.provenance.clone();
    provenance.push(Modification::Rotate {
        angle_deg: a_degrees,
        seed,
        signs,
    });
    Ok(Sequence {
        images_b,
        homographies,
        provenance,
        ..seq.clone()
    })
}

/// Corners of an `h × w` frame: upper-left, upper-right, lower-right,
/// lower-left, as `(x, y)`.
pub fn frame_corners(h: usize, w: usize) -> [Point; 4] {
    let (w, h) = (w as f64, h as f64);
    [[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]]
}

/// Outward corner offsets `[vertical, horizontal]`, each magnitude at most
/// `(s·h, s·w)`.
pub fn sample_corner_offsets<R: Rng>(s: f64, h: usize, w: usize, rng: &mut R) -> [[f64; 2]; 4] {
    let (mv, mh) = (s * h as f64, s * w as f64);
    // outward directions per corner, (vertical, horizontal)
    let dirs = [(-1.0, -1.0), (-1.0, 1.0), (1.0, 1.0), (1.0, -1.0)];
    dirs.map(|(sv, sh)| [sv * rng.gen_range(0.0..=mv), sh * rng.gen_range(0.0..=mh)])
}

fn offset_corners(h: usize, w: usize, offsets: &[[f64; 2]; 4]) -> [Point; 4] {
    let c = frame_corners(h, w);
    std::array::from_fn(|i| [c[i][0] + offsets[i][1], c[i][1] + offsets[i][0]])
}

fn is_convex_ccw_or_cw(q: &[Point; 4]) -> bool {
    let cross = |i: usize| {
        let (a, b, c) = (q[i], q[(i + 1) % 4], q[(i + 2) % 4]);
        (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
    };
    let signs: Vec<f64> = (0..4).map(cross).collect();
    signs.iter().all(|&v| v > 0.0) || signs.iter().all(|&v| v < 0.0)
}

/// The homography taking the frame corners to the offset corners.
pub fn corner_warp(h: usize, w: usize, offsets: &[[f64; 2]; 4]) -> Result<Homography> {
    if offsets.iter().flatten().all(|&v| v == 0.0) {
        return Ok(Homography::identity());
    }
    let quad = offset_corners(h, w, offsets);
    if !is_convex_ccw_or_cw(&quad) {
        return Err(Error::Degenerate("offset quadrilateral is not convex".into()));
    }
    dlt(&frame_corners(h, w), &quad)
}

/// Applies the given per-image corner offsets: B' shows B with its corners
/// pushed outwards, and `H' = W · H`.
pub fn apply_corner_warps(seq: &Sequence, offsets: &[[[f64; 2]; 4]]) -> Result<(Vec<Tensor<f32>>, Vec<Homography>)> {
    if offsets.len() != seq.images_b.len() {
        return Err(Error::Invalid("one offset set per B image required".into()));
    }
    let mut images = Vec::with_capacity(offsets.len());
    let mut homs = Vec::with_capacity(offsets.len());
    for ((img, h), off) in seq.images_b.iter().zip(&seq.homographies).zip(offsets) {
        let (ih, iw) = image_hw(img);
        let warp = corner_warp(ih, iw, off)?;
        images.push(if warp == Homography::identity() {
            img.clone()
        } else {
            bilinear_warp(img, &warp.inverse(), ih, iw, 0.0)?
        });
        homs.push(warp.compose(h));
    }
    Ok((images, homs))
}

/// Corner-warped variant with per-image offsets drawn from `seed`.
pub fn make_warped(seq: &Sequence, s: f64, seed: u64) -> Result<Sequence> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Invalid(format!("warp scale must be positive, got {s}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut offsets = Vec::with_capacity(seq.images_b.len());
    for img in &seq.images_b {
        let (ih, iw) = image_hw(img);
        let mut chosen = None;
        for _ in 0..WARP_RETRIES {
            let off = sample_corner_offsets(s, ih, iw, &mut rng);
            if corner_warp(ih, iw, &off).is_ok() {
                chosen = Some(off);
                break;
            }
        }
        offsets.push(chosen.ok_or_else(|| Error::Degenerate(format!("no valid corner warp after {WARP_RETRIES} draws")))?);
    }
    let (images_b, homographies) = apply_corner_warps(seq, &offsets)?;
    let mut provenance = seq.provenance.clone();
    provenance.push(Modification::CornerWarp { s, seed, offsets });
    Ok(Sequence {
        images_b,
        homographies,
        provenance,
        ..seq.clone()
    })
}

/// Parsed `--mod` value: `none`, `r<a>` or `h<s>`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ModSpec {
    None,
    Rotate(f64),
    Warp(f64),
}

impl ModSpec {
    pub fn apply(&self, seq: &Sequence, seed: u64) -> Result<Sequence> {
        match *self {
            ModSpec::None => Ok(seq.clone()),
            ModSpec::Rotate(a) => make_rotated(seq, a, seed),
            ModSpec::Warp(s) => make_warped(seq, s, seed),
        }
    }
}

impl std::str::FromStr for ModSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("modification must be none, r<degrees> or h<scale>, got {s:?}"));
        if s == "none" {
            return Ok(ModSpec::None);
        }
        let (tag, rest) = s.split_at(s.char_indices().nth(1).map_or(s.len(), |(i, _)| i));
        let v: f64 = rest.parse().map_err(|_| bad())?;
        match tag {
            "r" => Ok(ModSpec::Rotate(v)),
            "h" => Ok(ModSpec::Warp(v)),
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for ModSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModSpec::None => write!(f, "none"),
            ModSpec::Rotate(a) => write!(f, "r{a}"),
            ModSpec::Warp(s) => write!(f, "h{s}"),
        }
    }
}
