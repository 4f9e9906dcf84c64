//! Resampling of `[c, h, w]` images through homographies.

use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::tensor::{Scalar, Tensor};

fn chw<T: Scalar>(img: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match img.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::shape("image", format!("expected [c, h, w], got {s:?}"))),
    }
}

/// Warps `image` onto an `out_h × out_w` canvas. `map` takes target pixel
/// coordinates to source coordinates; every output pixel center is pushed
/// through it and sampled bilinearly. Samples outside the source rectangle
/// `[0, w] × [0, h]` take `fill`.
pub fn bilinear_warp<T: Scalar>(
    image: &Tensor<T>,
    map: &Homography,
    out_h: usize,
    out_w: usize,
    fill: T,
) -> Result<Tensor<T>> {
    let (c, h, w) = chw(image)?;
    let det = map.matrix().determinant();
    if det == 0.0 || !det.is_finite() {
        return Err(Error::Singular(det));
    }
    let mut out = vec![fill; c * out_h * out_w];
    let plane = h * w;
    let src = image.data();
    for r in 0..out_h {
        for col in 0..out_w {
            let Some((xs, ys)) = map.apply(col as f64 + 0.5, r as f64 + 0.5) else {
                continue;
            };
            if !(0.0..=w as f64).contains(&xs) || !(0.0..=h as f64).contains(&ys) {
                continue;
            }
            let u = (xs - 0.5).clamp(0.0, (w - 1) as f64);
            let v = (ys - 0.5).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (u.floor() as usize, v.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (T::of(u - x0 as f64), T::of(v - y0 as f64));
            let (gx, gy) = (T::one() - fx, T::one() - fy);
            for ch in 0..c {
                let p = &src[ch * plane..(ch + 1) * plane];
                let top = p[y0 * w + x0] * gx + p[y0 * w + x1] * fx;
                let bottom = p[y1 * w + x0] * gx + p[y1 * w + x1] * fx;
                out[(ch * out_h + r) * out_w + col] = top * gy + bottom * fy;
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Bilinear resize; the map is the anisotropic scaling between the frames.
pub fn resize<T: Scalar>(image: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (_, h, w) = chw(image)?;
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let to_src = Homography::scaling(w as f64 / out_w as f64, h as f64 / out_h as f64)?;
    bilinear_warp(image, &to_src, out_h, out_w, T::zero())
}

/// Peak signal-to-noise ratio (peak 1) over the pixels where `mask` holds.
/// Returns `+inf` for identical inputs and `NaN` for an empty mask.
pub fn psnr<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    mut mask: impl FnMut(usize, usize) -> bool,
) -> Result<f64> {
    let (c, h, w) = chw(a)?;
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (mut se, mut n) = (0.0, 0usize);
    for r in 0..h {
        for col in 0..w {
            if !mask(r, col) {
                continue;
            }
            for ch in 0..c {
                let i = (ch * h + r) * w + col;
                let d = a.data()[i].f64() - b.data()[i].f64();
                se += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Ok(f64::NAN);
    }
    let mse = se / n as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn smooth(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[1, h, w], |i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            0.5 + 0.25 * (x * 0.21 + 0.3).sin() + 0.2 * (y * 0.17 - x * 0.05).cos()
        })
    }

    #[test]
    fn identity_warp_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::<f32>::randn(&[3, 5, 7], 1.0, &mut rng);
        let out = bilinear_warp(&img, &Homography::identity(), 5, 7, 0.0).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn integer_translation_shifts_and_fills() {
        let img = Tensor::<f32>::from_fn(&[1, 4, 4], |i| (i + 1) as f32);
        let out = bilinear_warp(&img, &Homography::translation(2.0, 0.0), 4, 4, 0.0).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let expect = if c < 2 { img.data()[r * 4 + c + 2] } else { 0.0 };
                assert_eq!(out.data()[r * 4 + c], expect, "({r}, {c})");
            }
        }
    }

    #[test]
    fn quarter_turn_warp_matches_index_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = Tensor::<f64>::randn(&[2, 6, 6], 1.0, &mut rng);
        // target→source is the inverse rotation
        let to_src = Homography::rotation_about(3.0, 3.0, -std::f64::consts::FRAC_PI_2);
        let warped = bilinear_warp(&img, &to_src, 6, 6, 0.0).unwrap();
        let exact = crate::group::rotate_quarter(&img, 1).unwrap();
        assert!(warped.max_abs_diff(&exact) < 1e-6);
    }

    #[test]
    fn warps_compose() {
        let img = smooth(40, 40);
        let h1 = Homography::rotation_about(20.0, 20.0, 0.1);
        let h2 = Homography::from_row_major([1.02, 0.01, -0.5, -0.02, 0.98, 0.7, 1e-4, -5e-5, 1.0]).unwrap();
        let twice = bilinear_warp(&bilinear_warp(&img, &h1, 40, 40, 0.0).unwrap(), &h2, 40, 40, 0.0).unwrap();
        let once = bilinear_warp(&img, &h1.compose(&h2), 40, 40, 0.0).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for r in 8..32 {
            for c in 8..32 {
                let i = r * 40 + c;
                num += (twice.data()[i] - once.data()[i]).powi(2);
                den += once.data()[i].powi(2);
            }
        }
        assert!((num / den).sqrt() < 0.02);
    }

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let img = smooth(8, 8);
        assert_eq!(psnr(&img, &img, |_, _| true).unwrap(), f64::INFINITY);
    }
}
