//! Match overlays and single-pair matching on arbitrary image sizes.

use crate::error::Result;
use crate::geometry::Homography;
use crate::image::resize;
use crate::matcher::FineMatch;
use crate::model::Model;
use crate::tensor::Tensor;

/// Reprojection error below which a match is drawn green.
pub const GOOD_PX: f64 = 10.0;

pub const GREEN: [f32; 3] = [0.0, 1.0, 0.0];
pub const RED: [f32; 3] = [1.0, 0.0, 0.0];
pub const GRAY: [f32; 3] = [0.6, 0.6, 0.6];

/// Color of a match line: gray without ground truth, otherwise green when
/// the reprojection error is under [`GOOD_PX`].
pub fn match_color(m: &FineMatch, gt: Option<&Homography>) -> [f32; 3] {
    let Some(h) = gt else { return GRAY };
    match h.apply(m.point_a[0], m.point_a[1]) {
        Some((x, y)) if ((x - m.point_b[0]).powi(2) + (y - m.point_b[1]).powi(2)).sqrt() < GOOD_PX => GREEN,
        _ => RED,
    }
}

fn hw(img: &Tensor<f32>) -> (usize, usize) {
    let s = img.shape();
    (s[1], s[2])
}

fn round_down8(n: usize) -> usize {
    (n / 8 * 8).max(8)
}

/// Resizes an image down to multiples of 8 when needed. Returns the image
/// and the scaling that maps original pixels into it.
pub fn to_model_frame(img: &Tensor<f32>) -> Result<(Tensor<f32>, Homography)> {
    let (h, w) = hw(img);
    let (th, tw) = (round_down8(h), round_down8(w));
    if (th, tw) == (h, w) {
        return Ok((img.clone(), Homography::identity()));
    }
    Ok((resize(img, th, tw)?, Homography::scaling(tw as f64 / w as f64, th as f64 / h as f64)?))
}

/// A pair brought into the model frame, with matches in that frame.
pub struct FramedMatches {
    pub image_a: Tensor<f32>,
    pub image_b: Tensor<f32>,
    pub matches: Vec<FineMatch>,
    /// Ground truth conjugated into the model frame, `S_B · H · S_A⁻¹`.
    pub gt: Option<Homography>,
}

/// Matches two `[3, h, w]` images of any size.
pub fn match_pair(model: &Model, a: &Tensor<f32>, b: &Tensor<f32>, gt: Option<&Homography>) -> Result<FramedMatches> {
    let (image_a, sa) = to_model_frame(a)?;
    let (image_b, sb) = to_model_frame(b)?;
    let matches = model.match_images(&image_a, &image_b)?.fine;
    Ok(FramedMatches {
        image_a,
        image_b,
        matches,
        gt: gt.map(|h| sb.compose(h).compose(&sa.inverse())),
    })
}

fn put(canvas: &mut Tensor<f32>, x: i64, y: i64, color: [f32; 3]) {
    let (h, w) = hw(canvas);
    if x < 0 || y < 0 || x as usize >= w || y as usize >= h {
        return;
    }
    let i = y as usize * w + x as usize;
    let d = canvas.data_mut();
    for (c, v) in color.iter().enumerate() {
        d[c * h * w + i] = *v;
    }
}

/// Bresenham line between two pixel positions.
fn line(canvas: &mut Tensor<f32>, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [f32; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(canvas, x, y, color);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// A and B side by side (A left), one line per match.
pub fn overlay(a: &Tensor<f32>, b: &Tensor<f32>, matches: &[FineMatch], gt: Option<&Homography>) -> Tensor<f32> {
    let ((ha, wa), (hb, wb)) = (hw(a), hw(b));
    let (h, w) = (ha.max(hb), wa + wb);
    let mut canvas = Tensor::zeros(&[3, h, w]);
    {
        let d = canvas.data_mut();
        for c in 0..3 {
            for r in 0..ha {
                for col in 0..wa {
                    d[(c * h + r) * w + col] = a.data()[(c * ha + r) * wa + col];
                }
            }
            for r in 0..hb {
                for col in 0..wb {
                    d[(c * h + r) * w + wa + col] = b.data()[(c * hb + r) * wb + col];
                }
            }
        }
    }
    let px = |v: f64| v.floor() as i64;
    for m in matches {
        let color = match_color(m, gt);
        line(
            &mut canvas,
            (px(m.point_a[0]), px(m.point_a[1])),
            (px(m.point_b[0]) + wa as i64, px(m.point_b[1])),
            color,
        );
    }
    canvas
}

/// Fraction of matches within [`GOOD_PX`] of the ground truth and their
/// median reprojection error.
pub fn match_quality(matches: &[FineMatch], gt: &Homography) -> (f64, f64) {
    let mut errs: Vec<f64> = matches
        .iter()
        .map(|m| match gt.apply(m.point_a[0], m.point_a[1]) {
            Some((x, y)) => ((x - m.point_b[0]).powi(2) + (y - m.point_b[1]).powi(2)).sqrt(),
            None => f64::INFINITY,
        })
        .collect();
    if errs.is_empty() {
        return (0.0, f64::INFINITY);
    }
    errs.sort_by(f64::total_cmp);
    let good = errs.iter().filter(|&&e| e < GOOD_PX).count() as f64 / errs.len() as f64;
    (good, errs[errs.len() / 2])
}
