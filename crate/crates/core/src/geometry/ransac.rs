use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{dlt, Homography, Point};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacParams {
    /// Forward reprojection error below which a match is an inlier.
    pub thresh_px: f64,
    pub confidence: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            thresh_px: 3.0,
            confidence: 0.995,
            max_iter: 2000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RansacResult {
    pub homography: Homography,
    pub inliers: Vec<bool>,
    pub iterations: usize,
}

impl RansacResult {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn inlier_mask(h: &Homography, src: &[Point], dst: &[Point], thresh: f64) -> Vec<bool> {
    src.iter()
        .zip(dst)
        .map(|(p, q)| match h.apply(p[0], p[1]) {
            Some((x, y)) => ((x - q[0]).powi(2) + (y - q[1]).powi(2)).sqrt() < thresh,
            None => false,
        })
        .collect()
}

fn select(points: &[Point], mask: &[bool]) -> Vec<Point> {
    points
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(p, _)| *p)
        .collect()
}

/// Robust homography fit. Returns `Ok(None)` when no hypothesis gathers
/// four inliers; fewer than four matches is an error.
pub fn ransac_homography(src: &[Point], dst: &[Point], params: &RansacParams) -> Result<Option<RansacResult>> {
    let n = src.len();
    if n != dst.len() {
        return Err(Error::Invalid("source and target counts differ".into()));
    }
    if n < 4 {
        return Err(Error::Invalid(format!("RANSAC needs at least 4 matches, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(Homography, Vec<bool>, usize)> = None;
    let mut needed = params.max_iter;
    let mut iterations = 0;
    while iterations < needed.min(params.max_iter) {
        iterations += 1;
        let idx = sample(&mut rng, n, 4);
        let s: Vec<Point> = idx.iter().map(|i| src[i]).collect();
        let d: Vec<Point> = idx.iter().map(|i| dst[i]).collect();
        let Ok(h) = dlt(&s, &d) else { continue };
        let mask = inlier_mask(&h, src, dst, params.thresh_px);
        let count = mask.iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|b| count > b.2) {
            let ratio = count as f64 / n as f64;
            let p_all = ratio.powi(4);
            needed = if p_all >= 1.0 - 1e-12 {
                0
            } else if p_all <= 0.0 {
                params.max_iter
            } else {
                ((1.0 - params.confidence).ln() / (1.0 - p_all).ln()).ceil() as usize
            };
            best = Some((h, mask, count));
        }
    }
    let Some((h, mask, count)) = best else {
        return Ok(None);
    };
    if count < 4 {
        return Ok(None);
    }
    let refit = dlt(&select(src, &mask), &select(dst, &mask));
    let (homography, inliers) = match refit {
        Ok(r) => {
            let m = inlier_mask(&r, src, dst, params.thresh_px);
            if m.iter().filter(|&&b| b).count() >= 4 {
                (r, m)
            } else {
                (h, mask)
            }
        }
        Err(_) => (h, mask),
    };
    Ok(Some(RansacResult {
        homography,
        inliers,
        iterations,
    }))
}
