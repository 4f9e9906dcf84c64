use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nonsingular 3×3 projective map acting on `(x, y)` pixel coordinates,
/// `x` to the right and `y` down, with pixel centers at half-integers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 9]", into = "[f64; 9]")]
pub struct Homography(Matrix3<f64>);

const SINGULAR_EPS: f64 = 1e-300;

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("homography entry".into()));
        }
        let det = m.determinant();
        let scale = m.norm().powi(3);
        if det.abs() <= SINGULAR_EPS || det.abs() <= 1e-14 * scale {
            return Err(Error::Singular(det));
        }
        Ok(Self(m))
    }

    pub fn from_row_major(v: [f64; 9]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(&v))
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self(Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0))
    }

    pub fn scaling(sx: f64, sy: f64) -> Result<Self> {
        Self::new(Matrix3::new(sx, 0.0, 0.0, 0.0, sy, 0.0, 0.0, 0.0, 1.0))
    }

    /// Counter-clockwise (as displayed, with `y` down) rotation by `theta`
    /// radians about `(cx, cy)`.
    pub fn rotation_about(cx: f64, cy: f64, theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        let rot = Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0);
        Self(Self::translation(cx, cy).0 * rot * Self::translation(-cx, -cy).0)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Image of `(x, y)`; `None` when the point maps to infinity.
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let p = self.0 * Vector3::new(x, y, 1.0);
        if p.z.abs() < 1e-12 || !p.z.is_finite() {
            return None;
        }
        Some((p.x / p.z, p.y / p.z))
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.try_inverse().expect("nonsingular by construction"))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Homography) -> Self {
        Self(self.0 * other.0)
    }

    /// Representative with unit Frobenius norm whose largest-magnitude
    /// entry is positive.
    pub fn normalized(&self) -> Matrix3<f64> {
        let m = self.0 / self.0.norm();
        let pivot = m
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            -m
        } else {
            m
        }
    }

    /// Frobenius distance between the normalized representatives.
    pub fn projective_distance(&self, other: &Homography) -> f64 {
        (self.normalized() - other.normalized()).norm()
    }
}

impl TryFrom<[f64; 9]> for Homography {
    type Error = Error;

    fn try_from(v: [f64; 9]) -> Result<Self> {
        Self::from_row_major(v)
    }
}

impl From<Homography> for [f64; 9] {
    fn from(h: Homography) -> Self {
        h.to_row_major()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_turn_maps_right_to_top() {
        let r = Homography::rotation_about(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let (x, y) = r.apply(1.0, 0.0).unwrap();
        assert!(x.abs() < 1e-12 && (y + 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_matrix_is_rejected() {
        assert!(matches!(
            Homography::from_row_major([1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 0.0, 1.0]),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn scale_does_not_change_projective_distance() {
        let h = Homography::from_row_major([1.0, 0.2, 3.0, -0.1, 0.9, 2.0, 1e-3, 2e-4, 1.0]).unwrap();
        let scaled = Homography::new(h.matrix() * -3.5).unwrap();
        assert!(h.projective_distance(&scaled) < 1e-15);
    }
}
