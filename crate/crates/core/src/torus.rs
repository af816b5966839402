//! The flat torus `[0,1)^d` with `d` even, viewed as `d/2` coordinate pairs.

use crate::error::{Error, Result};
use crate::rng::Philox;

/// A point of the torus. Coordinates lie in `[0, 1)` and the dimension is even.
#[derive(Clone, Debug, PartialEq)]
pub struct TorusPoint(Vec<f64>);

/// Reduces one coordinate into `[0, 1)`.
///
/// `c - floor(c)` can round up to exactly 1.0 for tiny negative inputs; that
/// value is identified with 0.
#[inline]
pub fn wrap_coord(c: f64) -> f64 {
    let w = c - c.floor();
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

/// Minimal-image offset of a scalar difference, in `[-0.5, 0.5)`.
#[inline]
pub fn min_image(delta: f64) -> f64 {
    delta - (delta + 0.5).floor()
}

fn check_dim(d: usize) -> Result<()> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::InvalidState(format!(
            "torus dimension must be positive and even, got {d}"
        )));
    }
    Ok(())
}

impl TorusPoint {
    /// Builds a point from coordinates that are already in range.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        check_dim(coords.len())?;
        if let Some(c) = coords.iter().find(|c| !(0.0..1.0).contains(*c)) {
            return Err(Error::InvalidState(format!(
                "torus coordinate {c} outside [0, 1)"
            )));
        }
        Ok(Self(coords))
    }

    pub(crate) fn from_wrapped(coords: Vec<f64>) -> Self {
        debug_assert!(coords.iter().all(|c| (0.0..1.0).contains(c)));
        Self(coords)
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn coords_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Wraps an arbitrary finite vector onto the torus.
pub fn wrap(v: &[f64]) -> Result<TorusPoint> {
    check_dim(v.len())?;
    if let Some(c) = v.iter().find(|c| !c.is_finite()) {
        return Err(Error::InvalidState(format!("non-finite coordinate {c}")));
    }
    Ok(TorusPoint(v.iter().map(|&c| wrap_coord(c)).collect()))
}

/// Draws a uniform point of `[0,1)^d`.
pub fn sample_uniform(rng: &mut Philox, d: usize) -> Result<TorusPoint> {
    check_dim(d)?;
    Ok(TorusPoint((0..d).map(|_| rng.uniform()).collect()))
}

/// Minimal-image displacement from `a` to `b`. Antipodal ties resolve to -0.5.
pub fn toroidal_delta(a: &TorusPoint, b: &TorusPoint) -> Result<Vec<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(a.0
        .iter()
        .zip(&b.0)
        .map(|(x, y)| min_image(y - x))
        .collect())
}
