//! Dense vector arithmetic and Euclidean projection onto the feasible ball.

use std::ops::{Deref, DerefMut};

use crate::error::{invalid, Result};

/// A dense real vector of fixed length.
///
/// Constructors reject non-finite components; arithmetic on finite inputs keeps
/// the vector finite for the magnitudes this crate works with.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(components: Vec<f64>) -> Result<Self> {
        if let Some(pos) = components.iter().position(|c| !c.is_finite()) {
            return Err(invalid(format!("component {pos} is not finite")));
        }
        Ok(Self(components))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn basis(dim: usize, axis: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.0[axis] = 1.0;
        v
    }

    /// Wraps components that are known to be finite (internal fast path).
    pub(crate) fn from_raw(components: Vec<f64>) -> Self {
        debug_assert!(components.iter().all(|c| c.is_finite()));
        Self(components)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.0, &self.0)
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &[f64]) {
        debug_assert_eq!(self.0.len(), other.len());
        for (s, o) in self.0.iter_mut().zip(other) {
            *s += a * o;
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.0.iter_mut().for_each(|c| *c *= a);
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self(self.0.iter().map(|c| a * c).collect())
    }

    pub fn sub(&self, other: &[f64]) -> Self {
        Self(self.0.iter().zip(other).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &[f64]) -> Self {
        Self(self.0.iter().zip(other).map(|(a, b)| a + b).collect())
    }

    pub fn distance(&self, other: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn fill_zero(&mut self) {
        self.0.iter_mut().for_each(|c| *c = 0.0);
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm. Errors only on non-finite input.
pub fn l2_norm(v: &[f64]) -> Result<f64> {
    if v.iter().any(|c| !c.is_finite()) {
        return Err(invalid("l2_norm of a non-finite vector"));
    }
    Ok(dot(v, v).sqrt())
}

/// Closed L2 ball; the feasible set of every problem in this crate.
#[derive(Debug, Clone, PartialEq)]
pub struct Ball {
    center: Vector,
    radius: f64,
}

impl Ball {
    pub fn new(center: Vector, radius: f64) -> Result<Self> {
        if !(radius.is_finite() && radius >= 0.0) {
            return Err(invalid(format!("ball radius must be finite and >= 0, got {radius}")));
        }
        Ok(Self { center, radius })
    }

    pub fn centered(dim: usize, radius: f64) -> Result<Self> {
        Self::new(Vector::zeros(dim), radius)
    }

    pub fn center(&self) -> &Vector {
        &self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn dim(&self) -> usize {
        self.center.dim()
    }

    /// D = 2 * radius.
    pub fn diameter(&self) -> f64 {
        2.0 * self.radius
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        self.center.distance(v) <= self.radius * (1.0 + 1e-12) + 1e-300
    }

    pub fn project(&self, v: &Vector) -> Result<Vector> {
        if v.dim() != self.dim() {
            return Err(invalid(format!(
                "projection of a {}-vector onto a {}-dimensional ball",
                v.dim(),
                self.dim()
            )));
        }
        if !v.is_finite() {
            return Err(invalid("projection of a non-finite vector"));
        }
        let mut out = v.clone();
        self.project_in_place(&mut out);
        Ok(out)
    }

    /// Projects a finite vector of matching dimension in place.
    pub(crate) fn project_in_place(&self, v: &mut [f64]) {
        let dist = self.center.distance(v);
        if dist <= self.radius {
            return;
        }
        let shrink = self.radius / dist;
        for (c, o) in v.iter_mut().zip(self.center.iter()) {
            *c = o + shrink * (*c - o);
        }
    }
}

/// Closest point of `ball` to `v`.
pub fn project(v: &Vector, ball: &Ball) -> Result<Vector> {
    ball.project(v)
}
