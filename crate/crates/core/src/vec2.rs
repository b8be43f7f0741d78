//! Minimal helpers for 2-D vectors stored as `[f64; 2]`.
//!
//! The crowd models work in the plane; a full linear-algebra dependency would
//! be overkill for dot products and 90° rotations, so the handful of
//! operations used by the force laws live here.

/// A point or vector in the plane.
pub type Vec2 = [f64; 2];

#[inline]
pub fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn scale(s: f64, a: Vec2) -> Vec2 {
    [s * a[0], s * a[1]]
}

#[inline]
pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

/// Counter-clockwise rotation by 90°: `(x, y) -> (-y, x)`.
#[inline]
pub fn perp(a: Vec2) -> Vec2 {
    [-a[1], a[0]]
}
