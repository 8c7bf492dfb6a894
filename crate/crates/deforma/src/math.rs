//! Small fixed-size vector helpers used throughout the engine.

use crate::scalar::Real;

pub type Vec3<T> = [T; 3];

#[inline]
pub fn add3<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub3<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale3<T: Real>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot3<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross3<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm3<T: Real>(a: Vec3<T>) -> T {
    dot3(a, a).sqrt()
}

#[inline]
pub fn normalize3<T: Real>(a: Vec3<T>) -> Vec3<T> {
    let n = norm3(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Squared Euclidean distance.
#[inline]
pub fn dist2<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    let d = sub3(a, b);
    dot3(d, d)
}

#[inline]
pub fn lerp3<T: Real>(a: Vec3<T>, b: Vec3<T>, w: T) -> Vec3<T> {
    [
        a[0] + (b[0] - a[0]) * w,
        a[1] + (b[1] - a[1]) * w,
        a[2] + (b[2] - a[2]) * w,
    ]
}

#[inline]
pub fn all_finite<T: Real>(a: &[T]) -> bool {
    a.iter().all(|v| v.is_finite())
}
