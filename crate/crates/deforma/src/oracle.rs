//! Independent verification oracles: closed-form sphere renderer, central
//! finite differences, exhaustive nearest neighbor.
//!
//! These use only elementary operations and share no code with the engine
//! paths they check.

use crate::scalar::{real, Real};

/// A painted sphere; `center` already includes any rigid warp.
#[derive(Clone, Debug)]
pub struct SphereSpec<T> {
    pub center: [T; 3],
    pub radius: T,
    pub paint: Paint<T>,
}

/// Color as a function of the hit point in sphere-local coordinates.
#[derive(Clone, Debug)]
pub enum Paint<T> {
    Solid([T; 3]),
    /// Smooth low-frequency bands; the ground-truth pattern of the synthetic
    /// fitting scene.
    Bands,
}

impl<T: Real> Paint<T> {
    pub fn color(&self, local: [T; 3]) -> [T; 3] {
        match self {
            Paint::Solid(c) => *c,
            Paint::Bands => bands_color(local),
        }
    }
}

/// The band pattern, shared by oracle and scene construction.
pub fn bands_color<T: Real>(p: [T; 3]) -> [T; 3] {
    let h: T = real(0.5);
    let a: T = real(0.35);
    [
        h + a * (real::<T>(2.0) * p[0] + p[1]).sin(),
        h + a * (real::<T>(1.5) * p[1] - p[2]).cos(),
        h + a * (p[0] + p[2]).sin(),
    ]
}

#[derive(Clone, Debug)]
pub struct SceneSpec<T> {
    pub spheres: Vec<SphereSpec<T>>,
    pub background: [T; 3],
}

/// Closed-form first-hit render of a union of opaque spheres.
///
/// Returns the hit color and the ray-parameter depth, or the background and
/// no depth on a miss.
pub fn analytic_render<T: Real>(
    scene: &SceneSpec<T>,
    origin: [T; 3],
    direction: [T; 3],
    near: T,
    far: T,
) -> ([T; 3], Option<T>) {
    let mut best: Option<(T, usize)> = None;
    for (si, s) in scene.spheres.iter().enumerate() {
        let oc = [
            origin[0] - s.center[0],
            origin[1] - s.center[1],
            origin[2] - s.center[2],
        ];
        let a = direction[0] * direction[0] + direction[1] * direction[1] + direction[2] * direction[2];
        let b = real::<T>(2.0)
            * (oc[0] * direction[0] + oc[1] * direction[1] + oc[2] * direction[2]);
        let c = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - s.radius * s.radius;
        let disc = b * b - real::<T>(4.0) * a * c;
        if disc < T::zero() {
            continue;
        }
        let sq = disc.sqrt();
        let two_a = real::<T>(2.0) * a;
        for t in [(-b - sq) / two_a, (-b + sq) / two_a] {
            if t >= near && t <= far && best.map_or(true, |(bt, _)| t < bt) {
                best = Some((t, si));
            }
        }
    }
    match best {
        None => (scene.background, None),
        Some((t, si)) => {
            let s = &scene.spheres[si];
            let local = [
                origin[0] + t * direction[0] - s.center[0],
                origin[1] + t * direction[1] - s.center[1],
                origin[2] + t * direction[2] - s.center[2],
            ];
            (s.paint.color(local), Some(t))
        }
    }
}

/// Central finite differences per coordinate: (f(x+h e_i) - f(x-h e_i)) / 2h.
pub fn fd_gradient<T: Real, F: FnMut(&[T]) -> T>(mut f: F, x: &[T], step: T) -> Vec<T> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let fp = f(&probe);
        probe[i] = x[i] - step;
        let fm = f(&probe);
        probe[i] = x[i];
        assert!(fp.is_finite() && fm.is_finite(), "non-finite oracle value");
        grad.push((fp - fm) / (real::<T>(2.0) * step));
    }
    grad
}

/// Plain double-loop nearest neighbor; ties broken by lowest index.
pub fn exhaustive_nn<T: Real>(query: [T; 3], points: &[[T; 3]]) -> (usize, T) {
    assert!(!points.is_empty());
    let mut best_i = 0usize;
    let mut best_d = T::infinity();
    for (i, p) in points.iter().enumerate() {
        let dx = query[0] - p[0];
        let dy = query[1] - p[1];
        let dz = query[2] - p[2];
        let d = dx * dx + dy * dy + dz * dz;
        if d < best_d {
            best_d = d;
            best_i = i;
        }
    }
    (best_i, best_d.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn through_center_depth_is_exact() {
        let scene = SceneSpec {
            spheres: vec![SphereSpec {
                center: [0.0, 0.0, 0.0],
                radius: 1.0,
                paint: Paint::Solid([1.0, 0.0, 0.0]),
            }],
            background: [0.0; 3],
        };
        let (c, d) = analytic_render(&scene, [0.0, 0.0, 3.0], [0.0, 0.0, -1.0], 0.1, 10.0);
        assert_eq!(c, [1.0, 0.0, 0.0]);
        assert_eq!(d, Some(2.0));
    }

    #[test]
    fn miss_gives_background() {
        let scene = SceneSpec {
            spheres: vec![SphereSpec {
                center: [0.0, 0.0, 0.0],
                radius: 1.0,
                paint: Paint::Solid([1.0, 0.0, 0.0]),
            }],
            background: [0.25, 0.5, 0.75],
        };
        let (c, d) = analytic_render(&scene, [0.0, 5.0, 3.0], [0.0, 0.0, -1.0], 0.1, 10.0);
        assert_eq!(c, [0.25, 0.5, 0.75]);
        assert_eq!(d, None);
    }

    #[test]
    fn translated_sphere_equals_shifted_solution() {
        let v = [0.3, -0.2, 0.1];
        let shifted = SceneSpec {
            spheres: vec![SphereSpec {
                center: v,
                radius: 1.0,
                paint: Paint::Solid([1.0; 3]),
            }],
            background: [0.0; 3],
        };
        let origin = [0.1, 0.2, 3.0];
        let dir = [0.0, 0.0, -1.0];
        let (_, d1) = analytic_render(&shifted, origin, dir, 0.1, 10.0);
        // Unwarped solution with the origin shifted the other way.
        let unit = SceneSpec {
            spheres: vec![SphereSpec {
                center: [0.0; 3],
                radius: 1.0,
                paint: Paint::Solid([1.0; 3]),
            }],
            background: [0.0; 3],
        };
        let shifted_origin = [origin[0] - v[0], origin[1] - v[1], origin[2] - v[2]];
        let (_, d2) = analytic_render(&unit, shifted_origin, dir, 0.1, 10.0);
        assert_eq!(d1, d2);
    }

    #[test]
    fn fd_gradient_of_dot() {
        let g = fd_gradient(|x: &[f64]| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-5);
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn fd_gradient_linear_is_exact() {
        let g = fd_gradient(|x: &[f64]| 3.0 * x[0] - 0.5 * x[1], &[0.3, 0.7], 1e-3);
        assert!((g[0] - 3.0).abs() < 1e-12);
        assert!((g[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn exhaustive_nn_tie_break() {
        let pts = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        let (i, d) = exhaustive_nn([0.0, 0.0, 0.0], &pts);
        assert_eq!(i, 0);
        assert_eq!(d, 1.0);
    }
}
