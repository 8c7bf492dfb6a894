//! Radiance manifolds: scalar-field level sets, ray sampling, and the
//! differentiable deformed-polyline intersection with secant interpolation.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::math::{add3, lerp3, norm3, scale3, sub3, Vec3};
use crate::neuralfields::{positional_encode, positional_encode_tape, Mlp};
use crate::scalar::{real, Real};

/// Scalar field whose level sets are the radiance manifolds.
#[derive(Clone, Debug, PartialEq)]
pub enum ManifoldField<T> {
    /// s(x) = |x - center|; levels are sphere radii.
    AnalyticRadial { center: Vec3<T>, levels: Vec<T> },
    /// s(x) = small coordinate network on encoded x.
    Learned {
        net: Mlp<T>,
        enc: usize,
        levels: Vec<T>,
    },
}

impl<T: Real> ManifoldField<T> {
    /// Default analytic field: concentric spheres at the desk-scale radii.
    pub fn default_analytic() -> Self {
        ManifoldField::AnalyticRadial {
            center: [T::zero(); 3],
            levels: [0.6, 0.8, 1.0, 1.2].iter().map(|&l| real(l)).collect(),
        }
    }

    pub fn levels(&self) -> &[T] {
        match self {
            ManifoldField::AnalyticRadial { levels, .. } => levels,
            ManifoldField::Learned { levels, .. } => levels,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            ManifoldField::AnalyticRadial { .. } => 0,
            ManifoldField::Learned { net, .. } => net.arch.param_count(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.levels();
        if levels.is_empty() {
            return Err(Error::InvalidValue {
                what: "manifold levels",
                detail: "need M >= 1".into(),
            });
        }
        for w in levels.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::InvalidValue {
                    what: "manifold levels",
                    detail: "levels must be strictly increasing".into(),
                });
            }
        }
        if let ManifoldField::AnalyticRadial { levels, .. } = self {
            if levels[0] <= T::zero() {
                return Err(Error::InvalidValue {
                    what: "manifold levels",
                    detail: "analytic radii must be positive".into(),
                });
            }
        }
        Ok(())
    }

    pub fn scalar_field(&self, x: Vec3<T>) -> T {
        match self {
            ManifoldField::AnalyticRadial { center, .. } => norm3(sub3(x, *center)),
            ManifoldField::Learned { net, enc, .. } => {
                net.forward(&positional_encode(x, *enc), false)[0]
            }
        }
    }

    /// Tape twin of [`scalar_field`]; `w0` locates the learned-field weights
    /// (ignored in analytic mode).
    pub fn scalar_field_tape(&self, tape: &mut Tape<T>, w0: Option<Var>, x: [Var; 3]) -> Var {
        match self {
            ManifoldField::AnalyticRadial { center, .. } => {
                let mut acc = None;
                for c in 0..3 {
                    let d = tape.add_const(x[c], -center[c]);
                    let sq = tape.square(d);
                    acc = Some(match acc {
                        None => sq,
                        Some(a) => tape.add(a, sq),
                    });
                }
                tape.sqrt(acc.unwrap())
            }
            ManifoldField::Learned { net, enc, .. } => {
                let input = positional_encode_tape(tape, x, *enc);
                net.forward_tape(tape, w0.expect("learned field needs weights on tape"), &input, false)[0]
            }
        }
    }
}

/// A viewing ray in the target space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray<T> {
    pub origin: Vec3<T>,
    pub direction: Vec3<T>,
    pub near: T,
    pub far: T,
}

impl<T: Real> Ray<T> {
    pub fn validate(&self) -> Result<()> {
        if (norm3(self.direction) - T::one()).abs() > real(1e-9) {
            return Err(Error::InvalidValue {
                what: "ray direction",
                detail: "must be unit length".into(),
            });
        }
        if !(T::zero() < self.near && self.near < self.far) {
            return Err(Error::InvalidValue {
                what: "ray bounds",
                detail: "need 0 < near < far".into(),
            });
        }
        Ok(())
    }

    #[inline]
    pub fn at(&self, t: T) -> Vec3<T> {
        add3(self.origin, scale3(self.direction, t))
    }
}

/// A deformed-ray/level-set crossing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intersection<T> {
    pub t: T,
    /// Crossing point in the deformed (template) space, x*_j.
    pub x_template: Vec3<T>,
    /// Same crossing interpolated in the target space (on the ray).
    pub x_target: Vec3<T>,
    pub level_index: usize,
    pub segment_index: usize,
}

/// Tape handles for one crossing, plus the crossing value for ordering.
pub struct IntersectionVars<T> {
    pub t: Var,
    pub x_template: [Var; 3],
    pub x_target: [Var; 3],
    pub level_index: usize,
    pub segment_index: usize,
    pub t_val: T,
}

/// Uniform ray parameters t_i = near + (i/(N-1)) (far - near).
pub fn sample_ts<T: Real>(ray: &Ray<T>, n: usize) -> Result<Vec<T>> {
    if n < 2 {
        return Err(Error::InvalidValue {
            what: "sample count",
            detail: format!("need N >= 2, got {n}"),
        });
    }
    let span = ray.far - ray.near;
    let denom = real::<T>((n - 1) as f64);
    Ok((0..n)
        .map(|i| ray.near + span * real::<T>(i as f64) / denom)
        .collect())
}

/// Uniformly sampled points along the ray.
pub fn ray_samples<T: Real>(ray: &Ray<T>, n: usize) -> Result<Vec<Vec3<T>>> {
    Ok(sample_ts(ray, n)?.into_iter().map(|t| ray.at(t)).collect())
}

/// Intersections of the deformed ray polyline with every manifold level,
/// sorted ascending by t. Duplicate t values collapse to the lowest level
/// index. Exact touches count as a crossing at the touching sample.
pub fn intersect<T: Real>(
    ray: &Ray<T>,
    deform_fn: &dyn Fn(Vec3<T>) -> Vec3<T>,
    field: &ManifoldField<T>,
    n: usize,
) -> Result<Vec<Intersection<T>>> {
    let ts = sample_ts(ray, n)?;
    let xs: Vec<Vec3<T>> = ts.iter().map(|&t| ray.at(t)).collect();
    let warped: Vec<Vec3<T>> = xs.iter().map(|&x| add3(x, deform_fn(x))).collect();
    let svals: Vec<T> = warped.iter().map(|&x| field.scalar_field(x)).collect();

    let mut out = Vec::new();
    for i in 0..n - 1 {
        for (j, &level) in field.levels().iter().enumerate() {
            let a = svals[i] - level;
            let b = svals[i + 1] - level;
            if a == T::zero() {
                out.push(Intersection {
                    t: ts[i],
                    x_template: warped[i],
                    x_target: xs[i],
                    level_index: j,
                    segment_index: i,
                });
            } else if b == T::zero() {
                out.push(Intersection {
                    t: ts[i + 1],
                    x_template: warped[i + 1],
                    x_target: xs[i + 1],
                    level_index: j,
                    segment_index: i,
                });
            } else if a * b < T::zero() {
                let w = (level - svals[i]) / (svals[i + 1] - svals[i]);
                out.push(Intersection {
                    t: ts[i] + (ts[i + 1] - ts[i]) * w,
                    x_template: lerp3(warped[i], warped[i + 1], w),
                    x_target: lerp3(xs[i], xs[i + 1], w),
                    level_index: j,
                    segment_index: i,
                });
            }
        }
    }
    sort_and_dedup(&mut out);
    Ok(out)
}

fn sort_and_dedup<T: Real>(out: &mut Vec<Intersection<T>>) {
    out.sort_by(|a, b| {
        a.t.partial_cmp(&b.t)
            .unwrap()
            .then(a.level_index.cmp(&b.level_index))
    });
    out.dedup_by(|b, a| a.t == b.t);
}

/// Tape twin of [`intersect`]: the crossings stay differentiable through the
/// scalar field, the deformation, and the interpolation weights.
pub fn intersect_tape<T: Real>(
    tape: &mut Tape<T>,
    ray: &Ray<T>,
    mut deform_fn: impl FnMut(&mut Tape<T>, [Var; 3]) -> [Var; 3],
    field: &ManifoldField<T>,
    field_w0: Option<Var>,
    n: usize,
) -> Result<Vec<IntersectionVars<T>>> {
    let ts = sample_ts(ray, n)?;
    let xs: Vec<Vec3<T>> = ts.iter().map(|&t| ray.at(t)).collect();
    let mut xvars = Vec::with_capacity(n);
    let mut warped = Vec::with_capacity(n);
    let mut svars = Vec::with_capacity(n);
    for &x in &xs {
        let xv = x.map(|v| tape.leaf(v));
        let dx = deform_fn(tape, xv);
        let wv = [
            tape.add(xv[0], dx[0]),
            tape.add(xv[1], dx[1]),
            tape.add(xv[2], dx[2]),
        ];
        let s = field.scalar_field_tape(tape, field_w0, wv);
        xvars.push(xv);
        warped.push(wv);
        svars.push(s);
    }

    let mut out: Vec<IntersectionVars<T>> = Vec::new();
    for i in 0..n - 1 {
        for (j, &level) in field.levels().iter().enumerate() {
            let a = tape.val(svars[i]) - level;
            let b = tape.val(svars[i + 1]) - level;
            let touch = |tape: &mut Tape<T>, k: usize| IntersectionVars {
                t: tape.leaf(ts[k]),
                x_template: warped[k],
                x_target: xvars[k],
                level_index: j,
                segment_index: i,
                t_val: ts[k],
            };
            if a == T::zero() {
                out.push(touch(tape, i));
            } else if b == T::zero() {
                out.push(touch(tape, i + 1));
            } else if a * b < T::zero() {
                let lv = tape.leaf(level);
                let num = tape.sub(lv, svars[i]);
                let den = tape.sub(svars[i + 1], svars[i]);
                let w = tape.div(num, den);
                let lerp = |tape: &mut Tape<T>, p: [Var; 3], q: [Var; 3]| -> [Var; 3] {
                    [0, 1, 2].map(|c| {
                        let d = tape.sub(q[c], p[c]);
                        let dw = tape.mul(d, w);
                        tape.add(p[c], dw)
                    })
                };
                let x_template = lerp(tape, warped[i], warped[i + 1]);
                let x_target = lerp(tape, xvars[i], xvars[i + 1]);
                let dt = tape.leaf(ts[i + 1] - ts[i]);
                let dtw = tape.mul(dt, w);
                let t0 = tape.leaf(ts[i]);
                let t = tape.add(t0, dtw);
                out.push(IntersectionVars {
                    t_val: tape.val(t),
                    t,
                    x_template,
                    x_target,
                    level_index: j,
                    segment_index: i,
                });
            }
        }
    }
    out.sort_by(|a, b| {
        a.t_val
            .partial_cmp(&b.t_val)
            .unwrap()
            .then(a.level_index.cmp(&b.level_index))
    });
    out.dedup_by(|b, a| a.t_val == b.t_val);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_sphere_field() -> ManifoldField<f64> {
        ManifoldField::AnalyticRadial {
            center: [0.0; 3],
            levels: vec![1.0],
        }
    }

    fn z_ray() -> Ray<f64> {
        Ray {
            origin: [0.0, 0.0, -2.0],
            direction: [0.0, 0.0, 1.0],
            near: 0.5,
            far: 4.0,
        }
    }

    /// Closed-form |o + t d - c| = r for a unit-direction ray.
    fn sphere_hits(origin: [f64; 3], dir: [f64; 3], center: [f64; 3], r: f64) -> Vec<f64> {
        let oc = sub3(origin, center);
        let b = 2.0 * crate::math::dot3(oc, dir);
        let c = crate::math::dot3(oc, oc) - r * r;
        let disc = b * b - 4.0 * c;
        if disc < 0.0 {
            return vec![];
        }
        vec![(-b - disc.sqrt()) / 2.0, (-b + disc.sqrt()) / 2.0]
    }

    #[test]
    fn analytic_field_values() {
        let f = unit_sphere_field();
        assert_eq!(f.scalar_field([3.0, 4.0, 0.0]), 5.0);
        assert_eq!(f.scalar_field([0.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn learned_field_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::<f64>::init(
            crate::neuralfields::MlpArch {
                input: 3 + 6 * 2,
                hidden: 8,
                hidden_layers: 2,
                output: 1,
            },
            &mut rng,
        );
        let field = ManifoldField::Learned {
            net: net.clone(),
            enc: 2,
            levels: vec![0.5],
        };
        let x = [0.1, 0.2, 0.3];
        let got = field.scalar_field(x);
        // Naive layer-by-layer pass.
        let dims = net.arch.dims();
        let mut a = positional_encode(x, 2);
        let mut off = 0;
        for l in 0..dims.len() - 1 {
            let (fi, fo) = (dims[l], dims[l + 1]);
            let mut next = vec![0.0; fo];
            #[allow(clippy::needless_range_loop)]
            for o in 0..fo {
                let mut s = net.weights[off + fi * fo + o];
                for i in 0..fi {
                    s += net.weights[off + o * fi + i] * a[i];
                }
                next[o] = if l + 2 == dims.len() { s } else { (1.0 + s.exp()).ln() };
            }
            off += fi * fo + fo;
            a = next;
        }
        assert!((got - a[0]).abs() < 1e-12);
    }

    #[test]
    fn ray_samples_endpoints_and_spacing() {
        let ray = Ray {
            origin: [0.0; 3],
            direction: [1.0, 0.0, 0.0],
            near: 1.0,
            far: 2.0,
        };
        let two = sample_ts(&ray, 2).unwrap();
        assert_eq!(two, vec![1.0, 2.0]);
        let five = sample_ts(&ray, 5).unwrap();
        assert_eq!(five, vec![1.0, 1.25, 1.5, 1.75, 2.0]);
        let pts = ray_samples(&ray, 5).unwrap();
        for (t, p) in five.iter().zip(&pts) {
            assert_eq!(*p, ray.at(*t));
        }
        assert!(sample_ts(&ray, 1).is_err());
    }

    #[test]
    fn sphere_intersections_match_closed_form() {
        let ray = z_ray();
        let field = unit_sphere_field();
        let hits = intersect(&ray, &|_| [0.0; 3], &field, 64).unwrap();
        assert_eq!(hits.len(), 2);
        let exact = sphere_hits(ray.origin, ray.direction, [0.0; 3], 1.0);
        // Through-center ray: secant interpolation is exact up to rounding.
        assert!((hits[0].t - exact[0]).abs() <= 5e-4);
        assert!((hits[1].t - exact[1]).abs() <= 5e-4);
        assert!((hits[0].t - 1.0).abs() <= 1e-3);
        assert!((hits[1].t - 3.0).abs() <= 1e-3);
        // x_target lies on the ray.
        for h in &hits {
            let p = ray.at(h.t);
            for c in 0..3 {
                assert!((h.x_target[c] - p[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn off_axis_secant_accuracy() {
        // Impact parameter 0.6; the secant estimate must stay within 5e-4
        // of the closed form at N=128.
        let ray = Ray {
            origin: [0.6, 0.0, -3.0],
            direction: [0.0, 0.0, 1.0],
            near: 0.5,
            far: 6.0,
        };
        let field = unit_sphere_field();
        let hits = intersect(&ray, &|_| [0.0; 3], &field, 128).unwrap();
        let exact = sphere_hits(ray.origin, ray.direction, [0.0; 3], 1.0);
        assert_eq!(hits.len(), 2);
        for (h, e) in hits.iter().zip(&exact) {
            assert!((h.t - e).abs() <= 5e-4, "{} vs {}", h.t, e);
        }
    }

    #[test]
    fn miss_gives_empty_list() {
        let ray = Ray {
            origin: [5.0, 0.0, -2.0],
            direction: [0.0, 0.0, 1.0],
            near: 0.5,
            far: 4.0,
        };
        let hits = intersect(&ray, &|_| [0.0; 3], &unit_sphere_field(), 64).unwrap();
        assert!(hits.is_empty());
    }

    #[test]
    fn constant_translation_matches_shifted_sphere() {
        let v = [0.15, -0.1, 0.05];
        let ray = z_ray();
        let field = unit_sphere_field();
        let hits = intersect(&ray, &move |_| v, &field, 256).unwrap();
        // Deformed points x + v cross |.| = 1 where the undeformed ray
        // crosses the sphere centered at -v.
        let exact = sphere_hits(ray.origin, ray.direction, [-v[0], -v[1], -v[2]], 1.0);
        assert_eq!(hits.len(), 2);
        for (h, e) in hits.iter().zip(&exact) {
            assert!((h.t - e).abs() < 1e-3, "{} vs {}", h.t, e);
        }
    }

    #[test]
    fn default_analytic_levels() {
        let field = ManifoldField::<f64>::default_analytic();
        field.validate().unwrap();
        assert_eq!(field.levels(), &[0.6, 0.8, 1.0, 1.2]);
        assert_eq!(field.param_count(), 0);
    }

    #[test]
    fn output_sorted_and_bounded() {
        let field = ManifoldField::AnalyticRadial {
            center: [0.0; 3],
            levels: vec![0.6, 0.8, 1.0, 1.2],
        };
        let ray = z_ray();
        let n = 64;
        let hits = intersect(&ray, &|_| [0.0; 3], &field, n).unwrap();
        assert!(hits.len() <= (n - 1) * 4);
        assert_eq!(hits.len(), 8);
        for w in hits.windows(2) {
            assert!(w[0].t < w[1].t);
        }
    }

    #[test]
    fn exact_touch_counts_once() {
        // Field value equals the level exactly at the middle sample of a
        // symmetric ray (closest approach distance 1 at t = 2).
        let ray = Ray {
            origin: [1.0, 0.0, -2.0],
            direction: [0.0, 0.0, 1.0],
            near: 1.0,
            far: 3.0,
        };
        let hits = intersect(&ray, &|_| [0.0; 3], &unit_sphere_field(), 3).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].t, 2.0);
    }

    #[test]
    fn tape_intersections_match_plain_bitwise() {
        let ray = z_ray();
        let field = unit_sphere_field();
        let v = [0.05, 0.02, -0.03];
        let plain = intersect(&ray, &move |_| v, &field, 64).unwrap();
        let mut tape = Tape::new();
        let hits = intersect_tape(
            &mut tape,
            &ray,
            |tape, _| v.map(|c| tape.leaf(c)),
            &field,
            None,
            64,
        )
        .unwrap();
        assert_eq!(plain.len(), hits.len());
        for (p, h) in plain.iter().zip(&hits) {
            assert_eq!(p.t, tape.val(h.t));
            for c in 0..3 {
                assert_eq!(p.x_template[c], tape.val(h.x_template[c]));
                assert_eq!(p.x_target[c], tape.val(h.x_target[c]));
            }
        }
    }

    #[test]
    fn crossing_t_gradient_matches_fd() {
        use crate::neuralfields::{deform, deform_tape, DeformNet, NetConfig};
        let cfg = NetConfig {
            d_id: 2,
            d_exp: 2,
            d_eps: 2,
            hidden: 8,
            layers: 2,
            enc_x: 2,
            enc_d: 1,
            enc_def: 2,
            max_deform: 0.3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut net = DeformNet::<f64>::init(&cfg, &mut rng);
        // Small nonzero output layer so the warp is active.
        let n = net.mlp.weights.len();
        for (i, w) in net.mlp.weights[n - 27..].iter_mut().enumerate() {
            *w = 0.02 * ((i % 5) as f64 - 2.0);
        }
        let z_id = [0.1, -0.2];
        let z_exp = [0.3, 0.4];
        let ray = z_ray();
        let field = unit_sphere_field();

        let mut tape = Tape::new();
        let w0 = tape.leaves(&net.mlp.weights);
        let zi: Vec<Var> = z_id.iter().map(|&v| tape.leaf(v)).collect();
        let ze: Vec<Var> = z_exp.iter().map(|&v| tape.leaf(v)).collect();
        let hits = intersect_tape(
            &mut tape,
            &ray,
            |tape, x| deform_tape(&net, tape, w0, x, &zi, &ze),
            &field,
            None,
            32,
        )
        .unwrap();
        assert!(!hits.is_empty());
        let grads = tape.backward(hits[0].t).unwrap();

        use rand::Rng;
        let mut prng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..30 {
            let i = prng.gen_range(0..net.mlp.weights.len());
            let h = 1e-5;
            let eval = |delta: f64| {
                let mut n2 = net.clone();
                n2.mlp.weights[i] += delta;
                let hs = intersect(
                    &ray,
                    &|x| deform(&n2, x, &z_id, &z_exp).unwrap(),
                    &field,
                    32,
                )
                .unwrap();
                hs[0].t
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = grads.wrt(Tape::<f64>::nth(w0, i));
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(((an - fd) / denom).abs() < 1e-4, "param {i}: {an} vs {fd}");
        }
    }
}
