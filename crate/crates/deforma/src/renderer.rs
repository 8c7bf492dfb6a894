//! Camera model, manifold compositing, depth accumulation, full-image
//! rendering, and depth-map reprojection.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::manifolds::{intersect, intersect_tape, ManifoldField, Ray};
use crate::math::{add3, cross3, norm3, normalize3, scale3, Vec3};
use crate::neuralfields::{
    deform, deform_tape, template_query, template_query_tape, FieldParams, FieldVars,
    LatentCodes, RadianceSample,
};
use crate::scalar::{real, Real};

/// Pinhole camera on the look-at-origin sphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera<T> {
    pub pitch: T,
    pub yaw: T,
    pub radius: T,
    pub fov_y: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> Camera<T> {
    pub fn new(pitch: T, yaw: T, radius: T, width: usize, height: usize) -> Self {
        Camera {
            pitch,
            yaw,
            radius,
            fov_y: real(0.6),
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov_y > T::zero() && self.fov_y < real(std::f64::consts::PI)) {
            return Err(Error::InvalidValue {
                what: "camera fov_y",
                detail: "must be in (0, pi)".into(),
            });
        }
        if !(self.radius > T::zero()) || self.width == 0 || self.height == 0 {
            return Err(Error::InvalidValue {
                what: "camera",
                detail: "radius and image size must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn position(&self) -> Vec3<T> {
        let (cp, sp) = (self.pitch.cos(), self.pitch.sin());
        let (cy, sy) = (self.yaw.cos(), self.yaw.sin());
        scale3([cp * sy, sp, cp * cy], self.radius)
    }

    /// Orthonormal (right, up, forward) looking at the origin; falls back to
    /// up (0,0,1) when the view axis degenerates with world up (0,1,0).
    fn frame(&self) -> (Vec3<T>, Vec3<T>, Vec3<T>) {
        let pos = self.position();
        let forward = normalize3(scale3(pos, -T::one()));
        let mut right = cross3(forward, [T::zero(), T::one(), T::zero()]);
        if norm3(right) < real(1e-6) {
            right = cross3(forward, [T::zero(), T::zero(), T::one()]);
        }
        let right = normalize3(right);
        let up = cross3(right, forward);
        (right, up, forward)
    }

    /// Ray through the center of pixel (px, py); py counts down from the top.
    pub fn pixel_ray(&self, px: usize, py: usize, near: T, far: T) -> Ray<T> {
        let (right, up, forward) = self.frame();
        let half = real::<T>(0.5);
        let tan = (self.fov_y * half).tan();
        let aspect = real::<T>(self.width as f64) / real(self.height as f64);
        let u = (real::<T>(2.0) * (real::<T>(px as f64) + half) / real(self.width as f64)
            - T::one())
            * tan
            * aspect;
        let v = (T::one()
            - real::<T>(2.0) * (real::<T>(py as f64) + half) / real(self.height as f64))
            * tan;
        let dir = normalize3(add3(add3(scale3(right, u), scale3(up, v)), forward));
        Ray {
            origin: self.position(),
            direction: dir,
            near,
            far,
        }
    }
}

/// Row-major grid of pinhole rays through pixel centers.
pub fn camera_rays<T: Real>(camera: &Camera<T>, near: T, far: T) -> Result<Vec<Ray<T>>> {
    camera.validate()?;
    let mut rays = Vec::with_capacity(camera.width * camera.height);
    for py in 0..camera.height {
        for px in 0..camera.width {
            rays.push(camera.pixel_ray(px, py, near, far));
        }
    }
    Ok(rays)
}

/// Rendering knobs: ray bounds, sample count along each ray, background
/// color, and the literal transmittance-only depth-weight variant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings<T> {
    pub near: T,
    pub far: T,
    pub samples: usize,
    pub background: Vec3<T>,
    /// Weight depth by transmittance alone, unnormalized, instead of the
    /// default normalized transmittance-times-occupancy weights.
    pub literal_depth: bool,
}

impl<T: Real> Default for RenderSettings<T> {
    fn default() -> Self {
        RenderSettings {
            near: real(0.5),
            far: real(6.0),
            samples: 64,
            background: [T::zero(); 3],
            literal_depth: false,
        }
    }
}

const ABSENT_DEPTH_CUTOFF: f64 = 1e-4;

/// Front-to-back alpha compositing over ordered crossings.
///
/// Returns the composited color (background blended with the residual
/// transmittance), the per-crossing weights, and the residual itself.
pub fn composite<T: Real>(
    samples: &[RadianceSample<T>],
    background: Vec3<T>,
) -> Result<(Vec3<T>, Vec<T>, T)> {
    let mut color = [T::zero(); 3];
    let mut trans = T::one();
    let mut weights = Vec::with_capacity(samples.len());
    for s in samples {
        if !(s.occupancy >= T::zero() && s.occupancy <= T::one()) {
            return Err(Error::InvalidValue {
                what: "occupancy",
                detail: format!("{} outside [0,1]", s.occupancy),
            });
        }
        let w = trans * s.occupancy;
        for c in 0..3 {
            color[c] = color[c] + w * s.color[c];
        }
        trans = trans * (T::one() - s.occupancy);
        weights.push(w);
    }
    for c in 0..3 {
        color[c] = color[c] + trans * background[c];
    }
    Ok((color, weights, trans))
}

fn depth_from_weights<T: Real>(
    weights: &[T],
    occupancies: &[T],
    ts: &[T],
    literal: bool,
) -> Option<T> {
    let mut wsum = T::zero();
    for &w in weights {
        wsum = wsum + w;
    }
    if wsum < real(ABSENT_DEPTH_CUTOFF) {
        return None;
    }
    if literal {
        // Transmittance-only, unnormalized.
        let mut trans = T::one();
        let mut d = T::zero();
        for (i, &t) in ts.iter().enumerate() {
            d = d + trans * t;
            trans = trans * (T::one() - occupancies[i]);
        }
        Some(d)
    } else {
        let mut d = T::zero();
        for (w, &t) in weights.iter().zip(ts) {
            d = d + *w * t;
        }
        Some(d / wsum)
    }
}

/// One pixel with a caller-supplied radiance at each template-space crossing
/// point. `radiance` sees the crossing in template space; the view direction
/// is fixed per ray, so it can be captured by the closure.
pub fn render_pixel_with<T: Real>(
    ray: &Ray<T>,
    deform_fn: &dyn Fn(Vec3<T>) -> Vec3<T>,
    field: &ManifoldField<T>,
    radiance: &dyn Fn(Vec3<T>) -> Result<RadianceSample<T>>,
    settings: &RenderSettings<T>,
) -> Result<(Vec3<T>, Option<T>)> {
    ray.validate()?;
    field.validate()?;
    let hits = intersect(ray, deform_fn, field, settings.samples)?;
    if hits.is_empty() {
        return Ok((settings.background, None));
    }
    let mut samples = Vec::with_capacity(hits.len());
    for h in &hits {
        samples.push(radiance(h.x_template)?);
    }
    let (color, weights, _) = composite(&samples, settings.background)?;
    let occ: Vec<T> = samples.iter().map(|s| s.occupancy).collect();
    let ts: Vec<T> = hits.iter().map(|h| h.t).collect();
    let depth = depth_from_weights(&weights, &occ, &ts, settings.literal_depth);
    Ok((color, depth))
}

/// Full engine pixel: inverse deformation, template radiance, compositing,
/// accumulated depth.
pub fn render_pixel<T: Real>(
    ray: &Ray<T>,
    fields: &FieldParams<T>,
    latents: &LatentCodes<T>,
    settings: &RenderSettings<T>,
) -> Result<(Vec3<T>, Option<T>)> {
    latents.validate()?;
    let d = ray.direction;
    render_pixel_with(
        ray,
        &|x| deform(&fields.deform, x, &latents.z_id, &latents.z_exp).expect("finite deform"),
        &fields.manifold,
        &|x| template_query(&fields.template, x, &latents.z_id, &latents.eps, d),
        settings,
    )
}

/// Tape outputs of one pixel: color variables, the depth variable when the
/// weight mass clears the absent cutoff, and the crossing count.
pub struct PixelVars {
    pub color: [Var; 3],
    pub depth: Option<Var>,
    pub crossings: usize,
}

/// Latent leaves on the tape for the tape render path.
pub struct LatentVars {
    pub z_id: Vec<Var>,
    pub z_exp: Vec<Var>,
    pub eps: Vec<Var>,
}

impl LatentVars {
    pub fn push<T: Real>(tape: &mut Tape<T>, latents: &LatentCodes<T>) -> Self {
        LatentVars {
            z_id: latents.z_id.iter().map(|&v| tape.leaf(v)).collect(),
            z_exp: latents.z_exp.iter().map(|&v| tape.leaf(v)).collect(),
            eps: latents.eps.iter().map(|&v| tape.leaf(v)).collect(),
        }
    }
}

/// Tape twin of [`render_pixel`]; arithmetic order matches the plain path
/// bitwise.
pub fn render_pixel_tape<T: Real>(
    tape: &mut Tape<T>,
    ray: &Ray<T>,
    fields: &FieldParams<T>,
    fv: &FieldVars,
    lv: &LatentVars,
    settings: &RenderSettings<T>,
) -> Result<PixelVars> {
    ray.validate()?;
    let hits = intersect_tape(
        tape,
        ray,
        |tape, x| deform_tape(&fields.deform, tape, fv.deform, x, &lv.z_id, &lv.z_exp),
        &fields.manifold,
        fv.manifold,
        settings.samples,
    )?;
    let dvar = ray.direction.map(|v| tape.leaf(v));
    let mut colors = Vec::with_capacity(hits.len());
    let mut alphas = Vec::with_capacity(hits.len());
    for h in &hits {
        let (c, a) = template_query_tape(
            &fields.template,
            tape,
            fv.trunk,
            fv.occ,
            fv.color,
            h.x_template,
            &lv.z_id,
            &lv.eps,
            dvar,
        );
        colors.push(c);
        alphas.push(a);
    }
    // Compositing, mirroring `composite` op for op.
    let zero = tape.leaf(T::zero());
    let one = tape.leaf(T::one());
    let mut color = [zero; 3];
    let mut trans = one;
    let mut weights = Vec::with_capacity(hits.len());
    for i in 0..hits.len() {
        let w = tape.mul(trans, alphas[i]);
        for c in 0..3 {
            let wc = tape.mul(w, colors[i][c]);
            color[c] = tape.add(color[c], wc);
        }
        let om = tape.sub(one, alphas[i]);
        trans = tape.mul(trans, om);
        weights.push(w);
    }
    for c in 0..3 {
        let bg = tape.leaf(settings.background[c]);
        let tb = tape.mul(trans, bg);
        color[c] = tape.add(color[c], tb);
    }
    // Depth, mirroring `depth_from_weights`.
    let mut wsum = zero;
    for &w in &weights {
        wsum = tape.add(wsum, w);
    }
    let depth = if tape.val(wsum) < real(ABSENT_DEPTH_CUTOFF) {
        None
    } else if settings.literal_depth {
        let mut tr = one;
        let mut d = zero;
        for i in 0..hits.len() {
            let td = tape.mul(tr, hits[i].t);
            d = tape.add(d, td);
            let om = tape.sub(one, alphas[i]);
            tr = tape.mul(tr, om);
        }
        Some(d)
    } else {
        let mut d = zero;
        for (i, &w) in weights.iter().enumerate() {
            let wt = tape.mul(w, hits[i].t);
            d = tape.add(d, wt);
        }
        Some(tape.div(d, wsum))
    };
    Ok(PixelVars {
        color,
        depth,
        crossings: hits.len(),
    })
}

/// Per-pixel rgb in [0,1] plus optional ray-parameter depth, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer<T> {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<Vec3<T>>,
    pub depth: Vec<Option<T>>,
}

impl<T: Real> ImageBuffer<T> {
    pub fn validate(&self) -> Result<()> {
        if self.rgb.len() != self.width * self.height || self.depth.len() != self.rgb.len() {
            return Err(Error::DimensionMismatch {
                what: "image buffer",
                expected: self.width * self.height,
                got: self.rgb.len(),
            });
        }
        for p in &self.rgb {
            for c in 0..3 {
                if !(p[c] >= T::zero() && p[c] <= T::one()) {
                    return Err(Error::InvalidValue {
                        what: "image rgb",
                        detail: "channel outside [0,1]".into(),
                    });
                }
            }
        }
        if self.depth.iter().flatten().any(|d| !d.is_finite()) {
            return Err(Error::NonFinite("image depth"));
        }
        Ok(())
    }
}

/// Map an arbitrary pixel function over the camera grid. Per-pixel work is
/// pure, so the parallel path is bitwise identical to the sequential one.
pub fn render_image_with<T, F>(
    camera: &Camera<T>,
    settings: &RenderSettings<T>,
    parallel: bool,
    pixel: F,
) -> Result<ImageBuffer<T>>
where
    T: Real,
    F: Fn(&Ray<T>) -> Result<(Vec3<T>, Option<T>)> + Sync,
{
    let rays = camera_rays(camera, settings.near, settings.far)?;
    let results: Result<Vec<(Vec3<T>, Option<T>)>> = if parallel {
        rays.par_iter().map(|r| pixel(r)).collect()
    } else {
        rays.iter().map(|r| pixel(r)).collect()
    };
    let results = results?;
    Ok(ImageBuffer {
        width: camera.width,
        height: camera.height,
        rgb: results.iter().map(|(c, _)| *c).collect(),
        depth: results.iter().map(|(_, d)| *d).collect(),
    })
}

pub fn render_image<T: Real>(
    camera: &Camera<T>,
    fields: &FieldParams<T>,
    latents: &LatentCodes<T>,
    settings: &RenderSettings<T>,
    parallel: bool,
) -> Result<ImageBuffer<T>> {
    latents.validate()?;
    render_image_with(camera, settings, parallel, |ray| {
        render_pixel(ray, fields, latents, settings)
    })
}

/// World-space points origin + depth · direction for every pixel with a
/// present depth; the reprojected point cloud S'.
pub fn depth_pointcloud<T: Real>(
    image: &ImageBuffer<T>,
    camera: &Camera<T>,
    settings: &RenderSettings<T>,
) -> Result<Vec<Vec3<T>>> {
    if image.width != camera.width || image.height != camera.height {
        return Err(Error::DimensionMismatch {
            what: "depth image size",
            expected: camera.width * camera.height,
            got: image.width * image.height,
        });
    }
    let rays = camera_rays(camera, settings.near, settings.far)?;
    Ok(rays
        .iter()
        .zip(&image.depth)
        .filter_map(|(r, d)| d.map(|t| r.at(t)))
        .collect())
}

/// Surface sample points from the dominant crossing of each ray.
///
/// The accumulated depth of `render_pixel` is the weight-averaged ray
/// parameter over all crossings; with a soft learned occupancy the small
/// trailing weight on occluded far-side crossings drags that average off the
/// visible surface. For surface extraction the robust statistic is the
/// crossing carrying the largest compositing weight, kept only when the
/// total weight mass says the ray confidently hit something.
pub fn surface_pointcloud<T: Real>(
    camera: &Camera<T>,
    fields: &FieldParams<T>,
    latents: &LatentCodes<T>,
    settings: &RenderSettings<T>,
    min_mass: T,
) -> Result<Vec<Vec3<T>>> {
    latents.validate()?;
    let rays = camera_rays(camera, settings.near, settings.far)?;
    let points: Result<Vec<Option<Vec3<T>>>> = rays
        .par_iter()
        .map(|ray| {
            let d = ray.direction;
            let hits = intersect(
                ray,
                &|x| {
                    deform(&fields.deform, x, &latents.z_id, &latents.z_exp)
                        .expect("finite deform")
                },
                &fields.manifold,
                settings.samples,
            )?;
            if hits.is_empty() {
                return Ok(None);
            }
            let mut samples = Vec::with_capacity(hits.len());
            for h in &hits {
                samples.push(template_query(
                    &fields.template,
                    h.x_template,
                    &latents.z_id,
                    &latents.eps,
                    d,
                )?);
            }
            let (_, weights, _) = composite(&samples, settings.background)?;
            let mut mass = T::zero();
            let mut best = 0usize;
            for (i, &w) in weights.iter().enumerate() {
                mass = mass + w;
                if w > weights[best] {
                    best = i;
                }
            }
            if mass < min_mass {
                return Ok(None);
            }
            Ok(Some(ray.at(hits[best].t)))
        })
        .collect();
    Ok(points?.into_iter().flatten().collect())
}

/// Binary PPM (P6), 8 bits per channel, values clamped to [0,1].
pub fn write_ppm<T: Real>(image: &ImageBuffer<T>, path: &Path) -> Result<()> {
    let io_err = |e| Error::io(path.display().to_string(), e);
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    write!(w, "P6\n{} {}\n255\n", image.width, image.height).map_err(io_err)?;
    let mut bytes = Vec::with_capacity(image.rgb.len() * 3);
    for p in &image.rgb {
        for c in 0..3 {
            let v = p[c].to_f64().unwrap().clamp(0.0, 1.0);
            bytes.push((v * 255.0).round() as u8);
        }
    }
    w.write_all(&bytes).map_err(io_err)?;
    w.flush().map_err(io_err)
}

/// Raw depth plane: `DP01 W H` header, then f32 little-endian row-major
/// values with NaN marking absent depth.
pub fn write_depth_plane<T: Real>(image: &ImageBuffer<T>, path: &Path) -> Result<()> {
    let io_err = |e| Error::io(path.display().to_string(), e);
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "DP01 {} {}", image.width, image.height).map_err(io_err)?;
    for d in &image.depth {
        let v = d.map_or(f32::NAN, |t| t.to_f64().unwrap() as f32);
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Read back a DP01 depth plane (NaN decodes to absent).
pub fn read_depth_plane(path: &Path) -> Result<(usize, usize, Vec<Option<f32>>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or(Error::MalformedHeader {
            what: "DP01",
            detail: "missing header line".into(),
        })?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::MalformedHeader {
        what: "DP01",
        detail: "header is not UTF-8".into(),
    })?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "DP01" {
        return Err(Error::MalformedHeader {
            what: "DP01",
            detail: format!("bad header `{header}`"),
        });
    }
    let (w, h): (usize, usize) = match (parts[1].parse(), parts[2].parse()) {
        (Ok(w), Ok(h)) => (w, h),
        _ => {
            return Err(Error::MalformedHeader {
                what: "DP01",
                detail: format!("bad size in `{header}`"),
            })
        }
    };
    let payload = &bytes[nl + 1..];
    if payload.len() != w * h * 4 {
        return Err(Error::TruncatedPayload {
            what: "DP01",
            expected: w * h * 4,
            got: payload.len(),
        });
    }
    let depth = payload
        .chunks_exact(4)
        .map(|c| {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            if v.is_nan() {
                None
            } else {
                Some(v)
            }
        })
        .collect();
    Ok((w, h, depth))
}

/// Mean absolute rgb error between same-sized images.
pub fn mean_abs_error<T: Real>(a: &ImageBuffer<T>, b: &ImageBuffer<T>) -> T {
    assert_eq!(a.rgb.len(), b.rgb.len());
    let mut acc = T::zero();
    for (pa, pb) in a.rgb.iter().zip(&b.rgb) {
        for c in 0..3 {
            acc = acc + (pa[c] - pb[c]).abs();
        }
    }
    acc / real((a.rgb.len() * 3) as f64)
}

/// Peak signal-to-noise ratio in dB over the rgb channels (peak 1.0).
pub fn psnr<T: Real>(a: &ImageBuffer<T>, b: &ImageBuffer<T>) -> T {
    assert_eq!(a.rgb.len(), b.rgb.len());
    let mut mse = T::zero();
    for (pa, pb) in a.rgb.iter().zip(&b.rgb) {
        for c in 0..3 {
            let d = pa[c] - pb[c];
            mse = mse + d * d;
        }
    }
    mse = mse / real((a.rgb.len() * 3) as f64);
    if mse == T::zero() {
        return T::infinity();
    }
    real::<T>(-10.0) * mse.log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralfields::NetConfig;
    use crate::oracle::{analytic_render, Paint, SceneSpec, SphereSpec};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_sphere() -> ManifoldField<f64> {
        ManifoldField::AnalyticRadial {
            center: [0.0; 3],
            levels: vec![1.0],
        }
    }

    fn opaque_paint(paint: Paint<f64>) -> impl Fn([f64; 3]) -> crate::Result<RadianceSample<f64>> {
        move |x| {
            Ok(RadianceSample {
                color: paint.color(x),
                occupancy: 1.0,
            })
        }
    }

    #[test]
    fn camera_axes() {
        let cam = Camera::<f64>::new(0.0, 0.0, 3.0, 1, 1);
        let r = cam.pixel_ray(0, 0, 0.5, 6.0);
        assert!((r.origin[2] - 3.0).abs() < 1e-12);
        for (c, want) in r.direction.iter().zip(&[0.0, 0.0, -1.0]) {
            assert!((c - want).abs() < 1e-9);
        }
        let cam_x = Camera::new(0.0, std::f64::consts::FRAC_PI_2, 3.0, 1, 1);
        let rx = cam_x.pixel_ray(0, 0, 0.5, 6.0);
        assert!((rx.origin[0] - 3.0).abs() < 1e-12);
        for (c, want) in rx.direction.iter().zip(&[-1.0, 0.0, 0.0]) {
            assert!((c - want).abs() < 1e-9);
        }
    }

    #[test]
    fn camera_rays_unit_length() {
        let cam = Camera::<f64>::new(0.2, -0.4, 3.0, 8, 6);
        for r in camera_rays(&cam, 0.5, 6.0).unwrap() {
            assert!((norm3(r.direction) - 1.0).abs() < 1e-9);
            r.validate().unwrap();
        }
    }

    #[test]
    fn camera_pole_fallback_up() {
        let cam = Camera::new(std::f64::consts::FRAC_PI_2, 0.0, 3.0, 4, 4);
        for r in camera_rays(&cam, 0.5, 6.0).unwrap() {
            assert!(r.direction.iter().all(|c| c.is_finite()));
            assert!((norm3(r.direction) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn composite_opaque_single() {
        let (c, w, res) = composite(
            &[RadianceSample {
                color: [0.2, 0.4, 0.6],
                occupancy: 1.0,
            }],
            [1.0; 3],
        )
        .unwrap();
        assert_eq!(c, [0.2, 0.4, 0.6]);
        assert_eq!(w, vec![1.0]);
        assert_eq!(res, 0.0);
    }

    #[test]
    fn composite_transparent_gives_background() {
        let bg = [0.1, 0.2, 0.3];
        let samples = [RadianceSample {
            color: [1.0; 3],
            occupancy: 0.0,
        }; 3];
        let (c, _, res) = composite(&samples, bg).unwrap();
        assert_eq!(c, bg);
        assert_eq!(res, 1.0);
    }

    #[test]
    fn composite_hand_computed_pair() {
        let bg = [0.0, 0.0, 1.0];
        let samples = [
            RadianceSample {
                color: [1.0, 0.0, 0.0],
                occupancy: 0.5,
            },
            RadianceSample {
                color: [0.0, 1.0, 0.0],
                occupancy: 0.5,
            },
        ];
        let (c, w, res) = composite(&samples, bg).unwrap();
        assert_eq!(w, vec![0.5, 0.25]);
        assert_eq!(res, 0.25);
        assert_eq!(c, [0.5, 0.25, 0.25]);
    }

    #[test]
    fn composite_rejects_bad_occupancy() {
        for bad in [-0.1, 1.5, f64::NAN] {
            assert!(composite(
                &[RadianceSample {
                    color: [0.0; 3],
                    occupancy: bad,
                }],
                [0.0; 3],
            )
            .is_err());
        }
    }

    proptest! {
        #[test]
        fn conservation_of_weight(alphas in proptest::collection::vec(0.0f64..=1.0, 1..8)) {
            let samples: Vec<RadianceSample<f64>> = alphas
                .iter()
                .map(|&a| RadianceSample { color: [0.5; 3], occupancy: a })
                .collect();
            let (_, w, res) = composite(&samples, [0.0; 3]).unwrap();
            let total: f64 = w.iter().sum::<f64>() + res;
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn monotone_occlusion(
            alphas in proptest::collection::vec(0.0f64..=1.0, 3..8),
            j in 0usize..3,
            bump in 0.0f64..0.5,
        ) {
            let mk = |a: &[f64]| {
                let samples: Vec<RadianceSample<f64>> = a
                    .iter()
                    .map(|&v| RadianceSample { color: [0.5; 3], occupancy: v })
                    .collect();
                composite(&samples, [0.0; 3]).unwrap().1
            };
            let w0 = mk(&alphas);
            let mut raised = alphas.clone();
            raised[j] = (raised[j] + bump).min(1.0);
            let w1 = mk(&raised);
            for k in j + 1..alphas.len() {
                prop_assert!(w1[k] <= w0[k] + 1e-15);
            }
        }
    }

    #[test]
    fn pixel_miss_is_background_no_depth() {
        let settings = RenderSettings {
            background: [0.3, 0.6, 0.9],
            ..Default::default()
        };
        let ray = Ray {
            origin: [5.0, 5.0, 3.0],
            direction: [0.0, 0.0, -1.0],
            near: 0.5,
            far: 6.0,
        };
        let (c, d) = render_pixel_with(
            &ray,
            &|_| [0.0; 3],
            &unit_sphere(),
            &opaque_paint(Paint::Solid([1.0; 3])),
            &settings,
        )
        .unwrap();
        assert_eq!(c, [0.3, 0.6, 0.9]);
        assert_eq!(d, None);
    }

    #[test]
    fn opaque_sphere_center_depth() {
        let cam = Camera::new(0.0, 0.0, 3.0, 1, 1);
        let settings = RenderSettings {
            samples: 128,
            ..Default::default()
        };
        let ray = cam.pixel_ray(0, 0, settings.near, settings.far);
        let (_, d) = render_pixel_with(
            &ray,
            &|_| [0.0; 3],
            &unit_sphere(),
            &opaque_paint(Paint::Solid([1.0; 3])),
            &settings,
        )
        .unwrap();
        assert!((d.unwrap() - 2.0).abs() < 1e-3);
    }

    #[test]
    fn zeroed_deform_net_matches_identity_bitwise() {
        let cfg = NetConfig {
            d_id: 2,
            d_exp: 2,
            d_eps: 2,
            hidden: 16,
            layers: 2,
            enc_x: 2,
            enc_d: 1,
            enc_def: 2,
            max_deform: 0.3,
        };
        let fields = FieldParams::<f64>::init(cfg, unit_sphere(), 11);
        let latents = LatentCodes {
            z_id: vec![0.3, -0.2],
            z_exp: vec![0.1, 0.5],
            eps: vec![0.0, 0.2],
            pose: [0.0, 0.0, 3.0],
        };
        let settings = RenderSettings::default();
        let ray = Camera::new(0.1, 0.2, 3.0, 1, 1).pixel_ray(0, 0, settings.near, settings.far);
        // Engine pixel (deform net output layer is zero-initialized).
        let (c1, d1) = render_pixel(&ray, &fields, &latents, &settings).unwrap();
        // Identity warp with the same template.
        let (c2, d2) = render_pixel_with(
            &ray,
            &|_| [0.0; 3],
            &fields.manifold,
            &|x| template_query(&fields.template, x, &latents.z_id, &latents.eps, ray.direction),
            &settings,
        )
        .unwrap();
        assert_eq!(c1, c2);
        assert_eq!(d1, d2);
    }

    #[test]
    fn surface_points_lie_on_the_deformed_level_set() {
        let cfg = NetConfig {
            d_id: 2,
            d_exp: 2,
            d_eps: 2,
            hidden: 16,
            layers: 2,
            enc_x: 2,
            enc_d: 1,
            enc_def: 2,
            max_deform: 0.3,
        };
        let fields = FieldParams::<f64>::init(cfg, unit_sphere(), 11);
        let latents = LatentCodes {
            z_id: vec![0.3, -0.2],
            z_exp: vec![0.1, 0.5],
            eps: vec![0.0, 0.2],
            pose: [0.0, 0.0, 3.0],
        };
        let settings = RenderSettings {
            samples: 96,
            ..RenderSettings::default()
        };
        let cam = Camera::new(0.1, -0.2, 3.0, 16, 16);
        let cloud = surface_pointcloud(&cam, &fields, &latents, &settings, 0.5).unwrap();
        assert!(!cloud.is_empty());
        assert!(cloud.len() <= 256);
        // Every kept point is a secant crossing of the unit level set in
        // template space, so |x + delta(x)| = 1 up to interpolation error.
        for &x in &cloud {
            let dx = deform(&fields.deform, x, &latents.z_id, &latents.z_exp).unwrap();
            let r = norm3(add3(x, dx));
            assert!((r - 1.0).abs() < 1e-3, "residual {}", (r - 1.0).abs());
        }
    }

    #[test]
    fn one_by_one_image_equals_pixel() {
        let cam = Camera::new(0.0, 0.0, 3.0, 1, 1);
        let settings = RenderSettings::default();
        let pixel = |ray: &Ray<f64>| {
            render_pixel_with(
                ray,
                &|_| [0.0; 3],
                &unit_sphere(),
                &opaque_paint(Paint::Bands),
                &settings,
            )
        };
        let img = render_image_with(&cam, &settings, false, pixel).unwrap();
        let ray = cam.pixel_ray(0, 0, settings.near, settings.far);
        let (c, d) = pixel(&ray).unwrap();
        assert_eq!(img.rgb[0], c);
        assert_eq!(img.depth[0], d);
    }

    #[test]
    fn sequential_matches_parallel_bitwise() {
        let cam = Camera::new(0.15, -0.3, 3.0, 16, 16);
        let settings = RenderSettings::default();
        let pixel = |ray: &Ray<f64>| {
            render_pixel_with(
                ray,
                &|_| [0.0; 3],
                &unit_sphere(),
                &opaque_paint(Paint::Bands),
                &settings,
            )
        };
        let seq = render_image_with(&cam, &settings, false, pixel).unwrap();
        let par = render_image_with(&cam, &settings, true, pixel).unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn engine_matches_analytic_oracle() {
        let cam = Camera::new(0.1, 0.2, 3.0, 64, 64);
        let settings = RenderSettings {
            samples: 128,
            background: [0.05, 0.05, 0.05],
            ..Default::default()
        };
        let engine = render_image_with(&cam, &settings, true, |ray| {
            render_pixel_with(
                ray,
                &|_| [0.0; 3],
                &unit_sphere(),
                &opaque_paint(Paint::Bands),
                &settings,
            )
        })
        .unwrap();
        let scene = SceneSpec {
            spheres: vec![SphereSpec {
                center: [0.0; 3],
                radius: 1.0,
                paint: Paint::Bands,
            }],
            background: settings.background,
        };
        let rays = camera_rays(&cam, settings.near, settings.far).unwrap();
        let oracle = ImageBuffer {
            width: 64,
            height: 64,
            rgb: rays
                .iter()
                .map(|r| analytic_render(&scene, r.origin, r.direction, r.near, r.far).0)
                .collect(),
            depth: vec![None; rays.len()],
        };
        let mae = mean_abs_error(&engine, &oracle);
        assert!(mae <= 2e-3, "mae = {mae}");
    }

    #[test]
    fn pointcloud_basics() {
        let cam = Camera::new(0.0, 0.0, 3.0, 1, 1);
        let settings = RenderSettings::default();
        let empty = ImageBuffer {
            width: 1,
            height: 1,
            rgb: vec![[0.0; 3]],
            depth: vec![None],
        };
        assert!(depth_pointcloud(&empty, &cam, &settings).unwrap().is_empty());
        let img = ImageBuffer::<f64> {
            width: 1,
            height: 1,
            rgb: vec![[0.0; 3]],
            depth: vec![Some(2.0)],
        };
        let cloud = depth_pointcloud(&img, &cam, &settings).unwrap();
        assert_eq!(cloud.len(), 1);
        let p = cloud[0];
        assert!((p[0]).abs() < 1e-3 && (p[1]).abs() < 1e-3 && (p[2] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn pointcloud_lies_on_sphere() {
        let cam = Camera::new(0.1, -0.2, 3.0, 32, 32);
        let settings = RenderSettings {
            samples: 128,
            ..Default::default()
        };
        let img = render_image_with(&cam, &settings, true, |ray| {
            render_pixel_with(
                ray,
                &|_| [0.0; 3],
                &unit_sphere(),
                &opaque_paint(Paint::Solid([1.0; 3])),
                &settings,
            )
        })
        .unwrap();
        let cloud = depth_pointcloud(&img, &cam, &settings).unwrap();
        assert!(!cloud.is_empty());
        for p in cloud {
            assert!((norm3(p) - 1.0).abs() <= 5e-3);
        }
    }

    #[test]
    fn two_camera_clouds_share_surface() {
        let settings = RenderSettings {
            samples: 128,
            ..Default::default()
        };
        let mut clouds = Vec::new();
        for (pitch, yaw) in [(0.0, 0.0), (0.2, 1.1)] {
            let cam = Camera::new(pitch, yaw, 3.0, 24, 24);
            let img = render_image_with(&cam, &settings, true, |ray| {
                render_pixel_with(
                    ray,
                    &|_| [0.0; 3],
                    &unit_sphere(),
                    &opaque_paint(Paint::Solid([1.0; 3])),
                    &settings,
                )
            })
            .unwrap();
            clouds.push(depth_pointcloud(&img, &cam, &settings).unwrap());
        }
        // Both clouds lie on the same unit sphere.
        for cloud in &clouds {
            for p in cloud {
                assert!((norm3(*p) - 1.0).abs() <= 5e-3);
            }
        }
    }

    #[test]
    fn ppm_bytes_golden() {
        let img = ImageBuffer {
            width: 2,
            height: 1,
            rgb: vec![[0.0, 0.5, 1.0], [1.0, 0.0, 0.25]],
            depth: vec![None, None],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        write_ppm(&img, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut want = b"P6\n2 1\n255\n".to_vec();
        want.extend_from_slice(&[0, 128, 255, 255, 0, 64]);
        assert_eq!(bytes, want);
    }

    #[test]
    fn depth_plane_round_trip() {
        let img = ImageBuffer {
            width: 2,
            height: 2,
            rgb: vec![[0.0; 3]; 4],
            depth: vec![Some(1.5), None, Some(2.25), Some(0.125)],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.dp01");
        write_depth_plane(&img, &path).unwrap();
        let (w, h, depth) = read_depth_plane(&path).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(depth, vec![Some(1.5), None, Some(2.25), Some(0.125)]);
    }

    fn small_fields() -> (FieldParams<f64>, LatentCodes<f64>) {
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
        let mut fields = FieldParams::<f64>::init(cfg, unit_sphere(), 5);
        // Activate the deformation so the warp path is exercised.
        let n = fields.deform.mlp.weights.len();
        for (i, w) in fields.deform.mlp.weights[n - 27..].iter_mut().enumerate() {
            *w = 0.01 * ((i % 7) as f64 - 3.0);
        }
        let latents = LatentCodes {
            z_id: vec![0.2, -0.1],
            z_exp: vec![0.4, 0.3],
            eps: vec![0.1, -0.2],
            pose: [0.0, 0.0, 3.0],
        };
        (fields, latents)
    }

    #[test]
    fn tape_pixel_matches_plain_bitwise() {
        let (fields, latents) = small_fields();
        let settings = RenderSettings {
            samples: 32,
            background: [0.1, 0.2, 0.3],
            ..Default::default()
        };
        let ray = Camera::new(0.05, 0.1, 3.0, 1, 1).pixel_ray(0, 0, settings.near, settings.far);
        let (c, d) = render_pixel(&ray, &fields, &latents, &settings).unwrap();
        let mut tape = Tape::new();
        let fv = fields.push_to_tape(&mut tape);
        let lv = LatentVars::push(&mut tape, &latents);
        let pv = render_pixel_tape(&mut tape, &ray, &fields, &fv, &lv, &settings).unwrap();
        for i in 0..3 {
            assert_eq!(tape.val(pv.color[i]), c[i]);
        }
        assert_eq!(pv.depth.map(|v| tape.val(v)), d);
    }

    #[test]
    fn pipeline_color_gradient_matches_fd() {
        let (fields, latents) = small_fields();
        let settings = RenderSettings {
            samples: 24,
            ..Default::default()
        };
        let ray = Camera::new(0.0, 0.0, 3.0, 1, 1).pixel_ray(0, 0, settings.near, settings.far);
        let mut tape = Tape::new();
        let fv = fields.push_to_tape(&mut tape);
        let lv = LatentVars::push(&mut tape, &latents);
        let pv = render_pixel_tape(&mut tape, &ray, &fields, &fv, &lv, &settings).unwrap();
        let ab = tape.add(pv.color[0], pv.color[1]);
        let out = tape.add(ab, pv.color[2]);
        let grads = tape.backward(out).unwrap();
        let g = grads.prefix(fv.total);
        let flat = fields.flatten();
        let eval = |w: &[f64]| {
            let mut f2 = fields.clone();
            f2.set_from_flat(w).unwrap();
            let (c, _) = render_pixel(&ray, &f2, &latents, &settings).unwrap();
            c[0] + c[1] + c[2]
        };
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0;
        while checked < 30 {
            let i = rng.gen_range(0..flat.len());
            let h = 1e-5;
            let mut wp = flat.clone();
            wp[i] += h;
            let fp = eval(&wp);
            wp[i] = flat[i] - h;
            let fm = eval(&wp);
            let fd = (fp - fm) / (2.0 * h);
            if fd.abs() < 1e-10 && g[i].abs() < 1e-10 {
                checked += 1;
                continue;
            }
            let denom = fd.abs().max(g[i].abs()).max(1e-8);
            assert!(((g[i] - fd) / denom).abs() < 1e-4, "param {i}: {} vs {fd}", g[i]);
            checked += 1;
        }
    }
}
