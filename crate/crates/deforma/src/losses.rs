//! The 3D-space imitation loss suite, the adversarial pair with R1 penalty,
//! and weighted total-loss assembly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::math::{dist2, sub3, Vec3};
use crate::neuralfields::Mlp;
use crate::scalar::{real, softplus, Real};

/// Above this cloud size the directed Chamfer switches from the exhaustive
/// scan to the grid index; the two must agree bitwise.
pub const CHAMFER_GRID_CUTOFF: usize = 4096;

/// Uniform hash grid over a point cloud for exact nearest-neighbor queries.
pub struct PointGrid<T> {
    points: Vec<Vec3<T>>,
    origin: Vec3<T>,
    cell: T,
    dims: [usize; 3],
    cells: Vec<Vec<u32>>,
}

impl<T: Real> PointGrid<T> {
    pub fn build(points: &[Vec3<T>]) -> Self {
        assert!(!points.is_empty());
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for c in 0..3 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
        let ext = sub3(hi, lo);
        let vol = (ext[0].max(real(1e-9)))
            * (ext[1].max(real(1e-9)))
            * (ext[2].max(real(1e-9)));
        let cell = (vol / real(points.len() as f64))
            .powf(real(1.0 / 3.0))
            .max(real(1e-9));
        let dims = [0, 1, 2].map(|c| {
            ((ext[c] / cell).to_f64().unwrap().floor() as usize + 1).min(256)
        });
        let mut grid = PointGrid {
            points: points.to_vec(),
            origin: lo,
            cell,
            dims,
            cells: vec![Vec::new(); dims[0] * dims[1] * dims[2]],
        };
        for (i, p) in points.iter().enumerate() {
            let c = grid.cell_of(*p);
            let idx = grid.flat(c);
            grid.cells[idx].push(i as u32);
        }
        grid
    }

    fn cell_of(&self, p: Vec3<T>) -> [usize; 3] {
        [0, 1, 2].map(|c| {
            let g = ((p[c] - self.origin[c]) / self.cell).to_f64().unwrap().floor();
            (g.max(0.0) as usize).min(self.dims[c] - 1)
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// Exact nearest neighbor: lowest index on distance ties. Returns the
    /// index and the squared distance.
    pub fn nearest(&self, q: Vec3<T>) -> (usize, T) {
        let center = self.cell_of(q);
        let mut best_d2 = T::infinity();
        let mut best_i = usize::MAX;
        let max_ring = self.dims.iter().max().copied().unwrap_or(1);
        for r in 0..=max_ring {
            let lo = [0, 1, 2].map(|c| center[c].saturating_sub(r));
            let hi = [0, 1, 2].map(|c| (center[c] + r).min(self.dims[c] - 1));
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        // Only the shell of the ring is new.
                        let on_shell = r == 0
                            || x == lo[0]
                            || x == hi[0]
                            || y == lo[1]
                            || y == hi[1]
                            || z == lo[2]
                            || z == hi[2];
                        if !on_shell {
                            continue;
                        }
                        for &i in &self.cells[self.flat([x, y, z])] {
                            let d2 = dist2(q, self.points[i as usize]);
                            if d2 < best_d2 || (d2 == best_d2 && (i as usize) < best_i) {
                                best_d2 = d2;
                                best_i = i as usize;
                            }
                        }
                    }
                }
            }
            if best_i != usize::MAX {
                // Any point outside the searched box is at least `margin`
                // away from q; stop once the best hit beats that bound.
                let margin = (0..3)
                    .map(|c| {
                        let lo_w = self.origin[c] + self.cell * real((center[c] as f64) - (r as f64));
                        let hi_w =
                            self.origin[c] + self.cell * real((center[c] + r + 1) as f64);
                        (q[c] - lo_w).min(hi_w - q[c])
                    })
                    .fold(T::infinity(), |a, b| a.min(b));
                if margin > T::zero() && best_d2 <= margin * margin {
                    break;
                }
            }
        }
        (best_i, best_d2)
    }
}

fn exhaustive_nearest<T: Real>(q: Vec3<T>, cloud: &[Vec3<T>]) -> (usize, T) {
    let mut best_d2 = T::infinity();
    let mut best_i = usize::MAX;
    for (i, p) in cloud.iter().enumerate() {
        let d2 = dist2(q, *p);
        if d2 < best_d2 {
            best_d2 = d2;
            best_i = i;
        }
    }
    (best_i, best_d2)
}

/// Nearest-neighbor assignment from every point of `s` into `s_prime`.
pub fn chamfer_assignment<T: Real>(s: &[Vec3<T>], s_prime: &[Vec3<T>]) -> Result<Vec<usize>> {
    if s.is_empty() || s_prime.is_empty() {
        return Err(Error::InvalidValue {
            what: "chamfer point sets",
            detail: "both sets must be non-empty".into(),
        });
    }
    if s_prime.len() <= CHAMFER_GRID_CUTOFF {
        Ok(s.iter().map(|&q| exhaustive_nearest(q, s_prime).0).collect())
    } else {
        let grid = PointGrid::build(s_prime);
        Ok(s.iter().map(|&q| grid.nearest(q).0).collect())
    }
}

/// Directed Chamfer: (1/|S|) Σ_{x∈S} min_{y∈S'} |x−y|².
pub fn chamfer_directed<T: Real>(s: &[Vec3<T>], s_prime: &[Vec3<T>]) -> Result<T> {
    let assign = chamfer_assignment(s, s_prime)?;
    let mut acc = T::zero();
    for (q, &j) in s.iter().zip(&assign) {
        acc = acc + dist2(*q, s_prime[j]);
    }
    Ok(acc / real(s.len() as f64))
}

/// Directed Chamfer on the tape with the cloud differentiable and the
/// nearest-neighbor assignment held fixed (subgradient choice).
pub fn chamfer_directed_tape<T: Real>(
    tape: &mut Tape<T>,
    s: &[Vec3<T>],
    s_prime: &[[Var; 3]],
) -> Result<Var> {
    let vals: Vec<Vec3<T>> = s_prime
        .iter()
        .map(|p| [tape.val(p[0]), tape.val(p[1]), tape.val(p[2])])
        .collect();
    let assign = chamfer_assignment(s, &vals)?;
    let mut acc = tape.leaf(T::zero());
    for (q, &j) in s.iter().zip(&assign) {
        for c in 0..3 {
            let d = tape.add_const(s_prime[j][c], -q[c]);
            let d2 = tape.square(d);
            acc = tape.add(acc, d2);
        }
    }
    Ok(tape.mul_const(acc, T::one() / real(s.len() as f64)))
}

/// Mean squared Euclidean distance over paired landmark sets.
pub fn landmark_loss<T: Real>(lm_a: &[Vec3<T>], lm_b: &[Vec3<T>]) -> Result<T> {
    if lm_a.len() != lm_b.len() || lm_a.is_empty() {
        return Err(Error::DimensionMismatch {
            what: "landmark sets",
            expected: lm_a.len().max(1),
            got: lm_b.len(),
        });
    }
    let mut acc = T::zero();
    for (a, b) in lm_a.iter().zip(lm_b) {
        acc = acc + dist2(*a, *b);
    }
    Ok(acc / real(lm_a.len() as f64))
}

/// Tape twin of [`landmark_loss`] with `lm_b` fixed.
pub fn landmark_loss_tape<T: Real>(
    tape: &mut Tape<T>,
    lm_a: &[[Var; 3]],
    lm_b: &[Vec3<T>],
) -> Result<Var> {
    if lm_a.len() != lm_b.len() || lm_a.is_empty() {
        return Err(Error::DimensionMismatch {
            what: "landmark sets",
            expected: lm_a.len().max(1),
            got: lm_b.len(),
        });
    }
    let mut acc = tape.leaf(T::zero());
    for (a, b) in lm_a.iter().zip(lm_b) {
        for c in 0..3 {
            let d = tape.add_const(a[c], -b[c]);
            let d2 = tape.square(d);
            acc = tape.add(acc, d2);
        }
    }
    Ok(tape.mul_const(acc, T::one() / real(lm_a.len() as f64)))
}

/// Pointwise imitation term |Δx − Δx_ref|².
pub fn deformation_imitation<T: Real>(dx: Vec3<T>, dx_ref: Vec3<T>) -> T {
    dist2(dx, dx_ref)
}

pub fn deformation_imitation_tape<T: Real>(
    tape: &mut Tape<T>,
    dx: [Var; 3],
    dx_ref: Vec3<T>,
) -> Var {
    let mut acc = tape.leaf(T::zero());
    for c in 0..3 {
        let d = tape.add_const(dx[c], -dx_ref[c]);
        let d2 = tape.square(d);
        acc = tape.add(acc, d2);
    }
    acc
}

/// Minimal-deformation term |Δx|².
pub fn deformation_reg<T: Real>(dx: Vec3<T>) -> T {
    dist2(dx, [T::zero(); 3])
}

pub fn deformation_reg_tape<T: Real>(tape: &mut Tape<T>, dx: [Var; 3]) -> Var {
    let mut acc = tape.leaf(T::zero());
    for c in 0..3 {
        let d2 = tape.square(dx[c]);
        acc = tape.add(acc, d2);
    }
    acc
}

/// Uniform sample from the ball of radius `radius` (rejection from the cube).
pub fn sample_ball<T: Real>(rng: &mut ChaCha8Rng, radius: T) -> Vec3<T> {
    loop {
        let p: Vec3<T> = [0; 3].map(|_| real::<T>(rng.gen_range(-1.0..=1.0)));
        if dist2(p, [T::zero(); 3]) <= T::one() {
            return [p[0] * radius, p[1] * radius, p[2] * radius];
        }
    }
}

/// Smoothness term |Δ(x) − Δ(x+ξ)|² with ξ uniform in a ball of radius
/// `xi_scale`.
pub fn smoothness_loss<T: Real>(
    deform_fn: &dyn Fn(Vec3<T>) -> Vec3<T>,
    x: Vec3<T>,
    xi_scale: T,
    rng: &mut ChaCha8Rng,
) -> T {
    let xi = sample_ball(rng, xi_scale);
    let a = deform_fn(x);
    let b = deform_fn([x[0] + xi[0], x[1] + xi[1], x[2] + xi[2]]);
    dist2(a, b)
}

/// Tape smoothness term over two already-evaluated displacements.
pub fn smoothness_loss_tape<T: Real>(tape: &mut Tape<T>, dx_a: [Var; 3], dx_b: [Var; 3]) -> Var {
    let mut acc = tape.leaf(T::zero());
    for c in 0..3 {
        let d = tape.sub(dx_a[c], dx_b[c]);
        let d2 = tape.square(d);
        acc = tape.add(acc, d2);
    }
    acc
}

/// Non-saturating adversarial pair with R1 penalty on real inputs.
///
/// `disc` is a scalar-head patch network over flattened images; `r1_weight`
/// scales the penalty (default 10). Returns (generator loss, discriminator
/// loss).
pub fn adversarial_losses<T: Real>(
    disc: &Mlp<T>,
    real_batch: &[Vec<T>],
    fake_batch: &[Vec<T>],
    r1_weight: T,
) -> Result<(T, T)> {
    check_batches(disc, real_batch, fake_batch)?;
    let inv_f = T::one() / real(fake_batch.len() as f64);
    let inv_r = T::one() / real(real_batch.len() as f64);
    let mut g = T::zero();
    let mut d_fake = T::zero();
    for img in fake_batch {
        let logit = disc.forward(img, false)[0];
        g = g + softplus(-logit);
        d_fake = d_fake + softplus(logit);
    }
    let mut d_real = T::zero();
    let mut r1 = T::zero();
    for img in real_batch {
        let logit = disc.forward(img, false)[0];
        d_real = d_real + softplus(-logit);
        let grad = disc.input_grad(img);
        let mut n2 = T::zero();
        for gi in grad {
            n2 = n2 + gi * gi;
        }
        r1 = r1 + n2;
    }
    let half = real::<T>(0.5);
    let d = d_fake * inv_f + d_real * inv_r + r1_weight * half * r1 * inv_r;
    Ok((g * inv_f, d))
}

/// Tape twin: generator loss differentiable through `fake_vars`,
/// discriminator loss differentiable through the weight leaves at `w0`
/// (fake images detached for the discriminator side).
pub fn adversarial_losses_tape<T: Real>(
    tape: &mut Tape<T>,
    disc: &Mlp<T>,
    w0: Var,
    real_batch: &[Vec<T>],
    fake_vars: &[Vec<Var>],
    r1_weight: T,
) -> Result<(Var, Var)> {
    let fake_vals: Vec<Vec<T>> = fake_vars
        .iter()
        .map(|img| img.iter().map(|&v| tape.val(v)).collect())
        .collect();
    check_batches(disc, real_batch, &fake_vals)?;
    let inv_f = T::one() / real(fake_vars.len() as f64);
    let inv_r = T::one() / real(real_batch.len() as f64);
    let mut g = tape.leaf(T::zero());
    for img in fake_vars {
        let logit = disc.forward_tape(tape, w0, img, false)[0];
        let nl = tape.neg(logit);
        let sp = tape.softplus(nl);
        g = tape.add(g, sp);
    }
    let mut d = tape.leaf(T::zero());
    for img in &fake_vals {
        let leaves: Vec<Var> = img.iter().map(|&v| tape.leaf(v)).collect();
        let logit = disc.forward_tape(tape, w0, &leaves, false)[0];
        let sp = tape.softplus(logit);
        let sp = tape.mul_const(sp, inv_f);
        d = tape.add(d, sp);
    }
    let half = real::<T>(0.5);
    for img in real_batch {
        let leaves: Vec<Var> = img.iter().map(|&v| tape.leaf(v)).collect();
        let logit = disc.forward_tape(tape, w0, &leaves, false)[0];
        let nl = tape.neg(logit);
        let sp = tape.softplus(nl);
        let sp = tape.mul_const(sp, inv_r);
        d = tape.add(d, sp);
        let grad = disc.input_grad_tape(tape, w0, &leaves);
        let mut n2 = tape.leaf(T::zero());
        for gi in grad {
            let s = tape.square(gi);
            n2 = tape.add(n2, s);
        }
        let pen = tape.mul_const(n2, r1_weight * half * inv_r);
        d = tape.add(d, pen);
    }
    Ok((tape.mul_const(g, inv_f), d))
}

fn check_batches<T: Real>(disc: &Mlp<T>, real: &[Vec<T>], fake: &[Vec<T>]) -> Result<()> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::InvalidValue {
            what: "adversarial batches",
            detail: "batches must be non-empty".into(),
        });
    }
    for img in real.iter().chain(fake) {
        if img.len() != disc.arch.input {
            return Err(Error::DimensionMismatch {
                what: "discriminator input",
                expected: disc.arch.input,
                got: img.len(),
            });
        }
    }
    Ok(())
}

/// Per-loss weights and enable flags.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights<T> {
    pub w_ch: T,
    pub w_lm: T,
    pub w_3dmm: T,
    pub w_reg: T,
    pub w_smooth: T,
    pub w_adv: T,
    pub enable_ch: bool,
    pub enable_lm: bool,
    pub enable_3dmm: bool,
    pub enable_reg: bool,
    pub enable_smooth: bool,
    pub enable_adv: bool,
}

impl<T: Real> Default for LossWeights<T> {
    fn default() -> Self {
        LossWeights {
            w_ch: T::one(),
            w_lm: T::one(),
            w_3dmm: T::one(),
            w_reg: real(0.1),
            w_smooth: T::one(),
            w_adv: T::one(),
            enable_ch: true,
            enable_lm: true,
            enable_3dmm: true,
            enable_reg: true,
            enable_smooth: true,
            enable_adv: true,
        }
    }
}

impl<T: Real> LossWeights<T> {
    pub fn validate(&self) -> Result<()> {
        for w in [self.w_ch, self.w_lm, self.w_3dmm, self.w_reg, self.w_smooth, self.w_adv] {
            if !(w >= T::zero()) {
                return Err(Error::InvalidValue {
                    what: "loss weight",
                    detail: "weights must be non-negative".into(),
                });
            }
        }
        Ok(())
    }
}

/// Raw per-loss values for one step; `None` means not computed this step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms<T> {
    pub chamfer: Option<T>,
    pub landmark: Option<T>,
    pub imitation: Option<T>,
    pub reg: Option<T>,
    pub smooth: Option<T>,
    pub adversarial: Option<T>,
}

/// Named per-loss values plus the weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport<T> {
    pub terms: LossTerms<T>,
    pub total: T,
}

/// Weighted sum over the enabled losses with present values.
pub fn total_loss<T: Real>(terms: &LossTerms<T>, weights: &LossWeights<T>) -> Result<LossReport<T>> {
    weights.validate()?;
    let mut total = T::zero();
    let mut kept = LossTerms::default();
    let mut any = false;
    let mut take = |enabled: bool, v: Option<T>, w: T, slot: &mut Option<T>| {
        if enabled {
            if let Some(v) = v {
                total = total + w * v;
                *slot = Some(v);
                any = true;
            }
        }
    };
    take(weights.enable_ch, terms.chamfer, weights.w_ch, &mut kept.chamfer);
    take(weights.enable_lm, terms.landmark, weights.w_lm, &mut kept.landmark);
    take(weights.enable_3dmm, terms.imitation, weights.w_3dmm, &mut kept.imitation);
    take(weights.enable_reg, terms.reg, weights.w_reg, &mut kept.reg);
    take(weights.enable_smooth, terms.smooth, weights.w_smooth, &mut kept.smooth);
    take(weights.enable_adv, terms.adversarial, weights.w_adv, &mut kept.adversarial);
    drop(take);
    if !any {
        return Err(Error::AllLossesDisabled);
    }
    Ok(LossReport { terms: kept, total })
}
