//! Coordinate networks: the template radiance network, the inverse
//! deformation network, positional encoding, parameter flattening for the
//! optimizer, and the FP01 checkpoint format.
//!
//! Every network has two evaluation paths with identical arithmetic order: a
//! plain forward pass for rendering and a tape path recording reverse-mode
//! gradients for training. A dedicated test pins the two paths bitwise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::facemodel::gaussian;
use crate::manifolds::ManifoldField;
use crate::math::{all_finite, norm3, Vec3};
use crate::scalar::{real, sigmoid, softplus, Real};

/// Color in [0,1]^3 and occupancy in [0,1] at a queried point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadianceSample<T> {
    pub color: Vec3<T>,
    pub occupancy: T,
}

/// Generator inputs: identity, expression, appearance noise and camera pose
/// (pitch, yaw, radius).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCodes<T> {
    pub z_id: Vec<T>,
    pub z_exp: Vec<T>,
    pub eps: Vec<T>,
    pub pose: Vec3<T>,
}

impl<T: Real> LatentCodes<T> {
    pub fn zeros(d_id: usize, d_exp: usize, d_eps: usize, radius: T) -> Self {
        LatentCodes {
            z_id: vec![T::zero(); d_id],
            z_exp: vec![T::zero(); d_exp],
            eps: vec![T::zero(); d_eps],
            pose: [T::zero(), T::zero(), radius],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !all_finite(&self.z_id) || !all_finite(&self.z_exp) || !all_finite(&self.eps)
            || !all_finite(&self.pose)
        {
            return Err(Error::NonFinite("LatentCodes"));
        }
        if self.pose[2] <= T::zero() {
            return Err(Error::InvalidValue {
                what: "LatentCodes.pose",
                detail: "radius must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Sinusoidal positional encoding: x followed by (sin(2^k pi x), cos(2^k pi x))
/// for k = 0..L-1, per coordinate. Length 3 + 6L.
pub fn positional_encode<T: Real>(x: Vec3<T>, l: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(3 + 6 * l);
    out.extend_from_slice(&x);
    let pi: T = real(std::f64::consts::PI);
    for k in 0..l {
        let f = real::<T>((1u64 << k) as f64) * pi;
        for c in 0..3 {
            out.push((f * x[c]).sin());
        }
        for c in 0..3 {
            out.push((f * x[c]).cos());
        }
    }
    out
}

/// Tape twin of [`positional_encode`].
pub fn positional_encode_tape<T: Real>(tape: &mut Tape<T>, x: [Var; 3], l: usize) -> Vec<Var> {
    let mut out = Vec::with_capacity(3 + 6 * l);
    out.extend_from_slice(&x);
    let pi = std::f64::consts::PI;
    for k in 0..l {
        let f: T = real((1u64 << k) as f64 * pi);
        let scaled: Vec<Var> = (0..3).map(|c| tape.mul_const(x[c], f)).collect();
        for &s in &scaled {
            out.push(tape.sin(s));
        }
        for &s in &scaled {
            out.push(tape.cos(s));
        }
    }
    out
}

/// Layer sizes of a plain MLP: input, `hidden_layers` hidden layers of width
/// `hidden`, linear output layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlpArch {
    pub input: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub output: usize,
}

impl MlpArch {
    pub fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden_layers + 2);
        d.push(self.input);
        d.extend(std::iter::repeat(self.hidden).take(self.hidden_layers));
        d.push(self.output);
        d
    }

    pub fn param_count(&self) -> usize {
        let dims = self.dims();
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Dense network with softplus hidden activations. Weights are flat:
/// per layer, row-major W then biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub arch: MlpArch,
    pub weights: Vec<T>,
}

impl<T: Real> Mlp<T> {
    /// Seeded Gaussian fan-in initialization.
    pub fn init(arch: MlpArch, rng: &mut ChaCha8Rng) -> Self {
        let dims = arch.dims();
        let mut weights = Vec::with_capacity(arch.param_count());
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                weights.push(real(gaussian(rng) * std));
            }
            weights.extend(std::iter::repeat(T::zero()).take(fan_out));
        }
        Mlp { arch, weights }
    }

    pub fn zeros(arch: MlpArch) -> Self {
        Mlp {
            weights: vec![T::zero(); arch.param_count()],
            arch,
        }
    }

    /// Zero the final layer (weights and biases).
    pub fn zero_output_layer(&mut self) {
        let dims = self.arch.dims();
        let last_in = dims[dims.len() - 2];
        let last_out = dims[dims.len() - 1];
        let n = last_in * last_out + last_out;
        let off = self.weights.len() - n;
        for w in &mut self.weights[off..] {
            *w = T::zero();
        }
    }

    pub fn forward(&self, x: &[T], activate_output: bool) -> Vec<T> {
        debug_assert_eq!(x.len(), self.arch.input);
        let dims = self.arch.dims();
        let mut a = x.to_vec();
        let mut off = 0;
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let w = &self.weights[off..off + fan_in * fan_out];
            let b = &self.weights[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_in * fan_out + fan_out;
            let last = l == dims.len() - 2;
            let mut next = Vec::with_capacity(fan_out);
            for o in 0..fan_out {
                let mut acc = b[o];
                let row = &w[o * fan_in..(o + 1) * fan_in];
                for (wi, ai) in row.iter().zip(&a) {
                    acc = acc + *wi * *ai;
                }
                next.push(if last && !activate_output {
                    acc
                } else {
                    softplus(acc)
                });
            }
            a = next;
        }
        a
    }

    /// Tape twin of [`Mlp::forward`]; `w0` is the first of this network's
    /// weight leaves on the tape.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        w0: Var,
        x: &[Var],
        activate_output: bool,
    ) -> Vec<Var> {
        debug_assert_eq!(x.len(), self.arch.input);
        let dims = self.arch.dims();
        let mut a = x.to_vec();
        let mut off = 0usize;
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let b_off = off + fan_in * fan_out;
            let last = l == dims.len() - 2;
            let mut next = Vec::with_capacity(fan_out);
            for o in 0..fan_out {
                let bias = Tape::<T>::nth(w0, b_off + o);
                let ws: Vec<Var> = (0..fan_in)
                    .map(|i| Tape::<T>::nth(w0, off + o * fan_in + i))
                    .collect();
                let pre = tape.affine(bias, &ws, &a);
                next.push(if last && !activate_output {
                    pre
                } else {
                    tape.softplus(pre)
                });
            }
            off = b_off + fan_out;
            a = next;
        }
        a
    }

    /// Gradient of the scalar linear output with respect to the inputs,
    /// by analytic backprop through the stored pre-activations.
    pub fn input_grad(&self, x: &[T]) -> Vec<T> {
        assert_eq!(self.arch.output, 1, "input_grad needs a scalar head");
        let dims = self.arch.dims();
        // Forward pass keeping pre-activations of hidden layers.
        let mut acts = vec![x.to_vec()];
        let mut pres = Vec::new();
        let mut off = 0;
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let w = &self.weights[off..off + fan_in * fan_out];
            let b = &self.weights[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_in * fan_out + fan_out;
            let last = l == dims.len() - 2;
            let a = acts.last().unwrap();
            let mut pre = Vec::with_capacity(fan_out);
            for o in 0..fan_out {
                let mut acc = b[o];
                for i in 0..fan_in {
                    acc = acc + w[o * fan_in + i] * a[i];
                }
                pre.push(acc);
            }
            let next = if last {
                pre.clone()
            } else {
                pre.iter().map(|&p| softplus(p)).collect()
            };
            pres.push(pre);
            acts.push(next);
        }
        // Backward.
        let mut layer_offsets = Vec::new();
        let mut o2 = 0;
        for w in dims.windows(2) {
            layer_offsets.push(o2);
            o2 += w[0] * w[1] + w[1];
        }
        let mut g = vec![T::one()];
        for l in (0..dims.len() - 1).rev() {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let w = &self.weights[layer_offsets[l]..layer_offsets[l] + fan_in * fan_out];
            let last = l == dims.len() - 2;
            let g_pre: Vec<T> = if last {
                g.clone()
            } else {
                (0..fan_out).map(|o| sigmoid(pres[l][o]) * g[o]).collect()
            };
            let mut g_prev = vec![T::zero(); fan_in];
            for o in 0..fan_out {
                for i in 0..fan_in {
                    g_prev[i] = g_prev[i] + w[o * fan_in + i] * g_pre[o];
                }
            }
            g = g_prev;
        }
        g
    }

    /// Tape twin of [`Mlp::input_grad`]: builds the input-gradient expression
    /// out of tape operations so it can itself be differentiated (used by the
    /// R1 penalty).
    pub fn input_grad_tape(&self, tape: &mut Tape<T>, w0: Var, x: &[Var]) -> Vec<Var> {
        assert_eq!(self.arch.output, 1, "input_grad needs a scalar head");
        let dims = self.arch.dims();
        let mut acts = vec![x.to_vec()];
        let mut pres: Vec<Vec<Var>> = Vec::new();
        let mut off = 0usize;
        let mut layer_offsets = Vec::new();
        for l in 0..dims.len() - 1 {
            layer_offsets.push(off);
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let b_off = off + fan_in * fan_out;
            let last = l == dims.len() - 2;
            let a = acts.last().unwrap().clone();
            let mut pre = Vec::with_capacity(fan_out);
            for o in 0..fan_out {
                let bias = Tape::<T>::nth(w0, b_off + o);
                let ws: Vec<Var> = (0..fan_in)
                    .map(|i| Tape::<T>::nth(w0, off + o * fan_in + i))
                    .collect();
                pre.push(tape.affine(bias, &ws, &a));
            }
            let next = if last {
                pre.clone()
            } else {
                pre.iter().map(|&p| tape.softplus(p)).collect()
            };
            pres.push(pre);
            acts.push(next);
            off = b_off + fan_out;
        }
        let one = tape.leaf(T::one());
        let mut g = vec![one];
        for l in (0..dims.len() - 1).rev() {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let last = l == dims.len() - 2;
            let g_pre: Vec<Var> = if last {
                g.clone()
            } else {
                (0..fan_out)
                    .map(|o| {
                        let s = tape.sigmoid(pres[l][o]);
                        tape.mul(s, g[o])
                    })
                    .collect()
            };
            let zero = tape.leaf(T::zero());
            let mut g_prev = Vec::with_capacity(fan_in);
            for i in 0..fan_in {
                let ws: Vec<Var> = (0..fan_out)
                    .map(|o| Tape::<T>::nth(w0, layer_offsets[l] + o * fan_in + i))
                    .collect();
                g_prev.push(tape.affine(zero, &ws, &g_pre));
            }
            g = g_prev;
        }
        g
    }
}

/// Architecture knobs shared by the template and deformation networks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetConfig {
    pub d_id: usize,
    pub d_exp: usize,
    pub d_eps: usize,
    pub hidden: usize,
    pub layers: usize,
    pub enc_x: usize,
    pub enc_d: usize,
    pub enc_def: usize,
    pub max_deform: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            d_id: 8,
            d_exp: 4,
            d_eps: 4,
            hidden: 64,
            layers: 4,
            enc_x: 6,
            enc_d: 4,
            enc_def: 4,
            max_deform: 0.3,
        }
    }
}

/// Template radiance network: trunk on (encoded x, z_id, eps), a sigmoid
/// occupancy head, and a color branch that sees the encoded view direction.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateNet<T> {
    pub trunk: Mlp<T>,
    pub occ_head: Mlp<T>,
    pub color_head: Mlp<T>,
    pub enc_x: usize,
    pub enc_d: usize,
}

impl<T: Real> TemplateNet<T> {
    pub fn init(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let trunk_in = 3 + 6 * cfg.enc_x + cfg.d_id + cfg.d_eps;
        let trunk = Mlp::init(
            MlpArch {
                input: trunk_in,
                hidden: cfg.hidden,
                hidden_layers: cfg.layers.saturating_sub(1),
                output: cfg.hidden,
            },
            rng,
        );
        let occ_head = Mlp::init(
            MlpArch {
                input: cfg.hidden,
                hidden: cfg.hidden,
                hidden_layers: 0,
                output: 1,
            },
            rng,
        );
        let color_head = Mlp::init(
            MlpArch {
                input: cfg.hidden + 3 + 6 * cfg.enc_d,
                hidden: cfg.hidden,
                hidden_layers: 1,
                output: 3,
            },
            rng,
        );
        TemplateNet {
            trunk,
            occ_head,
            color_head,
            enc_x: cfg.enc_x,
            enc_d: cfg.enc_d,
        }
    }

    pub fn param_count(&self) -> usize {
        self.trunk.arch.param_count()
            + self.occ_head.arch.param_count()
            + self.color_head.arch.param_count()
    }
}

/// Inverse deformation network; output bounded by tanh * max_deform.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformNet<T> {
    pub mlp: Mlp<T>,
    pub enc_x: usize,
    pub max_deform: T,
}

impl<T: Real> DeformNet<T> {
    /// Output layer starts at zero so training begins from the identity warp.
    pub fn init(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let input = 3 + 6 * cfg.enc_def + cfg.d_id + cfg.d_exp;
        let mut mlp = Mlp::init(
            MlpArch {
                input,
                hidden: cfg.hidden,
                hidden_layers: cfg.layers,
                output: 3,
            },
            rng,
        );
        mlp.zero_output_layer();
        DeformNet {
            mlp,
            enc_x: cfg.enc_def,
            max_deform: real(cfg.max_deform),
        }
    }
}

/// Occupancy and view-dependent color at a template-space point.
pub fn template_query<T: Real>(
    net: &TemplateNet<T>,
    x: Vec3<T>,
    z_id: &[T],
    eps: &[T],
    d: Vec3<T>,
) -> Result<RadianceSample<T>> {
    if !all_finite(&x) || !all_finite(z_id) || !all_finite(eps) || !all_finite(&d) {
        return Err(Error::NonFinite("template_query"));
    }
    let n = norm3(d);
    if (n - T::one()).abs() > real(1e-6) {
        return Err(Error::InvalidValue {
            what: "view direction",
            detail: format!("|d| = {n} is not unit"),
        });
    }
    let mut input = positional_encode(x, net.enc_x);
    input.extend_from_slice(z_id);
    input.extend_from_slice(eps);
    let h = net.trunk.forward(&input, true);
    let occupancy = sigmoid(net.occ_head.forward(&h, false)[0]);
    let mut cin = h;
    cin.extend(positional_encode(d, net.enc_d));
    let c = net.color_head.forward(&cin, false);
    Ok(RadianceSample {
        color: [sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])],
        occupancy,
    })
}

/// Tape twin of [`template_query`]; `trunk0`/`occ0`/`color0` locate the
/// network weights on the tape.
#[allow(clippy::too_many_arguments)]
pub fn template_query_tape<T: Real>(
    net: &TemplateNet<T>,
    tape: &mut Tape<T>,
    trunk0: Var,
    occ0: Var,
    color0: Var,
    x: [Var; 3],
    z_id: &[Var],
    eps: &[Var],
    d: [Var; 3],
) -> ([Var; 3], Var) {
    let mut input = positional_encode_tape(tape, x, net.enc_x);
    input.extend_from_slice(z_id);
    input.extend_from_slice(eps);
    let h = net.trunk.forward_tape(tape, trunk0, &input, true);
    let occ_pre = net.occ_head.forward_tape(tape, occ0, &h, false)[0];
    let occupancy = tape.sigmoid(occ_pre);
    let mut cin = h;
    cin.extend(positional_encode_tape(tape, d, net.enc_d));
    let c = net.color_head.forward_tape(tape, color0, &cin, false);
    (
        [tape.sigmoid(c[0]), tape.sigmoid(c[1]), tape.sigmoid(c[2])],
        occupancy,
    )
}

/// Displacement from target space to template space.
pub fn deform<T: Real>(
    net: &DeformNet<T>,
    x: Vec3<T>,
    z_id: &[T],
    z_exp: &[T],
) -> Result<Vec3<T>> {
    if !all_finite(&x) || !all_finite(z_id) || !all_finite(z_exp) {
        return Err(Error::NonFinite("deform"));
    }
    let mut input = positional_encode(x, net.enc_x);
    input.extend_from_slice(z_id);
    input.extend_from_slice(z_exp);
    let out = net.mlp.forward(&input, false);
    Ok([
        out[0].tanh() * net.max_deform,
        out[1].tanh() * net.max_deform,
        out[2].tanh() * net.max_deform,
    ])
}

/// Tape twin of [`deform`].
pub fn deform_tape<T: Real>(
    net: &DeformNet<T>,
    tape: &mut Tape<T>,
    w0: Var,
    x: [Var; 3],
    z_id: &[Var],
    z_exp: &[Var],
) -> [Var; 3] {
    let mut input = positional_encode_tape(tape, x, net.enc_x);
    input.extend_from_slice(z_id);
    input.extend_from_slice(z_exp);
    let out = net.mlp.forward_tape(tape, w0, &input, false);
    let scale = net.max_deform;
    [
        {
            let t = tape.tanh(out[0]);
            tape.mul_const(t, scale)
        },
        {
            let t = tape.tanh(out[1]);
            tape.mul_const(t, scale)
        },
        {
            let t = tape.tanh(out[2]);
            tape.mul_const(t, scale)
        },
    ]
}

/// All trainable parameters of the pipeline plus the manifold definition.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldParams<T> {
    pub cfg: NetConfig,
    pub template: TemplateNet<T>,
    pub deform: DeformNet<T>,
    pub manifold: ManifoldField<T>,
}

/// Locations of the parameter leaves on a tape after
/// [`FieldParams::push_to_tape`].
#[derive(Clone, Copy, Debug)]
pub struct FieldVars {
    pub trunk: Var,
    pub occ: Var,
    pub color: Var,
    pub deform: Var,
    pub manifold: Option<Var>,
    pub total: usize,
}

impl<T: Real> FieldParams<T> {
    pub fn init(cfg: NetConfig, manifold: ManifoldField<T>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let template = TemplateNet::init(&cfg, &mut rng);
        let deform = DeformNet::init(&cfg, &mut rng);
        FieldParams {
            cfg,
            template,
            deform,
            manifold,
        }
    }

    pub fn param_count(&self) -> usize {
        self.template.param_count()
            + self.deform.mlp.arch.param_count()
            + self.manifold.param_count()
    }

    /// Flat parameter vector in tape push order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.template.trunk.weights);
        out.extend_from_slice(&self.template.occ_head.weights);
        out.extend_from_slice(&self.template.color_head.weights);
        out.extend_from_slice(&self.deform.mlp.weights);
        if let ManifoldField::Learned { net, .. } = &self.manifold {
            out.extend_from_slice(&net.weights);
        }
        out
    }

    /// Write a flat parameter vector (same order as [`flatten`]) back.
    pub fn set_from_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                what: "flat parameter vector",
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut off = 0;
        for w in [
            &mut self.template.trunk.weights,
            &mut self.template.occ_head.weights,
            &mut self.template.color_head.weights,
            &mut self.deform.mlp.weights,
        ] {
            let n = w.len();
            w.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        if let ManifoldField::Learned { net, .. } = &mut self.manifold {
            let n = net.weights.len();
            net.weights.copy_from_slice(&flat[off..off + n]);
        }
        Ok(())
    }

    /// Push every parameter as a tape leaf; the prefix [0, total) of the tape
    /// then holds exactly the flat parameter vector.
    pub fn push_to_tape(&self, tape: &mut Tape<T>) -> FieldVars {
        let trunk = tape.leaves(&self.template.trunk.weights);
        let occ = tape.leaves(&self.template.occ_head.weights);
        let color = tape.leaves(&self.template.color_head.weights);
        let deform = tape.leaves(&self.deform.mlp.weights);
        let manifold = match &self.manifold {
            ManifoldField::Learned { net, .. } => Some(tape.leaves(&net.weights)),
            _ => None,
        };
        FieldVars {
            trunk,
            occ,
            color,
            deform,
            manifold,
            total: self.param_count(),
        }
    }
}

const FP_MAGIC: &str = "FP01";

/// Save a checkpoint: text header with the architecture descriptor, then the
/// flat f64 LE parameter payload. Round-trips bitwise.
pub fn save_checkpoint<T: Real>(params: &FieldParams<T>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    let c = &params.cfg;
    let mut header = format!(
        "{FP_MAGIC} d_id={} d_exp={} d_eps={} hidden={} layers={} enc_x={} enc_d={} enc_def={} max_deform={}",
        c.d_id, c.d_exp, c.d_eps, c.hidden, c.layers, c.enc_x, c.enc_d, c.enc_def, c.max_deform
    );
    match &params.manifold {
        ManifoldField::AnalyticRadial { center, levels } => {
            header.push_str(&format!(
                " manifold=analytic center={},{},{} levels={}",
                center[0].to_f64().unwrap(),
                center[1].to_f64().unwrap(),
                center[2].to_f64().unwrap(),
                join_levels(levels)
            ));
        }
        ManifoldField::Learned { net, enc, levels } => {
            header.push_str(&format!(
                " manifold=learned m_hidden={} m_layers={} m_enc={} levels={}",
                net.arch.hidden,
                net.arch.hidden_layers,
                enc,
                join_levels(levels)
            ));
        }
    }
    writeln!(w, "{header}").map_err(io_err)?;
    for v in params.flatten() {
        w.write_all(&v.to_f64().unwrap().to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn join_levels<T: Real>(levels: &[T]) -> String {
    levels
        .iter()
        .map(|l| l.to_f64().unwrap().to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<FieldParams<T>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or(Error::MalformedHeader {
            what: "FP01",
            detail: "missing newline-terminated header".into(),
        })?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::MalformedHeader {
        what: "FP01",
        detail: "header is not UTF-8".into(),
    })?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some(FP_MAGIC) {
        return Err(Error::MalformedHeader {
            what: "FP01",
            detail: format!("bad magic in `{header}`"),
        });
    }
    let mut kv = std::collections::HashMap::new();
    for f in fields {
        let (k, v) = f.split_once('=').ok_or_else(|| Error::MalformedHeader {
            what: "FP01",
            detail: format!("bad field `{f}`"),
        })?;
        kv.insert(k.to_string(), v.to_string());
    }
    let get_usize = |k: &str| -> Result<usize> {
        kv.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or(Error::MalformedHeader {
                what: "FP01",
                detail: format!("missing or bad `{k}`"),
            })
    };
    let get_f64 = |k: &str| -> Result<f64> {
        kv.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or(Error::MalformedHeader {
                what: "FP01",
                detail: format!("missing or bad `{k}`"),
            })
    };
    let cfg = NetConfig {
        d_id: get_usize("d_id")?,
        d_exp: get_usize("d_exp")?,
        d_eps: get_usize("d_eps")?,
        hidden: get_usize("hidden")?,
        layers: get_usize("layers")?,
        enc_x: get_usize("enc_x")?,
        enc_d: get_usize("enc_d")?,
        enc_def: get_usize("enc_def")?,
        max_deform: get_f64("max_deform")?,
    };
    let parse_levels = |s: &str| -> Result<Vec<T>> {
        s.split(',')
            .map(|p| {
                p.parse::<f64>()
                    .map(real::<T>)
                    .map_err(|_| Error::MalformedHeader {
                        what: "FP01",
                        detail: format!("bad level `{p}`"),
                    })
            })
            .collect()
    };
    let manifold = match kv.get("manifold").map(String::as_str) {
        Some("analytic") => {
            let center_s = kv.get("center").ok_or(Error::MalformedHeader {
                what: "FP01",
                detail: "missing `center`".into(),
            })?;
            let parts: Vec<f64> = center_s
                .split(',')
                .filter_map(|p| p.parse().ok())
                .collect();
            if parts.len() != 3 {
                return Err(Error::MalformedHeader {
                    what: "FP01",
                    detail: format!("bad center `{center_s}`"),
                });
            }
            ManifoldField::AnalyticRadial {
                center: [real(parts[0]), real(parts[1]), real(parts[2])],
                levels: parse_levels(kv.get("levels").map(String::as_str).unwrap_or(""))?,
            }
        }
        Some("learned") => {
            let m_hidden = get_usize("m_hidden")?;
            let m_layers = get_usize("m_layers")?;
            let enc = get_usize("m_enc")?;
            ManifoldField::Learned {
                net: Mlp::zeros(MlpArch {
                    input: 3 + 6 * enc,
                    hidden: m_hidden,
                    hidden_layers: m_layers,
                    output: 1,
                }),
                enc,
                levels: parse_levels(kv.get("levels").map(String::as_str).unwrap_or(""))?,
            }
        }
        other => {
            return Err(Error::MalformedHeader {
                what: "FP01",
                detail: format!("missing or unknown manifold mode {other:?}"),
            })
        }
    };
    let mut params = FieldParams::init(cfg, manifold, 0);
    let expected = params.param_count() * 8;
    let payload = &bytes[nl + 1..];
    if payload.len() != expected {
        return Err(Error::TruncatedPayload {
            what: "FP01",
            expected,
            got: payload.len(),
        });
    }
    let flat: Vec<T> = payload
        .chunks_exact(8)
        .map(|c| real(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    params.set_from_flat(&flat)?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifolds::ManifoldField;

    fn small_cfg() -> NetConfig {
        NetConfig {
            d_id: 2,
            d_exp: 2,
            d_eps: 2,
            hidden: 16,
            layers: 2,
            enc_x: 2,
            enc_d: 1,
            enc_def: 2,
            max_deform: 0.3,
        }
    }

    fn analytic_manifold() -> ManifoldField<f64> {
        ManifoldField::AnalyticRadial {
            center: [0.0; 3],
            levels: vec![0.6, 0.8, 1.0, 1.2],
        }
    }

    /// Straight-line layer-by-layer forward pass, independent of the fused
    /// engine kernels.
    fn naive_mlp_forward(mlp: &Mlp<f64>, x: &[f64], activate_output: bool) -> Vec<f64> {
        let dims = mlp.arch.dims();
        let mut a = x.to_vec();
        let mut off = 0;
        for l in 0..dims.len() - 1 {
            let (fi, fo) = (dims[l], dims[l + 1]);
            let mut next = vec![0.0; fo];
            #[allow(clippy::needless_range_loop)]
            for o in 0..fo {
                let mut s = mlp.weights[off + fi * fo + o];
                for i in 0..fi {
                    s += mlp.weights[off + o * fi + i] * a[i];
                }
                next[o] = if l + 2 == dims.len() && !activate_output {
                    s
                } else {
                    (1.0 + s.exp()).ln()
                };
            }
            off += fi * fo + fo;
            a = next;
        }
        a
    }

    #[test]
    fn encode_l0_is_identity() {
        assert_eq!(positional_encode([0.1, 0.2, 0.3], 0), vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn encode_zero_gives_unit_cosines() {
        let e = positional_encode([0.0; 3], 3);
        assert_eq!(e.len(), 3 + 18);
        for k in 0..3 {
            for c in 0..3 {
                assert_eq!(e[3 + 6 * k + c], 0.0);
                assert_eq!(e[3 + 6 * k + 3 + c], 1.0);
            }
        }
    }

    #[test]
    fn encode_half_first_frequency() {
        let e = positional_encode([0.5_f64, 0.0, 0.0], 1);
        assert!((e[3] - 1.0).abs() < 1e-15); // sin(pi/2)
        assert!(e[6].abs() < 1e-15); // cos(pi/2)
    }

    #[test]
    fn encode_tape_matches_plain_bitwise() {
        let x = [0.37, -0.82, 0.11];
        let plain = positional_encode(x, 4);
        let mut tape = Tape::new();
        let xv = [tape.leaf(x[0]), tape.leaf(x[1]), tape.leaf(x[2])];
        let enc = positional_encode_tape(&mut tape, xv, 4);
        let vals: Vec<f64> = enc.iter().map(|&v| tape.val(v)).collect();
        assert_eq!(plain, vals);
    }

    #[test]
    fn zero_output_layers_give_half_everywhere() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = TemplateNet::<f64>::init(&cfg, &mut rng);
        net.occ_head.zero_output_layer();
        net.color_head.zero_output_layer();
        let s = template_query(&net, [0.3, -0.1, 0.2], &[0.5, -0.5], &[0.1, 0.1], [0.0, 0.0, 1.0])
            .unwrap();
        assert_eq!(s.occupancy, 0.5);
        assert_eq!(s.color, [0.5, 0.5, 0.5]);
    }

    #[test]
    fn template_query_deterministic() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = TemplateNet::<f64>::init(&cfg, &mut rng);
        let q = || {
            template_query(&net, [0.1, 0.0, 0.2], &[0.0, 0.0], &[0.0, 0.0], [0.0, 0.0, 1.0])
                .unwrap()
        };
        assert_eq!(q(), q());
    }

    #[test]
    fn template_query_matches_naive_oracle() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = TemplateNet::<f64>::init(&cfg, &mut rng);
        let x = [0.1, 0.0, 0.2];
        let z_id = [0.0, 0.0];
        let eps = [0.0, 0.0];
        let d = [0.0, 0.0, 1.0];
        let got = template_query(&net, x, &z_id, &eps, d).unwrap();
        // Oracle: naive per-layer pass.
        let mut input = positional_encode(x, cfg.enc_x);
        input.extend_from_slice(&z_id);
        input.extend_from_slice(&eps);
        let h = naive_mlp_forward(&net.trunk, &input, true);
        let occ = 1.0 / (1.0 + (-naive_mlp_forward(&net.occ_head, &h, false)[0]).exp());
        let mut cin = h;
        cin.extend(positional_encode(d, cfg.enc_d));
        let c = naive_mlp_forward(&net.color_head, &cin, false);
        assert!((got.occupancy - occ).abs() < 1e-12);
        for i in 0..3 {
            let ci = 1.0 / (1.0 + (-c[i]).exp());
            assert!((got.color[i] - ci).abs() < 1e-12);
        }
    }

    #[test]
    fn template_rejects_non_unit_direction() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = TemplateNet::<f64>::init(&cfg, &mut rng);
        assert!(template_query(&net, [0.0; 3], &[0.0, 0.0], &[0.0, 0.0], [0.0, 0.0, 2.0]).is_err());
    }

    #[test]
    fn deform_zero_init_is_identity_warp() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DeformNet::<f64>::init(&cfg, &mut rng);
        let dx = deform(&net, [0.4, -0.3, 0.2], &[1.0, -1.0], &[0.5, 0.5]).unwrap();
        assert_eq!(dx, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn deform_bounded_by_max_deform() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = DeformNet::<f64>::init(&cfg, &mut rng);
        // Re-randomize the output layer so the bound is actually exercised.
        for w in net.mlp.weights.iter_mut() {
            if *w == 0.0 {
                *w = 5.0;
            }
        }
        for i in 0..20 {
            let x = [(i as f64) * 0.1 - 1.0, 0.3, -0.2];
            let dx = deform(&net, x, &[1.0, 2.0], &[3.0, -3.0]).unwrap();
            for c in 0..3 {
                assert!(dx[c].abs() <= 0.3 + 1e-15);
            }
        }
    }

    #[test]
    fn deform_matches_naive_oracle() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = DeformNet::<f64>::init(&cfg, &mut rng);
        // Non-trivial output layer for the oracle comparison.
        let n = net.mlp.weights.len();
        for (i, w) in net.mlp.weights[n - 51..].iter_mut().enumerate() {
            *w = 0.01 * (i as f64 + 1.0);
        }
        let x = [0.0, 0.0, 0.0];
        let z_id = [0.0, 0.0];
        let z_exp = [1.0, 0.0];
        let got = deform(&net, x, &z_id, &z_exp).unwrap();
        let mut input = positional_encode(x, cfg.enc_def);
        input.extend_from_slice(&z_id);
        input.extend_from_slice(&z_exp);
        let raw = naive_mlp_forward(&net.mlp, &input, false);
        for c in 0..3 {
            assert!((got[c] - raw[c].tanh() * 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn deform_independent_of_eps_and_template_occupancy_independent_of_d() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tnet = TemplateNet::<f64>::init(&cfg, &mut rng);
        let x = [0.2, 0.1, -0.3];
        let a = template_query(&tnet, x, &[0.1, 0.2], &[0.0, 0.0], [0.0, 0.0, 1.0]).unwrap();
        let b = template_query(&tnet, x, &[0.1, 0.2], &[0.0, 0.0], [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(a.occupancy, b.occupancy);
        assert_ne!(a.color, b.color);
    }

    #[test]
    fn tape_forward_matches_plain_bitwise() {
        let cfg = small_cfg();
        let params = FieldParams::init(cfg, analytic_manifold(), 3);
        let x = [0.17, -0.05, 0.21];
        let z_id = [0.3, -0.2];
        let eps = [0.1, 0.4];
        let d = [0.0, 0.0, 1.0];
        let plain = template_query(&params.template, x, &z_id, &eps, d).unwrap();

        let mut tape = Tape::new();
        let fv = params.push_to_tape(&mut tape);
        let xv = x.map(|v| tape.leaf(v));
        let zv: Vec<Var> = z_id.iter().map(|&v| tape.leaf(v)).collect();
        let ev: Vec<Var> = eps.iter().map(|&v| tape.leaf(v)).collect();
        let dv = d.map(|v| tape.leaf(v));
        let (color, occ) = template_query_tape(
            &params.template,
            &mut tape,
            fv.trunk,
            fv.occ,
            fv.color,
            xv,
            &zv,
            &ev,
            dv,
        );
        assert_eq!(tape.val(occ), plain.occupancy);
        for c in 0..3 {
            assert_eq!(tape.val(color[c]), plain.color[c]);
        }
    }

    #[test]
    fn backward_matches_finite_differences_through_network() {
        let cfg = small_cfg();
        let params = FieldParams::<f64>::init(cfg, analytic_manifold(), 3);
        let flat = params.flatten();
        let eval = |w: &[f64]| -> f64 {
            let mut p = params.clone();
            p.set_from_flat(w).unwrap();
            let s = template_query(&p.template, [0.1, 0.0, 0.2], &[0.3, -0.2], &[0.0, 0.0], [0.0, 0.0, 1.0])
                .unwrap();
            s.color[0] + 2.0 * s.occupancy
        };
        let mut tape = Tape::new();
        let fv = params.push_to_tape(&mut tape);
        let xv = [0.1, 0.0, 0.2].map(|v| tape.leaf(v));
        let zv: Vec<Var> = [0.3, -0.2].iter().map(|&v| tape.leaf(v)).collect();
        let ev: Vec<Var> = [0.0, 0.0].iter().map(|&v| tape.leaf(v)).collect();
        let dv = [0.0, 0.0, 1.0].map(|v| tape.leaf(v));
        let (color, occ) =
            template_query_tape(&params.template, &mut tape, fv.trunk, fv.occ, fv.color, xv, &zv, &ev, dv);
        let two = tape.mul_const(occ, 2.0);
        let out = tape.add(color[0], two);
        let grads = tape.backward(out).unwrap();
        // Spot-check 60 parameters against central differences.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        use rand::Rng;
        for _ in 0..60 {
            let i = rng.gen_range(0..flat.len());
            let h = 1e-5;
            let mut wp = flat.clone();
            wp[i] += h;
            let fp = eval(&wp);
            wp[i] = flat[i] - h;
            let fm = eval(&wp);
            let fd = (fp - fm) / (2.0 * h);
            let an = grads.prefix(fv.total)[i];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                ((an - fd) / denom).abs() < 1e-4,
                "param {i}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn input_grad_matches_tape_and_fd() {
        let arch = MlpArch {
            input: 5,
            hidden: 8,
            hidden_layers: 2,
            output: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mlp = Mlp::<f64>::init(arch, &mut rng);
        let x = [0.3, -0.4, 0.2, 0.9, -0.1];
        let g = mlp.input_grad(&x);
        // Against finite differences of the plain forward.
        let fd = crate::oracle::fd_gradient(|v| mlp.forward(v, false)[0], &x, 1e-6);
        for i in 0..5 {
            assert!((g[i] - fd[i]).abs() < 1e-7, "{} vs {}", g[i], fd[i]);
        }
        // Tape twin agrees with the analytic version.
        let mut tape = Tape::new();
        let w0 = tape.leaves(&mlp.weights);
        let xv: Vec<Var> = x.iter().map(|&v| tape.leaf(v)).collect();
        let gt = mlp.input_grad_tape(&mut tape, w0, &xv);
        for i in 0..5 {
            assert!((tape.val(gt[i]) - g[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn fp01_round_trip_bitwise() {
        let cfg = small_cfg();
        let params = FieldParams::<f64>::init(cfg, analytic_manifold(), 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.fp01");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(params, loaded);
    }

    #[test]
    fn fp01_learned_manifold_round_trip() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::init(
            MlpArch {
                input: 3 + 6 * 2,
                hidden: 8,
                hidden_layers: 2,
                output: 1,
            },
            &mut rng,
        );
        let params = FieldParams::<f64>::init(
            cfg,
            ManifoldField::Learned {
                net,
                enc: 2,
                levels: vec![0.25, 0.5],
            },
            3,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.fp01");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(params, loaded);
    }

    #[test]
    fn fp01_truncated_rejected() {
        let cfg = small_cfg();
        let params = FieldParams::<f64>::init(cfg, analytic_manifold(), 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.fp01");
        save_checkpoint(&params, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(Error::TruncatedPayload { .. })
        ));
    }
}
