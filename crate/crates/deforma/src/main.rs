//! Command-line front end: still rendering, animation tracks, gradient
//! checks, synthetic fitting, and basis generation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use deforma::autodiff::Tape;
use deforma::error::{Error, Result};
use deforma::facemodel::{save_basis, synth_basis};
use deforma::fitkit::{fit_synthetic, FitConfig};
use deforma::manifolds::ManifoldField;
use deforma::neuralfields::{deform, load_checkpoint, FieldParams, LatentCodes, NetConfig};
use deforma::renderer::{
    camera_rays, depth_pointcloud, render_image, render_pixel_tape, write_depth_plane, write_ppm,
    Camera, LatentVars, RenderSettings,
};

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERIC: u8 = 2;

#[derive(Parser)]
#[command(name = "deforma", about = "Radiance-manifold rendering and fitting")]
struct Cli {
    /// Worker threads (default: available cores; 1 forces sequential mode).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a still image from a checkpoint.
    Render(RenderArgs),
    /// Render a frame sequence from a pose/expression track file.
    Animate(AnimateArgs),
    /// Check reverse-mode gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Run the synthetic imitative-fitting experiment.
    Fit(FitArgs),
    /// Generate and save a synthetic morphable basis.
    MakeBasis(MakeBasisArgs),
}

#[derive(Args)]
struct RenderArgs {
    /// Checkpoint file (FP01).
    #[arg(long)]
    ckpt: PathBuf,
    /// Camera pitch, yaw, radius.
    #[arg(long, num_args = 3, value_names = ["P", "Y", "R"], allow_negative_numbers = true)]
    pose: Vec<f64>,
    /// Image size as WxH.
    #[arg(long, default_value = "64x64")]
    size: String,
    /// Seed for the identity code (default: DEFORMA_SEED or 0).
    #[arg(long)]
    z_id_seed: Option<u64>,
    /// Expression code: inline comma-separated floats or a file of floats.
    #[arg(long)]
    z_exp: Option<String>,
    /// Output PPM path.
    #[arg(long)]
    out: PathBuf,
    /// Optional depth-plane output path (DP01).
    #[arg(long)]
    depth_out: Option<PathBuf>,
    /// Ray samples per pixel.
    #[arg(long, default_value_t = 96)]
    samples: usize,
}

#[derive(Args)]
struct AnimateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Track file: one `pitch yaw radius g1..gd` row per frame.
    #[arg(long)]
    track: PathBuf,
    /// Output directory for numbered frames.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "64x64")]
    size: String,
    #[arg(long)]
    z_id_seed: Option<u64>,
    #[arg(long, default_value_t = 96)]
    samples: usize,
    /// Also write a DP01 depth plane per frame.
    #[arg(long)]
    depth: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Parameter-init seed (default: DEFORMA_SEED or 3).
    #[arg(long)]
    seed: Option<u64>,
    /// Random parameters to probe per check.
    #[arg(long, default_value_t = 30)]
    params: usize,
    /// Relative-error tolerance.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct FitArgs {
    /// key=value config file; defaults used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, repeatable: --set key=value.
    #[arg(long = "set")]
    set: Vec<String>,
    /// Output directory for report, loss log, and checkpoint.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct MakeBasisArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 256)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    d_id: usize,
    #[arg(long, default_value_t = 3)]
    d_exp: usize,
    #[arg(long, default_value_t = 12)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are successful exits; everything else is usage.
            let code = if e.exit_code() == 0 { 0 } else { EXIT_USAGE };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .is_err()
        {
            eprintln!("error: failed to configure thread pool");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    let result = match cli.command {
        Command::Render(args) => cmd_render(&args),
        Command::Animate(args) => cmd_animate(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
        Command::Fit(args) => cmd_fit(&args),
        Command::MakeBasis(args) => cmd_make_basis(&args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

/// Global seed fallback: flag value, else DEFORMA_SEED, else the default.
fn seed_or(flag: Option<u64>, default: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("DEFORMA_SEED") {
        Ok(v) => v.parse().map_err(|_| Error::InvalidValue {
            what: "DEFORMA_SEED",
            detail: format!("cannot parse `{v}` as an unsigned seed"),
        }),
        Err(_) => Ok(default),
    }
}

fn parse_size(size: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidValue {
        what: "--size",
        detail: format!("expected WxH, got `{size}`"),
    };
    let (w, h) = size.split_once('x').ok_or_else(bad)?;
    let w: usize = w.parse().map_err(|_| bad())?;
    let h: usize = h.parse().map_err(|_| bad())?;
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

/// Inline comma/space-separated floats, or a path to a file of floats.
fn parse_vector(spec: &str, expect: usize) -> Result<Vec<f64>> {
    let parse_floats = |text: &str| -> Option<Vec<f64>> {
        let vals: std::result::Result<Vec<f64>, _> = text
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect();
        vals.ok()
    };
    let vals = match parse_floats(spec) {
        Some(v) if !v.is_empty() => v,
        _ => {
            let text = std::fs::read_to_string(spec).map_err(|e| Error::io(spec, e))?;
            parse_floats(&text).ok_or_else(|| Error::InvalidValue {
                what: "--z-exp",
                detail: format!("file `{spec}` does not contain floats"),
            })?
        }
    };
    if vals.len() != expect {
        return Err(Error::InvalidValue {
            what: "--z-exp",
            detail: format!("expected {expect} components, got {}", vals.len()),
        });
    }
    Ok(vals)
}

fn latents_for(
    cfg: &NetConfig,
    z_id_seed: u64,
    z_exp: Vec<f64>,
    pose: [f64; 3],
) -> LatentCodes<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(z_id_seed);
    let z_id = (0..cfg.d_id)
        .map(|_| deforma::facemodel::gaussian(&mut rng))
        .collect();
    LatentCodes {
        z_id,
        z_exp,
        eps: vec![0.0; cfg.d_eps],
        pose,
    }
}

fn pose3(pose: &[f64]) -> Result<[f64; 3]> {
    if pose.len() != 3 {
        return Err(Error::InvalidValue {
            what: "--pose",
            detail: format!("expected 3 values (pitch yaw radius), got {}", pose.len()),
        });
    }
    Ok([pose[0], pose[1], pose[2]])
}

fn cmd_render(args: &RenderArgs) -> Result<u8> {
    let fields: FieldParams<f64> = load_checkpoint(&args.ckpt)?;
    let (w, h) = parse_size(&args.size)?;
    let pose = pose3(&args.pose)?;
    let seed = seed_or(args.z_id_seed, 0)?;
    let z_exp = match &args.z_exp {
        Some(spec) => parse_vector(spec, fields.cfg.d_exp)?,
        None => vec![0.0; fields.cfg.d_exp],
    };
    let latents = latents_for(&fields.cfg, seed, z_exp, pose);
    let camera = Camera::new(pose[0], pose[1], pose[2], w, h);
    let settings = RenderSettings {
        samples: args.samples,
        ..RenderSettings::default()
    };
    let image = render_image(&camera, &fields, &latents, &settings, true)?;
    write_ppm(&image, &args.out)?;
    if let Some(dp) = &args.depth_out {
        write_depth_plane(&image, dp)?;
    }
    Ok(0)
}

/// One track row: camera pose plus expression code.
struct TrackFrame {
    pose: [f64; 3],
    gamma: Vec<f64>,
}

fn parse_track(path: &Path, d_exp: usize) -> Result<Vec<TrackFrame>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut frames = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: std::result::Result<Vec<f64>, _> =
            line.split_whitespace().map(str::parse).collect();
        let vals = vals.map_err(|_| Error::InvalidValue {
            what: "track file",
            detail: format!("line {}: non-numeric field", lineno + 1),
        })?;
        if vals.len() != 3 + d_exp {
            return Err(Error::InvalidValue {
                what: "track file",
                detail: format!(
                    "line {}: expected {} fields (pitch yaw radius + {d_exp} expression), got {}",
                    lineno + 1,
                    3 + d_exp,
                    vals.len()
                ),
            });
        }
        frames.push(TrackFrame {
            pose: [vals[0], vals[1], vals[2]],
            gamma: vals[3..].to_vec(),
        });
    }
    if frames.is_empty() {
        return Err(Error::InvalidValue {
            what: "track file",
            detail: "no frames".into(),
        });
    }
    Ok(frames)
}

fn cmd_animate(args: &AnimateArgs) -> Result<u8> {
    let fields: FieldParams<f64> = load_checkpoint(&args.ckpt)?;
    let (w, h) = parse_size(&args.size)?;
    let frames = parse_track(&args.track, fields.cfg.d_exp)?;
    let seed = seed_or(args.z_id_seed, 0)?;
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| Error::io(args.out_dir.display().to_string(), e))?;
    let settings = RenderSettings {
        samples: args.samples,
        ..RenderSettings::default()
    };
    for (i, frame) in frames.iter().enumerate() {
        let latents = latents_for(&fields.cfg, seed, frame.gamma.clone(), frame.pose);
        let camera = Camera::new(frame.pose[0], frame.pose[1], frame.pose[2], w, h);
        let image = render_image(&camera, &fields, &latents, &settings, true)?;
        write_ppm(&image, &args.out_dir.join(format!("frame_{i:04}.ppm")))?;
        if args.depth {
            write_depth_plane(&image, &args.out_dir.join(format!("frame_{i:04}.dp01")))?;
        }
        // Deformation-field magnitude over the frame's depth cloud, logged
        // per frame so constant-expression tracks are easy to audit.
        let cloud = depth_pointcloud(&image, &camera, &settings)?;
        let mut mag = 0.0;
        for &x in &cloud {
            let dx = deform(&fields.deform, x, &latents.z_id, &latents.z_exp)?;
            mag += (dx[0] * dx[0] + dx[1] * dx[1] + dx[2] * dx[2]).sqrt();
        }
        let mean = if cloud.is_empty() { 0.0 } else { mag / cloud.len() as f64 };
        println!("frame {i}: points={} mean_deform={mean:.6}", cloud.len());
    }
    Ok(0)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<u8> {
    let seed = seed_or(args.seed, 3)?;
    let cfg = NetConfig {
        d_id: 2,
        d_exp: 3,
        d_eps: 2,
        hidden: 8,
        layers: 2,
        enc_x: 2,
        enc_d: 1,
        enc_def: 2,
        max_deform: 0.3,
    };
    let manifold = ManifoldField::AnalyticRadial {
        center: [0.0; 3],
        levels: vec![1.0],
    };
    let fields = FieldParams::init(cfg, manifold, seed);
    let latents = LatentCodes::zeros(2, 3, 2, 3.0);
    let camera = Camera::new(0.1, 0.2, 3.0, 4, 4);
    let settings = RenderSettings {
        samples: 24,
        ..RenderSettings::default()
    };
    let rays = camera_rays(&camera, settings.near, settings.far)?;
    let ray = rays[5];

    // Objective: summed pixel color of one ray through the full pipeline.
    let flat = fields.flatten();
    let mut tape = Tape::new();
    let fv = fields.push_to_tape(&mut tape);
    let lv = LatentVars::push(&mut tape, &latents);
    let pv = render_pixel_tape(&mut tape, &ray, &fields, &fv, &lv, &settings)?;
    let s01 = tape.add(pv.color[0], pv.color[1]);
    let obj = tape.add(s01, pv.color[2]);
    let grads = tape.backward(obj)?;
    let analytic = grads.prefix(fv.total).to_vec();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let mut failures = Vec::new();
    let mut checked = 0usize;
    use rand::Rng;
    let eval = |p: &[f64]| -> Result<f64> {
        let mut f2 = fields.clone();
        f2.set_from_flat(p)?;
        let (c, _) = deforma::renderer::render_pixel(&ray, &f2, &latents, &settings)?;
        Ok(c[0] + c[1] + c[2])
    };
    let h = 1e-5;
    while checked < args.params {
        let pi = rng.gen_range(0..flat.len());
        let mut probe = flat.clone();
        probe[pi] = flat[pi] + h;
        let fp = eval(&probe)?;
        probe[pi] = flat[pi] - h;
        let fm = eval(&probe)?;
        let fd = (fp - fm) / (2.0 * h);
        let a = analytic[pi];
        let denom = a.abs().max(fd.abs()).max(1e-6);
        let rel = (a - fd).abs() / denom;
        if rel > args.tol {
            failures.push((pi, a, fd, rel));
        }
        checked += 1;
    }
    if failures.is_empty() {
        println!("gradcheck: {} parameters within {:.0e}", checked, args.tol);
        Ok(0)
    } else {
        for (pi, a, fd, rel) in &failures {
            eprintln!("param {pi}: analytic={a} fd={fd} rel={rel:.3e}");
        }
        eprintln!("gradcheck: {} of {checked} parameters failed", failures.len());
        Ok(EXIT_NUMERIC)
    }
}

fn cmd_fit(args: &FitArgs) -> Result<u8> {
    let mut cfg = match &args.config {
        Some(path) => FitConfig::from_file(path)?,
        None => FitConfig::default(),
    };
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::InvalidValue {
            what: "--set",
            detail: format!("expected key=value, got `{kv}`"),
        })?;
        cfg.apply_kv(k.trim(), v.trim())?;
    }
    if let Some(dir) = &args.out_dir {
        cfg.out_dir = Some(dir.clone());
    }
    if std::env::var("DEFORMA_SEED").is_ok() && !args.set.iter().any(|s| s.starts_with("seed")) {
        cfg.seed = seed_or(None, cfg.seed)?;
    }
    let report = fit_synthetic::<f64>(&cfg)?;
    println!(
        "fit: steps={} psnr={:.2} dB (initial {:.2}) deform_ratio={:.4}",
        report.steps, report.psnr, report.initial_psnr, report.deform_ratio
    );
    Ok(0)
}

fn cmd_make_basis(args: &MakeBasisArgs) -> Result<u8> {
    let seed = seed_or(args.seed, 7)?;
    let basis = synth_basis::<f64>(seed, args.n, args.d_id, args.d_exp, args.k)?;
    save_basis(&basis, &args.out)?;
    println!(
        "basis: n={} d_id={} d_exp={} -> {}",
        args.n,
        args.d_id,
        args.d_exp,
        args.out.display()
    );
    Ok(0)
}
