//! Linear morphable face model: mean shape plus identity/expression bases,
//! landmark lookup, reference deformations and the FB01 file format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::{dist2, Vec3};
use crate::scalar::{real, Real};

/// Dense column-major matrix (rows = 3N for basis matrices).
#[derive(Clone, Debug, PartialEq)]
pub struct ColMatrix<T> {
    pub rows: usize,
    pub cols: usize,
    /// Column-major storage, length rows * cols.
    pub data: Vec<T>,
}

impl<T: Real> ColMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ColMatrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    #[inline]
    pub fn col(&self, j: usize) -> &[T] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    #[inline]
    pub fn col_mut(&mut self, j: usize) -> &mut [T] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[j * self.rows + i]
    }

    /// Accumulate `self * v` into `out` (column-major sweep; per-element
    /// addition order equals a naive row-wise dot).
    pub fn accumulate_matvec(&self, v: &[T], out: &mut [T]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for j in 0..self.cols {
            let c = self.col(j);
            let vj = v[j];
            for i in 0..self.rows {
                out[i] = out[i] + c[i] * vj;
            }
        }
    }
}

/// Mean shape plus identity/expression linear bases and landmark indices.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceBasis<T> {
    pub mean_shape: Vec<Vec3<T>>,
    pub id_basis: ColMatrix<T>,
    pub exp_basis: ColMatrix<T>,
    pub landmark_indices: Vec<u32>,
}

impl<T: Real> FaceBasis<T> {
    pub fn n_vertices(&self) -> usize {
        self.mean_shape.len()
    }

    pub fn d_id(&self) -> usize {
        self.id_basis.cols
    }

    pub fn d_exp(&self) -> usize {
        self.exp_basis.cols
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.mean_shape.len();
        if n < 4 {
            return Err(Error::InvalidValue {
                what: "FaceBasis.mean_shape",
                detail: format!("need N >= 4, got {n}"),
            });
        }
        if self.id_basis.cols < 1 || self.exp_basis.cols < 1 {
            return Err(Error::InvalidValue {
                what: "FaceBasis bases",
                detail: "need d_i >= 1 and d_e >= 1".into(),
            });
        }
        if self.id_basis.rows != 3 * n || self.exp_basis.rows != 3 * n {
            return Err(Error::DimensionMismatch {
                what: "FaceBasis basis rows",
                expected: 3 * n,
                got: self.id_basis.rows,
            });
        }
        if self.landmark_indices.is_empty() {
            return Err(Error::InvalidValue {
                what: "FaceBasis.landmark_indices",
                detail: "need K >= 1".into(),
            });
        }
        for &li in &self.landmark_indices {
            if li as usize >= n {
                return Err(Error::IndexOutOfRange {
                    what: "landmark index",
                    index: li as usize,
                    len: n,
                });
            }
        }
        Ok(())
    }
}

/// Reconstructed vertex positions, same N as the generating basis.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh<T> {
    pub vertices: Vec<Vec3<T>>,
}

/// Identity and expression coefficients (beta, gamma).
#[derive(Clone, Debug, PartialEq)]
pub struct Coefficients<T> {
    pub beta: Vec<T>,
    pub gamma: Vec<T>,
}

impl<T: Real> Coefficients<T> {
    pub fn zeros(d_id: usize, d_exp: usize) -> Self {
        Coefficients {
            beta: vec![T::zero(); d_id],
            gamma: vec![T::zero(); d_exp],
        }
    }
}

/// mean + id_basis * beta + exp_basis * gamma, reshaped to N vertices.
pub fn reconstruct_shape<T: Real>(basis: &FaceBasis<T>, coeffs: &Coefficients<T>) -> Result<Mesh<T>> {
    if coeffs.beta.len() != basis.d_id() {
        return Err(Error::DimensionMismatch {
            what: "beta",
            expected: basis.d_id(),
            got: coeffs.beta.len(),
        });
    }
    if coeffs.gamma.len() != basis.d_exp() {
        return Err(Error::DimensionMismatch {
            what: "gamma",
            expected: basis.d_exp(),
            got: coeffs.gamma.len(),
        });
    }
    let n = basis.n_vertices();
    let mut flat = vec![T::zero(); 3 * n];
    for (i, v) in basis.mean_shape.iter().enumerate() {
        flat[3 * i] = v[0];
        flat[3 * i + 1] = v[1];
        flat[3 * i + 2] = v[2];
    }
    basis.id_basis.accumulate_matvec(&coeffs.beta, &mut flat);
    basis.exp_basis.accumulate_matvec(&coeffs.gamma, &mut flat);
    let vertices = flat
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    Ok(Mesh { vertices })
}

/// Vertices at the basis landmark indices, in index order.
pub fn extract_landmarks<T: Real>(mesh: &Mesh<T>, basis: &FaceBasis<T>) -> Result<Vec<Vec3<T>>> {
    let n = mesh.vertices.len();
    basis
        .landmark_indices
        .iter()
        .map(|&li| {
            mesh.vertices
                .get(li as usize)
                .copied()
                .ok_or(Error::IndexOutOfRange {
                    what: "landmark index",
                    index: li as usize,
                    len: n,
                })
        })
        .collect()
}

/// Argmin over vertices of squared distance; ties broken by lowest index.
pub fn nearest_vertex<T: Real>(mesh: &Mesh<T>, x: Vec3<T>) -> Result<(usize, T)> {
    if mesh.vertices.is_empty() {
        return Err(Error::InvalidValue {
            what: "mesh",
            detail: "nearest_vertex on empty mesh".into(),
        });
    }
    let mut best = (0usize, dist2(mesh.vertices[0], x));
    for (i, &v) in mesh.vertices.iter().enumerate().skip(1) {
        let d = dist2(v, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok((best.0, best.1.sqrt()))
}

/// Expression displacement to the neutral face at one vertex:
/// the negated exp-basis row block times gamma.
pub fn reference_deformation<T: Real>(
    basis: &FaceBasis<T>,
    gamma: &[T],
    vertex_index: usize,
) -> Result<Vec3<T>> {
    if gamma.len() != basis.d_exp() {
        return Err(Error::DimensionMismatch {
            what: "gamma",
            expected: basis.d_exp(),
            got: gamma.len(),
        });
    }
    if vertex_index >= basis.n_vertices() {
        return Err(Error::IndexOutOfRange {
            what: "vertex index",
            index: vertex_index,
            len: basis.n_vertices(),
        });
    }
    let mut out = [T::zero(); 3];
    for j in 0..basis.d_exp() {
        for c in 0..3 {
            out[c] = out[c] + basis.exp_basis.at(3 * vertex_index + c, j) * gamma[j];
        }
    }
    Ok([-out[0], -out[1], -out[2]])
}

/// Amplitude of the deterministic low-frequency bump on the synthetic mean
/// shape. Mean-shape radii stay inside [1 - BUMP_AMPLITUDE, 1 + BUMP_AMPLITUDE].
pub const BUMP_AMPLITUDE: f64 = 0.2;

/// Synthetic basis: bumpy unit-sphere mean shape, seeded Gaussian bases
/// orthonormalized column by column, landmarks away from the contour band.
pub fn synth_basis<T: Real>(
    seed: u64,
    n: usize,
    d_id: usize,
    d_exp: usize,
    k: usize,
) -> Result<FaceBasis<T>> {
    synth_basis_with_bump(seed, n, d_id, d_exp, k, BUMP_AMPLITUDE)
}

/// Same construction with a custom bump amplitude (0 gives an exact unit
/// sphere; used by the synthetic fitting scene).
pub fn synth_basis_with_bump<T: Real>(
    seed: u64,
    n: usize,
    d_id: usize,
    d_exp: usize,
    k: usize,
    bump: f64,
) -> Result<FaceBasis<T>> {
    if n < 4 || d_id < 1 || d_exp < 1 || k < 1 || k > n {
        return Err(Error::InvalidValue {
            what: "synth_basis sizes",
            detail: format!("N={n} d_i={d_id} d_e={d_exp} K={k}"),
        });
    }
    let mean_shape = (0..n)
        .map(|i| {
            let [x, y, z] = fibonacci_dir(i, n);
            let theta = z.acos();
            let phi = y.atan2(x);
            let r = 1.0 + bump * (3.0 * theta).sin() * (2.0 * phi).cos();
            [real(r * x), real(r * y), real(r * z)]
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id_basis = random_orthonormal(&mut rng, 3 * n, d_id);
    let exp_basis = random_orthonormal(&mut rng, 3 * n, d_exp);

    // The tail of the fibonacci layout is the contour band; landmarks come
    // from the interior indices only.
    let interior = n - n / 8;
    let landmark_indices = (0..k)
        .map(|i| (i * interior / k) as u32)
        .collect();

    let basis = FaceBasis {
        mean_shape,
        id_basis,
        exp_basis,
        landmark_indices,
    };
    basis.validate()?;
    Ok(basis)
}

/// Unit direction i of an n-point fibonacci sphere.
fn fibonacci_dir(i: usize, n: usize) -> [f64; 3] {
    let golden = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
    let r = (1.0 - z * z).sqrt();
    let phi = 2.0 * std::f64::consts::PI * (i as f64 / golden).fract();
    [r * phi.cos(), r * phi.sin(), z]
}

fn random_orthonormal<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ColMatrix<T> {
    let mut m = ColMatrix::<T>::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m.col_mut(j)[i] = real(gaussian(rng));
        }
    }
    // Modified Gram-Schmidt.
    for j in 0..cols {
        for p in 0..j {
            let dot = (0..rows).fold(T::zero(), |acc, i| acc + m.at(i, p) * m.at(i, j));
            for i in 0..rows {
                let v = m.at(i, j) - dot * m.at(i, p);
                m.col_mut(j)[i] = v;
            }
        }
        let norm = (0..rows)
            .fold(T::zero(), |acc, i| acc + m.at(i, j) * m.at(i, j))
            .sqrt();
        for i in 0..rows {
            let v = m.at(i, j) / norm;
            m.col_mut(j)[i] = v;
        }
    }
    m
}

/// Standard normal draw via Box-Muller (keeps the RNG dependency minimal and
/// the stream deterministic across platforms).
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

const FB_MAGIC: &str = "FB01";
// Guards against absurd header dimensions before allocating.
const MAX_DIM: usize = 1 << 24;

/// Write a basis in the FB01 format (text header, f64 LE payload, u32 LE
/// landmark indices). Round-trips bitwise.
pub fn save_basis<T: Real>(basis: &FaceBasis<T>, path: &Path) -> Result<()> {
    basis.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    writeln!(
        w,
        "{FB_MAGIC} {} {} {} {}",
        basis.n_vertices(),
        basis.d_id(),
        basis.d_exp(),
        basis.landmark_indices.len()
    )
    .map_err(io_err)?;
    for v in &basis.mean_shape {
        for c in 0..3 {
            w.write_all(&v[c].to_f64().unwrap().to_le_bytes()).map_err(io_err)?;
        }
    }
    for m in [&basis.id_basis, &basis.exp_basis] {
        for x in &m.data {
            w.write_all(&x.to_f64().unwrap().to_le_bytes()).map_err(io_err)?;
        }
    }
    for &li in &basis.landmark_indices {
        w.write_all(&li.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn load_basis<T: Real>(path: &Path) -> Result<FaceBasis<T>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let mut header = Vec::new();
    loop {
        let mut b = [0u8; 1];
        match r.read(&mut b) {
            Ok(0) => {
                return Err(Error::MalformedHeader {
                    what: "FB01",
                    detail: "missing newline-terminated header".into(),
                })
            }
            Ok(_) => {
                if b[0] == b'\n' {
                    break;
                }
                if header.len() > 256 {
                    return Err(Error::MalformedHeader {
                        what: "FB01",
                        detail: "header line too long".into(),
                    });
                }
                header.push(b[0]);
            }
            Err(e) => return Err(Error::io(path.display().to_string(), e)),
        }
    }
    let header = String::from_utf8(header).map_err(|_| Error::MalformedHeader {
        what: "FB01",
        detail: "header is not UTF-8".into(),
    })?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 || fields[0] != FB_MAGIC {
        return Err(Error::MalformedHeader {
            what: "FB01",
            detail: format!("expected `FB01 N d_i d_e K`, got `{header}`"),
        });
    }
    let parse = |s: &str, what: &'static str| -> Result<usize> {
        s.parse::<usize>().map_err(|_| Error::MalformedHeader {
            what: "FB01",
            detail: format!("bad {what}: `{s}`"),
        })
    };
    let n = parse(fields[1], "N")?;
    let d_id = parse(fields[2], "d_i")?;
    let d_exp = parse(fields[3], "d_e")?;
    let k = parse(fields[4], "K")?;
    if n == 0 || d_id == 0 || d_exp == 0 || k == 0 {
        return Err(Error::InvalidValue {
            what: "FB01 dimensions",
            detail: format!("N={n} d_i={d_id} d_e={d_exp} K={k} (all must be positive)"),
        });
    }
    if n > MAX_DIM || d_id > MAX_DIM || d_exp > MAX_DIM || k > MAX_DIM {
        return Err(Error::InvalidValue {
            what: "FB01 dimensions",
            detail: format!("dimension overflow: N={n} d_i={d_id} d_e={d_exp} K={k}"),
        });
    }
    let n_floats = 3 * n + 3 * n * d_id + 3 * n * d_exp;
    let expected = n_floats * 8 + k * 4;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if payload.len() != expected {
        return Err(Error::TruncatedPayload {
            what: "FB01",
            expected,
            got: payload.len(),
        });
    }
    let mut floats = payload[..n_floats * 8]
        .chunks_exact(8)
        .map(|c| real::<T>(f64::from_le_bytes(c.try_into().unwrap())));
    let mean_shape = (0..n)
        .map(|_| {
            [
                floats.next().unwrap(),
                floats.next().unwrap(),
                floats.next().unwrap(),
            ]
        })
        .collect();
    let id_basis = ColMatrix {
        rows: 3 * n,
        cols: d_id,
        data: floats.by_ref().take(3 * n * d_id).collect(),
    };
    let exp_basis = ColMatrix {
        rows: 3 * n,
        cols: d_exp,
        data: floats.by_ref().take(3 * n * d_exp).collect(),
    };
    let landmark_indices = payload[n_floats * 8..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let basis = FaceBasis {
        mean_shape,
        id_basis,
        exp_basis,
        landmark_indices,
    };
    basis.validate()?;
    Ok(basis)
}
