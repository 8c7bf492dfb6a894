//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every differentiable quantity in the pipeline (network layers, positional
//! encoding, intersection interpolation, compositing, losses) is recorded as a
//! tape node. `backward` walks the tape once and yields exact adjoints for all
//! recorded variables, including the parameter leaves pushed at the front.
//!
//! Dense layers are recorded as a single fused `Affine` node per output unit so
//! the tape stays proportional to the number of units, not multiply-adds.

use crate::error::{Error, Result};
use crate::scalar::{real, sigmoid, softplus, Real};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(u32);

impl Var {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug)]
enum Node<T> {
    Leaf,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    Sin(u32),
    Cos(u32),
    Tanh(u32),
    Sigmoid(u32),
    Softplus(u32),
    Sqrt(u32),
    AddConst(u32),
    MulConst(u32, T),
    /// out = bias + sum over pairs (idx[off+2k], idx[off+2k+1]) of w*x.
    Affine { bias: u32, off: u32, n: u32 },
}

/// Snapshot of the tape length, used to roll back per-ray work while keeping
/// the parameter prefix alive.
#[derive(Clone, Copy, Debug)]
pub struct Checkpoint {
    nodes: usize,
    idx: usize,
}

pub struct Tape<T: Real> {
    vals: Vec<T>,
    nodes: Vec<Node<T>>,
    idx: Vec<u32>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            nodes: Vec::new(),
            idx: Vec::new(),
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            nodes: self.nodes.len(),
            idx: self.idx.len(),
        }
    }

    /// Roll the tape back to a previous checkpoint, discarding later nodes.
    pub fn truncate(&mut self, cp: Checkpoint) {
        self.nodes.truncate(cp.nodes);
        self.vals.truncate(cp.nodes);
        self.idx.truncate(cp.idx);
    }

    #[inline]
    fn push(&mut self, node: Node<T>, val: T) -> Var {
        let i = self.nodes.len();
        debug_assert!(i < u32::MAX as usize, "tape overflow");
        self.nodes.push(node);
        self.vals.push(val);
        Var(i as u32)
    }

    /// Record an independent input (parameter or constant).
    #[inline]
    pub fn leaf(&mut self, v: T) -> Var {
        self.push(Node::Leaf, v)
    }

    /// Record a run of leaves; returns the handle of the first one.
    pub fn leaves(&mut self, vs: &[T]) -> Var {
        let start = self.nodes.len() as u32;
        for &v in vs {
            self.leaf(v);
        }
        Var(start)
    }

    /// Handle arithmetic for contiguous leaf runs.
    #[inline]
    pub fn nth(base: Var, offset: usize) -> Var {
        Var(base.0 + offset as u32)
    }

    #[inline]
    pub fn val(&self, v: Var) -> T {
        self.vals[v.index()]
    }

    #[inline]
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.index()] + self.vals[b.index()];
        self.push(Node::Add(a.0, b.0), v)
    }

    #[inline]
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.index()] - self.vals[b.index()];
        self.push(Node::Sub(a.0, b.0), v)
    }

    #[inline]
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.index()] * self.vals[b.index()];
        self.push(Node::Mul(a.0, b.0), v)
    }

    #[inline]
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.index()] / self.vals[b.index()];
        self.push(Node::Div(a.0, b.0), v)
    }

    #[inline]
    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.vals[a.index()];
        self.push(Node::Neg(a.0), v)
    }

    #[inline]
    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.vals[a.index()].sin();
        self.push(Node::Sin(a.0), v)
    }

    #[inline]
    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.vals[a.index()].cos();
        self.push(Node::Cos(a.0), v)
    }

    #[inline]
    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.vals[a.index()].tanh();
        self.push(Node::Tanh(a.0), v)
    }

    #[inline]
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = sigmoid(self.vals[a.index()]);
        self.push(Node::Sigmoid(a.0), v)
    }

    #[inline]
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = softplus(self.vals[a.index()]);
        self.push(Node::Softplus(a.0), v)
    }

    #[inline]
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.vals[a.index()].sqrt();
        self.push(Node::Sqrt(a.0), v)
    }

    #[inline]
    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let v = self.vals[a.index()] + c;
        self.push(Node::AddConst(a.0), v)
    }

    #[inline]
    pub fn mul_const(&mut self, a: Var, c: T) -> Var {
        let v = self.vals[a.index()] * c;
        self.push(Node::MulConst(a.0, c), v)
    }

    #[inline]
    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// Fused dot product with bias: out = bias + sum of w_k * x_k.
    ///
    /// `ws` and `xs` must have equal length. Accumulation order is the slice
    /// order, matching the plain forward path bit for bit.
    pub fn affine(&mut self, bias: Var, ws: &[Var], xs: &[Var]) -> Var {
        debug_assert_eq!(ws.len(), xs.len());
        let off = self.idx.len() as u32;
        let mut acc = self.vals[bias.index()];
        for (w, x) in ws.iter().zip(xs) {
            self.idx.push(w.0);
            self.idx.push(x.0);
            acc = acc + self.vals[w.index()] * self.vals[x.index()];
        }
        self.push(
            Node::Affine {
                bias: bias.0,
                off,
                n: ws.len() as u32,
            },
            acc,
        )
    }

    /// Sum of a slice of vars (left fold).
    pub fn sum(&mut self, vs: &[Var]) -> Var {
        let mut it = vs.iter();
        let first = *it.next().expect("sum of empty slice");
        it.fold(first, |acc, &v| self.add(acc, v))
    }

    /// Reverse sweep from `out`; returns adjoints for every recorded var.
    pub fn backward(&self, out: Var) -> Result<Grads<T>> {
        if out.index() >= self.nodes.len() {
            return Err(Error::UnrecordedValue);
        }
        let mut adj = vec![T::zero(); self.nodes.len()];
        adj[out.index()] = T::one();
        for i in (0..=out.index()).rev() {
            let g = adj[i];
            if g == T::zero() {
                continue;
            }
            match self.nodes[i] {
                Node::Leaf => {}
                Node::Add(a, b) => {
                    adj[a as usize] += g;
                    adj[b as usize] += g;
                }
                Node::Sub(a, b) => {
                    adj[a as usize] += g;
                    adj[b as usize] += -g;
                }
                Node::Mul(a, b) => {
                    adj[a as usize] += g * self.vals[b as usize];
                    adj[b as usize] += g * self.vals[a as usize];
                }
                Node::Div(a, b) => {
                    let bv = self.vals[b as usize];
                    adj[a as usize] += g / bv;
                    adj[b as usize] += -g * self.vals[i] / bv;
                }
                Node::Neg(a) => adj[a as usize] += -g,
                Node::Sin(a) => adj[a as usize] += g * self.vals[a as usize].cos(),
                Node::Cos(a) => adj[a as usize] += -g * self.vals[a as usize].sin(),
                Node::Tanh(a) => {
                    let y = self.vals[i];
                    adj[a as usize] += g * (T::one() - y * y);
                }
                Node::Sigmoid(a) => {
                    let y = self.vals[i];
                    adj[a as usize] += g * y * (T::one() - y);
                }
                Node::Softplus(a) => {
                    adj[a as usize] += g * sigmoid(self.vals[a as usize]);
                }
                Node::Sqrt(a) => {
                    let y = self.vals[i];
                    adj[a as usize] += g / (real::<T>(2.0) * y);
                }
                Node::AddConst(a) => adj[a as usize] += g,
                Node::MulConst(a, c) => adj[a as usize] += g * c,
                Node::Affine { bias, off, n } => {
                    adj[bias as usize] += g;
                    let off = off as usize;
                    for k in 0..n as usize {
                        let w = self.idx[off + 2 * k] as usize;
                        let x = self.idx[off + 2 * k + 1] as usize;
                        adj[w] += g * self.vals[x];
                        adj[x] += g * self.vals[w];
                    }
                }
            }
        }
        Ok(Grads(adj))
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Grads<T>(Vec<T>);

impl<T: Real> Grads<T> {
    #[inline]
    pub fn wrt(&self, v: Var) -> T {
        self.0[v.index()]
    }

    /// Adjoints of the first `n` vars (the parameter prefix).
    pub fn prefix(&self, n: usize) -> &[T] {
        &self.0[..n]
    }
}
