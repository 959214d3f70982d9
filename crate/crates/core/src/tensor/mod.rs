//! Complex-valued tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable shaped buffer of either real or complex
//! doubles. Differentiable computations are recorded on a [`Tape`]; calling
//! [`Tape::backward`] on a real scalar produces [`Gradients`] for every leaf
//! registered with `requires_grad`.
//!
//! Gradients of complex leaves are reported as `dL/dRe + j·dL/dIm`, i.e. the
//! leaf is treated as a pair of independent real parameters. Intermediate
//! complex adjoints use the same convention, so the chain rule only ever
//! involves real calculus.

mod gemm;
mod gradcheck;
mod ops;
mod tape;

pub use gemm::{cgemm, dgemm, Trans};
pub use gradcheck::{finite_diff_check, DEFAULT_FD_EPS};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};
use num_complex::Complex64;

pub type C64 = Complex64;

/// Storage of a tensor: real or complex double precision.
#[derive(Clone, Debug, PartialEq)]
pub enum Data {
    Real(Vec<f64>),
    Complex(Vec<C64>),
}

impl Data {
    pub fn len(&self) -> usize {
        match self {
            Data::Real(v) => v.len(),
            Data::Complex(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_complex(&self) -> Vec<C64> {
        match self {
            Data::Real(v) => v.iter().map(|&x| C64::new(x, 0.0)).collect(),
            Data::Complex(v) => v.clone(),
        }
    }

    fn all_finite(&self) -> bool {
        match self {
            Data::Real(v) => v.iter().all(|x| x.is_finite()),
            Data::Complex(v) => v.iter().all(|z| z.re.is_finite() && z.im.is_finite()),
        }
    }
}

/// A shaped array of real or complex doubles.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Data,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Data) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Length(format!(
                "shape {shape:?} holds {expected} entries, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn real(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        Self::new(shape, Data::Real(values))
    }

    pub fn complex(shape: &[usize], values: Vec<C64>) -> Result<Self> {
        Self::new(shape, Data::Complex(values))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Data::Real(vec![0.0; n]),
        }
    }

    pub fn zeros_complex(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Data::Complex(vec![C64::new(0.0, 0.0); n]),
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![],
            data: Data::Real(vec![x]),
        }
    }

    /// Complex identity matrix of size `n`.
    pub fn eye_complex(n: usize) -> Self {
        let mut v = vec![C64::new(0.0, 0.0); n * n];
        for i in 0..n {
            v[i * n + i] = C64::new(1.0, 0.0);
        }
        Tensor {
            shape: vec![n, n],
            data: Data::Complex(v),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_real(&self) -> bool {
        matches!(self.data, Data::Real(_))
    }

    pub fn data(&self) -> &Data {
        &self.data
    }

    pub fn into_data(self) -> Data {
        self.data
    }

    pub fn as_real(&self) -> Option<&[f64]> {
        match &self.data {
            Data::Real(v) => Some(v),
            Data::Complex(_) => None,
        }
    }

    pub fn as_complex(&self) -> Option<&[C64]> {
        match &self.data {
            Data::Complex(v) => Some(v),
            Data::Real(_) => None,
        }
    }

    pub fn as_real_mut(&mut self) -> Option<&mut [f64]> {
        match &mut self.data {
            Data::Real(v) => Some(v),
            Data::Complex(_) => None,
        }
    }

    pub fn as_complex_mut(&mut self) -> Option<&mut [C64]> {
        match &mut self.data {
            Data::Complex(v) => Some(v),
            Data::Real(_) => None,
        }
    }

    /// Real entries, or an error naming `op` when the tensor is complex.
    pub fn real_values(&self, op: &'static str) -> Result<&[f64]> {
        self.as_real().ok_or(Error::NotReal { op })
    }

    /// Complex view of the entries (real tensors are promoted).
    pub fn to_complex_vec(&self) -> Vec<C64> {
        self.data.to_complex()
    }

    pub fn to_complex(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Data::Complex(self.data.to_complex()),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.all_finite()
    }

    /// The single entry of a scalar (or one-element) real tensor.
    pub fn item(&self) -> Result<f64> {
        match &self.data {
            Data::Real(v) if v.len() == 1 => Ok(v[0]),
            Data::Real(_) => Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            ))),
            Data::Complex(_) => Err(Error::NotReal { op: "item" }),
        }
    }

    /// Frobenius norm squared.
    pub fn norm_sqr(&self) -> f64 {
        match &self.data {
            Data::Real(v) => v.iter().map(|x| x * x).sum(),
            Data::Complex(v) => v.iter().map(|z| z.norm_sqr()).sum(),
        }
    }

    /// Largest entrywise absolute difference. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        let a = self.to_complex_vec();
        let b = other.to_complex_vec();
        Ok(a.iter()
            .zip(&b)
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max))
    }
}

/// Splits a rank-2 or rank-3 shape into `(batch, rows, cols)`.
pub(crate) fn mat_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [m, n] => Ok((1, m, n)),
        [b, m, n] => Ok((b, m, n)),
        _ => Err(Error::shape(op, shape, &[])),
    }
}

/// Entrywise functions available through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Hadamard,
    Conj,
    Abs2,
    ExpJTheta,
    ReluReal,
    TanhReal,
}

impl Tape {
    /// Dispatches to the entrywise operation `f`. Binary functions need
    /// `rhs`; unary ones ignore it.
    pub fn elementwise(&mut self, f: Elementwise, a: Var, rhs: Option<Var>) -> Result<Var> {
        let need_rhs = || rhs.ok_or_else(|| Error::Contract(format!("{f:?} needs two operands")));
        match f {
            Elementwise::Add => {
                let b = need_rhs()?;
                self.add(a, b)
            }
            Elementwise::Hadamard => {
                let b = need_rhs()?;
                self.hadamard(a, b)
            }
            Elementwise::Conj => self.conj(a),
            Elementwise::Abs2 => self.abs2(a),
            Elementwise::ExpJTheta => self.exp_j(a),
            Elementwise::ReluReal => self.relu(a),
            Elementwise::TanhReal => self.tanh(a),
        }
    }
}

/// Non-differentiable complex (or real) matrix product.
pub fn complex_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let va = tape.constant(a.clone());
    let vb = tape.constant(b.clone());
    let c = tape.matmul(va, vb)?;
    Ok(tape.value(c).clone())
}
