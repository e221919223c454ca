//! Dense row-major tensors and a reverse-mode differentiation tape.
//!
//! Every graph value is a matrix; vectors are carried as `1 x n` rows. Two
//! executors implement the [`Graph`] trait: [`Tape`] records operations in
//! 64-bit precision for training and attribution, while [`Eager`] evaluates
//! the same operations without recording and is generic over the float
//! width (32-bit is used for timing benchmarks).

mod eager;
pub mod kernels;
mod tape;

use std::borrow::Cow;
use std::fmt::Debug;

pub use eager::Eager;
pub use tape::{Grads, Tape};

use crate::error::{DoeError, Result};

/// Floating-point element type usable by the kernels.
pub trait Scalar:
    Copy
    + Debug
    + Default
    + PartialOrd
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Row-major tensor with an arbitrary shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F = f64> {
    shape: Vec<usize>,
    data: Vec<F>,
    pub requires_grad: bool,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(DoeError::dim(format!(
                "shape {shape:?} holds {numel} elements but {} were supplied",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::ZERO; numel],
            requires_grad: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[&[F]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(DoeError::dim("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Interprets the tensor as a matrix: 1-D tensors become a single row,
    /// higher ranks fold all leading dimensions into rows.
    pub fn as_matrix_dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [lead @ .., cols] => (lead.iter().product(), *cols),
        }
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.to_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Elementwise operator selector used by [`Graph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Gelu,
    Tanh,
}

/// Operations shared by the recording tape and the eager evaluator.
///
/// All values are matrices. Binary `add`/`mul` accept either identical
/// shapes or a `1 x n` right operand broadcast over rows; nothing else.
pub trait Graph<'a> {
    type F: Scalar;

    /// Inserts a constant that does not receive gradients.
    fn constant(&mut self, data: Cow<'a, [Self::F]>, rows: usize, cols: usize) -> Result<Var>;
    fn shape(&self, v: Var) -> (usize, usize);
    fn value(&self, v: Var) -> &[Self::F];

    fn matmul(&mut self, a: Var, b: Var) -> Result<Var>;
    /// `a · bᵀ`
    fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var>;
    fn add(&mut self, a: Var, b: Var) -> Result<Var>;
    fn mul(&mut self, a: Var, b: Var) -> Result<Var>;
    fn scale(&mut self, a: Var, s: f64) -> Var;
    fn gelu(&mut self, a: Var) -> Var;
    fn tanh(&mut self, a: Var) -> Var;
    fn softmax_rows(&mut self, a: Var) -> Result<Var>;
    fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var>;
    fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var>;
    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var>;
    fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var>;
    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var>;
    fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var>;
    /// Keeps the listed columns, in order.
    fn select_cols(&mut self, a: Var, index: &[usize]) -> Result<Var>;
    /// Places column `j` of `a` at column `index[j]` of a zero matrix of
    /// the given width (zero-recovery).
    fn scatter_cols(&mut self, a: Var, index: &[usize], width: usize) -> Result<Var>;
    /// Marks an interior activation whose gradient must be retained.
    fn tap(&mut self, v: Var);

    fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (op, b) {
            (Elementwise::Add, Some(b)) => self.add(a, b),
            (Elementwise::Mul, Some(b)) => self.mul(a, b),
            (Elementwise::Gelu, None) => Ok(self.gelu(a)),
            (Elementwise::Tanh, None) => Ok(self.tanh(a)),
            (op, _) => Err(DoeError::Usage(format!(
                "wrong operand count for elementwise {op:?}"
            ))),
        }
    }

    fn constant_tensor(&mut self, t: &'a Tensor<Self::F>) -> Result<Var> {
        let (r, c) = t.as_matrix_dims();
        self.constant(Cow::Borrowed(t.data()), r, c)
    }

    /// Inserts a model weight. Frozen by default; a tape built with
    /// [`Tape::with_trainable_weights`] records it as a trainable leaf.
    fn weight(&mut self, t: &'a Tensor<Self::F>, rows: usize, cols: usize) -> Result<Var> {
        self.constant(Cow::Borrowed(t.data()), rows, cols)
    }
}

/// Shape check shared by both executors for `add`/`mul`.
pub(crate) fn broadcast_ok(a: (usize, usize), b: (usize, usize)) -> bool {
    a == b || (b.0 == 1 && b.1 == a.1)
}

pub(crate) fn bad_broadcast(op: &str, a: (usize, usize), b: (usize, usize)) -> DoeError {
    DoeError::dim(format!(
        "{op}: cannot broadcast {}x{} with {}x{}",
        b.0, b.1, a.0, a.1
    ))
}

pub(crate) fn bad_matmul(a: (usize, usize), b: (usize, usize), transposed: bool) -> DoeError {
    let t = if transposed { "ᵀ" } else { "" };
    DoeError::dim(format!(
        "matmul inner dimensions disagree: [{}x{}] · [{}x{}]{t}",
        a.0, a.1, b.0, b.1
    ))
}
