//! Dense row-major tensors and named parameter sets.
//!
//! Everything in the crate is generic over [`Real`], which is implemented for
//! `f32` (storage and training) and `f64` (gradient verification). Matrix
//! products go through `matrixmultiply`, which is deterministic for a fixed
//! build and CPU.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c` where `a` is `m x k`, `b` is `k x n` and
    /// `c` is `m x n`. Strides are given as (row stride, column stride) in
    /// elements, so transposed operands are expressed by swapping them.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion to f64")
    }
}

fn check_span(len: usize, rows: usize, cols: usize, (rs, cs): (usize, usize), what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs + (cols - 1) * cs;
    assert!(last < len, "gemm operand {what} out of bounds ({last} >= {len})");
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                check_span(a.len(), m, k, a_strides, "a");
                check_span(b.len(), k, n, b_strides, "b");
                check_span(c.len(), m, n, c_strides, "c");
                // SAFETY: every operand's extent was bounds-checked above
                // against its slice, and `c` is uniquely borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense tensor with row-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} contain a zero extent"),
            ));
        }
        let len = checked_len(dims)?;
        if len != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} need {len} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Tensor {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let len = checked_len(dims)?;
        if len != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {dims:?}", self.dims),
            ));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn flatten(self) -> Self {
        let n = self.data.len();
        Tensor {
            dims: vec![n],
            data: self.data,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.dims[self.dims.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.dims, other.dims),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v.f64() * v.f64()).sum()
    }
}

fn checked_len(dims: &[usize]) -> Result<usize> {
    dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| Error::shape("tensor", format!("dims {dims:?} overflow")))
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f32> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Ordered map of named parameter tensors.
///
/// Names are unique and iteration order is lexicographic, which keeps
/// checkpoints and gradient sampling deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T = f32> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        self.insert_param(name, value, true)
    }

    pub fn insert_param(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        trainable: bool,
    ) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, Param { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.entries.values_mut() {
            p.trainable = trainable;
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// A parameter set with the same names and shapes, filled with zeros.
    pub fn zeros_like(&self) -> Self {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: Tensor::zeros(p.value.dims()),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Overwrite values, keeping names and shapes fixed.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.dims() != value.dims() {
            return Err(Error::shape(
                "assign",
                format!("`{name}` is {:?}, got {:?}", slot.dims(), value.dims()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Copy of the entries under `prefix.`, with the prefix stripped.
    pub fn extract(&self, prefix: &str) -> ParamSet<T> {
        let lead = format!("{prefix}.");
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, p)| k.strip_prefix(&lead).map(|s| (s.to_string(), p.clone())))
                .collect(),
        }
    }

    /// Insert all entries of `other` under `prefix.`.
    pub fn absorb(&mut self, prefix: &str, other: &ParamSet<T>) -> Result<()> {
        for (k, p) in &other.entries {
            self.insert_param(format!("{prefix}.{k}"), p.value.clone(), p.trainable)?;
        }
        Ok(())
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.entries
            .iter()
            .map(|(k, p)| (k.clone(), p.value.dims().to_vec()))
            .collect()
    }
}
