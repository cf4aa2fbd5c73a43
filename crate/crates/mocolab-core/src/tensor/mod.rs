//! Dense tensor core with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain row-major value; differentiable composition happens
//! on a [`Graph`](graph::Graph), which records op nodes in topological order
//! and replays them backwards. Raw numeric kernels live in [`kernels`] in
//! sequential and (feature `parallel`) rayon variants that produce
//! bit-identical results.

pub mod fdcheck;
pub mod graph;
pub mod kernels;
pub mod ops;

pub use fdcheck::finite_difference_check;
pub use graph::{Graph, Var};

use std::fmt;
use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Element dtype tag, also used by the binary tensor format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            other => Err(Error::Data(format!("unknown dtype tag {other}"))),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

mod sealed {
    pub trait Sealed {}
    impl Sealed for f32 {}
    impl Sealed for f64 {}
}

/// Float element type of a tensor. Implemented for `f32` and `f64` only;
/// f64 is the dtype of every verification suite, f32 is allowed for
/// training speed.
pub trait Scalar:
    sealed::Sealed
    + Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    const DTYPE: Dtype;
    /// Bytes per element in the binary format.
    const WIDTH: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: Dtype = Dtype::F32;
    const WIDTH: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn minimum(self, other: Self) -> Self {
        f32::min(self, other)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: Dtype = Dtype::F64;
    const WIDTH: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn minimum(self, other: Self) -> Self {
        f64::min(self, other)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
const TENSOR_VERSION: u16 = 1;

/// Dense n-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dimension(
                "Tensor::new",
                format!("shape {shape:?} implies {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::ZERO; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    pub fn set_requires_grad(&mut self, yes: bool) {
        self.requires_grad = yes;
    }

    pub fn needs_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Sole scalar value of a 0-d or single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::usage(
                "Tensor::item",
                format!("expected a single element, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::dimension(
                "Tensor::set_grad",
                format!(
                    "grad has {} values, tensor has {}",
                    grad.len(),
                    self.data.len()
                ),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Error if any stored value is NaN or infinite.
    pub fn validate_finite(&self, op: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::numeric(
                    op,
                    format!("non-finite value {v} at flat index {i}"),
                ));
            }
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Write in the versioned little-endian binary format:
    /// magic, version, dtype tag, rank, shape, raw values.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(16 + self.shape.len() * 8 + self.data.len() * T::WIDTH);
        buf.extend_from_slice(TENSOR_MAGIC);
        buf.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        buf.push(T::DTYPE.tag());
        buf.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let read_err = |e: std::io::Error| Error::Data(format!("tensor read failed: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(read_err)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Data("bad tensor magic bytes".into()));
        }
        let mut v2 = [0u8; 2];
        r.read_exact(&mut v2).map_err(read_err)?;
        let version = u16::from_le_bytes(v2);
        if version != TENSOR_VERSION {
            return Err(Error::Data(format!("unsupported tensor version {version}")));
        }
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag).map_err(read_err)?;
        let dtype = Dtype::from_tag(tag[0])?;
        if dtype != T::DTYPE {
            return Err(Error::Data(format!(
                "dtype mismatch: file holds {dtype}, requested {}",
                T::DTYPE
            )));
        }
        let mut r4 = [0u8; 4];
        r.read_exact(&mut r4).map_err(read_err)?;
        let rank = u32::from_le_bytes(r4) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut d8 = [0u8; 8];
            r.read_exact(&mut d8).map_err(read_err)?;
            shape.push(u64::from_le_bytes(d8) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * T::WIDTH];
        r.read_exact(&mut raw).map_err(read_err)?;
        let data = raw.chunks_exact(T::WIDTH).map(T::read_le).collect();
        Tensor::new(&shape, data)
    }
}

/// Flat index into a B x C x H x W tensor.
#[inline(always)]
pub fn idx4(c_len: usize, h_len: usize, w_len: usize, b: usize, c: usize, h: usize, w: usize) -> usize {
    ((b * c_len + c) * h_len + h) * w_len + w
}
