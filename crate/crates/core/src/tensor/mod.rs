//! Dense tensors, the operator kernels the network needs, and a small
//! reverse-mode tape on top of them.
//!
//! Tensors are plain row-major buffers; 4-D feature maps are laid out as
//! (batch, channel, height, width) with width fastest. All kernels are
//! generic over [`Scalar`] so that training runs in `f32` while gradient
//! verification runs the exact same code in `f64`.

pub mod gradcheck;
mod graph;
pub mod kernels;
mod param;

use std::fmt::{Debug, Display};
use std::io::{BufRead, Write};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

pub use graph::{Gradients, Graph, Var};
pub use param::{BufferId, ParamId, ParamStore, Parameter};

/// Floating-point element type of a tensor.
pub trait Scalar:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// Name used in the `TNSR` header.
    const DTYPE: &'static str;
    const BYTES: usize;

    fn c(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `C = alpha * A * B + beta * C` with arbitrary (row, column) strides.
    ///
    /// # Safety
    /// Strides and extents must describe memory inside the given slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    #[inline]
    fn c(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    #[inline]
    fn c(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
}

/// A dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape)?;
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::dim(
                "tensor",
                "data",
                format!("shape {shape:?} needs {len} elements, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a tensor whose shape is known to be valid.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(shape.iter().all(|&d| d >= 1), "zero extent in {shape:?}");
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// (N, C, H, W) extents of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::dim(
                "tensor",
                "rank",
                format!("expected rank 4, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim(
                "reshape",
                "shape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a += b);
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::c(v.as_f64())).collect(),
        }
    }

    /// Writes the `TNSR v1` block: a text header line followed by the raw
    /// little-endian buffer.
    pub fn write_tnsr(&self, out: &mut impl Write) -> Result<()> {
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        writeln!(out, "TNSR v1 dtype={} shape={}", T::DTYPE, dims.join(","))?;
        let mut bytes = Vec::with_capacity(self.data.len() * T::BYTES);
        self.data.iter().for_each(|v| v.write_le(&mut bytes));
        out.write_all(&bytes)?;
        Ok(())
    }

    /// Reads one `TNSR v1` block, converting from the stored dtype if needed.
    pub fn read_tnsr(input: &mut impl BufRead) -> Result<Self> {
        let mut header = Vec::new();
        input.read_until(b'\n', &mut header)?;
        if header.is_empty() {
            return Err(Error::format("tensor header", "unexpected end of input"));
        }
        let header =
            String::from_utf8(header).map_err(|_| Error::format("tensor header", "not utf-8"))?;
        let mut fields = header.trim_end().split(' ');
        if fields.next() != Some("TNSR") || fields.next() != Some("v1") {
            return Err(Error::format(
                "tensor header",
                format!("bad magic in {header:?}"),
            ));
        }
        let dtype = fields
            .next()
            .and_then(|f| f.strip_prefix("dtype="))
            .ok_or_else(|| Error::format("tensor dtype", header.clone()))?;
        let shape: Vec<usize> = fields
            .next()
            .and_then(|f| f.strip_prefix("shape="))
            .ok_or_else(|| Error::format("tensor shape", header.clone()))?
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format("tensor shape", e.to_string()))?;
        check_shape(&shape).map_err(|e| Error::format("tensor shape", e.to_string()))?;
        let len: usize = shape.iter().product();
        let width = match dtype {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::format("tensor dtype", format!("unknown {other}"))),
        };
        let mut raw = vec![0u8; len * width];
        input
            .read_exact(&mut raw)
            .map_err(|_| Error::format("tensor data", "truncated buffer"))?;
        let data = raw
            .chunks_exact(width)
            .map(|b| {
                if width == 4 {
                    T::c(f32::read_le(b) as f64)
                } else {
                    T::c(f64::read_le(b))
                }
            })
            .collect();
        Ok(Self { shape, data })
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::dim(
            "tensor",
            "shape",
            format!("extents must be >= 1, got {shape:?}"),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_buffer() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn tnsr_round_trip_is_bit_exact() {
        let t = Tensor::<f32>::from_fn(&[2, 3, 1, 2], |i| (i as f32).sin() * 1e-3);
        let mut buf = Vec::new();
        t.write_tnsr(&mut buf).unwrap();
        assert!(buf.starts_with(b"TNSR v1 dtype=f32 shape=2,3,1,2\n"));
        let back = Tensor::<f32>::read_tnsr(&mut &buf[..]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn tnsr_truncated_is_error() {
        let t = Tensor::<f64>::zeros(&[4]);
        let mut buf = Vec::new();
        t.write_tnsr(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            Tensor::<f64>::read_tnsr(&mut &buf[..]),
            Err(Error::Format { .. })
        ));
    }
}
