//! Dense row-major arrays in single or double precision.
//!
//! The element type is chosen statically: training runs in `f32`, all
//! gradient and invariant verification runs in `f64`. Both share one code
//! path through the [`Scalar`] trait, so switching precision never changes
//! the sequence of arithmetic operations.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element precision tag used by the on-disk format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "f32")]
    Single,
    #[serde(rename = "f64")]
    Double,
}

/// Floating-point element type. Implemented for `f32` and `f64` only.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;
    const ZERO: Self;
    const ONE: Self;
    const NEG_INFINITY: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite_s(self) -> bool;
    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(b: &[u8]) -> Self;
    fn byte_width() -> usize;

    fn sqrt_s(self) -> Self;
    fn exp_s(self) -> Self;
    fn ln_s(self) -> Self;
    fn abs_s(self) -> Self;
    fn sin_s(self) -> Self;
    fn cos_s(self) -> Self;
    #[inline]
    fn max_s(self, o: Self) -> Self {
        if self > o {
            self
        } else {
            o
        }
    }
    #[inline]
    fn min_s(self, o: Self) -> Self {
        if self < o {
            self
        } else {
            o
        }
    }
}

macro_rules! impl_scalar {
    ($t:ty, $prec:expr, $w:expr) => {
        impl Scalar for $t {
            const PRECISION: Precision = $prec;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const NEG_INFINITY: Self = <$t>::NEG_INFINITY;

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn is_finite_s(self) -> bool {
                self.is_finite()
            }
            fn to_le_bytes_vec(self) -> Vec<u8> {
                self.to_le_bytes().to_vec()
            }
            fn from_le_slice(b: &[u8]) -> Self {
                <$t>::from_le_bytes(b.try_into().expect("byte width"))
            }
            fn byte_width() -> usize {
                $w
            }

            #[inline]
            fn sqrt_s(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn exp_s(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln_s(self) -> Self {
                self.ln()
            }
            #[inline]
            fn abs_s(self) -> Self {
                self.abs()
            }
            #[inline]
            fn sin_s(self) -> Self {
                self.sin()
            }
            #[inline]
            fn cos_s(self) -> Self {
                self.cos()
            }
        }
    };
}

impl_scalar!(f32, Precision::Single, 4);
impl_scalar!(f64, Precision::Double, 8);

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Build from shape and data, rejecting length mismatches and
    /// non-finite values.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {:?} wants {} elements, got {}", shape, n, data.len()),
            ));
        }
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite_s() {
                return Err(Error::NonFinite {
                    op: "tensor",
                    index: i,
                });
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for op outputs; skips the finiteness scan.
    pub(crate) fn from_vec_unchecked(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::ZERO; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// Standard-normal entries scaled by `std`, keyed by `key`.
    pub fn randn(shape: Vec<usize>, std: f64, key: crate::rng::Key) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| T::from_f64(key.gauss_at(i as u64) * std))
            .collect();
        Tensor { shape, data }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Interpret as rows x columns where the last extent is the column
    /// count and all leading extents are folded into rows.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let c = *self.shape.last().unwrap();
                (self.data.len() / c.max(1), c)
            }
        }
    }

    /// Replace the shape with an equal-volume one.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite_s())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    /// Cast element-wise to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Serialize: one JSON header line, then raw little-endian values.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = Header {
            shape: self.shape.clone(),
            precision: T::PRECISION,
        };
        let mut line = serde_json::to_string(&header)?;
        line.push('\n');
        w.write_all(line.as_bytes())?;
        let mut bytes = Vec::with_capacity(self.data.len() * T::byte_width());
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes_vec());
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut header_bytes = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            r.read_exact(&mut byte)?;
            if byte[0] == b'\n' {
                break;
            }
            header_bytes.push(byte[0]);
            if header_bytes.len() > 1 << 16 {
                return Err(Error::format("tensor header line exceeds 64 KiB"));
            }
        }
        let header: Header = serde_json::from_slice(&header_bytes)?;
        if header.precision != T::PRECISION {
            return Err(Error::format(format!(
                "precision mismatch: file has {:?}, expected {:?}",
                header.precision,
                T::PRECISION
            )));
        }
        let n: usize = header.shape.iter().product();
        let mut buf = vec![0u8; n * T::byte_width()];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(T::byte_width())
            .map(T::from_le_slice)
            .collect();
        Ok(Tensor {
            shape: header.shape,
            data,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
    precision: Precision,
}

/// Peek at a serialized tensor's precision without reading the payload.
pub fn peek_precision(path: impl AsRef<std::path::Path>) -> Result<Precision> {
    use std::io::BufRead;
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let line = f
        .lines()
        .next()
        .ok_or_else(|| Error::format("empty tensor file"))??;
    let header: Header = serde_json::from_str(&line)?;
    Ok(header.precision)
}
