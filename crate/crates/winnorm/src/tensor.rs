//! Dense rank-4 tensors (N, C, H, W) in row-major layout, plus the WT4
//! on-disk format.
//!
//! Training math runs in f32; a f64 instantiation of the same code exists
//! for gradient and oracle tests, where finite differences need the extra
//! precision.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::Path;

use crate::error::{Error, Result};

/// Scalar type for all tensor math. Implemented for f32 (training) and
/// f64 (oracle/gradient tests).
pub trait Real:
    Copy
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            fn maximum(self, other: Self) -> Self {
                self.max(other)
            }
            fn minimum(self, other: Self) -> Self {
                self.min(other)
            }
        }
    };
}
impl_real!(f32);
impl_real!(f64);

/// Dims of a rank-4 tensor.
pub type Dims4 = (usize, usize, usize, usize);

/// Dense N x C x H x W tensor. Layout index = ((n*C + c)*H + h)*W + w.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T: Real> {
    dims: Dims4,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Tensor4<T> {
    pub fn new(dims: Dims4, data: Vec<T>) -> Result<Self> {
        let expect = dims.0 * dims.1 * dims.2 * dims.3;
        if data.len() != expect {
            return Err(Error::shape(
                "Tensor4::new",
                format!("dims {dims:?} need {expect} scalars, got {}", data.len()),
            ));
        }
        Ok(Tensor4 { dims, data, requires_grad: false, grad: None })
    }

    pub fn zeros(dims: Dims4) -> Self {
        Tensor4 {
            dims,
            data: vec![T::ZERO; dims.0 * dims.1 * dims.2 * dims.3],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(dims: Dims4, value: T) -> Self {
        Tensor4 {
            dims,
            data: vec![value; dims.0 * dims.1 * dims.2 * dims.3],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor4 { dims: (1, 1, 1, 1), data: vec![value], requires_grad: false, grad: None }
    }

    pub fn from_fn(dims: Dims4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let (n, c, h, w) = dims;
        let mut data = Vec::with_capacity(n * c * h * w);
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        data.push(f(ni, ci, hi, wi));
                    }
                }
            }
        }
        Tensor4 { dims, data, requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn dims(&self) -> Dims4 {
        self.dims
    }

    pub fn n(&self) -> usize {
        self.dims.0
    }
    pub fn c(&self) -> usize {
        self.dims.1
    }
    pub fn h(&self) -> usize {
        self.dims.2
    }
    pub fn w(&self) -> usize {
        self.dims.3
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims.1 + c) * self.dims.2 + h) * self.dims.3 + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.idx(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.idx(n, c, h, w);
        self.data[i] = v;
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

    /// Value of a 1x1x1x1 tensor.
    pub fn item(&self) -> Result<T> {
        if self.len() != 1 {
            return Err(Error::shape("Tensor4::item", format!("dims {:?} not scalar", self.dims)));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert scalar type (used to move fixtures between f32 and f64).
    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn fill_random_uniform(dims: Dims4, rng: &mut crate::rng::RngStream, lo: f64, hi: f64) -> Self {
        let len = dims.0 * dims.1 * dims.2 * dims.3;
        let data = (0..len).map(|_| T::from_f64(lo + (hi - lo) * rng.uniform())).collect();
        Tensor4 { dims, data, requires_grad: false, grad: None }
    }

    pub fn fill_random_normal(dims: Dims4, rng: &mut crate::rng::RngStream, std: f64) -> Self {
        let len = dims.0 * dims.1 * dims.2 * dims.3;
        let data = (0..len).map(|_| T::from_f64(std * rng.normal())).collect();
        Tensor4 { dims, data, requires_grad: false, grad: None }
    }
}

// ---------------------------------------------------------------------------
// WT4 v1 file format: magic "WT4\0", four u32 LE dims (N, C, H, W), then
// N*C*H*W little-endian f32 values, row-major.
// ---------------------------------------------------------------------------

const WT4_MAGIC: [u8; 4] = *b"WT4\0";

pub fn write_wt4(path: &Path, t: &Tensor4<f32>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| -> Result<()> {
        w.write_all(bytes).map_err(|e| Error::io(path.display().to_string(), e))
    };
    write(&WT4_MAGIC)?;
    let (n, c, h, wd) = t.dims();
    for d in [n, c, h, wd] {
        let d32 = u32::try_from(d)
            .map_err(|_| Error::Integrity(format!("dim {d} exceeds u32 in WT4 write")))?;
        write(&d32.to_le_bytes())?;
    }
    for v in t.data() {
        write(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_wt4(path: &Path) -> Result<Tensor4<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path.display().to_string(), e))?;
    if magic != WT4_MAGIC {
        return Err(Error::Integrity(format!(
            "{}: bad WT4 magic {magic:?}",
            path.display()
        )));
    }
    let mut dim_bytes = [0u8; 16];
    r.read_exact(&mut dim_bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    let dim = |i: usize| u32::from_le_bytes(dim_bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let dims = (dim(0), dim(1), dim(2), dim(3));
    let count = dims.0 * dims.1 * dims.2 * dims.3;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::io(path.display().to_string(), e))?;
    if payload.len() != count * 4 {
        return Err(Error::Integrity(format!(
            "{}: WT4 payload is {} bytes, dims {dims:?} need {}",
            path.display(),
            payload.len(),
            count * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor4::new(dims, data)
}
