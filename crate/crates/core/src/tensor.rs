//! Dense five-axis tensors (`N×C×D×H×W`) and the scalar abstraction shared by
//! the network and the loss functions.
//!
//! Training runs in `f32`; gradient checks run the same code in `f64`.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point type the network can be instantiated with.
pub trait Real: Float + Default + Debug + Send + Sync + AddAssign + SubAssign + MulAssign + 'static {
    /// `c = alpha * a·b + beta * c` with arbitrary row/column strides.
    ///
    /// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

macro_rules! check_extent {
    ($len:expr, $rows:expr, $cols:expr, $rs:expr, $cs:expr) => {
        if $rows > 0 && $cols > 0 {
            let last = ($rows as isize - 1) * $rs + ($cols as isize - 1) * $cs;
            assert!(
                $rs >= 0 && $cs >= 0 && (last as usize) < $len,
                "gemm operand out of bounds"
            );
        }
    };
}

impl Real for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        check_extent!(a.len(), m, k, rsa, csa);
        check_extent!(b.len(), k, n, rsb, csb);
        check_extent!(c.len(), m, n, rsc, csc);
        // SAFETY: every operand extent was bounds-checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        check_extent!(a.len(), m, k, rsa, csa);
        check_extent!(b.len(), k, n, rsb, csb);
        check_extent!(c.len(), m, n, rsc, csc);
        // SAFETY: every operand extent was bounds-checked above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Spatial extent `[D, H, W]`.
pub type Dims3 = [usize; 3];

pub fn voxel_count(dims: Dims3) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// Row-major `N×C×D×H×W` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 5],
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 5], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::shape(shape, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> Dims3 {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.spatial())
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Elements of sample `n` (all channels).
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.shape[1] * self.voxels();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.shape[1] * self.voxels();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Voxels of channel `c` of sample `n`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let v = self.voxels();
        let start = (n * self.shape[1] + c) * v;
        &self.data[start..start + v]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let v = self.voxels();
        let start = (n * self.shape[1] + c) * v;
        &mut self.data[start..start + v]
    }

    /// Samples `[start, end)` as a new tensor.
    pub fn slice_batch(&self, start: usize, end: usize) -> Self {
        let len = self.shape[1] * self.voxels();
        let mut shape = self.shape;
        shape[0] = end - start;
        Self {
            shape,
            data: self.data[start * len..end * len].to_vec(),
        }
    }

    /// Concatenate along the batch axis.
    pub fn cat_batch(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("cannot concatenate zero tensors".into()))?;
        let mut shape = first.shape;
        shape[0] = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::shape(first.shape, p.shape));
            }
            shape[0] += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Self { shape, data })
    }

    /// Concatenate two tensors along the channel axis.
    pub fn cat_channels(a: &Tensor<T>, b: &Tensor<T>) -> Result<Self> {
        if a.shape[0] != b.shape[0] || a.spatial() != b.spatial() {
            return Err(Error::shape(a.shape, b.shape));
        }
        let [n, ca, ..] = a.shape;
        let cb = b.shape[1];
        let mut shape = a.shape;
        shape[1] = ca + cb;
        let mut data = Vec::with_capacity(shape.iter().product());
        for i in 0..n {
            data.extend_from_slice(a.sample(i));
            data.extend_from_slice(b.sample(i));
        }
        Ok(Self { shape, data })
    }

    /// Inverse of [`Tensor::cat_channels`]: split off the first `ca` channels.
    pub fn split_channels(&self, ca: usize) -> (Self, Self) {
        let [n, c, d, h, w] = self.shape;
        let v = self.voxels();
        let mut a = Vec::with_capacity(n * ca * v);
        let mut b = Vec::with_capacity(n * (c - ca) * v);
        for i in 0..n {
            let s = self.sample(i);
            a.extend_from_slice(&s[..ca * v]);
            b.extend_from_slice(&s[ca * v..]);
        }
        (
            Self {
                shape: [n, ca, d, h, w],
                data: a,
            },
            Self {
                shape: [n, c - ca, d, h, w],
                data: b,
            },
        )
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: T) {
        for a in &mut self.data {
            *a *= k;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|x| U::from_f64(x.as_f64())).collect(),
        }
    }

    /// Zero-pad the spatial axes: `before[i]` voxels in front, `after[i]` behind.
    pub fn pad(&self, before: Dims3, after: Dims3) -> Self {
        let [n, c, d, h, w] = self.shape;
        let nd = [
            d + before[0] + after[0],
            h + before[1] + after[1],
            w + before[2] + after[2],
        ];
        let mut out = Self::zeros([n, c, nd[0], nd[1], nd[2]]);
        for i in 0..n {
            for ch in 0..c {
                let src = self.plane(i, ch);
                let dst = out.plane_mut(i, ch);
                for z in 0..d {
                    for y in 0..h {
                        let s = (z * h + y) * w;
                        let t = ((z + before[0]) * nd[1] + y + before[1]) * nd[2] + before[2];
                        dst[t..t + w].copy_from_slice(&src[s..s + w]);
                    }
                }
            }
        }
        out
    }

    /// Extract the spatial window starting at `offset` with extent `size`.
    pub fn crop(&self, offset: Dims3, size: Dims3) -> Self {
        let [n, c, _, h, w] = self.shape;
        let mut out = Self::zeros([n, c, size[0], size[1], size[2]]);
        for i in 0..n {
            for ch in 0..c {
                let src = self.plane(i, ch);
                let dst = out.plane_mut(i, ch);
                for z in 0..size[0] {
                    for y in 0..size[1] {
                        let s = ((z + offset[0]) * h + y + offset[1]) * w + offset[2];
                        let t = (z * size[1] + y) * size[2];
                        dst[t..t + size[2]].copy_from_slice(&src[s..s + size[2]]);
                    }
                }
            }
        }
        out
    }
}
