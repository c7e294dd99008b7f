//! CPU tensor kernels and the V-Net used for both segmentation stages.
//!
//! Layers carry explicit forward/backward passes with their own caches
//! rather than a general autodiff tape. Everything is generic over
//! [`Real`] so gradient checks can run in `f64` while training runs in
//! `f32`.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod tensor;
pub mod vnet;

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

pub use adam::AdamState;
pub use layers::{softmax_cross_entropy, ConvGrads};
pub use tensor::{Param, Tensor};
pub use vnet::{VNet, VNetConfig, VNetModel};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("spatial axis {axis} has odd size {size}; cannot downsample")]
    OddDimension { axis: usize, size: usize },
    #[error("spatial dims {dims:?} are not divisible by {factor}")]
    IndivisibleDims { dims: [usize; 3], factor: usize },
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Floating-point scalar with a matching GEMM kernel.
pub trait Real: Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + AddAssign + SubAssign + MulAssign + 'static {
    /// `C = alpha * A * B + beta * C` on strided row/column layouts
    /// (`m x k` times `k x n`).
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-aliasing
    /// (for `c`) matrices of the stated sizes.
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

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits")
    }
}

impl Real for f32 {
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
}

impl Real for f64 {
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
}

/// Row-major matrix view used by the GEMM wrapper.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a, T> Mat<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs as usize + (self.cols - 1) * self.cs as usize
        }
    }
}

/// `c = alpha * a * b + beta * c`, where `c` is row-major with row stride `rsc`.
pub(crate) fn gemm<T: Real>(alpha: T, a: Mat<T>, b: Mat<T>, beta: T, c: &mut [T], rsc: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert!(a.data.len() > a.max_offset() || a.rows * a.cols == 0);
    assert!(b.data.len() > b.max_offset() || b.rows * b.cols == 0);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= (m - 1) * rsc + n, "gemm output too small");
    // SAFETY: the assertions above bound every index the kernel touches, and
    // `c` is a unique borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5 - 2.0).collect(); // 3x4
        let mut c = vec![1.0; 8];
        gemm(2.0, Mat::row_major(&a, 2, 3), Mat::row_major(&b, 3, 4), 1.0, &mut c, 4);
        for i in 0..2 {
            for j in 0..4 {
                let s: f64 = (0..3).map(|l| a[i * 3 + l] * b[l * 4 + j]).sum();
                assert!((c[i * 4 + j] - (1.0 + 2.0 * s)).abs() < 1e-12);
            }
        }
        // Transposed view: (3x2)^T (2x3) ... a^T is 3x2.
        let mut d = vec![0.0; 9];
        gemm(1.0, Mat::row_major(&a, 2, 3).t(), Mat::row_major(&a, 2, 3), 0.0, &mut d, 3);
        assert_eq!(d[0], 0.0 * 0.0 + 3.0 * 3.0);
        assert_eq!(d[4], 1.0 + 16.0);
    }
}
