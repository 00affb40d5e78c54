//! Dense tensor kernels: convolution, resampling, pointwise nonlinearities,
//! a parameter store, a reverse-mode tape and a finite-difference checker.
//!
//! All training math runs in `f64`.

mod conv;
mod feature_map;
mod gradcheck;
mod params;
mod pointwise;
mod resample;
pub mod tape;

pub use conv::{conv2d, conv2d_backward, ConvSpec, ConvWorkspace};
pub use feature_map::FeatureMap;
pub use gradcheck::{
    finite_diff_check, finite_diff_check_with_floor, GradCheckReport, NEGLIGIBLE_GRAD,
};
pub use params::{ParamId, ParamInfo, ParamStore};
pub use pointwise::{
    avg_pool2, avg_pool2_backward, pointwise, pointwise_backward, sigmoid, Pointwise,
};
pub use resample::{bilinear_upsample, resize_bilinear, resize_bilinear_backward};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("channel mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("{what}: expected length {expected}, got {actual}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// `c = alpha * a * b + beta * c` for row-major slices, with optional transposes.
///
/// `a` is `m x k`, `b` is `k x n`, `c` is `m x n` after applying the transpose flags.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k, "gemm: a too short");
    assert!(b.len() >= k * n, "gemm: b too short");
    assert!(c.len() >= m * n, "gemm: c too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: bounds asserted above; strides describe dense row-major storage.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
