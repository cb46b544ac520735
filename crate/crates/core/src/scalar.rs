//! Scalar abstraction shared by the model, losses and statistics.
//!
//! Everything numeric in this crate is written against [`Scalar`], which is
//! implemented for `f32` (training default) and `f64` (gradient checks and
//! statistics oracles).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short name written into checkpoint headers.
    const NAME: &'static str;

    /// `c = alpha * a * b + beta * c` on strided row/column-major buffers.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; strides are in elements.
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

    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8>;

    fn from_le_bytes_slice(bytes: &[u8]) -> Option<Vec<Self>>;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_bounds(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path, $width:literal) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

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
                check_bounds(a.len(), m, k, rsa, csa);
                check_bounds(b.len(), k, n, rsb, csb);
                check_bounds(c.len(), m, n, rsc, csc);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every operand extent was bounds-checked above.
                unsafe {
                    $gemm(
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

            fn to_le_bytes_vec(values: &[Self]) -> Vec<u8> {
                values.iter().flat_map(|v| v.to_le_bytes()).collect()
            }

            fn from_le_bytes_slice(bytes: &[u8]) -> Option<Vec<Self>> {
                if bytes.len() % $width != 0 {
                    return None;
                }
                Some(
                    bytes
                        .chunks_exact($width)
                        .map(|c| <$t>::from_le_bytes(c.try_into().expect("chunk width")))
                        .collect(),
                )
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm, 4);
impl_scalar!(f64, "f64", matrixmultiply::dgemm, 8);

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_product() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0; m * n];
        f64::gemm(m, k, n, 1.0, &a, k as isize, 1, &b, n as isize, 1, 0.0, &mut c, n as isize, 1);
        for (x, y) in c.iter().zip(naive(m, k, n, &a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_operand_via_strides() {
        // a stored as k x m, read transposed
        let (m, k, n) = (2, 3, 2);
        let at = [1.0f32, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [1.0f32, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0f32; 4];
        f32::gemm(m, k, n, 1.0, &at, 1, m as isize, &b, n as isize, 1, 0.0, &mut c, n as isize, 1);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
    }

    #[test]
    fn byte_round_trip() {
        let v = [1.5f64, -0.25, f64::MAX];
        let bytes = f64::to_le_bytes_vec(&v);
        assert_eq!(f64::from_le_bytes_slice(&bytes).unwrap(), v);
        assert!(f32::from_le_bytes_slice(&bytes[..3]).is_none());
    }
}
