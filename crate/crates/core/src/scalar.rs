//! Floating-point scalar abstraction shared by every solver.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar type the library is generic over (`f32` or `f64`).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal into the scalar type.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    /// Widens the value to `f64`.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (x, y)| acc + *x * *y)
}

#[inline]
pub(crate) fn norm<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

/// Quadratic form `v^T m v` with `m` square of side `v.len()`.
#[inline]
pub(crate) fn quad_form<S: Scalar>(m: &[S], v: &[S]) -> S {
    let n = v.len();
    let mut acc = S::zero();
    for i in 0..n {
        for j in 0..n {
            acc += v[i] * m[i * n + j] * v[j];
        }
    }
    acc
}

pub(crate) fn symmetrize<S: Scalar>(m: &mut [S], n: usize) {
    let half = S::lit(0.5);
    for i in 0..n {
        for j in (i + 1)..n {
            let s = (m[i * n + j] + m[j * n + i]) * half;
            m[i * n + j] = s;
            m[j * n + i] = s;
        }
    }
}
