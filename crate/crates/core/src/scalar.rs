use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating-point scalar the whole pipeline is generic over.
///
/// Everything numeric downstream (poses, depths, features, rates, metrics)
/// goes through this trait, so swapping `f32` for `f64` is a type alias
/// change at the crate root rather than a rewrite.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from f64 for config values and file data.
    fn from_f64_cfg(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 must convert to scalar")
    }

    /// Conversion to f64 for serialization.
    fn to_f64_out(self) -> f64 {
        self.to_f64().expect("scalar must convert to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dot product of equal-length slices.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum()
}

/// Euclidean norm.
pub fn norm<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// Scales `v` to unit length in place. Returns false (leaving `v` untouched)
/// when the norm is zero or not finite, so callers can decide what a
/// degenerate feature means.
pub fn normalize<T: Scalar>(v: &mut [T]) -> bool {
    let n = norm(v);
    if n <= T::zero() || !n.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x = *x / n;
    }
    true
}

/// Cosine similarity. Zero-norm inputs yield 0 rather than NaN.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let na = norm(a);
    let nb = norm(b);
    if na <= T::zero() || nb <= T::zero() {
        return T::zero();
    }
    dot(a, b) / (na * nb)
}
