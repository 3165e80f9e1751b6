use std::fmt::Debug;

/// Floating point type the metric formulas are written against.
pub trait Scalar: num_traits::Float + Debug + Default + Send + Sync + 'static {
    /// Lossless-enough conversion for small literal constants.
    fn lit(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("literal fits in scalar type")
    }
}

impl<T: num_traits::Float + Debug + Default + Send + Sync + 'static> Scalar for T {}

/// Cosine similarity of two vectors. Returns zero when either vector has zero
/// norm or the lengths differ.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> T {
    if a.len() != b.len() || a.is_empty() {
        return T::zero();
    }
    let mut dot = T::zero();
    let mut na = T::zero();
    let mut nb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
        na = na + x * x;
        nb = nb + y * y;
    }
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    dot / (na.sqrt() * nb.sqrt())
}
