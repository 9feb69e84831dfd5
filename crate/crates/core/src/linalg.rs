//! Complex vector/matrix aliases and the handful of helpers shared across modules.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub type C64 = Complex64;
pub type CVector = DVector<C64>;
pub type CMatrix = DMatrix<C64>;

pub const J: C64 = C64::new(0.0, 1.0);

/// Squared Euclidean norm of a complex vector.
pub fn norm_sqr(v: &CVector) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

/// Squared Frobenius norm of a complex matrix.
pub fn fro_sqr(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum()
}

/// `a^H b`.
pub fn inner(a: &CVector, b: &CVector) -> C64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

/// Real-valued counterpart `[Re(a); Im(a)]`.
pub fn to_real(a: &CVector) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * a.len());
    out.extend(a.iter().map(|z| z.re));
    out.extend(a.iter().map(|z| z.im));
    out
}

/// Inverse of [`to_real`]. Panics if the slice length is odd.
pub fn from_real(x: &[f64]) -> CVector {
    assert!(
        x.len().is_multiple_of(2),
        "real representation must have even length"
    );
    let n = x.len() / 2;
    CVector::from_iterator(n, (0..n).map(|i| C64::new(x[i], x[n + i])))
}

/// Circularly-symmetric complex Gaussian sample with variance `var` (per complex entry).
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> C64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re * s, im * s)
}

pub fn complex_gaussian_vector<R: Rng + ?Sized>(rng: &mut R, n: usize, var: f64) -> CVector {
    CVector::from_iterator(n, (0..n).map(|_| complex_gaussian(rng, var)))
}

/// Stack column vectors into an `N x K` matrix.
pub fn stack_columns(cols: &[CVector]) -> CMatrix {
    assert!(!cols.is_empty(), "cannot stack an empty column list");
    CMatrix::from_columns(cols)
}

/// Indices of the `k` largest values, ties broken by the lower index. Output sorted by value descending.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}
