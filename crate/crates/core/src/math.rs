//! Small numeric helpers shared across the crate.

use nalgebra::{DMatrix, DVector};

/// Logistic function, computed on the stable side of the exponential so large
/// |a| never produces inf/inf.
#[inline]
pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Componentwise logistic of a vector.
#[inline]
pub fn sigmoid_vec(v: &DVector<f64>) -> DVector<f64> {
    v.map(sigmoid)
}

/// Componentwise tanh of a vector.
#[inline]
pub fn tanh_vec(v: &DVector<f64>) -> DVector<f64> {
    v.map(f64::tanh)
}

/// Max absolute entry of a vector; 0 for an empty vector.
#[inline]
pub fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Induced infinity norm of a matrix: the largest absolute row sum.
pub fn induced_inf_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Induced infinity norm of the block row [w, scale * u, b] without
/// materialising the concatenation.
pub fn concat_inf_norm(w: &DMatrix<f64>, u: &DMatrix<f64>, b: &DVector<f64>, scale: f64) -> f64 {
    (0..w.nrows())
        .map(|i| {
            let row_w: f64 = w.row(i).iter().map(|x| x.abs()).sum();
            let row_u: f64 = u.row(i).iter().map(|x| x.abs()).sum();
            row_w + scale * row_u + b[i].abs()
        })
        .fold(0.0, f64::max)
}

pub(crate) fn all_finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

pub(crate) fn all_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Decimal rendering with 17 significant digits, enough for `parse::<f64>()`
/// to reconstruct the exact bit pattern. Used by all CSV writers.
pub(crate) fn full_precision(v: f64) -> String {
    format!("{v:.16e}")
}
