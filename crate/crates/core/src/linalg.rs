//! Small dense numerical helpers shared by the head, the recursive engine and the ensemble.

use nalgebra::{DMatrix, DVector};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Smallest diagonal a downdated Cholesky factor may keep.
pub const DOWNDATE_FLOOR: f64 = 1e-12;

/// `log(sum(exp(xs)))`, `-inf` for an empty or all-`-inf` slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Log density of `N(mean, var)` at `x`.
pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + (x - mean) * (x - mean) / var)
}

/// In-place rank-1 downdate: on success `L Lᵀ` becomes `L Lᵀ - x xᵀ`.
///
/// Returns `false` (leaving `l` partially modified) when a diagonal would fall
/// below [`DOWNDATE_FLOOR`]; callers must restore from a copy in that case.
pub fn cholesky_downdate(l: &mut DMatrix<f64>, x: &DVector<f64>) -> bool {
    let n = l.nrows();
    let mut x = x.clone();
    for k in 0..n {
        let lkk = l[(k, k)];
        let r2 = lkk * lkk - x[k] * x[k];
        if !(r2 > DOWNDATE_FLOOR * DOWNDATE_FLOOR) {
            return false;
        }
        let r = r2.sqrt();
        if r < DOWNDATE_FLOOR {
            return false;
        }
        let c = r / lkk;
        let s = x[k] / lkk;
        l[(k, k)] = r;
        for i in (k + 1)..n {
            let lik = (l[(i, k)] - s * x[i]) / c;
            x[i] = c * x[i] - s * lik;
            l[(i, k)] = lik;
        }
    }
    true
}

/// Lower Cholesky factor of a symmetric matrix, symmetrizing first.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    nalgebra::Cholesky::new(sym).map(|c| c.unpack())
}

/// Zeroes the strict upper triangle.
pub fn lower_triangle(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    out.fill_upper_triangle(0.0, 1);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_is_stable() {
        assert!((logsumexp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert!((logsumexp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn downdate_matches_dense() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let x = DVector::from_vec(vec![0.5, 0.3, -0.4]);
        let mut l = cholesky_lower(&a).unwrap();
        assert!(cholesky_downdate(&mut l, &x));
        let expected = &a - &x * x.transpose();
        assert!((&l * l.transpose() - expected).amax() < 1e-13);
    }

    #[test]
    fn downdate_refuses_indefinite_result() {
        let mut l = DMatrix::identity(2, 2);
        assert!(!cholesky_downdate(&mut l, &DVector::from_vec(vec![1.0, 0.0])));
    }
}
