use nalgebra::{DMatrix, DVector};

/// Largest condition number accepted before a system is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// 2-norm condition number; infinite when the matrix is rank deficient.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || !min.is_finite() || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverse of a well-conditioned square matrix, or the offending condition number.
pub fn checked_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>, f64> {
    let cond = condition_number(m);
    if cond > MAX_CONDITION {
        return Err(cond);
    }
    m.clone().try_inverse().ok_or(cond)
}

/// Solves `m x = b` for a well-conditioned square `m`.
pub fn checked_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, f64> {
    let cond = condition_number(m);
    if cond > MAX_CONDITION {
        return Err(cond);
    }
    m.clone().lu().solve(b).ok_or(cond)
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for r in 0..n {
        for c in r + 1..n {
            let v = 0.5 * (m[(r, c)] + m[(c, r)]);
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
    }
}

/// `a^{-1} b a^{-1}` for symmetric `a`, symmetrized to absorb rounding.
pub fn sandwich(bread_inv: &DMatrix<f64>, meat: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = bread_inv * meat * bread_inv.transpose();
    symmetrize(&mut s);
    s
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let mut s = m.clone();
    symmetrize(&mut s);
    s.symmetric_eigen().eigenvalues.min()
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singular_matrix_is_flagged() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(checked_inverse(&m).is_err());
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let inv = checked_inverse(&m).unwrap();
        assert!(((&m * inv) - DMatrix::identity(2, 2)).amax() < 1e-14);
    }

    #[test]
    fn condition_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 0.5]));
        assert!((condition_number(&m) - 8.0).abs() < 1e-12);
    }
}
