//! Small dense linear-algebra helpers shared by the GP and path modules.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative jitter added to every Gram diagonal before factorization.
pub const BASE_JITTER: f64 = 1e-12;
/// Largest relative jitter tried before giving up.
pub const MAX_JITTER: f64 = 1e-6;

/// Lower Cholesky factor together with the absolute jitter that was needed.
#[derive(Debug, Clone)]
pub struct JitteredCholesky {
    pub l: DMatrix<f64>,
    pub jitter: f64,
}

fn diag_scale(k: &DMatrix<f64>) -> f64 {
    let n = k.nrows().max(1) as f64;
    let s = k.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n;
    if s > 0.0 && s.is_finite() {
        s
    } else {
        1.0
    }
}

/// Factor `k + jitter*I`, escalating the relative jitter by ×10 from
/// [`BASE_JITTER`] up to [`MAX_JITTER`].
pub fn cholesky_jittered(k: &DMatrix<f64>) -> Result<JitteredCholesky> {
    let scale = diag_scale(k);
    let mut rel = BASE_JITTER;
    loop {
        let jitter = rel * scale;
        if let Some(l) = cholesky_with_jitter(k, jitter) {
            return Ok(JitteredCholesky { l, jitter });
        }
        if rel >= MAX_JITTER * (1.0 - 1e-9) {
            return Err(Error::IllConditioned { jitter });
        }
        rel *= 10.0;
    }
}

/// Factor `k + jitter*I` with a fixed absolute jitter.
pub fn cholesky_with_jitter(k: &DMatrix<f64>, jitter: f64) -> Option<DMatrix<f64>> {
    let mut a = k.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += jitter;
    }
    Cholesky::new(a).map(|c| c.unpack())
}

/// Solves `L Lᵀ x = b`.
pub fn cho_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let y = l
        .solve_lower_triangular(b)
        .expect("Cholesky factor has a positive diagonal");
    l.tr_solve_lower_triangular(&y)
        .expect("Cholesky factor has a positive diagonal")
}

/// Solves `L Lᵀ X = B` column by column.
pub fn cho_solve_mat(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let y = l
        .solve_lower_triangular(b)
        .expect("Cholesky factor has a positive diagonal");
    l.tr_solve_lower_triangular(&y)
        .expect("Cholesky factor has a positive diagonal")
}

/// `log det (L Lᵀ)`.
pub fn log_det(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Inverse of `L Lᵀ`.
pub fn cho_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    // L⁻¹ by forward substitution on the unit columns, skipping the zeros;
    // column i of Lᵀ holds row i of L contiguously
    let lt = l.transpose();
    let lt = lt.as_slice();
    let mut li = DMatrix::<f64>::zeros(n, n);
    let buf = li.as_mut_slice();
    for j in 0..n {
        let c = &mut buf[j * n..(j + 1) * n];
        c[j] = 1.0 / l[(j, j)];
        for i in j + 1..n {
            let row = &lt[i * n + j..i * n + i];
            let s: f64 = row.iter().zip(&c[j..i]).map(|(a, b)| a * b).sum();
            c[i] = -s / l[(i, i)];
        }
    }
    // (L⁻ᵀL⁻¹)_{ij} = Σ_{k ≥ max(i,j)} L⁻¹_{ki} L⁻¹_{kj}
    let mut out = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let cj = &buf[j * n..(j + 1) * n];
        for i in 0..=j {
            let ci = &buf[i * n..(i + 1) * n];
            let v: f64 = ci[j..].iter().zip(&cj[j..]).map(|(a, b)| a * b).sum();
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Cholesky factor of a (nearly) positive semidefinite matrix such as a
/// correlation matrix. A diagonal jitter of up to 1e-8 is tried before the
/// matrix is rejected.
pub fn psd_factor(r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if r.nrows() != r.ncols() {
        return Err(Error::DimensionMismatch {
            expected: r.nrows(),
            found: r.ncols(),
        });
    }
    if !r.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("correlation matrix"));
    }
    let asym = (r - r.transpose()).amax();
    if asym > 1e-12 * r.amax().max(1.0) {
        return Err(Error::NotPositiveSemidefinite);
    }
    for jitter in [0.0, 1e-14, 1e-12, 1e-10, 1e-8] {
        if let Some(l) = cholesky_with_jitter(r, jitter) {
            return Ok(l);
        }
    }
    Err(Error::NotPositiveSemidefinite)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_escalates_on_singular_gram() {
        let k = DMatrix::from_element(3, 3, 1.0);
        let c = cholesky_jittered(&k).unwrap();
        assert!(c.jitter > 0.0);
        let rebuilt = &c.l * c.l.transpose();
        for i in 0..3 {
            assert!((rebuilt[(i, i)] - 1.0 - c.jitter).abs() < 1e-9);
        }
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(cholesky_jittered(&k), Err(Error::IllConditioned { .. })));
        assert_eq!(psd_factor(&k), Err(Error::NotPositiveSemidefinite));
    }

    #[test]
    fn cho_solve_inverts() {
        let k = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let l = cholesky_with_jitter(&k, 0.0).unwrap();
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let x = cho_solve(&l, &b);
        assert!((&k * x - b).norm() < 1e-14);
        assert!((log_det(&l) - 11f64.ln()).abs() < 1e-14);
    }
}
