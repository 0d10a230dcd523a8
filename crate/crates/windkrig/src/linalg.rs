//! Shared dense linear algebra helpers built on nalgebra's Cholesky.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Jitter ladder for barely-indefinite matrices, as multiples of the mean
/// diagonal. The first attempt adds nothing.
const JITTER_STEPS: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Cholesky factorization with escalating diagonal jitter.
///
/// Returns the factorization together with the jitter actually added (0.0 in
/// the usual SPD case). Fails with [`Error::Factorization`] once relative
/// jitter 1e-6 has been tried.
pub fn cholesky_with_jitter(m: &DMatrix<f64>, context: &str) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "cholesky_with_jitter requires a square matrix");
    let mean_diag = m.diagonal().iter().map(|d| d.abs()).sum::<f64>() / n.max(1) as f64;
    let scale = if mean_diag > 0.0 && mean_diag.is_finite() { mean_diag } else { 1.0 };
    for &step in &JITTER_STEPS {
        let jitter = step * scale;
        let attempt = if jitter == 0.0 {
            m.clone()
        } else {
            let mut a = m.clone();
            for i in 0..n {
                a[(i, i)] += jitter;
            }
            a
        };
        if let Some(chol) = Cholesky::new(attempt) {
            return Ok((chol, jitter));
        }
    }
    Err(Error::Factorization {
        context: context.to_string(),
        max_jitter: JITTER_STEPS[JITTER_STEPS.len() - 1] * scale,
    })
}

/// Log determinant from a Cholesky factor: 2 * sum(ln L_ii).
pub fn ln_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Log density of N(mean, cov) at `x`, with `cov` already factored.
pub fn mvn_ln_pdf(x: &DVector<f64>, mean: &DVector<f64>, chol: &Cholesky<f64, Dyn>) -> f64 {
    let n = x.len() as f64;
    let r = x - mean;
    let alpha = chol.solve(&r);
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + ln_det(chol) + r.dot(&alpha))
}

/// Symmetrizes in place: m <- (m + m^T) / 2. Cheap guard against rounding
/// asymmetry before factorization.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn spd_matrix_needs_no_jitter() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let (_, jitter) = cholesky_with_jitter(&m, "test").unwrap();
        assert_eq!(jitter, 0.0);
    }

    #[test]
    fn rank_deficient_psd_matrix_factors_with_small_jitter() {
        // All-ones matrix has eigenvalues (3, 0, 0).
        let m = DMatrix::from_element(3, 3, 1.0);
        let (_, jitter) = cholesky_with_jitter(&m, "test").unwrap();
        assert!(jitter > 0.0 && jitter <= 1e-6);
    }

    #[test]
    fn indefinite_matrix_exhausts_the_ladder() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        match cholesky_with_jitter(&m, "test") {
            Err(Error::Factorization { max_jitter, .. }) => assert_relative_eq!(max_jitter, 1e-6),
            other => panic!("expected factorization failure, got {other:?}"),
        }
    }

    #[test]
    fn ln_det_and_density_match_direct_formulas() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.5]);
        let (chol, _) = cholesky_with_jitter(&m, "test").unwrap();
        assert_relative_eq!(ln_det(&chol), m.determinant().ln(), epsilon = 1e-12);

        // Scalar sanity: N(0, 1) at 0 has log density -ln(2*pi)/2.
        let one = DMatrix::from_element(1, 1, 1.0);
        let (chol1, _) = cholesky_with_jitter(&one, "test").unwrap();
        let x = DVector::from_element(1, 0.0);
        assert_relative_eq!(
            mvn_ln_pdf(&x, &x, &chol1),
            -0.5 * (2.0 * std::f64::consts::PI).ln(),
            epsilon = 1e-14
        );
    }
}
