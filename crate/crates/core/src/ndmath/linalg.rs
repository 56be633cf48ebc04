//! Singular value decomposition and the Moore–Penrose pseudo-inverse.

use crate::error::{Error, Result};
use crate::ndmath::matrix::{gemm, Matrix};

/// Default relative tolerance for [`pseudo_inverse`].
pub const DEFAULT_RCOND: f64 = 1e-10;

/// Thin SVD `a = u · diag(s) · vt` with `k = min(rows, cols)` singular values.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `rows × k`, orthonormal columns.
    pub u: Matrix,
    /// Non-negative, non-increasing.
    pub s: Vec<f64>,
    /// `k × cols`, orthonormal rows.
    pub vt: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (v, s) in us.row_mut(i).iter_mut().zip(&self.s) {
                *v *= s;
            }
        }
        gemm(&us, false, &self.vt, false).expect("svd factors have matching shapes")
    }
}

pub fn svd(a: &Matrix) -> Result<Svd> {
    a.ensure_finite("svd input")?;
    let (m, n) = a.shape();
    let k = m.min(n);
    if k == 0 {
        return Ok(Svd {
            u: Matrix::zeros(m, 0),
            s: Vec::new(),
            vt: Matrix::zeros(0, n),
        });
    }
    let dec = a
        .view()
        .thin_svd()
        .map_err(|_| Error::SvdNoConvergence { rows: m, cols: n })?;
    let (u, s, v) = (dec.U(), dec.S().column_vector(), dec.V());

    // order by decreasing singular value; faer already does this, but the
    // contract is ours
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| s[y].total_cmp(&s[x]));
    let u_out = Matrix::from_fn(m, k, |i, j| u[(i, order[j])]);
    let vt_out = Matrix::from_fn(k, n, |i, j| v[(j, order[i])]);
    let s_out: Vec<f64> = order.iter().map(|&j| s[j].max(0.0)).collect();
    if s_out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("singular values".into()));
    }
    Ok(Svd {
        u: u_out,
        s: s_out,
        vt: vt_out,
    })
}

/// Moore–Penrose pseudo-inverse. Singular values below
/// `rcond · max(rows, cols) · s_max` are treated as zero.
pub fn pseudo_inverse(a: &Matrix, rcond: f64) -> Result<Matrix> {
    if rcond.is_nan() || rcond < 0.0 {
        return Err(Error::invalid(format!("rcond must be >= 0, got {rcond}")));
    }
    let (m, n) = a.shape();
    let dec = svd(a)?;
    let s_max = dec.s.first().copied().unwrap_or(0.0);
    let cutoff = rcond * m.max(n) as f64 * s_max;
    let kept = dec.s.iter().take_while(|&&s| s > cutoff && s > 0.0).count();
    if kept == 0 {
        return Ok(Matrix::zeros(n, m));
    }
    // a⁺ = V_k · diag(1/s_k) · U_kᵀ
    let mut vs = Matrix::zeros(kept, n);
    for i in 0..kept {
        let inv = 1.0 / dec.s[i];
        for (dst, src) in vs.row_mut(i).iter_mut().zip(dec.vt.row(i)) {
            *dst = src * inv;
        }
    }
    let uk = dec.u.slice_cols(0, kept)?;
    gemm(&vs, true, &uk, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndmath::rng::{sample_gaussian, Rng};

    fn orthonormality_error(q: &Matrix) -> f64 {
        let g = gemm(q, true, q, false).unwrap();
        g.max_abs_diff(&Matrix::identity(g.rows())).unwrap()
    }

    fn rel_frobenius(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let d = svd(&Matrix::identity(3)).unwrap();
        for s in &d.s {
            assert!((s - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn diagonal_singular_values() {
        let a = Matrix::from_rows(&[[3.0, 0.0], [0.0, 0.0]]).unwrap();
        let d = svd(&a).unwrap();
        assert!((d.s[0] - 3.0).abs() < 1e-14);
        assert!(d.s[1].abs() < 1e-14);
    }

    #[test]
    fn random_reconstruction_and_orthonormality() {
        let mut rng = Rng::new(11);
        for &(m, n) in &[(20, 7), (7, 20), (33, 33), (1, 5)] {
            let a = sample_gaussian(&mut rng, m, n, 0.0, 1.0);
            let d = svd(&a).unwrap();
            assert!(rel_frobenius(&d.reconstruct(), &a) < 1e-10, "{m}x{n}");
            assert!(orthonormality_error(&d.u) < 1e-10);
            assert!(orthonormality_error(&d.vt.transpose()) < 1e-10);
            assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
            assert!(d.s.iter().all(|&s| s >= 0.0));
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let a = Matrix::from_rows(&[[1.0, f64::NAN]]).unwrap();
        assert!(svd(&a).is_err());
    }

    #[test]
    fn pinv_of_identity_and_singular_diagonal() {
        let p = pseudo_inverse(&Matrix::identity(4), DEFAULT_RCOND).unwrap();
        assert!(p.max_abs_diff(&Matrix::identity(4)).unwrap() < 1e-14);
        let a = Matrix::from_rows(&[[2.0, 0.0], [0.0, 0.0]]).unwrap();
        let p = pseudo_inverse(&a, DEFAULT_RCOND).unwrap();
        let want = Matrix::from_rows(&[[0.5, 0.0], [0.0, 0.0]]).unwrap();
        assert!(p.max_abs_diff(&want).unwrap() < 1e-14);
    }

    #[test]
    fn pinv_of_zero_matrix_is_zero() {
        let p = pseudo_inverse(&Matrix::zeros(3, 2), DEFAULT_RCOND).unwrap();
        assert_eq!(p, Matrix::zeros(2, 3));
    }

    #[test]
    fn negative_rcond_is_rejected() {
        assert!(pseudo_inverse(&Matrix::identity(2), -1.0).is_err());
    }

    pub(crate) fn penrose_residuals(a: &Matrix, p: &Matrix) -> [f64; 4] {
        let ap = a.matmul(p).unwrap();
        let pa = p.matmul(a).unwrap();
        [
            ap.matmul(a).unwrap().max_abs_diff(a).unwrap(),
            pa.matmul(p).unwrap().max_abs_diff(p).unwrap(),
            ap.max_abs_diff(&ap.transpose()).unwrap(),
            pa.max_abs_diff(&pa.transpose()).unwrap(),
        ]
    }

    #[test]
    fn penrose_axioms_on_random_8x5() {
        let mut rng = Rng::new(5);
        let a = sample_gaussian(&mut rng, 8, 5, 0.0, 1.0);
        let p = pseudo_inverse(&a, DEFAULT_RCOND).unwrap();
        for r in penrose_residuals(&a, &p) {
            assert!(r < 1e-9, "{r}");
        }
    }

    #[test]
    fn penrose_axioms_on_rank_deficient_input() {
        let mut rng = Rng::new(6);
        let l = sample_gaussian(&mut rng, 12, 3, 0.0, 1.0);
        let r = sample_gaussian(&mut rng, 3, 9, 0.0, 1.0);
        let a = l.matmul(&r).unwrap();
        let p = pseudo_inverse(&a, DEFAULT_RCOND).unwrap();
        for r in penrose_residuals(&a, &p) {
            assert!(r < 1e-9, "{r}");
        }
    }
}
