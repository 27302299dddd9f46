//! Dense float64 kernels: SVD, pseudoinverse and Frobenius geometry.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// Thin SVD `A = U · diag(s) · Vt` with `r = min(m, n)` components.
///
/// Singular values are non-increasing. Each column of `u` has its
/// largest-magnitude entry positive (first such entry on ties), with the
/// matching row of `vt` flipped along with it.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub vt: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for (j, s) in self.singular_values.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * &self.vt
    }
}

pub fn ensure_finite(a: &Matrix, what: &str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} contains non-finite entries")))
    }
}

pub fn svd(a: &Matrix) -> Result<SvdFactors> {
    ensure_finite(a, "svd input")?;
    let (m, n) = a.shape();
    let r = m.min(n);
    if r == 0 {
        return Ok(SvdFactors {
            u: Matrix::zeros(m, 0),
            singular_values: Vec::new(),
            vt: Matrix::zeros(0, n),
        });
    }
    let fa = faer::Mat::<f64>::from_fn(m, n, |i, j| a[(i, j)]);
    let dec = fa
        .thin_svd()
        .map_err(|e| Error::Numerical(format!("svd of {m}x{n} matrix did not converge: {e:?}")))?;
    let (fu, fv, fs) = (dec.U(), dec.V(), dec.S().column_vector());
    let mut u = Matrix::from_fn(m, r, |i, j| fu[(i, j)]);
    let mut vt = Matrix::from_fn(r, n, |i, j| fv[(j, i)]);
    let singular_values: Vec<f64> = (0..r).map(|j| fs[j]).collect();

    for j in 0..r {
        let col = u.column(j);
        let mut pivot = 0;
        for i in 1..m {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        if col[pivot] < 0.0 {
            u.column_mut(j).neg_mut();
            vt.row_mut(j).neg_mut();
        }
    }
    Ok(SvdFactors { u, singular_values, vt })
}

/// Rank-reveal threshold used when none is configured: `max(m, n) · ε`.
pub fn default_pinv_rtol(rows: usize, cols: usize) -> f64 {
    rows.max(cols).max(1) as f64 * f64::EPSILON
}

/// Moore–Penrose pseudoinverse; singular values `≤ rtol · σ_max` count as zero.
pub fn pinv(a: &Matrix, rtol: f64) -> Result<Matrix> {
    let f = svd(a)?;
    let (m, n) = a.shape();
    let s_max = f.singular_values.first().copied().unwrap_or(0.0);
    let cutoff = rtol * s_max;
    // P = V · diag(1/s) · Uᵀ over the retained components
    let mut vs = f.vt.transpose();
    let mut kept = 0;
    for (j, &s) in f.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            vs.column_mut(j).scale_mut(1.0 / s);
            kept = j + 1;
        } else {
            break;
        }
    }
    if kept == 0 {
        return Ok(Matrix::zeros(n, m));
    }
    Ok(vs.columns(0, kept) * f.u.columns(0, kept).transpose())
}

fn same_shape(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

/// `tr(AᵀB) = Σᵢⱼ AᵢⱼBᵢⱼ`.
pub fn frobenius_inner(a: &Matrix, b: &Matrix) -> Result<f64> {
    same_shape(a, b)?;
    Ok(a.dot(b))
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.norm()
}

/// `⟨A, B⟩_F / (‖A‖_F ‖B‖_F)`, clamped to `[−1, 1]`.
pub fn cosine_similarity(a: &Matrix, b: &Matrix) -> Result<f64> {
    same_shape(a, b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidInput("undefined angle: zero-norm argument".into()));
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Angle in `[0, π]` between `A` and `B` under the Frobenius inner product.
///
/// Evaluated as `2·atan2(‖Â − B̂‖, ‖Â + B̂‖)` on the unit-normalized arguments,
/// which equals `arccos` of the cosine but keeps full relative precision
/// for nearly collinear inputs.
pub fn angular_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    same_shape(a, b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidInput("undefined angle: zero-norm argument".into()));
    }
    let ua = a / na;
    let ub = b / nb;
    let diff = (&ua - &ub).norm();
    let sum = (&ua + &ub).norm();
    Ok((2.0 * diff.atan2(sum)).clamp(0.0, std::f64::consts::PI))
}

/// Largest singular value.
pub fn spectral_norm(a: &Matrix) -> Result<f64> {
    Ok(svd(a)?.singular_values.first().copied().unwrap_or(0.0))
}

/// Sample Pearson correlation. Errors when either series has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("series lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::InvalidInput("pearson needs at least two samples".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidInput("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Nearest matrix with orthonormal columns (the polar factor `X·Yᵀ` of `A = X·S·Yᵀ`).
///
/// For wide inputs the result has orthonormal rows instead.
pub fn polar_factor(a: &Matrix) -> Result<Matrix> {
    let f = svd(a)?;
    Ok(&f.u * &f.vt)
}

/// Checks symmetry within `sym_tol · max(1, ‖C‖_F)` and PSD-ness with
/// `λ_min ≥ −psd_tol · σ_max`.
pub fn check_symmetric_psd(c: &Matrix, sym_tol: f64, psd_tol: f64) -> std::result::Result<(), String> {
    if !c.is_square() {
        return Err(format!("not square: {:?}", c.shape()));
    }
    if c.iter().any(|x| !x.is_finite()) {
        return Err("non-finite entries".into());
    }
    let scale = c.norm().max(1.0);
    let asym = (c - c.transpose()).norm();
    if asym > sym_tol * scale {
        return Err(format!("asymmetric: ‖C − Cᵀ‖_F = {asym:e}"));
    }
    if c.nrows() == 0 {
        return Ok(());
    }
    let sym = (c + c.transpose()) * 0.5;
    let eig = sym.symmetric_eigenvalues();
    let max_abs = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -psd_tol * max_abs {
        return Err(format!("not positive semidefinite: λ_min = {min:e}"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Matrix {
        Matrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))
    }

    fn orthonormality_error(q: &Matrix) -> f64 {
        (q.transpose() * q - Matrix::identity(q.ncols(), q.ncols())).amax()
    }

    #[test]
    fn svd_of_identity() {
        let f = svd(&Matrix::identity(3, 3)).unwrap();
        assert_eq!(f.singular_values, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn svd_of_rank_deficient_diagonal() {
        let f = svd(&Matrix::from_diagonal(&nalgebra::dvector![3.0, 0.0])).unwrap();
        assert!((f.singular_values[0] - 3.0).abs() < 1e-15);
        assert_eq!(f.singular_values[1], 0.0);
    }

    #[test]
    fn svd_reconstructs_and_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (m, n) in [(5, 3), (3, 5), (6, 6), (1, 4)] {
            let a = random(&mut rng, m, n);
            let f = svd(&a).unwrap();
            assert!((f.reconstruct() - &a).norm() <= 1e-10 * a.norm());
            assert!(orthonormality_error(&f.u) < 1e-10);
            assert!(orthonormality_error(&f.vt.transpose()) < 1e-10);
            assert!(f.singular_values.windows(2).all(|w| w[0] >= w[1]));
            for j in 0..f.rank() {
                let col = f.u.column(j);
                let pivot = col.iamax();
                assert!(col[pivot] > 0.0);
            }
        }
    }

    #[test]
    fn svd_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 4, 4);
        let (f, g) = (svd(&a).unwrap(), svd(&a).unwrap());
        assert_eq!(f.u, g.u);
        assert_eq!(f.vt, g.vt);
    }

    #[test]
    fn svd_rejects_nan() {
        let mut a = Matrix::identity(2, 2);
        a[(0, 1)] = f64::NAN;
        assert!(svd(&a).is_err());
    }

    #[test]
    fn pinv_identity_and_diagonal() {
        let i = Matrix::identity(4, 4);
        assert!((pinv(&i, default_pinv_rtol(4, 4)).unwrap() - &i).amax() < 1e-15);
        let d = Matrix::from_diagonal(&nalgebra::dvector![4.0, 0.0]);
        let p = pinv(&d, default_pinv_rtol(2, 2)).unwrap();
        assert!((p - Matrix::from_diagonal(&nalgebra::dvector![0.25, 0.0])).amax() < 1e-15);
    }

    #[test]
    fn pinv_of_zero_is_zero() {
        let p = pinv(&Matrix::zeros(3, 2), 1e-12).unwrap();
        assert_eq!(p.shape(), (2, 3));
        assert_eq!(p.amax(), 0.0);
    }

    #[test]
    fn pinv_penrose_conditions_on_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for rank in 1..=4 {
            let b = random(&mut rng, 4, rank);
            let a = &b * b.transpose();
            let p = pinv(&a, 1e-10).unwrap();
            let scale = a.norm() * p.norm();
            assert!((&a * &p * &a - &a).norm() <= 1e-8 * a.norm().max(1.0) * scale.max(1.0));
            assert!((&p * &a * &p - &p).norm() <= 1e-8 * p.norm().max(1.0) * scale.max(1.0));
            let ap = &a * &p;
            let pa = &p * &a;
            assert!((&ap - ap.transpose()).norm() <= 1e-8);
            assert!((&pa - pa.transpose()).norm() <= 1e-8);
        }
    }

    #[test]
    fn frobenius_inner_examples() {
        let i = Matrix::identity(2, 2);
        assert_eq!(frobenius_inner(&i, &i).unwrap(), 2.0);
        assert_eq!(frobenius_inner(&i, &Matrix::zeros(2, 2)).unwrap(), 0.0);
        assert!(frobenius_inner(&i, &Matrix::zeros(2, 3)).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b) = (random(&mut rng, 3, 5), random(&mut rng, 3, 5));
        let mut naive = 0.0;
        for i in 0..3 {
            for j in 0..5 {
                naive += a[(i, j)] * b[(i, j)];
            }
        }
        assert!((frobenius_inner(&a, &b).unwrap() - naive).abs() < 1e-13);
    }

    #[test]
    fn angular_distance_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, 3, 3);
        assert_eq!(angular_distance(&a, &(&a * 2.0)).unwrap(), 0.0);
        assert!((angular_distance(&a, &(-&a)).unwrap() - PI).abs() < 1e-15);
        let e1 = Matrix::from_diagonal(&nalgebra::dvector![1.0, 0.0]);
        let e2 = Matrix::from_diagonal(&nalgebra::dvector![0.0, 1.0]);
        assert!((angular_distance(&e1, &e2).unwrap() - PI / 2.0).abs() < 1e-15);
        let err = angular_distance(&e1, &Matrix::zeros(2, 2)).unwrap_err();
        assert!(err.to_string().contains("undefined angle"));
    }

    #[test]
    fn spectral_norm_examples() {
        assert!((spectral_norm(&(Matrix::identity(3, 3) * 3.0)).unwrap() - 3.0).abs() < 1e-14);
        assert_eq!(spectral_norm(&Matrix::zeros(2, 3)).unwrap(), 0.0);
    }

    #[test]
    fn spectral_norm_matches_power_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random(&mut rng, 5, 4);
        let ata = a.transpose() * &a;
        let mut v = nalgebra::DVector::from_element(4, 1.0);
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let w = &ata * &v;
            lambda = w.norm();
            v = w / lambda;
        }
        assert!((spectral_norm(&a).unwrap() - lambda.sqrt()).abs() < 1e-8);
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 4.0, 7.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        let err = pearson(&x, &[2.0; 4]).unwrap_err();
        assert!(err.to_string().contains("zero variance"));
        assert!(pearson(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn pearson_matches_textbook_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..50).map(|_| rng.random()).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.random::<f64>()).collect();
        let n = x.len() as f64;
        let sx: f64 = x.iter().sum();
        let sy: f64 = y.iter().sum();
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|a| a * a).sum();
        let r = (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt());
        assert!((pearson(&x, &y).unwrap() - r).abs() < 1e-12);
    }

    #[test]
    fn polar_factor_has_orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random(&mut rng, 6, 3);
        assert!(orthonormality_error(&polar_factor(&a).unwrap()) < 1e-12);
    }

    #[test]
    fn psd_check() {
        assert!(check_symmetric_psd(&Matrix::identity(3, 3), 1e-10, 1e-8).is_ok());
        let mut asym = Matrix::identity(2, 2);
        asym[(0, 1)] = 0.5;
        assert!(check_symmetric_psd(&asym, 1e-10, 1e-8)
            .unwrap_err()
            .contains("asymmetric"));
        let neg = Matrix::from_diagonal(&nalgebra::dvector![1.0, -0.5]);
        assert!(check_symmetric_psd(&neg, 1e-10, 1e-8)
            .unwrap_err()
            .contains("semidefinite"));
    }
}
