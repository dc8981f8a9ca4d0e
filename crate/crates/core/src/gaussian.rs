//! Gaussian fits over embedded samples and the closed-form KL divergence.
//!
//! The divergence is the standard non-negative form
//!
//! ```text
//! KL(p || q) = 1/2 [ (mu_q - mu_p)' S_q^-1 (mu_q - mu_p) + tr(S_q^-1 S_p) + ln(|S_q| / |S_p|) - m ]
//! ```
//!
//! evaluated through Cholesky factors of both covariances; no inverse is ever
//! formed.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::series::Interval;

/// Diagonal jitter used by [`GaussianModel::from_moments`]:
/// `max(1e-9, 1e-9 * trace / m)`.
pub fn jitter_for(cov: &DMatrix<f64>) -> f64 {
    let m = cov.nrows().max(1) as f64;
    let scaled = 1e-9 * cov.trace() / m;
    if scaled.is_finite() {
        scaled.max(1e-9)
    } else {
        1e-9
    }
}

/// A multivariate normal with its Cholesky factor cached.
#[derive(Debug, Clone)]
pub struct GaussianModel {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    count: usize,
    lower: DMatrix<f64>,
    repair: f64,
}

impl GaussianModel {
    /// Fits mean and ML covariance (denominator = count) to the non-missing
    /// rows of a row-major sample matrix, then symmetrizes and jitters.
    pub fn estimate(rows: &[f64], width: usize, missing: &[bool]) -> Result<Self> {
        let (mean, cov, count) = sample_moments(rows, width, missing)?;
        Self::from_moments(mean, cov, count)
    }

    /// Regularized model from raw moments: symmetrize, add [`jitter_for`] to
    /// the diagonal, and clip eigenvalues at the jitter if that still does not
    /// factor.
    pub fn from_moments(mean: DVector<f64>, cov: DMatrix<f64>, count: usize) -> Result<Self> {
        check_shapes(&mean, &cov)?;
        let mut cov = symmetrize(cov);
        let eps = jitter_for(&cov);
        for i in 0..cov.nrows() {
            cov[(i, i)] += eps;
        }
        let (cov, lower, repair) = factor_or_clip(cov, eps)?;
        Ok(Self {
            mean,
            cov,
            count,
            lower,
            repair,
        })
    }

    /// Model whose covariance is used as given when it is positive definite,
    /// and otherwise repaired by eigenvalue clipping at the jitter floor.
    pub fn from_psd(mean: DVector<f64>, cov: DMatrix<f64>, count: usize) -> Result<Self> {
        check_shapes(&mean, &cov)?;
        let cov = symmetrize(cov);
        let eps = jitter_for(&cov);
        let (cov, lower, repair) = factor_or_clip(cov, eps)?;
        Ok(Self {
            mean,
            cov,
            count,
            lower,
            repair,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Lower Cholesky factor of [`Self::cov`].
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// Frobenius norm of the eigenvalue-clipping correction; zero when the
    /// covariance factored directly.
    pub fn repair_magnitude(&self) -> f64 {
        self.repair
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let diff = x - &self.mean;
        let y = self
            .lower
            .solve_lower_triangular(&diff)
            .expect("cached factor has a positive diagonal");
        let m = self.dim() as f64;
        -0.5 * (y.norm_squared() + self.log_det() + m * (2.0 * std::f64::consts::PI).ln())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_iterator(self.dim(), (0..self.dim()).map(|_| rng.sample(StandardNormal)));
        &self.mean + &self.lower * z
    }
}

fn check_shapes(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<()> {
    if !cov.is_square() || cov.nrows() != mean.len() || mean.is_empty() {
        return Err(Error::Numerical(format!(
            "mean of length {} incompatible with {}x{} covariance",
            mean.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite moment".into()));
    }
    Ok(())
}

pub(crate) fn symmetrize(cov: DMatrix<f64>) -> DMatrix<f64> {
    let t = cov.transpose();
    (cov + t) * 0.5
}

/// Factors `cov`, falling back to eigenvalue clipping at `eps`. Returns the
/// (possibly repaired) matrix, its lower factor and the repair magnitude.
pub(crate) fn factor_or_clip(cov: DMatrix<f64>, eps: f64) -> Result<(DMatrix<f64>, DMatrix<f64>, f64)> {
    if let Some(ch) = Cholesky::new(cov.clone()) {
        let lower = ch.unpack();
        if lower.diagonal().iter().all(|v| *v > 0.0 && v.is_finite()) {
            return Ok((cov, lower, 0.0));
        }
    }
    let (mut repaired, repair) = clip_eigenvalues(&cov, eps);
    // Reconstruction round-off can leave a tiny negative pivot; nudge upward.
    let mut bump = eps;
    for _ in 0..8 {
        if let Some(ch) = Cholesky::<f64, Dyn>::new(repaired.clone()) {
            let lower = ch.unpack();
            if lower.diagonal().iter().all(|v| *v > 0.0 && v.is_finite()) {
                return Ok((repaired, lower, repair));
            }
        }
        for i in 0..repaired.nrows() {
            repaired[(i, i)] += bump;
        }
        bump *= 10.0;
    }
    Err(Error::Numerical(format!(
        "covariance of size {} is not factorizable after repair",
        cov.nrows()
    )))
}

fn clip_eigenvalues(cov: &DMatrix<f64>, eps: f64) -> (DMatrix<f64>, f64) {
    let eig = SymmetricEigen::new(cov.clone());
    let mut change = 0.0;
    let clipped = eig.eigenvalues.map(|l| {
        if l < eps {
            change += (eps - l) * (eps - l);
            eps
        } else {
            l
        }
    });
    let q = &eig.eigenvectors;
    let rebuilt = q * DMatrix::from_diagonal(&clipped) * q.transpose();
    (symmetrize(rebuilt), change.sqrt())
}

/// Mean and ML covariance of the non-missing rows, two-pass.
pub fn sample_moments(rows: &[f64], width: usize, missing: &[bool]) -> Result<(DVector<f64>, DMatrix<f64>, usize)> {
    if width == 0 || rows.len() != width * missing.len() {
        return Err(Error::Estimation(format!(
            "sample buffer of length {} does not hold {} rows of width {width}",
            rows.len(),
            missing.len()
        )));
    }
    let used = || {
        rows.chunks_exact(width)
            .zip(missing)
            .filter(|(_, &m)| !m)
            .map(|(r, _)| r)
    };
    let count = used().count();
    if count < 2 {
        return Err(Error::Estimation(format!("need at least 2 usable rows, have {count}")));
    }
    let mut mean = DVector::zeros(width);
    for r in used() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean /= count as f64;
    let mut cov = DMatrix::zeros(width, width);
    let mut centered = vec![0.0; width];
    for r in used() {
        for (c, (v, m)) in centered.iter_mut().zip(r.iter().zip(mean.iter())) {
            *c = v - m;
        }
        for j in 0..width {
            let cj = centered[j];
            for i in j..width {
                cov[(i, j)] += centered[i] * cj;
            }
        }
    }
    for j in 0..width {
        for i in j..width {
            let v = cov[(i, j)] / count as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok((mean, cov, count))
}

/// Closed-form `KL(p || q)` between two Gaussians of equal dimension,
/// clamped at zero.
pub fn kl(p: &GaussianModel, q: &GaussianModel) -> Result<f64> {
    kl_unclamped(p, q).map(|v| v.max(0.0))
}

pub(crate) fn kl_unclamped(p: &GaussianModel, q: &GaussianModel) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::Numerical(format!(
            "dimension mismatch: {} vs {}",
            p.dim(),
            q.dim()
        )));
    }
    let m = p.dim() as f64;
    let diff = &q.mean - &p.mean;
    let solve_err = || Error::Numerical("triangular solve failed".into());
    let y = q.lower.solve_lower_triangular(&diff).ok_or_else(solve_err)?;
    let mahalanobis = y.norm_squared();
    // tr(S_q^-1 S_p) = ||L_q^-1 L_p||_F^2
    let w = q.lower.solve_lower_triangular(&p.lower).ok_or_else(solve_err)?;
    let trace = w.norm_squared();
    let log_ratio = q.log_det() - p.log_det();
    let value = 0.5 * (mahalanobis + trace + log_ratio - m);
    if !value.is_finite() {
        return Err(Error::Numerical("non-finite divergence".into()));
    }
    Ok(value)
}

/// Interval score `2 * |I| * KL`.
pub fn u_kl(score: f64, interval: Interval) -> f64 {
    2.0 * interval.len() as f64 * score
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(mean: f64, var: f64) -> GaussianModel {
        GaussianModel::from_psd(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var), 0).unwrap()
    }

    /// Simpson's rule on the KL integrand of two univariate normals.
    fn kl_quadrature(mp: f64, vp: f64, mq: f64, vq: f64) -> f64 {
        let log_pdf =
            |x: f64, m: f64, v: f64| -(x - m).powi(2) / (2.0 * v) - 0.5 * (2.0 * std::f64::consts::PI * v).ln();
        let (lo, hi, steps) = (-40.0, 40.0, 200_000);
        let h = (hi - lo) / steps as f64;
        let f = |x: f64| {
            let lp = log_pdf(x, mp, vp);
            lp.exp() * (lp - log_pdf(x, mq, vq))
        };
        let mut acc = f(lo) + f(hi);
        for i in 1..steps {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(lo + i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn quadrature_oracle_matches_frozen_value() {
        let oracle = kl_quadrature(0.0, 2.0, 0.0, 1.0);
        assert!((oracle - 0.153_426_409_720_027_3).abs() < 1e-9, "{oracle}");
    }

    #[test]
    fn kl_identity_is_zero() {
        let p = scalar(0.3, 1.7);
        assert_eq!(kl(&p, &p).unwrap(), 0.0);
        assert!(kl_unclamped(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_mean_shift() {
        let v = kl(&scalar(1.0, 1.0), &scalar(0.0, 1.0)).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_variance_ratio() {
        let v = kl(&scalar(0.0, 2.0), &scalar(0.0, 1.0)).unwrap();
        assert!((v - 0.153_426_409_720_027_3).abs() < 1e-12, "{v}");
        let scored = u_kl(v, Interval::new(0, 25).unwrap());
        assert!((scored - 7.671_320_486).abs() < 1e-8, "{scored}");
    }

    #[test]
    fn u_kl_definition() {
        assert_eq!(u_kl(0.5, Interval::new(3, 13).unwrap()), 10.0);
        assert_eq!(u_kl(0.0, Interval::new(0, 99).unwrap()), 0.0);
    }

    #[test]
    fn kl_dimension_mismatch() {
        let p = scalar(0.0, 1.0);
        let q = GaussianModel::from_psd(DVector::zeros(2), DMatrix::identity(2, 2), 0).unwrap();
        assert!(kl(&p, &q).is_err());
    }

    #[test]
    fn constant_rows_give_jitter_identity() {
        let rows = vec![3.0, -1.0, 3.0, -1.0, 3.0, -1.0];
        let g = GaussianModel::estimate(&rows, 2, &[false; 3]).unwrap();
        assert_eq!(g.mean().as_slice(), &[3.0, -1.0]);
        assert_eq!(*g.cov(), DMatrix::identity(2, 2) * 1e-9);
        assert_eq!(g.count(), 3);
    }

    #[test]
    fn two_point_ml_covariance() {
        let rows = vec![0.0, 0.0, 2.0, 2.0];
        let (mean, cov, count) = sample_moments(&rows, 2, &[false, false]).unwrap();
        assert_eq!(mean.as_slice(), &[1.0, 1.0]);
        assert_eq!(cov, DMatrix::from_element(2, 2, 1.0));
        assert_eq!(count, 2);
        // rank-one: the model still factors
        let g = GaussianModel::estimate(&rows, 2, &[false, false]).unwrap();
        assert!(g.lower().diagonal().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn missing_rows_are_skipped() {
        let rows = vec![0.0, 100.0, 2.0, 4.0];
        let (mean, _, count) = sample_moments(&rows, 1, &[false, true, false, false]).unwrap();
        assert_eq!(count, 3);
        assert!((mean[0] - 2.0).abs() < 1e-15);
        assert!(sample_moments(&rows, 1, &[true, true, true, false]).is_err());
    }

    #[test]
    fn estimate_matches_direct_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let width = 3;
        let rows: Vec<f64> = (0..1000 * width).map(|_| rng.random_range(-5.0..5.0)).collect();
        let (mean, cov, _) = sample_moments(&rows, width, &vec![false; 1000]).unwrap();
        for a in 0..width {
            let mu: f64 = (0..1000).map(|r| rows[r * width + a]).sum::<f64>() / 1000.0;
            assert!((mu - mean[a]).abs() < 1e-12);
            for b in 0..width {
                let mb: f64 = (0..1000).map(|r| rows[r * width + b]).sum::<f64>() / 1000.0;
                let c: f64 = (0..1000)
                    .map(|r| (rows[r * width + a] - mu) * (rows[r * width + b] - mb))
                    .sum::<f64>()
                    / 1000.0;
                assert!((c - cov[(a, b)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn indefinite_matrix_is_clipped() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let g = GaussianModel::from_psd(DVector::zeros(2), cov, 0).unwrap();
        assert!(g.repair_magnitude() > 0.9);
        let eig = SymmetricEigen::new(g.cov().clone());
        assert!(eig.eigenvalues.min() >= 1e-9 * 0.999);
    }
}
