//! Normal distributions: scalar pdf/cdf, the multivariate distribution
//! function, its gradient via conditional distributions, and the reflected
//! gradient that stays informative deep inside the violated region.

mod mvn;
mod univariate;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub use mvn::{mvn_cdf, MvnEstimate, MvnOptions};
pub use univariate::{
    adjusted_cdf, adjusted_pdf, normal_cdf, normal_pdf, reflect_below, std_cdf, std_pdf,
    std_quantile,
};

use crate::error::{Error, Result};

/// Relative floor applied to the covariance spectrum.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Gaussian vector with a repaired (positive definite up to the spectral
/// floor) covariance and its cached eigendecomposition.
#[derive(Debug, Clone)]
pub struct GaussianVector {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl GaussianVector {
    /// Validates symmetry and positive semi-definiteness, then clamps the
    /// spectrum to `EIGEN_FLOOR * trace`.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let s = mean.len();
        if cov.nrows() != s || cov.ncols() != s {
            return Err(Error::dim("covariance size", s, cov.nrows().max(cov.ncols())));
        }
        let scale = cov.amax().max(f64::MIN_POSITIVE);
        for i in 0..s {
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 * scale.max(1.0) {
                    return Err(Error::Domain(format!(
                        "covariance not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let (g, raw_min) = Self::repair(mean, cov)?;
        // Reject matrices that were genuinely indefinite before repair.
        if raw_min < -1e-8 * g.cov.trace() {
            return Err(Error::Domain("covariance is not positive semi-definite".into()));
        }
        Ok(g)
    }

    /// Symmetrizes and clamps without the semi-definiteness check; used for
    /// Schur complements whose rounding noise scales with the parent matrix.
    fn clamped(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::repair(mean, cov).map(|(g, _)| g)
    }

    fn repair(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<(Self, f64)> {
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite Gaussian parameters".into()));
        }
        let sym = (&cov + cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym.clone());
        let floor = EIGEN_FLOOR * sym.trace().max(0.0);
        let raw_min = eig.eigenvalues.min();
        let values = eig.eigenvalues.map(|v| v.max(floor));
        let cov = if raw_min < floor {
            &eig.eigenvectors * DMatrix::from_diagonal(&values) * eig.eigenvectors.transpose()
        } else {
            sym
        };
        let g = Self {
            mean,
            cov,
            eigenvalues: values,
            eigenvectors: eig.eigenvectors,
        };
        Ok((g, raw_min))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Repaired covariance.
    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// Square-root factor `A` with `A A^T = cov`, for sampling.
    pub fn sqrt_factor(&self) -> DMatrix<f64> {
        let roots = self.eigenvalues.map(|v| v.max(0.0).sqrt());
        &self.eigenvectors * DMatrix::from_diagonal(&roots)
    }

    /// Same covariance, different mean.
    pub fn with_mean(&self, mean: DVector<f64>) -> Result<Self> {
        if mean.len() != self.dim() {
            return Err(Error::dim("mean length", self.dim(), mean.len()));
        }
        Ok(Self {
            mean,
            ..self.clone()
        })
    }

    /// Marginal standard deviation of component `j`.
    pub fn std_dev(&self, j: usize) -> f64 {
        self.cov[(j, j)].max(0.0).sqrt()
    }
}

/// Distribution of the other `s - 1` components given component `j` equals
/// `zj`: mean `mu + (zj - mu_j) / s_jj * s_j` and covariance
/// `S - s_j s_j^T / s_jj`, both with row/column `j` removed.
pub fn conditional_complement(g: &GaussianVector, j: usize, zj: f64) -> Result<GaussianVector> {
    let s = g.dim();
    if j >= s {
        return Err(Error::Domain(format!("component {j} out of range for dimension {s}")));
    }
    let sjj = g.cov[(j, j)];
    if !(sjj > 0.0) {
        return Err(Error::Domain(format!("variance of component {j} is {sjj}")));
    }
    let col = g.cov.column(j);
    let shift = (zj - g.mean[j]) / sjj;
    let keep: Vec<usize> = (0..s).filter(|&i| i != j).collect();
    let mean = DVector::from_iterator(keep.len(), keep.iter().map(|&i| g.mean[i] + shift * col[i]));
    let cov = DMatrix::from_fn(keep.len(), keep.len(), |a, b| {
        let (ia, ib) = (keep[a], keep[b]);
        g.cov[(ia, ib)] - col[ia] * col[ib] / sjj
    });
    GaussianVector::clamped(mean, cov)
}

/// Seed for the `j`-th conditional evaluation derived from a base seed.
pub(crate) fn sub_seed(seed: u64, j: u64) -> u64 {
    // splitmix64 finalizer
    let mut x = seed ^ j.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Gradient of the distribution function: component `j` is the marginal
/// density at `z_j` times the conditional distribution function of the rest.
pub fn mvncdf_gradient(z: &DVector<f64>, g: &GaussianVector, opts: &MvnOptions) -> Result<DVector<f64>> {
    gradient_impl(z, g, opts, false)
}

/// Reflected gradient. The density factor uses [`adjusted_pdf`]; the
/// conditional factor is evaluated after reflecting every coordinate that
/// lies below its conditional mean. All components are strictly positive.
pub fn adjusted_mvncdf_gradient(
    z: &DVector<f64>,
    g: &GaussianVector,
    opts: &MvnOptions,
) -> Result<DVector<f64>> {
    gradient_impl(z, g, opts, true)
}

fn gradient_impl(
    z: &DVector<f64>,
    g: &GaussianVector,
    opts: &MvnOptions,
    adjusted: bool,
) -> Result<DVector<f64>> {
    let s = g.dim();
    if z.len() != s {
        return Err(Error::dim("gradient argument", s, z.len()));
    }
    let mut out = DVector::zeros(s);
    for j in 0..s {
        let sd = g.std_dev(j);
        let density = if adjusted {
            adjusted_pdf(z[j], g.mean[j], sd)?
        } else {
            normal_pdf(z[j], g.mean[j], sd)?
        };
        if density == 0.0 || s == 1 {
            out[j] = density;
            continue;
        }
        let cond = conditional_complement(g, j, z[j])?;
        let mut rest = DVector::from_iterator(s - 1, (0..s).filter(|&i| i != j).map(|i| z[i]));
        if adjusted {
            for (r, m) in rest.iter_mut().zip(cond.mean.iter()) {
                *r = reflect_below(*r, *m);
            }
        }
        let sub = opts.with_seed(sub_seed(opts.seed, j as u64));
        out[j] = density * mvn_cdf(&rest, &cond, &sub)?.value;
    }
    Ok(out)
}
