//! Univariate Gaussian, Laplace and Cauchy fits, their moment-based
//! estimators, and closed-form divergences.
//!
//! Fits are elementwise: `location` and `scale` may be scalars or whole grids
//! (one cell per output dimension and context point). Every divergence then
//! returns a grid of the same shape, and the regulariser sums it.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DiffArray;

/// Lower bound applied to every fitted scale.
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Laplace,
    Cauchy,
}

impl Family {
    /// Density at `x`.
    pub fn pdf(self, location: f64, scale: f64, x: f64) -> f64 {
        let z = (x - location) / scale;
        match self {
            Family::Gaussian => (-0.5 * z * z).exp() / (scale * (2.0 * std::f64::consts::PI).sqrt()),
            Family::Laplace => (-z.abs()).exp() / (2.0 * scale),
            Family::Cauchy => 1.0 / (std::f64::consts::PI * scale * (1.0 + z * z)),
        }
    }
}

/// The four regulariser variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Divergence {
    /// KL between Gaussians.
    Gkl,
    /// KL between Laplace distributions.
    Lkl,
    /// KL between Cauchy distributions.
    Ckl,
    /// Squared 2-Wasserstein distance between Gaussians.
    Gw,
}

impl Divergence {
    pub const ALL: [Divergence; 4] = [Divergence::Gkl, Divergence::Lkl, Divergence::Ckl, Divergence::Gw];

    pub fn family(self) -> Family {
        match self {
            Divergence::Gkl | Divergence::Gw => Family::Gaussian,
            Divergence::Lkl => Family::Laplace,
            Divergence::Ckl => Family::Cauchy,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Divergence::Gkl => "gkl",
            Divergence::Lkl => "lkl",
            Divergence::Ckl => "ckl",
            Divergence::Gw => "gw",
        }
    }

    /// Elementwise divergence `D[p || q]`.
    pub fn evaluate(self, p: &UnivariateFit, q: &UnivariateFit) -> Result<DiffArray> {
        match self {
            Divergence::Gkl => kl_gaussian(p, q),
            Divergence::Lkl => kl_laplace(p, q),
            Divergence::Ckl => kl_cauchy(p, q),
            Divergence::Gw => w2_gaussian_univariate(p, q),
        }
    }
}

impl std::str::FromStr for Divergence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Divergence::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown divergence `{s}` (expected gkl, lkl, ckl or gw)")))
    }
}

/// A fitted univariate distribution, or a grid of them sharing one family.
#[derive(Clone, Debug)]
pub struct UnivariateFit {
    pub family: Family,
    pub location: DiffArray,
    pub scale: DiffArray,
}

impl UnivariateFit {
    pub fn new(family: Family, location: f64, scale: f64) -> Self {
        Self {
            family,
            location: DiffArray::scalar(location),
            scale: DiffArray::scalar(scale),
        }
    }
}

/// Moment-based fit along axis 0 of `samples` (shape `(S, ...)`).
///
/// Gaussian: mean and standard deviation. Laplace: mean and `sqrt(var / 2)`.
/// Cauchy: median and median absolute deviation about that median. The
/// variance uses divisor `S`, and scales are floored at [`SCALE_FLOOR`].
pub fn fit_moments(samples: &DiffArray, family: Family) -> Result<UnivariateFit> {
    let count = samples.shape().first().copied().unwrap_or(0);
    if count < 2 {
        return Err(Error::TooFewSamples {
            op: "fit_moments",
            needed: 2,
            got: count,
        });
    }
    let floor_sq = DiffArray::scalar(SCALE_FLOOR * SCALE_FLOOR);
    let (location, scale) = match family {
        Family::Gaussian | Family::Laplace => {
            let mean = samples.mean_axis(0)?;
            let var = samples.sub(&mean)?.square().mean_axis(0)?;
            let var = if family == Family::Laplace {
                var.mul_scalar(0.5)
            } else {
                var
            };
            // flooring before the root keeps d/dvar finite at zero variance
            (mean, var.maximum(&floor_sq)?.sqrt()?)
        }
        Family::Cauchy => {
            let median = samples.median_axis0()?;
            let mad = samples.sub(&median)?.abs().median_axis0()?;
            (median, mad.maximum(&DiffArray::scalar(SCALE_FLOOR))?)
        }
    };
    Ok(UnivariateFit {
        family,
        location,
        scale,
    })
}

fn expect_family(op: &'static str, expected: Family, fits: [&UnivariateFit; 2]) -> Result<()> {
    for f in fits {
        if f.family != expected {
            return Err(Error::FamilyMismatch {
                op,
                expected,
                got: f.family,
            });
        }
    }
    Ok(())
}

/// `log(σ2/σ1) + (σ1² + (μ1−μ2)²) / (2σ2²) − 1/2`
pub fn kl_gaussian(p: &UnivariateFit, q: &UnivariateFit) -> Result<DiffArray> {
    expect_family("kl_gaussian", Family::Gaussian, [p, q])?;
    let log_ratio = q.scale.div(&p.scale)?.log()?;
    let num = p.scale.square().add(&p.location.sub(&q.location)?.square())?;
    let quad = num.div(&q.scale.square().mul_scalar(2.0))?;
    Ok(log_ratio.add(&quad)?.add_scalar(-0.5))
}

/// `(b1·exp(−|a1−a2|/b1) + |a1−a2|) / b2 + log(b2/b1) − 1`
pub fn kl_laplace(p: &UnivariateFit, q: &UnivariateFit) -> Result<DiffArray> {
    expect_family("kl_laplace", Family::Laplace, [p, q])?;
    let dist = p.location.sub(&q.location)?.abs();
    let decay = dist.div(&p.scale)?.neg().exp().mul(&p.scale)?;
    let term = decay.add(&dist)?.div(&q.scale)?;
    let log_ratio = q.scale.div(&p.scale)?.log()?;
    Ok(term.add(&log_ratio)?.add_scalar(-1.0))
}

/// `log(((γ1+γ2)² + (l1−l2)²) / (4γ1γ2))`
pub fn kl_cauchy(p: &UnivariateFit, q: &UnivariateFit) -> Result<DiffArray> {
    expect_family("kl_cauchy", Family::Cauchy, [p, q])?;
    let num = p
        .scale
        .add(&q.scale)?
        .square()
        .add(&p.location.sub(&q.location)?.square())?;
    let den = p.scale.mul(&q.scale)?.mul_scalar(4.0);
    Ok(num.div(&den)?.log()?)
}

/// Squared 2-Wasserstein distance `(μ1−μ2)² + (σ1−σ2)²`.
pub fn w2_gaussian_univariate(p: &UnivariateFit, q: &UnivariateFit) -> Result<DiffArray> {
    expect_family("w2_gaussian_univariate", Family::Gaussian, [p, q])?;
    Ok(p.location
        .sub(&q.location)?
        .square()
        .add(&p.scale.sub(&q.scale)?.square())?)
}

/// Multivariate Gaussian with a dense covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMultivariate {
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub covariance: Vec<f64>,
}

impl GaussianMultivariate {
    pub fn new(mean: Vec<f64>, covariance: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.len() != d * d {
            return Err(Error::DimensionMismatch {
                op: "GaussianMultivariate::new",
                lhs: d * d,
                rhs: covariance.len(),
            });
        }
        Ok(Self { mean, covariance })
    }

    pub fn diagonal(mean: Vec<f64>, variances: &[f64]) -> Result<Self> {
        let d = variances.len();
        let mut cov = vec![0.0; d * d];
        for (i, v) in variances.iter().enumerate() {
            cov[i * d + i] = *v;
        }
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.covariance)
    }
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues
/// from round-off are clamped to zero.
fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ1−μ2‖² + Tr(Σ1 + Σ2 − 2(Σ1^{1/2} Σ2 Σ1^{1/2})^{1/2})`
pub fn w2_gaussian_multivariate(p: &GaussianMultivariate, q: &GaussianMultivariate) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            op: "w2_gaussian_multivariate",
            lhs: p.dim(),
            rhs: q.dim(),
        });
    }
    let mean_term: f64 = p.mean.iter().zip(&q.mean).map(|(a, b)| (a - b) * (a - b)).sum();
    let s1 = p.cov_matrix();
    let s2 = q.cov_matrix();
    let r1 = psd_sqrt(s1.clone());
    let cross = psd_sqrt(&r1 * &s2 * &r1);
    Ok(mean_term + s1.trace() + s2.trace() - 2.0 * cross.trace())
}
