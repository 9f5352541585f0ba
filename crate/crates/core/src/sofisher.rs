//! Matrix-Fisher distribution on SO(3) and the large-concentration expansion
//! of its first moment.
//!
//! For a noisy observation `y` of a rotated cloud `x`, the posterior over the
//! rotation is `MF(R; F)` with `F = yᵀx / σ²`. Writing the proper SVD
//! `yᵀx = U S Vᵀ`, the first moment expands in `σ²` as
//!
//! ```text
//! E[R] = U (I + σ² C1(S) + σ⁴ C2(S) + …) Vᵀ
//! ```
//!
//! where the zeroth-order term `U Vᵀ` is exactly the Kabsch rotation.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geom::{proper_svd, Mat3, PointCloud, ProperSvd, Rotation, Vec3};

/// Relative threshold on `sᵢ + sⱼ` below which the expansion is refused.
pub const SINGULAR_EPS: f64 = 1e-9;

/// Concentration matrix `F` of `MF(R; F) ∝ exp(Tr[Fᵀ R])`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatrixFisherParams {
    pub f: Mat3,
}

impl MatrixFisherParams {
    pub fn new(f: Mat3) -> Result<Self> {
        if !f.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("matrix-Fisher parameter"));
        }
        Ok(Self { f })
    }

    /// Posterior parameters for `y ≈ R∘x + σ η`: `F = yᵀx / σ²`.
    pub fn from_observation(y: &PointCloud, x: &PointCloud, sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        Self::new(y.cross_covariance(x)? / (sigma * sigma))
    }

    /// `Tr[Fᵀ R]`.
    pub fn log_density_unnorm(&self, r: &Rotation) -> f64 {
        self.f.dot(r.matrix())
    }

    pub fn mode(&self) -> Result<Rotation> {
        if self.f.amax() == 0.0 {
            return Err(Error::ZeroCrossCovariance);
        }
        Ok(proper_svd(&self.f)?.rotation())
    }
}

pub fn mf_from_observation(y: &PointCloud, x: &PointCloud, sigma: f64) -> Result<MatrixFisherParams> {
    MatrixFisherParams::from_observation(y, x, sigma)
}

pub fn mf_log_density_unnorm(p: &MatrixFisherParams, r: &Rotation) -> f64 {
    p.log_density_unnorm(r)
}

pub fn mf_mode(p: &MatrixFisherParams) -> Result<Rotation> {
    p.mode()
}

pub(crate) fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// Proper singular values `s1 ≥ s2 ≥ |s3|`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SingularSpectrum {
    s: [f64; 3],
}

impl SingularSpectrum {
    pub fn new(s1: f64, s2: f64, s3: f64) -> Result<Self> {
        if ![s1, s2, s3].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("singular spectrum"));
        }
        if !(s1 >= s2 && s2 >= s3.abs()) {
            return Err(Error::InvalidParameter(format!(
                "singular spectrum must satisfy s1 ≥ s2 ≥ |s3|, got ({s1}, {s2}, {s3})"
            )));
        }
        Ok(Self { s: [s1, s2, s3] })
    }

    pub fn from_svd(svd: &ProperSvd) -> Self {
        Self {
            s: [svd.s[0], svd.s[1], svd.s[2]],
        }
    }

    pub fn values(&self) -> [f64; 3] {
        self.s
    }

    /// Pairwise sums `(sᵢ + sⱼ, sᵢ + sₖ)` for each diagonal slot `i`.
    fn pair_sums(&self) -> Result<[[f64; 2]; 3]> {
        let [s1, s2, s3] = self.s;
        let threshold = SINGULAR_EPS * s1;
        for sum in [s1 + s2, s1 + s3, s2 + s3] {
            if sum <= threshold || s1 <= 0.0 {
                return Err(Error::ExpansionSingular { sum, threshold });
            }
        }
        Ok([[s1 + s2, s1 + s3], [s2 + s1, s2 + s3], [s3 + s1, s3 + s2]])
    }
}

/// First-order coefficient: `−½ (1/(sᵢ+sⱼ) + 1/(sᵢ+sₖ))` per slot.
pub fn c1(s: &SingularSpectrum) -> Result<Vec3> {
    let p = s.pair_sums()?;
    Ok(Vec3::from_fn(|i, _| -0.5 * (1.0 / p[i][0] + 1.0 / p[i][1])))
}

/// Second-order coefficient: `−⅛ (1/(sᵢ+sⱼ)² + 1/(sᵢ+sₖ)²)` per slot.
pub fn c2(s: &SingularSpectrum) -> Result<Vec3> {
    let p = s.pair_sums()?;
    Ok(Vec3::from_fn(|i, _| {
        -0.125 * (1.0 / (p[i][0] * p[i][0]) + 1.0 / (p[i][1] * p[i][1]))
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ExpansionOrder {
    Zero,
    One,
    Two,
}

impl ExpansionOrder {
    pub fn as_usize(self) -> usize {
        match self {
            ExpansionOrder::Zero => 0,
            ExpansionOrder::One => 1,
            ExpansionOrder::Two => 2,
        }
    }

    pub const ALL: [ExpansionOrder; 3] = [ExpansionOrder::Zero, ExpansionOrder::One, ExpansionOrder::Two];
}

impl TryFrom<usize> for ExpansionOrder {
    type Error = Error;
    fn try_from(k: usize) -> Result<Self> {
        match k {
            0 => Ok(ExpansionOrder::Zero),
            1 => Ok(ExpansionOrder::One),
            2 => Ok(ExpansionOrder::Two),
            _ => Err(Error::InvalidParameter(format!("expansion order {k} not in 0..=2"))),
        }
    }
}

impl FromStr for ExpansionOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let k: usize = s
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("bad expansion order {s:?}")))?;
        k.try_into()
    }
}

impl fmt::Display for ExpansionOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_usize())
    }
}

/// Truncated expansion of `E[R]` under `MF(R; a / σ²)`.
///
/// `a` is the unscaled product `yᵀx`; the `1/σ²` concentration is applied
/// here. The result is a plain matrix inside the convex hull of SO(3), not a
/// rotation.
pub fn mf_mean_laplace(a: &Mat3, sigma: f64, order: ExpansionOrder) -> Result<Mat3> {
    check_sigma(sigma)?;
    if a.amax() == 0.0 {
        return Err(Error::ZeroCrossCovariance);
    }
    let svd = proper_svd(a)?;
    laplace_from_svd(&svd, sigma, order)
}

/// Same as [`mf_mean_laplace`] for an already factored `yᵀx`.
pub fn laplace_from_svd(svd: &ProperSvd, sigma: f64, order: ExpansionOrder) -> Result<Mat3> {
    let mut diag = Vec3::repeat(1.0);
    if order >= ExpansionOrder::One {
        let sv = SingularSpectrum::from_svd(svd);
        let s2 = sigma * sigma;
        diag += c1(&sv)? * s2;
        if order >= ExpansionOrder::Two {
            diag += c2(&sv)? * (s2 * s2);
        }
    }
    Ok((svd.u.matrix() * Mat3::from_diagonal(&diag)) * svd.v.matrix().transpose())
}
