//! Denoiser targets built from a clean cloud `x` and its noisy rotated
//! observation `y`, and the experiment comparing them against the quadrature
//! oracle.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::kabsch;
use crate::diffusion::noise_sample;
use crate::error::{Error, Result};
use crate::geom::{proper_svd, PointCloud, Rotation};
use crate::par;
use crate::quad::{mf_expectation, mf_moment_adaptive, oracle_conditional_denoiser};
use crate::sofisher::{check_sigma, laplace_from_svd, ExpansionOrder, MatrixFisherParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    /// The augmented ground truth `R_aug ∘ x` itself.
    Aug,
    /// Kabsch alignment, `R*(y, x) ∘ x`.
    Order0,
    Order1,
    Order2,
    /// Quadrature posterior mean.
    Oracle,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [
        EstimatorKind::Aug,
        EstimatorKind::Order0,
        EstimatorKind::Order1,
        EstimatorKind::Order2,
        EstimatorKind::Oracle,
    ];

    /// The kinds reported by [`error_sweep`].
    pub const SWEPT: [EstimatorKind; 4] = [
        EstimatorKind::Aug,
        EstimatorKind::Order0,
        EstimatorKind::Order1,
        EstimatorKind::Order2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Aug => "aug",
            EstimatorKind::Order0 => "order0",
            EstimatorKind::Order1 => "order1",
            EstimatorKind::Order2 => "order2",
            EstimatorKind::Oracle => "oracle",
        }
    }

    pub fn expansion_order(self) -> Option<ExpansionOrder> {
        match self {
            EstimatorKind::Order0 => Some(ExpansionOrder::Zero),
            EstimatorKind::Order1 => Some(ExpansionOrder::One),
            EstimatorKind::Order2 => Some(ExpansionOrder::Two),
            _ => None,
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown estimator {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorTarget {
    pub cloud: PointCloud,
    /// The alignment behind the target was not unique (`rank(yᵀx) < 2`).
    pub degenerate: bool,
}

/// Regression target of the given estimator.
///
/// `r_aug` is required for [`EstimatorKind::Aug`] and ignored otherwise;
/// `tol` is only used by the oracle.
pub fn estimator_target(
    kind: EstimatorKind,
    y: &PointCloud,
    x: &PointCloud,
    sigma: f64,
    r_aug: Option<&Rotation>,
    tol: f64,
) -> Result<EstimatorTarget> {
    check_sigma(sigma)?;
    y.check_same_len(x)?;
    match kind {
        EstimatorKind::Aug => {
            let r = r_aug.ok_or_else(|| Error::InvalidParameter("aug estimator needs the augmentation rotation".into()))?;
            Ok(EstimatorTarget {
                cloud: x.rotate(r),
                degenerate: false,
            })
        }
        EstimatorKind::Order0 => {
            let al = kabsch(y, x)?;
            Ok(EstimatorTarget {
                cloud: x.rotate(&al.rotation),
                degenerate: al.degenerate,
            })
        }
        EstimatorKind::Order1 | EstimatorKind::Order2 => {
            let al = kabsch(y, x)?;
            let order = kind.expansion_order().expect("expansion kind");
            let m = laplace_from_svd(&al.svd, sigma, order)?;
            Ok(EstimatorTarget {
                cloud: x.transform(&m),
                degenerate: al.degenerate,
            })
        }
        EstimatorKind::Oracle => Ok(EstimatorTarget {
            cloud: oracle_conditional_denoiser(y, x, sigma, tol)?,
            degenerate: false,
        }),
    }
}

/// `‖target(kind) − target(oracle)‖²`.
pub fn mse_to_oracle(
    kind: EstimatorKind,
    y: &PointCloud,
    x: &PointCloud,
    sigma: f64,
    r_aug: Option<&Rotation>,
    tol: f64,
) -> Result<f64> {
    if kind == EstimatorKind::Oracle {
        return Ok(0.0);
    }
    let oracle = estimator_target(EstimatorKind::Oracle, y, x, sigma, None, tol)?;
    let est = estimator_target(kind, y, x, sigma, r_aug, tol)?;
    est.cloud.dist_sq(&oracle.cloud)
}

/// One row of the σ sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub sigma: f64,
    pub kind: EstimatorKind,
    pub mean_mse: f64,
    pub stderr: f64,
    /// Samples that entered the mean.
    pub n_samples: usize,
    /// Samples dropped because the estimator or the oracle failed.
    pub n_excluded: usize,
    pub seed: u64,
}

/// RNG for sample `sample` at sweep position `sigma_index`; independent of
/// evaluation order.
pub fn sample_rng(seed: u64, sigma_index: usize, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((sigma_index as u64) << 32) | sample as u64);
    rng
}

fn sweep_sample(
    x: &PointCloud,
    sigma: f64,
    rng: &mut ChaCha8Rng,
    tol: f64,
) -> [Option<f64>; EstimatorKind::SWEPT.len()] {
    let (y, r_aug) = noise_sample(x, sigma, rng);
    let Ok(oracle) = oracle_conditional_denoiser(&y, x, sigma, tol) else {
        return [None; 4];
    };
    EstimatorKind::SWEPT.map(|kind| {
        estimator_target(kind, &y, x, sigma, Some(&r_aug), tol)
            .and_then(|t| t.cloud.dist_sq(&oracle))
            .ok()
    })
}

/// Mean squared error to the oracle of every swept estimator, per σ.
///
/// For each σ, `n_noise` draws of `(R_aug, η)` give `y = center(R_aug∘x + σ η)`.
/// Failed samples are counted in `n_excluded`, never substituted.
pub fn error_sweep(x: &PointCloud, sigmas: &[f64], n_noise: usize, seed: u64, tol: f64) -> Result<Vec<SweepRecord>> {
    if n_noise == 0 {
        return Err(Error::InvalidParameter("n_noise must be at least 1".into()));
    }
    if sigmas.is_empty() || sigmas.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidParameter("sigmas must be positive and finite".into()));
    }
    if sigmas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter("sigmas must be strictly ascending".into()));
    }
    let x = x.center();
    let total = sigmas.len() * n_noise;
    let samples = par::map_indexed(total, |k| {
        let (i, j) = (k / n_noise, k % n_noise);
        sweep_sample(&x, sigmas[i], &mut sample_rng(seed, i, j), tol)
    });

    let mut records = Vec::with_capacity(sigmas.len() * EstimatorKind::SWEPT.len());
    for (i, &sigma) in sigmas.iter().enumerate() {
        let block = &samples[i * n_noise..(i + 1) * n_noise];
        for (slot, &kind) in EstimatorKind::SWEPT.iter().enumerate() {
            let vals: Vec<f64> = block.iter().filter_map(|s| s[slot]).collect();
            let (mean_mse, stderr) = mean_and_stderr(&vals);
            records.push(SweepRecord {
                sigma,
                kind,
                mean_mse,
                stderr,
                n_samples: vals.len(),
                n_excluded: n_noise - vals.len(),
                seed,
            });
        }
    }
    Ok(records)
}

fn mean_and_stderr(vals: &[f64]) -> (f64, f64) {
    let n = vals.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = vals.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// σ values at which the augmented target beat alignment on average. Alignment
/// is the posterior mode, not the mean, so this is reported rather than
/// treated as an error.
pub fn aug_mode_violations(records: &[SweepRecord]) -> Vec<f64> {
    let lookup = |sigma: f64, kind: EstimatorKind| {
        records
            .iter()
            .find(|r| r.sigma == sigma && r.kind == kind)
            .map(|r| r.mean_mse)
    };
    let mut out = Vec::new();
    for r in records.iter().filter(|r| r.kind == EstimatorKind::Aug) {
        if let Some(order0) = lookup(r.sigma, EstimatorKind::Order0) {
            if r.mean_mse < order0 {
                out.push(r.sigma);
            }
        }
    }
    out
}

/// `Δ(d) = E_R[‖d − R∘x‖²] − ‖d − E_R[R∘x]‖²` for each probe `d` under the
/// rotation posterior of `(y, x, σ)`.
pub fn averaging_offsets(
    y: &PointCloud,
    x: &PointCloud,
    sigma: f64,
    probes: &[PointCloud],
    tol: f64,
) -> Result<Vec<f64>> {
    let p = MatrixFisherParams::from_observation(y, x, sigma)?;
    let moment = mf_moment_adaptive(&p, tol)?;
    let mean_cloud = x.transform(&moment.mean);
    probes
        .iter()
        .map(|d| {
            d.check_same_len(x)?;
            let expected = mf_expectation(&p, &moment.grid, |m| {
                d.points()
                    .iter()
                    .zip(x.points())
                    .map(|(di, xi)| (di - m * xi).norm_squared())
                    .sum()
            })?;
            Ok(expected - d.dist_sq(&mean_cloud)?)
        })
        .collect()
}

/// Spread `maxᵢ |Δ(dᵢ) − Δ(d₀)|` of [`averaging_offsets`]; zero when
/// averaging the estimator only shifts the matching loss by a constant.
pub fn averaging_offset_check(
    y: &PointCloud,
    x: &PointCloud,
    sigma: f64,
    probes: &[PointCloud],
    tol: f64,
) -> Result<f64> {
    let offsets = averaging_offsets(y, x, sigma, probes, tol)?;
    let Some(&first) = offsets.first() else {
        return Err(Error::InvalidParameter("at least one probe is required".into()));
    };
    Ok(offsets.iter().map(|d| (d - first).abs()).fold(0.0, f64::max))
}

/// Proper SVD of `yᵀx`, exposed for callers that want all orders at once.
pub fn laplace_targets(y: &PointCloud, x: &PointCloud, sigma: f64) -> Result<[PointCloud; 3]> {
    let svd = proper_svd(&y.cross_covariance(x)?)?;
    let mut out = Vec::with_capacity(3);
    for order in ExpansionOrder::ALL {
        out.push(x.transform(&laplace_from_svd(&svd, sigma, order)?));
    }
    Ok(out.try_into().expect("three orders"))
}
