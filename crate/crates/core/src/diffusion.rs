//! Desk-scale diffusion pieces: rotationally augmented noising, a two-layer
//! MLP denoiser trained against the estimator targets with hand-written
//! gradients, and the deterministic DDIM sampler.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::align::{aligned_rmsd, rmsd};
use crate::error::{Error, Result};
use crate::estimators::{estimator_target, EstimatorKind};
use crate::geom::{sample_haar, PointCloud, Rotation};
use crate::par;
use crate::quad::TEST_TOL;

/// Draws `R_aug ~ Haar` and returns `(center(R_aug∘x + σ η), R_aug)`.
pub fn noise_sample<R: Rng + ?Sized>(x: &PointCloud, sigma: f64, rng: &mut R) -> (PointCloud, Rotation) {
    let r_aug = sample_haar(rng);
    let rotated = x.rotate(&r_aug);
    if sigma == 0.0 {
        return (rotated, r_aug);
    }
    let eta = PointCloud::standard_normal(x.len(), rng);
    let y = rotated.add_scaled(&eta, sigma).expect("same length").center();
    (y, r_aug)
}

/// `tanh` MLP with one hidden layer; input is `(flatten(y)/s_ref, ln σ, 1)`,
/// output is reshaped to `N×3` and centered.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpDenoiser {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub s_ref: f64,
}

impl MlpDenoiser {
    pub fn zeros(n_points: usize, hidden: usize, s_ref: f64) -> Self {
        let d_in = 3 * n_points + 2;
        Self {
            w1: DMatrix::zeros(hidden, d_in),
            b1: DVector::zeros(hidden),
            w2: DMatrix::zeros(3 * n_points, hidden),
            b2: DVector::zeros(3 * n_points),
            s_ref,
        }
    }

    /// Gaussian init with variance `1/fan_in`, zero biases.
    pub fn init<R: Rng + ?Sized>(n_points: usize, hidden: usize, s_ref: f64, rng: &mut R) -> Self {
        let mut m = Self::zeros(n_points, hidden, s_ref);
        let s1 = 1.0 / (m.input_dim() as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        m.w1.iter_mut().for_each(|w| *w = s1 * rng.sample::<f64, _>(StandardNormal));
        m.w2.iter_mut().for_each(|w| *w = s2 * rng.sample::<f64, _>(StandardNormal));
        m
    }

    pub fn n_points(&self) -> usize {
        self.b2.len() / 3
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Parameters in `w1, b1, w2, b2` order, matrices row-major.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend(self.w1.transpose().iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.transpose().iter());
        out.extend(self.b2.iter());
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::ShapeMismatch(params.len(), self.n_params()));
        }
        let (h, d) = self.w1.shape();
        let (o, _) = self.w2.shape();
        let mut it = params.iter().copied();
        self.w1 = DMatrix::from_row_iterator(h, d, it.by_ref().take(h * d));
        self.b1 = DVector::from_iterator(h, it.by_ref().take(h));
        self.w2 = DMatrix::from_row_iterator(o, h, it.by_ref().take(o * h));
        self.b2 = DVector::from_iterator(o, it.by_ref().take(o));
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params_flat().iter().all(|v| v.is_finite())
    }

    fn features(&self, y: &PointCloud, sigma: f64) -> Result<DVector<f64>> {
        if y.len() != self.n_points() {
            return Err(Error::ShapeMismatch(y.len(), self.n_points()));
        }
        if !(sigma > 0.0) {
            return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
        }
        let mut v: Vec<f64> = y.flatten().iter().map(|c| c / self.s_ref).collect();
        v.push(sigma.ln());
        v.push(1.0);
        Ok(DVector::from_vec(v))
    }

    pub fn forward(&self, y: &PointCloud, sigma: f64) -> Result<PointCloud> {
        let input = self.features(y, sigma)?;
        let hidden = (&self.w1 * &input + &self.b1).map(f64::tanh);
        let out = &self.w2 * hidden + &self.b2;
        Ok(PointCloud::from_flat(out.as_slice())?.center())
    }
}

pub fn mlp_forward(m: &MlpDenoiser, y: &PointCloud, sigma: f64) -> Result<PointCloud> {
    m.forward(y, sigma)
}

/// Removes the per-axis mean of a flattened `N×3` vector.
fn center_flat(v: &mut DVector<f64>) {
    let n = v.len() / 3;
    for axis in 0..3 {
        let mean = (0..n).map(|i| v[3 * i + axis]).sum::<f64>() / n as f64;
        for i in 0..n {
            v[3 * i + axis] -= mean;
        }
    }
}

/// Mean matching loss `‖mlp(y) − target‖²` over `(y, target)` pairs and its
/// gradient with respect to every parameter. Targets are constants.
pub fn loss_and_grad_targets(
    m: &MlpDenoiser,
    pairs: &[(PointCloud, PointCloud)],
    sigma: f64,
) -> Result<(f64, MlpDenoiser)> {
    if pairs.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let scale = 1.0 / pairs.len() as f64;
    let mut grads = MlpDenoiser::zeros(m.n_points(), m.hidden(), m.s_ref);
    let mut loss = 0.0;
    for (y, target) in pairs {
        if target.len() != m.n_points() {
            return Err(Error::ShapeMismatch(target.len(), m.n_points()));
        }
        let input = m.features(y, sigma)?;
        let hidden = (&m.w1 * &input + &m.b1).map(f64::tanh);
        let mut out = &m.w2 * &hidden + &m.b2;
        center_flat(&mut out);
        let mut resid = out - DVector::from_vec(target.flatten());
        loss += scale * resid.norm_squared();

        // centering is a symmetric projection, so its adjoint is itself
        resid *= 2.0 * scale;
        center_flat(&mut resid);
        let g_out = resid;
        grads.w2 += &g_out * hidden.transpose();
        grads.b2 += &g_out;
        let g_hidden = m.w2.tr_mul(&g_out);
        let g_pre = g_hidden.zip_map(&hidden, |g, h| g * (1.0 - h * h));
        grads.w1 += &g_pre * input.transpose();
        grads.b1 += &g_pre;
    }
    Ok((loss, grads))
}

/// One training example: clean cloud, its noisy augmented observation, and
/// the augmentation rotation.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub x: PointCloud,
    pub y: PointCloud,
    pub r_aug: Rotation,
}

#[derive(Clone, Debug)]
pub struct BatchGrad {
    pub loss: f64,
    pub grads: MlpDenoiser,
    pub n_used: usize,
    pub n_excluded: usize,
}

/// Matching loss against `estimator` targets. Samples whose target cannot
/// be formed are excluded and counted.
pub fn loss_and_grad(
    m: &MlpDenoiser,
    batch: &[TrainSample],
    sigma: f64,
    estimator: EstimatorKind,
    oracle_tol: f64,
) -> Result<BatchGrad> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let targets = par::map_indexed(batch.len(), |i| {
        let s = &batch[i];
        estimator_target(estimator, &s.y, &s.x, sigma, Some(&s.r_aug), oracle_tol).ok()
    });
    let pairs: Vec<(PointCloud, PointCloud)> = batch
        .iter()
        .zip(targets)
        .filter_map(|(s, t)| t.map(|t| (s.y.clone(), t.cloud)))
        .collect();
    let n_excluded = batch.len() - pairs.len();
    if pairs.is_empty() {
        return Ok(BatchGrad {
            loss: 0.0,
            grads: MlpDenoiser::zeros(m.n_points(), m.hidden(), m.s_ref),
            n_used: 0,
            n_excluded,
        });
    }
    let (loss, grads) = loss_and_grad_targets(m, &pairs, sigma)?;
    Ok(BatchGrad {
        loss,
        grads,
        n_used: pairs.len(),
        n_excluded,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetMode {
    /// Every example draws its clean cloud uniformly from the dataset.
    AllFrames,
    /// Every example uses the first frame.
    SingleFrame,
}

impl FromStr for DatasetMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-frames" => Ok(DatasetMode::AllFrames),
            "single-frame" => Ok(DatasetMode::SingleFrame),
            _ => Err(Error::InvalidParameter(format!("unknown dataset mode {s:?}"))),
        }
    }
}

impl fmt::Display for DatasetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetMode::AllFrames => "all-frames",
            DatasetMode::SingleFrame => "single-frame",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sigma: f64,
    /// When set, each minibatch draws its σ log-uniformly from `[sigma, sigma_max]`.
    pub sigma_max: Option<f64>,
    pub estimator: EstimatorKind,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub dataset_mode: DatasetMode,
    pub hidden: usize,
    pub probe_size: usize,
    pub oracle_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            sigma_max: None,
            estimator: EstimatorKind::Order0,
            steps: 2000,
            batch: 32,
            lr: 1e-3,
            seed: 0,
            dataset_mode: DatasetMode::SingleFrame,
            hidden: 64,
            probe_size: 32,
            oracle_tol: TEST_TOL,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(format!("train config: {what}")));
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive");
        }
        if let Some(max) = self.sigma_max {
            if !(max >= self.sigma && max.is_finite()) {
                return bad("sigma_max must be ≥ sigma");
            }
        }
        if self.batch == 0 || self.hidden == 0 || self.probe_size == 0 {
            return bad("batch, hidden and probe_size must be positive");
        }
        if !(self.lr > 0.0) || !(self.oracle_tol > 0.0) {
            return bad("lr and oracle_tol must be positive");
        }
        Ok(())
    }
}

/// Metrics after `step` parameter updates, measured on a fixed probe batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub rmsd: f64,
    pub aligned_rmsd: f64,
    /// Training samples excluded so far.
    pub n_excluded: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainStatus {
    Completed,
    /// Loss or parameters became non-finite at this update.
    Diverged { step: usize },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: MlpDenoiser,
    pub metrics: Vec<StepMetrics>,
    pub status: TrainStatus,
}

/// Adam on a flat parameter vector.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// RMS point norm, the input scale of the model.
pub fn rms_scale(x: &PointCloud) -> f64 {
    (x.norm_sq() / x.len() as f64).sqrt()
}

/// Aligned RMSD that tolerates an all-zero prediction (every rotation is
/// then optimal).
fn probe_aligned_rmsd(pred: &PointCloud, x: &PointCloud) -> Result<f64> {
    match aligned_rmsd(pred, x) {
        Err(Error::ZeroCrossCovariance) => rmsd(pred, x),
        other => other,
    }
}

struct Probe {
    samples: Vec<TrainSample>,
    targets: Vec<Option<PointCloud>>,
}

impl Probe {
    fn metrics(&self, m: &MlpDenoiser, sigma: f64, step: usize, n_excluded: usize) -> Result<StepMetrics> {
        let mut loss = 0.0;
        let mut n_loss = 0;
        let mut sum_rmsd = 0.0;
        let mut sum_aligned = 0.0;
        for (s, target) in self.samples.iter().zip(&self.targets) {
            let pred = m.forward(&s.y, sigma)?;
            if let Some(t) = target {
                loss += pred.dist_sq(t)?;
                n_loss += 1;
            }
            sum_rmsd += rmsd(&pred, &s.x.rotate(&s.r_aug))?;
            sum_aligned += probe_aligned_rmsd(&pred, &s.x)?;
        }
        let n = self.samples.len() as f64;
        Ok(StepMetrics {
            step,
            loss: if n_loss > 0 { loss / n_loss as f64 } else { f64::NAN },
            rmsd: sum_rmsd / n,
            aligned_rmsd: sum_aligned / n,
            n_excluded,
        })
    }
}

fn draw_sample<R: Rng + ?Sized>(dataset: &[PointCloud], mode: DatasetMode, sigma: f64, rng: &mut R) -> TrainSample {
    let x = match mode {
        DatasetMode::SingleFrame => dataset[0].clone(),
        DatasetMode::AllFrames => dataset[rng.random_range(0..dataset.len())].clone(),
    };
    let (y, r_aug) = noise_sample(&x, sigma, rng);
    TrainSample { x, y, r_aug }
}

/// Trains a fresh [`MlpDenoiser`] with Adam against the configured estimator.
///
/// Fully deterministic given `cfg.seed`. A non-finite loss or parameter
/// stops training with [`TrainStatus::Diverged`].
pub fn train(cfg: &TrainConfig, dataset: &[PointCloud]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let Some(first) = dataset.first() else {
        return Err(Error::InvalidParameter("empty dataset".into()));
    };
    let n = first.len();
    if let Some(bad) = dataset.iter().find(|x| x.len() != n) {
        return Err(Error::ShapeMismatch(bad.len(), n));
    }
    let dataset: Vec<PointCloud> = dataset.iter().map(|x| x.center()).collect();
    let s_ref = rms_scale(&dataset[0]);
    if !(s_ref > 0.0) {
        return Err(Error::InvalidParameter("first frame has zero extent".into()));
    }

    let stream = |k: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(k);
        rng
    };
    let mut init_rng = stream(0);
    let mut probe_rng = stream(1);
    let mut data_rng = stream(2);

    let mut model = MlpDenoiser::init(n, cfg.hidden, s_ref, &mut init_rng);
    let samples: Vec<TrainSample> = (0..cfg.probe_size)
        .map(|_| draw_sample(&dataset, cfg.dataset_mode, cfg.sigma, &mut probe_rng))
        .collect();
    let targets = samples
        .iter()
        .map(|s| {
            estimator_target(cfg.estimator, &s.y, &s.x, cfg.sigma, Some(&s.r_aug), cfg.oracle_tol)
                .ok()
                .map(|t| t.cloud)
        })
        .collect();
    let probe = Probe { samples, targets };

    let mut metrics = vec![probe.metrics(&model, cfg.sigma, 0, 0)?];
    let mut adam = Adam::new(model.n_params(), cfg.lr);
    let mut n_excluded = 0;
    for step in 1..=cfg.steps {
        let sigma = match cfg.sigma_max {
            Some(max) if max > cfg.sigma => (cfg.sigma.ln() + data_rng.random::<f64>() * (max / cfg.sigma).ln()).exp(),
            _ => cfg.sigma,
        };
        let batch: Vec<TrainSample> = (0..cfg.batch)
            .map(|_| draw_sample(&dataset, cfg.dataset_mode, sigma, &mut data_rng))
            .collect();
        let bg = loss_and_grad(&model, &batch, sigma, cfg.estimator, cfg.oracle_tol)?;
        n_excluded += bg.n_excluded;
        if !bg.loss.is_finite() {
            return Ok(TrainOutcome {
                model,
                metrics,
                status: TrainStatus::Diverged { step },
            });
        }
        if bg.n_used > 0 {
            let mut params = model.params_flat();
            adam.step(&mut params, &bg.grads.params_flat());
            model.set_params_flat(&params)?;
        }
        let row = probe.metrics(&model, cfg.sigma, step, n_excluded)?;
        let finite = model.is_finite() && row.rmsd.is_finite();
        metrics.push(row);
        if !finite {
            return Ok(TrainOutcome {
                model,
                metrics,
                status: TrainStatus::Diverged { step },
            });
        }
    }
    Ok(TrainOutcome {
        model,
        metrics,
        status: TrainStatus::Completed,
    })
}

/// Noise levels `σ_M > … > σ_0 = 0` visited by the sampler.
#[derive(Clone, Debug, PartialEq)]
pub struct DdimSchedule {
    sigmas: Vec<f64>,
}

impl DdimSchedule {
    pub fn new(sigmas: Vec<f64>) -> Result<Self> {
        let ok = sigmas.len() >= 2
            && sigmas[0] > 0.0
            && sigmas.iter().all(|s| s.is_finite())
            && *sigmas.last().unwrap() == 0.0
            && sigmas.windows(2).all(|w| w[0] > w[1]);
        if !ok {
            return Err(Error::InvalidParameter(
                "schedule must be strictly descending, start positive and end at 0".into(),
            ));
        }
        Ok(Self { sigmas })
    }

    /// `steps` geometrically spaced levels from `max` down to `min`, then 0.
    pub fn geometric(max: f64, min: f64, steps: usize) -> Result<Self> {
        if !(max > min && min > 0.0 && steps >= 1) {
            return Err(Error::InvalidParameter("geometric schedule needs max > min > 0".into()));
        }
        let mut s: Vec<f64> = (0..steps)
            .map(|i| {
                let t = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                max * (min / max).powf(t)
            })
            .collect();
        s.push(0.0);
        Self::new(s)
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
}

/// `y + (1 − σ_to/σ_from) (D(y, σ_from) − y)`.
pub fn ddim_step<D>(denoiser: &mut D, y: &PointCloud, sigma_from: f64, sigma_to: f64) -> Result<PointCloud>
where
    D: FnMut(&PointCloud, f64) -> Result<PointCloud>,
{
    let d = denoiser(y, sigma_from)?;
    y.add_scaled(&d.sub(y)?, 1.0 - sigma_to / sigma_from)
}

/// Deterministic DDIM sampling from `center(σ_M η)` down to `σ_0 = 0`.
pub fn ddim_sample<D, R>(mut denoiser: D, schedule: &DdimSchedule, n_points: usize, rng: &mut R) -> Result<PointCloud>
where
    D: FnMut(&PointCloud, f64) -> Result<PointCloud>,
    R: Rng + ?Sized,
{
    if n_points == 0 {
        return Err(Error::TooFewPoints { min: 1, got: 0 });
    }
    let s = schedule.sigmas();
    let mut y = PointCloud::standard_normal(n_points, rng).scale(s[0]).center();
    for w in s.windows(2) {
        y = ddim_step(&mut denoiser, &y, w[0], w[1])?;
    }
    Ok(y)
}
