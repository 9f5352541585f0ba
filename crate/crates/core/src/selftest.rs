//! Built-in invariant checks run by the `selftest` subcommand.

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::align::kabsch;
use crate::diffusion::{ddim_sample, loss_and_grad_targets, DdimSchedule, MlpDenoiser};
use crate::error::Result;
use crate::estimators::{estimator_target, EstimatorKind};
use crate::geom::{proper_svd, sample_haar, Mat3, PointCloud, Vec3};
use crate::io::{parse_xyz, synth_trajectory, write_xyz};
use crate::quad::{mf_partition, oracle_conditional_denoiser, so3_grid_global, TEST_TOL};
use crate::sofisher::{c1, c2, mf_mean_laplace, ExpansionOrder, MatrixFisherParams, SingularSpectrum};

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type CheckFn = fn(Effort) -> Result<(bool, String)>;

#[derive(Clone, Copy, Debug)]
struct Effort {
    reps: usize,
    full: bool,
}

const CHECKS: &[(&str, CheckFn)] = &[
    ("proper_svd reconstruction", svd_reconstruction),
    ("haar sample moments", haar_moments),
    ("global grid moments", grid_moments),
    ("kabsch recovery and commutation", kabsch_checks),
    ("laplace coefficients", laplace_coefficients),
    ("oracle equivariance", oracle_equivariance),
    ("ddim trivial denoisers", ddim_trivial),
    ("mlp gradient", mlp_gradient),
    ("xyz round trip", xyz_round_trip),
    ("partition self-convergence", partition_convergence),
];

/// Runs every check; `fast` trims repetitions and skips the expensive ones.
pub fn run(fast: bool) -> Vec<Check> {
    let effort = Effort {
        reps: if fast { 20 } else { 200 },
        full: !fast,
    };
    CHECKS
        .iter()
        .map(|&(name, f)| match f(effort) {
            Ok((passed, detail)) => Check { name, passed, detail },
            Err(e) => Check {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        })
        .collect()
}

fn rng(k: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x5e1f_7e57 ^ k)
}

fn random_matrix(rng: &mut ChaCha8Rng) -> Mat3 {
    Matrix3::from_fn(|_, _| rng.sample(StandardNormal))
}

fn svd_reconstruction(e: Effort) -> Result<(bool, String)> {
    let mut rng = rng(1);
    let mut worst: f64 = 0.0;
    for _ in 0..e.reps {
        let a = random_matrix(&mut rng);
        let svd = proper_svd(&a)?;
        worst = worst.max((svd.reconstruct() - a).norm() / a.norm());
        let ordered = svd.s[0] >= svd.s[1] && svd.s[1] >= svd.s[2].abs();
        if !ordered || (svd.u.matrix().determinant() - 1.0).abs() > 1e-12 || (svd.v.matrix().determinant() - 1.0).abs() > 1e-12 {
            return Ok((false, format!("bad factors for {a}")));
        }
    }
    Ok((worst < 1e-12, format!("max relative error {worst:.2e}")))
}

fn haar_moments(e: Effort) -> Result<(bool, String)> {
    let mut rng = rng(2);
    let n = if e.full { 200_000 } else { 20_000 };
    let mut mean = Mat3::zeros();
    let mut tr2 = 0.0;
    for _ in 0..n {
        let r = sample_haar(&mut rng);
        mean += r.matrix();
        tr2 += r.trace().powi(2);
    }
    mean /= n as f64;
    tr2 /= n as f64;
    let bound = 6.0 / (n as f64).sqrt();
    let ok = mean.amax() < bound && (tr2 - 1.0).abs() < 10.0 * bound;
    Ok((ok, format!("max |E[R]| {:.2e}, E[tr²] {tr2:.4}", mean.amax())))
}

fn grid_moments(_: Effort) -> Result<(bool, String)> {
    let grid = so3_grid_global(16)?;
    let [w, tr2, m00, m01, m22] = grid.weighted_sum(|r| [1.0, r.trace().powi(2), r[(0, 0)], r[(0, 1)], r[(2, 2)]]);
    let ok = (w - 1.0).abs() < 1e-12 && (tr2 - 1.0).abs() < 1e-10 && [m00, m01, m22].iter().all(|m| m.abs() < 1e-12);
    Ok((ok, format!("Σw-1 {:.1e}, E[tr²]-1 {:.1e}", w - 1.0, tr2 - 1.0)))
}

fn kabsch_checks(e: Effort) -> Result<(bool, String)> {
    let mut rng = rng(3);
    let mut worst: f64 = 0.0;
    for _ in 0..e.reps {
        let x = PointCloud::standard_normal(8, &mut rng).center();
        let y = PointCloud::standard_normal(8, &mut rng).center();
        let r = sample_haar(&mut rng);
        let recovered = kabsch(&x.rotate(&r), &x)?.rotation;
        worst = worst.max((recovered.matrix() - r.matrix()).norm());
        let k = kabsch(&y, &x)?.rotation;
        let k_rot = kabsch(&y.rotate(&r), &x.rotate(&r))?.rotation;
        worst = worst.max((k_rot.matrix() - r.matrix() * k.matrix() * r.matrix().transpose()).norm());
    }
    Ok((worst < 1e-10, format!("max deviation {worst:.2e}")))
}

fn laplace_coefficients(_: Effort) -> Result<(bool, String)> {
    let iso = SingularSpectrum::new(1.0, 1.0, 1.0)?;
    let sv = SingularSpectrum::new(2.0, 1.0, 0.0)?;
    let c1_ok = (c1(&iso)? - Vec3::repeat(-0.5)).amax() < 1e-15
        && (c1(&sv)? - Vec3::new(-5.0 / 12.0, -2.0 / 3.0, -0.75)).amax() < 1e-15;
    let c2_ok = (c2(&iso)? - Vec3::repeat(-1.0 / 16.0)).amax() < 1e-15
        && (c2(&sv)? - Vec3::new(-13.0 / 288.0, -5.0 / 36.0, -5.0 / 32.0)).amax() < 1e-15;
    // isotropic a = 100 I at σ = 1: 1 − 1/200 − 1/160000
    let m = mf_mean_laplace(&(Mat3::identity() * 100.0), 1.0, ExpansionOrder::Two)?;
    let iso_ok = (m[(0, 0)] - 0.99499375).abs() < 1e-14;
    Ok((c1_ok && c2_ok && iso_ok, format!("E[R]₁₁ at λ=100: {}", m[(0, 0)])))
}

fn oracle_equivariance(e: Effort) -> Result<(bool, String)> {
    let mut rng = rng(4);
    let reps = if e.full { 10 } else { 2 };
    let mut worst: f64 = 0.0;
    for _ in 0..reps {
        let x = PointCloud::standard_normal(6, &mut rng).center();
        let y = PointCloud::standard_normal(6, &mut rng).center();
        let sigma = 0.3 + rng.random::<f64>();
        let r = sample_haar(&mut rng);
        let d = oracle_conditional_denoiser(&y, &x, sigma, TEST_TOL)?;
        let d_rot = oracle_conditional_denoiser(&y.rotate(&r), &x, sigma, TEST_TOL)?;
        let d_inv = oracle_conditional_denoiser(&y, &x.rotate(&r), sigma, TEST_TOL)?;
        let scale = x.norm_sq().sqrt();
        worst = worst.max(d_rot.dist_sq(&d.rotate(&r))?.sqrt() / scale);
        worst = worst.max(d_inv.dist_sq(&d)?.sqrt() / scale);
    }
    Ok((worst < 2.0 * TEST_TOL, format!("max relative deviation {worst:.2e}")))
}

fn ddim_trivial(_: Effort) -> Result<(bool, String)> {
    let schedule = DdimSchedule::new(vec![3.0, 1.0, 0.5, 0.0])?;
    let start = PointCloud::standard_normal(5, &mut rng(5)).scale(3.0).center();
    let id = ddim_sample(|y: &PointCloud, _| Ok(y.clone()), &schedule, 5, &mut rng(5))?;
    let zero = ddim_sample(|y: &PointCloud, _| Ok(PointCloud::zeros(y.len())), &schedule, 5, &mut rng(5))?;
    Ok((id == start && zero.norm_sq() < 1e-30, format!("|zero output|² {:.1e}", zero.norm_sq())))
}

fn mlp_gradient(_: Effort) -> Result<(bool, String)> {
    let mut rng = rng(6);
    let mut m = MlpDenoiser::init(4, 8, 1.0, &mut rng);
    let pairs: Vec<_> = (0..2)
        .map(|_| {
            let y = PointCloud::standard_normal(4, &mut rng).center();
            let t = PointCloud::standard_normal(4, &mut rng).center();
            (y, t)
        })
        .collect();
    let grads = loss_and_grad_targets(&m, &pairs, 0.5)?.1.params_flat();
    let p0 = m.params_flat();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in (0..p0.len()).step_by(7) {
        let mut p = p0.clone();
        p[k] += h;
        m.set_params_flat(&p)?;
        let lp = loss_and_grad_targets(&m, &pairs, 0.5)?.0;
        p[k] -= 2.0 * h;
        m.set_params_flat(&p)?;
        let lm = loss_and_grad_targets(&m, &pairs, 0.5)?.0;
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max((grads[k] - fd).abs() / grads[k].abs().max(fd.abs()).max(1e-6));
    }
    Ok((worst < 1e-5, format!("max relative error {worst:.2e}")))
}

fn xyz_round_trip(_: Effort) -> Result<(bool, String)> {
    let t = synth_trajectory(6, 3, 0.2, 7)?;
    let mut buf = Vec::new();
    write_xyz(&mut buf, &t.frames, &t.name)?;
    let text = String::from_utf8(buf).map_err(|e| crate::Error::Format(e.to_string()))?;
    let back = parse_xyz(&text)?;
    let mut worst: f64 = 0.0;
    for (a, b) in back.frames.iter().zip(&t.frames) {
        worst = worst.max(a.dist_sq(b)?.sqrt());
    }
    Ok((back.frames.len() == 3 && worst < 1e-14, format!("max deviation {worst:.1e}")))
}

fn partition_convergence(e: Effort) -> Result<(bool, String)> {
    if !e.full {
        // n=64 global grid is the slowest check; also exercise the estimator path cheaply
        let x = synth_trajectory(8, 1, 0.0, 8)?.frames.remove(0);
        let t = estimator_target(EstimatorKind::Order2, &x, &x, 0.1, None, TEST_TOL)?;
        return Ok((t.cloud.dist_sq(&x)? < x.norm_sq(), "skipped in fast mode".into()));
    }
    let p = MatrixFisherParams::new(Mat3::from_diagonal(&Vec3::new(5.0, 4.0, 3.0)))?;
    let z32 = mf_partition(&p, &so3_grid_global(32)?)?;
    let z64 = mf_partition(&p, &so3_grid_global(64)?)?;
    let rel = ((z32 - z64).exp() - 1.0).abs();
    Ok((rel < 1e-8, format!("relative change {rel:.2e}")))
}
