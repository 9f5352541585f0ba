use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use so3_denoise::align::{aligned_rmsd, kabsch, rmsd};
use so3_denoise::diffusion::{ddim_sample, noise_sample, train, DatasetMode, DdimSchedule, TrainConfig, TrainStatus};
use so3_denoise::estimators::{aug_mode_violations, error_sweep, EstimatorKind};
use so3_denoise::geom::{Mat3, PointCloud};
use so3_denoise::io::{load_checkpoint, load_trajectory, save_checkpoint, save_trajectory, synth_trajectory, write_metrics_csv, write_sweep_csv, write_xyz};
use so3_denoise::quad::{mf_mean_quadrature, SWEEP_TOL, TEST_TOL};
use so3_denoise::sofisher::{mf_mean_laplace, ExpansionOrder, MatrixFisherParams};
use so3_denoise::{par, selftest, Error, Result};

/// Rotation-posterior denoising targets for point clouds.
///
/// Noise levels are absolute, in the units of the trajectory coordinates;
/// the `scale` reported for each trajectory is the natural reference.
/// `SO3_DENOISE_THREADS` caps the worker count (0 or unset = all cores).
#[derive(Parser)]
#[command(name = "so3-denoise", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Kabsch-align two frames of a trajectory.
    Align {
        trajectory: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame_a: usize,
        #[arg(long, default_value_t = 1)]
        frame_b: usize,
    },
    /// Posterior rotation moment E[R] for one noisy observation of a frame.
    Moment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        sigma: f64,
        /// 0, 1, 2 or oracle.
        #[arg(long, default_value = "oracle")]
        order: MomentOrder,
        #[arg(long, default_value_t = TEST_TOL)]
        tol: f64,
        /// Seed for drawing y = center(R x + σ η).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use this frame as the observation instead of drawing one.
        #[arg(long)]
        observed: Option<usize>,
    },
    /// Mean squared error of each estimator to the oracle across noise levels.
    Sweep {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        /// Comma-separated, strictly ascending.
        #[arg(long, value_delimiter = ',', required = true)]
        sigmas: Vec<f64>,
        #[arg(long, default_value_t = 64)]
        n_noise: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = SWEEP_TOL)]
        tol: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the MLP denoiser against an estimator target.
    Train {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        sigma: f64,
        /// Draw σ log-uniformly from [sigma, sigma-max] per minibatch.
        #[arg(long)]
        sigma_max: Option<f64>,
        #[arg(long, default_value = "order0")]
        estimator: EstimatorKind,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value = "single-frame")]
        mode: DatasetMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 64)]
        hidden: usize,
        #[arg(long, default_value_t = 32)]
        probe: usize,
        #[arg(long, default_value_t = TEST_TOL)]
        tol: f64,
        #[arg(long)]
        out_metrics: PathBuf,
        #[arg(long)]
        out_model: PathBuf,
    },
    /// Draw samples from a trained model with the deterministic DDIM sampler.
    Sample {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated, strictly descending, ending in 0.
        #[arg(long, value_delimiter = ',', required = true)]
        schedule: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        n_samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in invariant checks.
    Selftest {
        #[arg(long)]
        fast: bool,
    },
    /// Write a synthetic trajectory.
    Synth {
        #[arg(long, default_value_t = 8)]
        n_points: usize,
        #[arg(long, default_value_t = 1)]
        n_frames: usize,
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug)]
enum MomentOrder {
    Laplace(ExpansionOrder),
    Oracle,
}

impl FromStr for MomentOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(MomentOrder::Oracle),
            _ => s.parse().map(MomentOrder::Laplace),
        }
    }
}

fn matrix_json(m: &Mat3) -> Value {
    json!((0..3).map(|i| (0..3).map(|j| m[(i, j)]).collect::<Vec<_>>()).collect::<Vec<_>>())
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json values serialize"));
}

fn align(path: PathBuf, a: usize, b: usize) -> Result<bool> {
    let traj = load_trajectory(path)?;
    let (fa, fb) = (traj.frame(a)?, traj.frame(b)?);
    let al = kabsch(fa, fb)?;
    print_json(&json!({
        "rotation": matrix_json(al.rotation.matrix()),
        "degenerate": al.degenerate,
        "rmsd": rmsd(fa, fb)?,
        "aligned_rmsd": aligned_rmsd(fa, fb)?,
    }));
    Ok(true)
}

#[allow(clippy::too_many_arguments)]
fn moment(
    input: PathBuf,
    frame: usize,
    sigma: f64,
    order: MomentOrder,
    tol: f64,
    seed: u64,
    observed: Option<usize>,
) -> Result<bool> {
    let traj = load_trajectory(input)?;
    let x = traj.frame(frame)?;
    let y = match observed {
        Some(j) => traj.frame(j)?.clone(),
        None => noise_sample(x, sigma, &mut ChaCha8Rng::seed_from_u64(seed)).0,
    };
    let a = y.cross_covariance(x)?;
    let mut out = json!({ "sigma": sigma, "scale": traj.scale });
    match order {
        MomentOrder::Laplace(o) => {
            out["order"] = json!(o.as_usize());
            out["moment"] = matrix_json(&mf_mean_laplace(&a, sigma, o)?);
        }
        MomentOrder::Oracle => {
            let exact = mf_mean_quadrature(&MatrixFisherParams::from_observation(&y, x, sigma)?, tol)?;
            out["order"] = json!("oracle");
            out["tol"] = json!(tol);
            out["moment"] = matrix_json(&exact);
            let mut errors = serde_json::Map::new();
            for o in ExpansionOrder::ALL {
                let err = match mf_mean_laplace(&a, sigma, o) {
                    Ok(m) => json!((m - exact).amax()),
                    Err(e) => json!(e.to_string()),
                };
                errors.insert(format!("order{}", o.as_usize()), err);
            }
            out["errors"] = Value::Object(errors);
        }
    }
    print_json(&out);
    Ok(true)
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    input: PathBuf,
    frame: usize,
    sigmas: &[f64],
    n_noise: usize,
    seed: u64,
    tol: f64,
    out: PathBuf,
) -> Result<bool> {
    let traj = load_trajectory(input)?;
    let records = error_sweep(traj.frame(frame)?, sigmas, n_noise, seed, tol)?;
    write_sweep_csv(BufWriter::new(File::create(&out)?), &records)?;
    let violations = aug_mode_violations(&records);
    if !violations.is_empty() {
        eprintln!("note: mean_mse(aug) < mean_mse(order0) at sigma {violations:?}");
    }
    print_json(&json!({
        "out": out,
        "rows": records.len(),
        "excluded": records.iter().map(|r| r.n_excluded).sum::<usize>(),
        "aug_below_order0": violations,
    }));
    Ok(true)
}

fn train_cmd(input: PathBuf, cfg: TrainConfig, out_metrics: PathBuf, out_model: PathBuf) -> Result<bool> {
    let traj = load_trajectory(input)?;
    let outcome = train(&cfg, &traj.frames)?;
    write_metrics_csv(BufWriter::new(File::create(&out_metrics)?), &outcome.metrics)?;
    let (status, model_written) = match outcome.status {
        TrainStatus::Completed => {
            save_checkpoint(&out_model, &outcome.model, Some(&cfg))?;
            (json!("completed"), true)
        }
        TrainStatus::Diverged { step } => {
            eprintln!("training diverged at step {step}; no model written");
            (json!({ "diverged": step }), false)
        }
    };
    let first = outcome.metrics.first();
    let last = outcome.metrics.last();
    print_json(&json!({
        "status": status,
        "model_written": model_written,
        "initial": first,
        "final": last,
    }));
    Ok(true)
}

fn sample(model: PathBuf, schedule: Vec<f64>, seed: u64, n_samples: usize, out: PathBuf) -> Result<bool> {
    let (mlp, _) = load_checkpoint(model)?;
    let schedule = DdimSchedule::new(schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = (0..n_samples)
        .map(|_| ddim_sample(|y: &PointCloud, s| mlp.forward(y, s), &schedule, mlp.n_points(), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    write_xyz(BufWriter::new(File::create(&out)?), &frames, &format!("ddim seed={seed}"))?;
    print_json(&json!({ "out": out, "samples": frames.len() }));
    Ok(true)
}

fn selftest_cmd(fast: bool) -> Result<bool> {
    let checks = selftest::run(fast);
    for c in &checks {
        println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Align {
            trajectory,
            frame_a,
            frame_b,
        } => align(trajectory, frame_a, frame_b),
        Command::Moment {
            input,
            frame,
            sigma,
            order,
            tol,
            seed,
            observed,
        } => moment(input, frame, sigma, order, tol, seed, observed),
        Command::Sweep {
            input,
            frame,
            sigmas,
            n_noise,
            seed,
            tol,
            out,
        } => sweep(input, frame, &sigmas, n_noise, seed, tol, out),
        Command::Train {
            input,
            sigma,
            sigma_max,
            estimator,
            steps,
            mode,
            seed,
            batch,
            lr,
            hidden,
            probe,
            tol,
            out_metrics,
            out_model,
        } => {
            let cfg = TrainConfig {
                sigma,
                sigma_max,
                estimator,
                steps,
                batch,
                lr,
                seed,
                dataset_mode: mode,
                hidden,
                probe_size: probe,
                oracle_tol: tol,
            };
            train_cmd(input, cfg, out_metrics, out_model)
        }
        Command::Sample {
            model,
            schedule,
            seed,
            n_samples,
            out,
        } => sample(model, schedule, seed, n_samples, out),
        Command::Selftest { fast } => selftest_cmd(fast),
        Command::Synth {
            n_points,
            n_frames,
            jitter,
            seed,
            out,
        } => {
            let traj = synth_trajectory(n_points, n_frames, jitter, seed)?;
            save_trajectory(&out, &traj)?;
            print_json(&json!({ "out": out, "n_points": n_points, "n_frames": n_frames, "scale": traj.scale }));
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match std::env::var("SO3_DENOISE_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) => par::configure_threads(n),
            Err(_) => {
                eprintln!("error: SO3_DENOISE_THREADS must be a non-negative integer, got {v:?}");
                return ExitCode::from(2);
            }
        },
        Err(_) => par::configure_threads(0),
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
