//! Optimal denoising targets for rotationally augmented point-cloud diffusion.
//!
//! Training a diffusion model on point clouds under random rotations turns
//! the regression target into a posterior mean over SO(3). That posterior is
//! a matrix Fisher distribution with parameter `yᵀx/σ²`, so the target can be
//! computed exactly by quadrature or approximated around the Kabsch alignment
//! by a Laplace expansion.
//!
//! - [`geom`]: point clouds, rotations, proper SVD, Haar sampling
//! - [`align`]: Kabsch alignment and RMSD
//! - [`sofisher`]: matrix Fisher parameters and the Laplace moment expansion
//! - [`quad`]: SO(3) quadrature grids and the exact posterior moment
//! - [`estimators`]: denoiser targets and the σ error sweep
//! - [`diffusion`]: noising, an MLP denoiser, training and DDIM sampling
//! - [`io`]: trajectory, CSV and checkpoint formats

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod diffusion;
pub mod error;
pub mod estimators;
pub mod geom;
pub mod io;
pub mod par;
pub mod quad;
pub mod selftest;
pub mod sofisher;

pub use align::{aligned_rmsd, kabsch, rmsd, Alignment};
pub use diffusion::{
    ddim_sample, ddim_step, loss_and_grad, mlp_forward, noise_sample, train, DatasetMode, DdimSchedule, MlpDenoiser,
    StepMetrics, TrainConfig, TrainOutcome, TrainStatus,
};
pub use error::{Error, Result};
pub use estimators::{error_sweep, estimator_target, mse_to_oracle, EstimatorKind, SweepRecord};
pub use geom::{proper_svd, sample_haar, Mat3, PointCloud, ProperSvd, Rotation, Vec3};
pub use io::{load_trajectory, synth_trajectory, Trajectory};
pub use quad::{mf_mean_quadrature, oracle_conditional_denoiser};
pub use sofisher::{mf_mean_laplace, ExpansionOrder, MatrixFisherParams};
