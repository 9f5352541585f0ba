//! Rotation-only Kabsch superposition and RMSD metrics.

use crate::error::{Error, Result};
use crate::geom::{proper_svd, PointCloud, ProperSvd, Rotation};

/// Relative size of `s2` below which `yᵀx` counts as rank-deficient.
const DEGENERATE_RATIO: f64 = 1e-10;

/// Result of a Kabsch alignment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    pub rotation: Rotation,
    /// `rank(yᵀx) < 2`: the optimal rotation is not unique.
    pub degenerate: bool,
    pub svd: ProperSvd,
}

/// Rotation `R` minimizing `‖y − R∘x‖²` over SO(3).
///
/// Both clouds are expected to be centered; no translation or scale is fitted.
pub fn kabsch(y: &PointCloud, x: &PointCloud) -> Result<Alignment> {
    y.check_same_len(x)?;
    if y.len() < 2 {
        return Err(Error::TooFewPoints { min: 2, got: y.len() });
    }
    let a = y.cross_covariance(x)?;
    if a.amax() == 0.0 {
        return Err(Error::ZeroCrossCovariance);
    }
    let svd = proper_svd(&a)?;
    Ok(Alignment {
        rotation: svd.rotation(),
        degenerate: svd.s[1] <= DEGENERATE_RATIO * svd.s[0],
        svd,
    })
}

pub fn rmsd(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    Ok((a.dist_sq(b)? / a.len() as f64).sqrt())
}

/// RMSD after optimally rotating `b` onto `a`.
pub fn aligned_rmsd(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    let r = kabsch(a, b)?.rotation;
    rmsd(a, &b.rotate(&r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{sample_haar, Mat3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::standard_normal(n, rng).center()
    }

    #[test]
    fn self_alignment_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = cloud(&mut rng, 10);
        let al = kabsch(&x, &x).unwrap();
        assert!((al.rotation.matrix() - Mat3::identity()).norm() < 1e-12);
        assert!(!al.degenerate);
    }

    #[test]
    fn exact_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let x = cloud(&mut rng, 6);
            let r = sample_haar(&mut rng);
            let y = x.rotate(&r);
            let got = kabsch(&y, &x).unwrap().rotation;
            assert!((got.matrix() - r.matrix()).norm() < 1e-10);
        }
    }

    #[test]
    fn errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = cloud(&mut rng, 4);
        let b = cloud(&mut rng, 5);
        assert!(matches!(kabsch(&a, &b), Err(Error::ShapeMismatch(4, 5))));
        assert!(matches!(rmsd(&a, &b), Err(Error::ShapeMismatch(4, 5))));
        let z = PointCloud::zeros(4);
        assert!(matches!(kabsch(&a, &z), Err(Error::ZeroCrossCovariance)));
        let one = PointCloud::from_rows(&[[0.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(kabsch(&one, &one), Err(Error::TooFewPoints { .. })));
    }

    #[test]
    fn collinear_is_flagged_degenerate() {
        let x = PointCloud::from_rows(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [3.0, 0.0, 0.0], [-3.0, 0.0, 0.0]])
            .unwrap();
        let r = Rotation::from_euler_zyz(0.4, 1.0, -0.3);
        let y = x.rotate(&r);
        let al = kabsch(&y, &x).unwrap();
        assert!(al.degenerate);
        // the line itself is still mapped correctly
        assert!(rmsd(&y, &x.rotate(&al.rotation)).unwrap() < 1e-10);
    }

    #[test]
    fn rmsd_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = cloud(&mut rng, 7);
        assert_eq!(rmsd(&a, &a).unwrap(), 0.0);
        let shifted = a.add_scaled(&PointCloud::from_rows(&[[1.0, 1.0, 1.0]; 7]).unwrap(), 1.0).unwrap();
        assert!((rmsd(&shifted, &a).unwrap() - 3f64.sqrt()).abs() < 1e-14);
        let b = cloud(&mut rng, 7);
        let r = sample_haar(&mut rng);
        let d = rmsd(&a.rotate(&r), &b.rotate(&r)).unwrap();
        assert!((d - rmsd(&a, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn aligned_rmsd_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x = cloud(&mut rng, 8);
            let r = sample_haar(&mut rng);
            assert!(aligned_rmsd(&x.rotate(&r), &x).unwrap() < 1e-10);
            let b = cloud(&mut rng, 8);
            assert!(aligned_rmsd(&x, &b).unwrap() <= rmsd(&x, &b).unwrap() + 1e-12);
        }
    }

    #[test]
    fn aligned_rmsd_beats_sampled_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = cloud(&mut rng, 8);
        let b = cloud(&mut rng, 8);
        let best = aligned_rmsd(&a, &b).unwrap();
        for _ in 0..10_000 {
            let r = sample_haar(&mut rng);
            assert!(best <= rmsd(&a, &b.rotate(&r)).unwrap() + 1e-12);
        }
    }

    #[test]
    fn equivariance_in_y() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let x = cloud(&mut rng, 8);
            let y = cloud(&mut rng, 8);
            let r = sample_haar(&mut rng);
            let lhs = kabsch(&y.rotate(&r), &x).unwrap().rotation;
            let rhs = r * kabsch(&y, &x).unwrap().rotation;
            assert!((lhs.matrix() - rhs.matrix()).norm() < 1e-10);
        }
    }

    #[test]
    fn maximizes_trace_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = cloud(&mut rng, 8);
        let y = cloud(&mut rng, 8);
        let a = y.cross_covariance(&x).unwrap();
        let best = (a.transpose() * kabsch(&y, &x).unwrap().rotation.matrix()).trace();
        for _ in 0..50_000 {
            let r = sample_haar(&mut rng);
            assert!((a.transpose() * r.matrix()).trace() <= best + 1e-12);
        }
    }
}
