//! Point clouds, rotations and the SO(3) primitives everything else is built on.
//!
//! Point clouds act on the left: `R ∘ x = x Rᵀ`, i.e. every point `xᵢ` maps to
//! `R xᵢ`. Cross-covariances are written `yᵀx = Σᵢ yᵢ xᵢᵀ`.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;

/// An ordered set of points in 3D.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::TooFewPoints { min: 1, got: 0 });
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("point cloud"));
        }
        Ok(Self { points })
    }

    pub fn from_rows(rows: &[[f64; 3]]) -> Result<Self> {
        Self::new(rows.iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect())
    }

    pub fn zeros(n: usize) -> Self {
        assert!(n > 0, "empty point cloud");
        Self {
            points: vec![Vec3::zeros(); n],
        }
    }

    /// Builds a cloud from `3N` coordinates laid out point by point.
    pub fn from_flat(coords: &[f64]) -> Result<Self> {
        if coords.is_empty() || !coords.len().is_multiple_of(3) {
            return Err(Error::InvalidParameter(format!(
                "flat coordinate length {} is not a positive multiple of 3",
                coords.len()
            )));
        }
        Self::new(
            coords
                .chunks_exact(3)
                .map(|c| Vec3::new(c[0], c[1], c[2]))
                .collect(),
        )
    }

    /// Standard-normal coordinates, `n` points.
    pub fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        assert!(n > 0, "empty point cloud");
        let points = (0..n)
            .map(|_| {
                Vec3::new(
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                )
            })
            .collect();
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }

    pub fn centroid(&self) -> Vec3 {
        self.points.iter().sum::<Vec3>() / self.points.len() as f64
    }

    pub fn center(&self) -> PointCloud {
        let c = self.centroid();
        PointCloud {
            points: self.points.iter().map(|p| p - c).collect(),
        }
    }

    pub fn is_centered(&self, tol: f64) -> bool {
        let scale = self
            .points
            .iter()
            .map(|p| p.amax())
            .fold(0.0_f64, f64::max)
            .max(1.0);
        let sum: Vec3 = self.points.iter().sum();
        sum.amax() <= tol * self.points.len() as f64 * scale
    }

    pub fn rotate(&self, r: &Rotation) -> PointCloud {
        self.transform(r.matrix())
    }

    /// Applies an arbitrary 3×3 matrix as the group action does: `coords · mᵀ`.
    pub fn transform(&self, m: &Mat3) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| m * p).collect(),
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.points.iter().map(|p| p.norm_squared()).sum()
    }

    /// `selfᵀ other = Σᵢ selfᵢ otherᵢᵀ`.
    pub fn cross_covariance(&self, other: &PointCloud) -> Result<Mat3> {
        self.check_same_len(other)?;
        Ok(self
            .points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| a * b.transpose())
            .sum())
    }

    pub fn sub(&self, other: &PointCloud) -> Result<PointCloud> {
        self.check_same_len(other)?;
        Ok(PointCloud {
            points: self
                .points
                .iter()
                .zip(&other.points)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    /// `self + c · other`.
    pub fn add_scaled(&self, other: &PointCloud, c: f64) -> Result<PointCloud> {
        self.check_same_len(other)?;
        Ok(PointCloud {
            points: self
                .points
                .iter()
                .zip(&other.points)
                .map(|(a, b)| a + b * c)
                .collect(),
        })
    }

    pub fn scale(&self, c: f64) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| p * c).collect(),
        }
    }

    /// `‖self − other‖²`.
    pub fn dist_sq(&self, other: &PointCloud) -> Result<f64> {
        self.check_same_len(other)?;
        Ok(self
            .points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| (a - b).norm_squared())
            .sum())
    }

    pub(crate) fn check_same_len(&self, other: &PointCloud) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch(self.len(), other.len()));
        }
        Ok(())
    }
}

pub fn center(pc: &PointCloud) -> PointCloud {
    pc.center()
}

pub fn rotate(r: &Rotation, pc: &PointCloud) -> PointCloud {
    pc.rotate(r)
}

pub fn frobenius_norm_sq(pc: &PointCloud) -> f64 {
    pc.norm_sq()
}

/// A proper rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Mat3);

impl Rotation {
    /// Tolerance used when accepting an external matrix as a rotation.
    pub const TOLERANCE: f64 = 1e-9;

    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    pub fn from_matrix(m: Mat3) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("rotation"));
        }
        let orth = (m.transpose() * m - Mat3::identity()).norm();
        let det = m.determinant();
        if orth > Self::TOLERANCE || (det - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::InvalidParameter(format!(
                "not a rotation: |MᵀM − I| = {orth:e}, det = {det}"
            )));
        }
        Ok(Rotation(m))
    }

    pub(crate) fn from_matrix_unchecked(m: Mat3) -> Self {
        Rotation(m)
    }

    /// Rotation of a unit quaternion `(w, x, y, z)`; the input is normalized first.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        let (w, x, y, z) = (w / n, x / n, y / n, z / n);
        Rotation(Mat3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ))
    }

    /// `Rz(α) Ry(β) Rz(γ)`.
    pub fn from_euler_zyz(alpha: f64, beta: f64, gamma: f64) -> Self {
        let (sa, ca) = alpha.sin_cos();
        let (sb, cb) = beta.sin_cos();
        let (sg, cg) = gamma.sin_cos();
        Rotation(euler_zyz_matrix(ca, sa, cb, sb, cg, sg))
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn into_matrix(self) -> Mat3 {
        self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn inverse(&self) -> Rotation {
        self.transpose()
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// `(R₃₂ − R₂₃, R₁₃ − R₃₁, R₂₁ − R₁₂) = 2 sin θ n`.
    fn axial(&self) -> Vec3 {
        let m = &self.0;
        Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)])
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        (0.5 * self.axial().norm()).atan2(0.5 * (self.0.trace() - 1.0))
    }

    /// Principal logarithm: the rotation vector with norm in `[0, π]`.
    pub fn log_map(&self) -> Vec3 {
        let m = &self.0;
        let skew = self.axial();
        let sin = 0.5 * skew.norm();
        let cos = 0.5 * (m.trace() - 1.0);
        let angle = sin.atan2(cos);
        if angle < 1e-6 {
            return skew * (0.5 + angle * angle / 12.0);
        }
        if cos >= 0.0 {
            return skew * (angle / (2.0 * sin));
        }
        // (sym(R) − cos θ I) / (1 − cos θ) = nnᵀ; well conditioned up to θ = π
        let b = ((m + m.transpose()) * 0.5 - Mat3::identity() * cos) / (1.0 - cos);
        let k = (0..3).max_by(|&i, &j| b[(i, i)].total_cmp(&b[(j, j)])).unwrap_or(0);
        let mut axis = b.column(k).into_owned();
        axis /= axis.norm();
        if axis.dot(&skew) < 0.0 {
            axis = -axis;
        }
        axis * angle
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        self.compose(&rhs)
    }
}

impl Mul<&Rotation> for &Rotation {
    type Output = Rotation;
    fn mul(self, rhs: &Rotation) -> Rotation {
        self.compose(rhs)
    }
}

#[inline]
pub(crate) fn euler_zyz_matrix(ca: f64, sa: f64, cb: f64, sb: f64, cg: f64, sg: f64) -> Mat3 {
    Mat3::new(
        ca * cb * cg - sa * sg,
        -ca * cb * sg - sa * cg,
        ca * sb,
        sa * cb * cg + ca * sg,
        -sa * cb * sg + ca * cg,
        sa * sb,
        -sb * cg,
        sb * sg,
        cb,
    )
}

/// Uniform (Haar) rotation from a uniformly distributed unit quaternion.
pub fn sample_haar<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    loop {
        let w: f64 = rng.sample(StandardNormal);
        let x: f64 = rng.sample(StandardNormal);
        let y: f64 = rng.sample(StandardNormal);
        let z: f64 = rng.sample(StandardNormal);
        if w * w + x * x + y * y + z * z > 1e-300 {
            return Rotation::from_quaternion(w, x, y, z);
        }
    }
}

/// `u · diag(s) · vᵀ` with `u, v ∈ SO(3)` and `s1 ≥ s2 ≥ |s3|`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProperSvd {
    pub u: Rotation,
    pub s: Vec3,
    pub v: Rotation,
}

impl ProperSvd {
    pub fn reconstruct(&self) -> Mat3 {
        self.u.matrix() * Mat3::from_diagonal(&self.s) * self.v.matrix().transpose()
    }

    /// `u · vᵀ`, the closest rotation.
    pub fn rotation(&self) -> Rotation {
        Rotation(self.u.matrix() * self.v.matrix().transpose())
    }
}

/// Sign-corrected SVD of a 3×3 matrix.
///
/// Reflections are absorbed into the sign of the smallest singular value:
/// whichever factor has `det < 0` gets its third column negated, and `s3`
/// flips with it (twice if both factors needed it).
pub fn proper_svd(a: &Mat3) -> Result<ProperSvd> {
    if !a.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("matrix"));
    }
    let svd = a.svd(true, true);
    let (u0, vt0) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::NonFinite("svd")),
    };
    let v0 = vt0.transpose();
    let sv = svd.singular_values;

    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    let mut u = Mat3::zeros();
    let mut v = Mat3::zeros();
    let mut s = Vec3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        u.set_column(dst, &u0.column(src));
        v.set_column(dst, &v0.column(src));
        s[dst] = sv[src];
    }
    // Fix the joint sign of each (u_k, v_k) pair: largest entry of v_k positive.
    for k in 0..3 {
        let col = v.column(k);
        let lead = col.iter().fold(0.0_f64, |m, &c| if c.abs() > m.abs() { c } else { m });
        if lead < 0.0 {
            u.set_column(k, &(-u.column(k)));
            v.set_column(k, &(-v.column(k)));
        }
    }

    if u.determinant() < 0.0 {
        u.set_column(2, &(-u.column(2)));
        s[2] = -s[2];
    }
    if v.determinant() < 0.0 {
        v.set_column(2, &(-v.column(2)));
        s[2] = -s[2];
    }
    Ok(ProperSvd {
        u: Rotation(u),
        s,
        v: Rotation(v),
    })
}

#[inline]
pub fn hat(theta: &Vec3) -> Mat3 {
    Mat3::new(
        0.0, -theta.z, theta.y, //
        theta.z, 0.0, -theta.x, //
        -theta.y, theta.x, 0.0,
    )
}

/// `exp(θx Rx + θy Ry + θz Rz)` by the Rodrigues formula.
pub fn exp_map(theta: &Vec3) -> Rotation {
    let r2 = theta.norm_squared();
    let r = r2.sqrt();
    let (a, b) = if r < 1e-4 {
        (1.0 - r2 / 6.0 + r2 * r2 / 120.0, 0.5 - r2 / 24.0 + r2 * r2 / 720.0)
    } else {
        let h = (0.5 * r).sin() / r;
        (r.sin() / r, 2.0 * h * h)
    };
    let k = hat(theta);
    Rotation(Mat3::identity() + k * a + k * k * b)
}

/// Haar probability density in exponential coordinates, `(1 − cos r) / (4π² r²)`.
pub fn haar_density_expmap(theta: &Vec3) -> Result<f64> {
    let r = theta.norm();
    if r > PI * (1.0 + 1e-12) {
        return Err(Error::InvalidParameter(format!(
            "exp-map coordinate norm {r} exceeds π"
        )));
    }
    Ok(haar_density_radial(r))
}

#[inline]
pub(crate) fn haar_density_radial(r: f64) -> f64 {
    let ratio = if r < 1e-4 {
        let r2 = r * r;
        0.5 - r2 / 24.0 + r2 * r2 / 720.0
    } else {
        // 2 sin²(r/2) avoids the cancellation in 1 − cos r
        let h = (0.5 * r).sin() / r;
        2.0 * h * h
    };
    ratio / (4.0 * PI * PI)
}
