//! Sonar coordinate frames and projections.
//!
//! A world point is moved into the sonar Cartesian frame by a rigid pose,
//! converted to polar-elevation coordinates `(r, θ, φ)`, reduced to one of
//! two 2D representations (polar `(r, θ)` or elevation-azimuth `(φ, θ)`),
//! and finally mapped to pixels by a 2D similarity transform.
//!
//! Pixel coordinates are `(x, y)` = `(column, row)` with integer values at
//! pixel centers.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points closer than this to the sonar origin (or to its vertical axis)
/// are rejected.
pub const RANGE_EPSILON: f64 = 1e-6;

/// Rigid transform from world to sonar frame, `p_s = R p_w + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    const ORTHO_TOLERANCE: f64 = 1e-9;

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        if gram.amax() > Self::ORTHO_TOLERANCE {
            return Err(Error::invalid(
                "pose",
                format!("rotation is not orthonormal (max |RᵀR - I| = {:.3e})", gram.amax()),
            ));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > Self::ORTHO_TOLERANCE {
            return Err(Error::invalid("pose", format!("rotation determinant {det} != 1")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("pose", "non-finite translation"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Pose of a sonar at `position` whose acoustic axis (+x) points at
    /// `target`, with +z as close to `up` as possible.
    pub fn look_at(position: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = target - position;
        if forward.norm() <= RANGE_EPSILON {
            return Err(Error::invalid("pose", "look_at target coincides with position"));
        }
        let forward = forward.normalize();
        let left = up.cross(&forward);
        if left.norm() <= RANGE_EPSILON {
            return Err(Error::invalid("pose", "look_at up vector is parallel to the view axis"));
        }
        let left = left.normalize();
        let top = forward.cross(&left);
        let rotation = Matrix3::from_rows(&[forward.transpose(), left.transpose(), top.transpose()]);
        let translation = -(rotation * position);
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Sonar origin in world coordinates.
    pub fn position(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Acoustic axis (+x of the sonar frame) in world coordinates.
    pub fn axis(&self) -> Vector3<f64> {
        self.rotation.row(0).transpose()
    }

    pub fn sonar_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolarElevationPoint {
    pub range: f64,
    pub azimuth: f64,
    pub elevation: f64,
}

impl PolarElevationPoint {
    pub fn to_cartesian(&self) -> Vector3<f64> {
        let (se, ce) = self.elevation.sin_cos();
        let (sa, ca) = self.azimuth.sin_cos();
        self.range * Vector3::new(ce * ca, ce * sa, se)
    }
}

/// Homogeneous 2D similarity transform
/// `[a cosω, -b sinω, tx; a sinω, b cosω, ty]` from a 2D sonar representation
/// to pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform2D {
    pub scale_a: f64,
    pub scale_b: f64,
    pub rotation: f64,
    pub tx: f64,
    pub ty: f64,
}

impl SimilarityTransform2D {
    pub fn new(scale_a: f64, scale_b: f64, rotation: f64, tx: f64, ty: f64) -> Result<Self> {
        if !(scale_a > 0.0 && scale_b > 0.0) || !scale_a.is_finite() || !scale_b.is_finite() {
            return Err(Error::invalid(
                "similarity transform",
                format!("scales must be positive, got ({scale_a}, {scale_b})"),
            ));
        }
        Ok(Self {
            scale_a,
            scale_b,
            rotation,
            tx,
            ty,
        })
    }

    /// The rotation-scale block without translation.
    pub fn linear(&self) -> Matrix2<f64> {
        let (s, c) = self.rotation.sin_cos();
        Matrix2::new(self.scale_a * c, -self.scale_b * s, self.scale_a * s, self.scale_b * c)
    }

    pub fn offset(&self) -> Vector2<f64> {
        Vector2::new(self.tx, self.ty)
    }

    /// Maps a pixel back to the 2D sonar representation.
    pub fn invert(&self, pixel: &Vector2<f64>) -> Vector2<f64> {
        let (s, c) = self.rotation.sin_cos();
        let d = pixel - self.offset();
        // Inverse of a rotation followed by per-axis scaling.
        let rotated = Vector2::new(c * d.x + s * d.y, -s * d.x + c * d.y);
        Vector2::new(rotated.x / self.scale_a, rotated.y / self.scale_b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ImageFrame {
    Polar,
    ElevationAzimuth,
}

/// Sensor description: fields of view, range window, both image sizes and
/// both pixel transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SonarIntrinsics {
    pub azimuth_fov: f64,
    pub elevation_fov: f64,
    pub min_range: f64,
    pub max_range: f64,
    /// Polar image rows (range bins).
    pub height: usize,
    /// Polar image columns (azimuth beams).
    pub width: usize,
    pub ea_height: usize,
    pub ea_width: usize,
    pub polar_transform: SimilarityTransform2D,
    pub elevation_transform: SimilarityTransform2D,
}

impl SonarIntrinsics {
    /// Standard layout: range grows down the rows, azimuth decreases along
    /// the columns (positive azimuth on the left), elevation grows down the
    /// rows of the elevation-azimuth image, whose columns share the polar
    /// azimuth sampling. Pixel centers sit at bin centers.
    pub fn from_fov(
        azimuth_fov: f64,
        elevation_fov: f64,
        min_range: f64,
        max_range: f64,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let ea_height = ((width as f64) * elevation_fov / azimuth_fov).round().max(1.0) as usize;
        Self::with_elevation_height(azimuth_fov, elevation_fov, min_range, max_range, height, width, ea_height)
    }

    pub fn with_elevation_height(
        azimuth_fov: f64,
        elevation_fov: f64,
        min_range: f64,
        max_range: f64,
        height: usize,
        width: usize,
        ea_height: usize,
    ) -> Result<Self> {
        let omega = std::f64::consts::FRAC_PI_2;
        let range_scale = height as f64 / (max_range - min_range);
        let azimuth_scale = width as f64 / azimuth_fov;
        let elevation_scale = ea_height as f64 / elevation_fov;
        let tx = 0.5 * width as f64 - 0.5;
        let polar = SimilarityTransform2D {
            scale_a: range_scale,
            scale_b: azimuth_scale,
            rotation: omega,
            tx,
            ty: -min_range * range_scale - 0.5,
        };
        let elevation = SimilarityTransform2D {
            scale_a: elevation_scale,
            scale_b: azimuth_scale,
            rotation: omega,
            tx,
            ty: 0.5 * ea_height as f64 - 0.5,
        };
        let intr = Self {
            azimuth_fov,
            elevation_fov,
            min_range,
            max_range,
            height,
            width,
            ea_height,
            ea_width: width,
            polar_transform: polar,
            elevation_transform: elevation,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// 90° × 20° sensor at 512 × 399 pixels.
    pub fn default_for_range(min_range: f64, max_range: f64) -> Result<Self> {
        Self::from_fov(90f64.to_radians(), 20f64.to_radians(), min_range, max_range, 512, 399)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("intrinsics", reason));
        if !(self.azimuth_fov > 0.0 && self.elevation_fov > 0.0) {
            return bad(format!("fields of view must be positive ({}, {})", self.azimuth_fov, self.elevation_fov));
        }
        if !(self.min_range >= 0.0 && self.max_range > self.min_range) {
            return bad(format!("range window [{}, {}] is empty", self.min_range, self.max_range));
        }
        if self.height == 0 || self.width == 0 || self.ea_height == 0 || self.ea_width == 0 {
            return bad("image dimensions must be at least 1".into());
        }
        for t in [&self.polar_transform, &self.elevation_transform] {
            SimilarityTransform2D::new(t.scale_a, t.scale_b, t.rotation, t.tx, t.ty)?;
        }
        Ok(())
    }

    pub fn transform(&self, frame: ImageFrame) -> &SimilarityTransform2D {
        match frame {
            ImageFrame::Polar => &self.polar_transform,
            ImageFrame::ElevationAzimuth => &self.elevation_transform,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }
}

pub fn world_to_sonar(pose: &Pose, p: &Vector3<f64>) -> Vector3<f64> {
    pose.rotation * p + pose.translation
}

fn check_range(p: &Vector3<f64>) -> Result<f64> {
    let r = p.norm();
    if r <= RANGE_EPSILON || !r.is_finite() {
        return Err(Error::DegeneratePoint {
            x: p.x,
            y: p.y,
            z: p.z,
        });
    }
    Ok(r)
}

fn check_axis(p: &Vector3<f64>) -> Result<f64> {
    let rho2 = p.x * p.x + p.y * p.y;
    if rho2 <= RANGE_EPSILON * RANGE_EPSILON {
        return Err(Error::DegeneratePoint {
            x: p.x,
            y: p.y,
            z: p.z,
        });
    }
    Ok(rho2)
}

pub fn cartesian_to_polar_elevation(p: &Vector3<f64>) -> Result<PolarElevationPoint> {
    let r = check_range(p)?;
    Ok(PolarElevationPoint {
        range: r,
        azimuth: p.y.atan2(p.x),
        elevation: (p.z / r).clamp(-1.0, 1.0).asin(),
    })
}

/// Rows are the gradients of `r`, `θ` and `φ` with respect to the sonar
/// Cartesian point.
pub fn polar_elevation_jacobian(p: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let r = check_range(p)?;
    let rho2 = check_axis(p)?;
    let rho = rho2.sqrt();
    let r2 = r * r;
    let (x, y, z) = (p.x, p.y, p.z);
    let f = z / (rho * r2);
    Ok(Matrix3::new(
        x / r,
        y / r,
        z / r,
        -y / rho2,
        x / rho2,
        0.0,
        -x * f,
        -y * f,
        rho / r2,
    ))
}

/// Hessians of `r`, `θ` and `φ` with respect to the sonar Cartesian point,
/// used when differentiating projected covariances.
pub fn polar_elevation_hessians(p: &Vector3<f64>) -> Result<[Matrix3<f64>; 3]> {
    let r = check_range(p)?;
    let rho2 = check_axis(p)?;
    let rho = rho2.sqrt();
    let r2 = r * r;
    let r4 = r2 * r2;
    let (x, y, z) = (p.x, p.y, p.z);

    let hr = (Matrix3::identity() - p * p.transpose() / r2) / r;

    let rho4 = rho2 * rho2;
    let txy = 2.0 * x * y / rho4;
    let tdiag = (y * y - x * x) / rho4;
    let htheta = Matrix3::new(txy, tdiag, 0.0, tdiag, -txy, 0.0, 0.0, 0.0, 0.0);

    let f = z / (rho * r2);
    let k = 1.0 / (rho * rho2 * r2) + 2.0 / (rho * r4);
    let fz = (r2 - 2.0 * z * z) / (rho * r4);
    let hxx = -f + x * x * z * k;
    let hxy = x * y * z * k;
    let hyy = -f + y * y * z * k;
    let hxz = -x * fz;
    let hyz = -y * fz;
    let hzz = -2.0 * rho * z / r4;
    let hphi = Matrix3::new(hxx, hxy, hxz, hxy, hyy, hyz, hxz, hyz, hzz);

    Ok([hr, htheta, hphi])
}

pub fn project_polar(pe: &PolarElevationPoint) -> Vector2<f64> {
    Vector2::new(pe.range, pe.azimuth)
}

pub fn project_elevation_azimuth(pe: &PolarElevationPoint) -> Vector2<f64> {
    Vector2::new(pe.elevation, pe.azimuth)
}

/// Row selection taking `(r, θ, φ)` to the frame's 2D representation.
pub fn frame_selector(frame: ImageFrame) -> Matrix2x3<f64> {
    match frame {
        ImageFrame::Polar => Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0),
        ImageFrame::ElevationAzimuth => Matrix2x3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0),
    }
}

pub fn project_to_frame(pe: &PolarElevationPoint, frame: ImageFrame) -> Vector2<f64> {
    match frame {
        ImageFrame::Polar => project_polar(pe),
        ImageFrame::ElevationAzimuth => project_elevation_azimuth(pe),
    }
}

pub fn to_pixel(t: &SimilarityTransform2D, p: &Vector2<f64>) -> Vector2<f64> {
    t.linear() * p + t.offset()
}

/// Linear map `Ŝ · J_π · J_pe · R_SW` from world displacements to pixel
/// displacements at sonar point `p_sonar`.
pub fn projection_linearization(
    pose: &Pose,
    p_sonar: &Vector3<f64>,
    frame: ImageFrame,
    intr: &SonarIntrinsics,
) -> Result<Matrix2x3<f64>> {
    let jac = polar_elevation_jacobian(p_sonar)?;
    Ok(intr.transform(frame).linear() * frame_selector(frame) * jac * pose.rotation)
}

pub fn symmetrize2(m: &Matrix2<f64>) -> Matrix2<f64> {
    (m + m.transpose()) * 0.5
}

/// First-order pushforward of a world-frame covariance into pixel space.
pub fn project_covariance(
    cov: &Matrix3<f64>,
    pose: &Pose,
    p_world: &Vector3<f64>,
    frame: ImageFrame,
    intr: &SonarIntrinsics,
) -> Result<Matrix2<f64>> {
    let p_sonar = world_to_sonar(pose, p_world);
    let a = projection_linearization(pose, &p_sonar, frame, intr)?;
    Ok(symmetrize2(&(a * cov * a.transpose())))
}

/// Full nonlinear projection of a world point to pixel coordinates.
pub fn project_point(
    pose: &Pose,
    p_world: &Vector3<f64>,
    frame: ImageFrame,
    intr: &SonarIntrinsics,
) -> Result<Vector2<f64>> {
    let pe = cartesian_to_polar_elevation(&world_to_sonar(pose, p_world))?;
    Ok(to_pixel(intr.transform(frame), &project_to_frame(&pe, frame)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn rot_z(angle: f64) -> Matrix3<f64> {
        let (s, c) = angle.sin_cos();
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn world_to_sonar_examples() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(world_to_sonar(&Pose::identity(), &p), p);
        let shifted = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -1.0)).unwrap();
        assert_eq!(world_to_sonar(&shifted, &p), Vector3::new(1.0, 2.0, 2.0));
        let turned = Pose::new(rot_z(FRAC_PI_2), Vector3::zeros()).unwrap();
        let q = world_to_sonar(&turned, &Vector3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(q, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn pose_rejects_non_rotation() {
        let scaled = Matrix3::identity() * 2.0;
        assert!(Pose::new(scaled, Vector3::zeros()).is_err());
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(Pose::new(reflect, Vector3::zeros()).is_err());
    }

    #[test]
    fn polar_elevation_examples() {
        let a = cartesian_to_polar_elevation(&Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!((a.range, a.azimuth, a.elevation), (1.0, 0.0, 0.0));
        let b = cartesian_to_polar_elevation(&Vector3::new(0.0, 2.0, 0.0)).unwrap();
        assert_relative_eq!(b.range, 2.0);
        assert_relative_eq!(b.azimuth, FRAC_PI_2);
        assert_eq!(b.elevation, 0.0);
        let c = cartesian_to_polar_elevation(&Vector3::new(1.0, 1.0, 2f64.sqrt())).unwrap();
        assert_relative_eq!(c.range, 2.0, epsilon = 1e-15);
        assert_relative_eq!(c.azimuth, FRAC_PI_4, epsilon = 1e-15);
        assert_relative_eq!(c.elevation, FRAC_PI_4, epsilon = 1e-15);

        assert!(matches!(
            cartesian_to_polar_elevation(&Vector3::new(1e-7, 0.0, 0.0)),
            Err(Error::DegeneratePoint { .. })
        ));
    }

    #[test]
    fn polar_elevation_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let pe = PolarElevationPoint {
                range: rng.random_range(0.5..50.0),
                azimuth: rng.random_range(-3.0..3.0),
                elevation: rng.random_range(-1.4..1.4),
            };
            let back = cartesian_to_polar_elevation(&pe.to_cartesian()).unwrap();
            assert_relative_eq!(back.range, pe.range, max_relative = 1e-12);
            assert_relative_eq!(back.azimuth, pe.azimuth, epsilon = 1e-12);
            assert_relative_eq!(back.elevation, pe.elevation, epsilon = 1e-12);
        }
    }

    #[test]
    fn jacobian_examples() {
        let j = polar_elevation_jacobian(&Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(j, Matrix3::identity(), epsilon = 1e-15);
        let j = polar_elevation_jacobian(&Vector3::new(2.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(j, Matrix3::from_diagonal(&Vector3::new(1.0, 0.5, 0.5)), epsilon = 1e-15);
        assert!(polar_elevation_jacobian(&Vector3::new(0.0, 0.0, 3.0)).is_err());
        assert!(polar_elevation_jacobian(&Vector3::zeros()).is_err());
    }

    #[test]
    fn hessians_match_jacobian_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..100 {
            let pe = PolarElevationPoint {
                range: rng.random_range(0.5..50.0),
                azimuth: rng.random_range(-PI..PI),
                elevation: rng.random_range(-1.3..1.3),
            };
            let p = pe.to_cartesian();
            let hess = polar_elevation_hessians(&p).unwrap();
            for m in 0..3 {
                let mut dp = Vector3::zeros();
                dp[m] = h;
                let fd = (polar_elevation_jacobian(&(p + dp)).unwrap()
                    - polar_elevation_jacobian(&(p - dp)).unwrap())
                    / (2.0 * h);
                for k in 0..3 {
                    for l in 0..3 {
                        let scale = hess[k].amax().max(1e-12);
                        assert!(
                            (hess[k][(l, m)] - fd[(k, l)]).abs() <= 1e-5 * scale,
                            "H[{k}][{l},{m}] = {} vs fd {}",
                            hess[k][(l, m)],
                            fd[(k, l)]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn frame_projection_examples() {
        let pe = PolarElevationPoint {
            range: 3.0,
            azimuth: 0.1,
            elevation: 0.2,
        };
        assert_eq!(project_polar(&pe), Vector2::new(3.0, 0.1));
        assert_eq!(project_elevation_azimuth(&pe), Vector2::new(0.2, 0.1));
        let zero = PolarElevationPoint {
            range: 0.0,
            azimuth: 0.0,
            elevation: 0.0,
        };
        assert_eq!(project_polar(&zero), Vector2::zeros());
        let wide = PolarElevationPoint {
            range: 10.0,
            azimuth: -FRAC_PI_4,
            elevation: 0.0,
        };
        assert_eq!(project_elevation_azimuth(&wide), Vector2::new(0.0, -FRAC_PI_4));

        let pe = cartesian_to_polar_elevation(&Vector3::new(1.0, 1.0, 2f64.sqrt())).unwrap();
        assert_relative_eq!(project_polar(&pe), Vector2::new(2.0, FRAC_PI_4), epsilon = 1e-15);
        assert_relative_eq!(project_elevation_azimuth(&pe), Vector2::new(FRAC_PI_4, FRAC_PI_4), epsilon = 1e-15);
    }

    #[test]
    fn to_pixel_examples() {
        let id = SimilarityTransform2D::new(1.0, 1.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(to_pixel(&id, &Vector2::new(5.0, 2.0)), Vector2::new(5.0, 2.0));
        let affine = SimilarityTransform2D::new(10.0, 100.0, 0.0, 0.0, 256.0).unwrap();
        assert_eq!(to_pixel(&affine, &Vector2::new(2.0, 0.5)), Vector2::new(20.0, 306.0));
        let quarter = SimilarityTransform2D::new(1.0, 1.0, FRAC_PI_2, 0.0, 0.0).unwrap();
        assert_relative_eq!(to_pixel(&quarter, &Vector2::new(1.0, 0.0)), Vector2::new(0.0, 1.0), epsilon = 1e-15);
        assert!(SimilarityTransform2D::new(0.0, 1.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn to_pixel_invert_round_trip() {
        let t = SimilarityTransform2D::new(37.0, 210.0, 0.7, 12.0, -4.0).unwrap();
        let p = Vector2::new(3.3, -0.4);
        assert_relative_eq!(t.invert(&to_pixel(&t, &p)), p, epsilon = 1e-12);
    }

    #[test]
    fn covariance_examples() {
        let unit = SimilarityTransform2D::new(1.0, 1.0, 0.0, 0.0, 0.0).unwrap();
        let mut intr = SonarIntrinsics::default_for_range(0.5, 10.0).unwrap();
        intr.polar_transform = unit;
        intr.elevation_transform = unit;
        let mean = Vector3::new(1.0, 0.0, 0.0);
        let pose = Pose::identity();
        for frame in [ImageFrame::Polar, ImageFrame::ElevationAzimuth] {
            let c = project_covariance(&Matrix3::identity(), &pose, &mean, frame, &intr).unwrap();
            assert_relative_eq!(c, Matrix2::identity(), epsilon = 1e-15);
        }
        let diag = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0));
        let c = project_covariance(&diag, &pose, &mean, ImageFrame::Polar, &intr).unwrap();
        assert_relative_eq!(c, Matrix2::new(4.0, 0.0, 0.0, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn default_intrinsics_center_on_axis() {
        let intr = SonarIntrinsics::default_for_range(1.0, 9.0).unwrap();
        let px = project_point(&Pose::identity(), &Vector3::new(5.0, 0.0, 0.0), ImageFrame::Polar, &intr).unwrap();
        assert_relative_eq!(px.x, (intr.width as f64 - 1.0) / 2.0, epsilon = 1e-9);
        assert_relative_eq!(px.y, (intr.height as f64 - 1.0) / 2.0, epsilon = 1e-9);
        // Positive azimuth lands on the left half of the image.
        let left = project_point(&Pose::identity(), &Vector3::new(5.0, 1.0, 0.0), ImageFrame::Polar, &intr).unwrap();
        assert!(left.x < px.x);
    }

    #[test]
    fn look_at_points_axis_at_target() {
        let target = Vector3::new(0.5, -0.2, 0.1);
        let pose = Pose::look_at(Vector3::new(5.0, 1.0, 0.3), target, Vector3::z()).unwrap();
        let p = world_to_sonar(&pose, &target);
        assert!(p.x > 0.0);
        assert!(p.y.abs() < 1e-12 && p.z.abs() < 1e-12);
        assert_relative_eq!(pose.position(), Vector3::new(5.0, 1.0, 0.3), epsilon = 1e-12);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(SonarIntrinsics::from_fov(1.0, 0.3, 5.0, 2.0, 10, 10).is_err());
        assert!(SonarIntrinsics::from_fov(0.0, 0.3, 1.0, 2.0, 10, 10).is_err());
        assert!(SonarIntrinsics::from_fov(1.0, 0.3, 1.0, 2.0, 0, 10).is_err());
    }
}
