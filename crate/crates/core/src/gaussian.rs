//! Scene representation: 3D Gaussians with an unconstrained parameterization
//! (log-scales, raw quaternion, logits) and their projection into both sonar
//! image frames.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::error::Result;
use crate::geometry::{
    cartesian_to_polar_elevation, frame_selector, polar_elevation_hessians, polar_elevation_jacobian,
    project_to_frame, symmetrize2, to_pixel, world_to_sonar, ImageFrame, Pose, SonarIntrinsics,
};

/// Added to the diagonal of every projected 2D covariance (px²).
pub const COV_REGULARIZATION: f64 = 0.3;
/// Mahalanobis radius of a splat footprint.
pub const FOOTPRINT_SIGMAS: f64 = 3.0;
/// Extra pixels of slack when culling against image bounds.
pub const CULL_MARGIN_PX: f64 = 1.0;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

/// One scene primitive in its optimizer parameterization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian3D {
    pub mean: Vector3<f64>,
    pub log_scales: Vector3<f64>,
    /// `(w, x, y, z)`; normalized wherever it is used.
    pub rotation: [f64; 4],
    pub intensity_logit: f64,
    pub opacity_logit: f64,
}

impl Gaussian3D {
    pub fn isotropic(mean: Vector3<f64>, scale: f64, intensity: f64, opacity: f64) -> Self {
        Self {
            mean,
            log_scales: Vector3::repeat(scale.ln()),
            rotation: [1.0, 0.0, 0.0, 0.0],
            intensity_logit: logit(intensity),
            opacity_logit: logit(opacity),
        }
    }

    pub fn intensity(&self) -> f64 {
        sigmoid(self.intensity_logit)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scales(&self) -> Vector3<f64> {
        self.log_scales.map(f64::exp)
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        build_covariance(&self.log_scales, &self.rotation)
    }
}

/// Gaussians stored field by field, so each parameter group is one
/// contiguous buffer for the optimizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scene {
    pub means: Vec<[f64; 3]>,
    pub log_scales: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub intensity_logits: Vec<f64>,
    pub opacity_logits: Vec<f64>,
}

impl Scene {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_gaussians(gaussians: impl IntoIterator<Item = Gaussian3D>) -> Self {
        let mut scene = Self::new();
        for g in gaussians {
            scene.push(g);
        }
        scene
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn push(&mut self, g: Gaussian3D) {
        self.means.push(g.mean.into());
        self.log_scales.push(g.log_scales.into());
        self.rotations.push(g.rotation);
        self.intensity_logits.push(g.intensity_logit);
        self.opacity_logits.push(g.opacity_logit);
    }

    pub fn get(&self, i: usize) -> Gaussian3D {
        Gaussian3D {
            mean: self.means[i].into(),
            log_scales: self.log_scales[i].into(),
            rotation: self.rotations[i],
            intensity_logit: self.intensity_logits[i],
            opacity_logit: self.opacity_logits[i],
        }
    }

    pub fn set(&mut self, i: usize, g: Gaussian3D) {
        self.means[i] = g.mean.into();
        self.log_scales[i] = g.log_scales.into();
        self.rotations[i] = g.rotation;
        self.intensity_logits[i] = g.intensity_logit;
        self.opacity_logits[i] = g.opacity_logit;
    }

    pub fn iter(&self) -> impl Iterator<Item = Gaussian3D> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    /// Keeps Gaussians whose mask entry is true, preserving order.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        fn filter<T: Copy>(v: &mut Vec<T>, keep: &[bool]) {
            let mut k = keep.iter();
            v.retain(|_| *k.next().unwrap());
        }
        filter(&mut self.means, keep);
        filter(&mut self.log_scales, keep);
        filter(&mut self.rotations, keep);
        filter(&mut self.intensity_logits, keep);
        filter(&mut self.opacity_logits, keep);
    }

    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 && n.is_finite() {
                q.iter_mut().for_each(|v| *v /= n);
            } else {
                *q = [1.0, 0.0, 0.0, 0.0];
            }
        }
    }

    /// Axis-aligned bounds of the means, or `None` for an empty scene.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let mut it = self.means.iter().map(|m| Vector3::from(*m));
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), p| (lo.inf(&p), hi.sup(&p))))
    }
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn quaternion_to_rotation(q: &[f64; 4]) -> Matrix3<f64> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient with respect to the raw quaternion given `dL/dR`, including
/// the normalization step.
pub fn quaternion_rotation_backward(q: &[f64; 4], grad_r: &Matrix3<f64>) -> [f64; 4] {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / norm);
    let g = |i: usize, j: usize| grad_r[(i, j)];
    let gw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let gx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let gy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let gz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1) + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    let gn = [gw, gx, gy, gz];
    let n = [w, x, y, z];
    let dot: f64 = gn.iter().zip(&n).map(|(a, b)| a * b).sum();
    std::array::from_fn(|k| (gn[k] - n[k] * dot) / norm)
}

/// `Σ = R(q) · diag(exp(log_scales))² · R(q)ᵀ`.
pub fn build_covariance(log_scales: &Vector3<f64>, q: &[f64; 4]) -> Matrix3<f64> {
    let m = quaternion_to_rotation(q) * Matrix3::from_diagonal(&log_scales.map(f64::exp));
    let cov = m * m.transpose();
    (cov + cov.transpose()) * 0.5
}

/// A Gaussian's footprint in one 2D image frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D {
    pub mean: Vector2<f64>,
    /// Entries `(a, b, c)` of the inverse covariance `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    /// Half-widths of the axis-aligned box bounding the 3σ ellipse.
    pub extent: Vector2<f64>,
    /// Range of the Gaussian mean; the occlusion sort key.
    pub range: f64,
    pub transmittance: f64,
    pub intensity: f64,
    pub opacity: f64,
}

impl Splat2D {
    /// `dᵀ C d` for `d = point - mean`.
    #[inline]
    pub fn mahalanobis_sq(&self, point: &Vector2<f64>) -> f64 {
        let dx = point.x - self.mean.x;
        let dy = point.y - self.mean.y;
        let [a, b, c] = self.conic;
        a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    }
}

/// Both footprints of one scene Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedGaussian {
    pub index: usize,
    pub polar: Splat2D,
    pub elevation_azimuth: Splat2D,
}

fn invert_regularized(cov: &Matrix2<f64>) -> Option<([f64; 3], Vector2<f64>)> {
    let a = cov[(0, 0)] + COV_REGULARIZATION;
    let b = cov[(0, 1)];
    let c = cov[(1, 1)] + COV_REGULARIZATION;
    let det = a * c - b * b;
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let extent = Vector2::new(FOOTPRINT_SIGMAS * a.sqrt(), FOOTPRINT_SIGMAS * c.sqrt());
    Some(([c / det, -b / det, a / det], extent))
}

/// Projection without any image-bounds culling. Fails only for points at
/// the sonar origin or on its vertical axis.
pub fn project_gaussian_unculled(
    index: usize,
    g: &Gaussian3D,
    pose: &Pose,
    intr: &SonarIntrinsics,
) -> Result<ProjectedGaussian> {
    let p_sonar = world_to_sonar(pose, &g.mean);
    let pe = cartesian_to_polar_elevation(&p_sonar)?;
    let jac = polar_elevation_jacobian(&p_sonar)?;
    let cov3 = g.covariance();
    let intensity = g.intensity();
    let opacity = g.opacity();
    let splat = |frame: ImageFrame| -> Result<Splat2D> {
        let transform = intr.transform(frame);
        let a = transform.linear() * frame_selector(frame) * jac * pose.rotation();
        let cov2 = symmetrize2(&(a * cov3 * a.transpose()));
        let (conic, extent) = invert_regularized(&cov2).ok_or_else(|| crate::Error::DegeneratePoint {
            x: p_sonar.x,
            y: p_sonar.y,
            z: p_sonar.z,
        })?;
        Ok(Splat2D {
            mean: to_pixel(transform, &project_to_frame(&pe, frame)),
            conic,
            extent,
            range: pe.range,
            transmittance: 1.0,
            intensity,
            opacity,
        })
    };
    Ok(ProjectedGaussian {
        index,
        polar: splat(ImageFrame::Polar)?,
        elevation_azimuth: splat(ImageFrame::ElevationAzimuth)?,
    })
}

fn outside(center: f64, extent: f64, size: usize) -> bool {
    let margin = extent + CULL_MARGIN_PX;
    center < -0.5 - margin || center > size as f64 - 0.5 + margin
}

/// Projects a Gaussian into both frames, or returns `None` when it cannot
/// touch the polar image or lies outside the elevation aperture.
pub fn project_gaussian(
    index: usize,
    g: &Gaussian3D,
    pose: &Pose,
    intr: &SonarIntrinsics,
) -> Option<ProjectedGaussian> {
    let proj = project_gaussian_unculled(index, g, pose, intr).ok()?;
    let p = &proj.polar;
    let e = &proj.elevation_azimuth;
    let culled = outside(p.mean.x, p.extent.x, intr.width)
        || outside(p.mean.y, p.extent.y, intr.height)
        || outside(e.mean.y, e.extent.y, intr.ea_height);
    (!culled).then_some(proj)
}

pub fn project_scene(scene: &Scene, pose: &Pose, intr: &SonarIntrinsics) -> Vec<ProjectedGaussian> {
    use rayon::prelude::*;
    (0..scene.len())
        .into_par_iter()
        .filter_map(|i| project_gaussian(i, &scene.get(i), pose, intr))
        .collect()
}

/// Upstream gradient arriving at one 2D footprint.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplatGradient {
    pub mean: Vector2<f64>,
    /// `dL/da`, `dL/db`, `dL/dc` for the conic entries as stored.
    pub conic: [f64; 3],
}

impl SplatGradient {
    pub fn add(&mut self, other: &SplatGradient) {
        self.mean += other.mean;
        for k in 0..3 {
            self.conic[k] += other.conic[k];
        }
    }

    pub fn is_zero(&self) -> bool {
        self.mean == Vector2::zeros() && self.conic == [0.0; 3]
    }
}

/// Gradients of the geometric parameters of one Gaussian.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeometryGradient {
    pub mean: Vector3<f64>,
    pub log_scales: Vector3<f64>,
    pub rotation: [f64; 4],
}

/// Pulls footprint gradients in both frames back to mean, log-scales and
/// rotation through the whole projection chain.
pub fn projection_backward(
    g: &Gaussian3D,
    pose: &Pose,
    intr: &SonarIntrinsics,
    polar: &SplatGradient,
    elevation_azimuth: &SplatGradient,
) -> Result<GeometryGradient> {
    let rot = pose.rotation();
    let p_sonar = world_to_sonar(pose, &g.mean);
    let jac = polar_elevation_jacobian(&p_sonar)?;
    let hess = polar_elevation_hessians(&p_sonar)?;
    let rq = quaternion_to_rotation(&g.rotation);
    let scales = g.scales();
    let m3 = rq * Matrix3::from_diagonal(&scales);
    let cov3 = m3 * m3.transpose();

    let mut grad_sonar = Vector3::zeros();
    let mut grad_cov3 = Matrix3::zeros();
    for (frame, upstream) in [(ImageFrame::Polar, polar), (ImageFrame::ElevationAzimuth, elevation_azimuth)] {
        if upstream.is_zero() {
            continue;
        }
        let sp: Matrix2x3<f64> = intr.transform(frame).linear() * frame_selector(frame);
        grad_sonar += jac.transpose() * sp.transpose() * upstream.mean;

        if upstream.conic == [0.0; 3] {
            continue;
        }
        let a = sp * jac * rot;
        let mut cov2 = symmetrize2(&(a * cov3 * a.transpose()));
        cov2[(0, 0)] += COV_REGULARIZATION;
        cov2[(1, 1)] += COV_REGULARIZATION;
        let conic = cov2.try_inverse().unwrap_or_else(Matrix2::zeros);
        let [ga, gb, gc] = upstream.conic;
        let grad_conic = Matrix2::new(ga, 0.5 * gb, 0.5 * gb, gc);
        let grad_cov2 = -(conic * grad_conic * conic);
        grad_cov3 += a.transpose() * grad_cov2 * a;
        let grad_a = 2.0 * grad_cov2 * a * cov3;
        let grad_jac = sp.transpose() * grad_a * rot.transpose();
        for (k, h) in hess.iter().enumerate() {
            grad_sonar += h * grad_jac.row(k).transpose();
        }
    }

    let grad_m3 = 2.0 * grad_cov3 * m3;
    let mut grad_rq = Matrix3::zeros();
    let mut grad_log_scales = Vector3::zeros();
    for k in 0..3 {
        let mut ds = 0.0;
        for i in 0..3 {
            ds += grad_m3[(i, k)] * rq[(i, k)];
            grad_rq[(i, k)] = grad_m3[(i, k)] * scales[k];
        }
        grad_log_scales[k] = ds * scales[k];
    }
    Ok(GeometryGradient {
        mean: rot.transpose() * grad_sonar,
        log_scales: grad_log_scales,
        rotation: quaternion_rotation_backward(&g.rotation, &grad_rq),
    })
}
