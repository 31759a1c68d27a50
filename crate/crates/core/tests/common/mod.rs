//! Shared fixtures and independent reference computations.
#![allow(dead_code)]

use nalgebra::{Vector2, Vector3};
use echosplat::gaussian::{logit, Gaussian3D, Scene};
use echosplat::geometry::{PolarElevationPoint, Pose, SonarIntrinsics};
use echosplat::gaussian::project_gaussian_unculled;
use echosplat::raster::{render_forward, ALPHA_MAX, ALPHA_MIN, MAX_MAHALANOBIS_SQ};
use rand::Rng;

pub fn small_intrinsics() -> SonarIntrinsics {
    SonarIntrinsics::from_fov(40f64.to_radians(), 12f64.to_radians(), 1.0, 3.0, 32, 24).unwrap()
}

pub fn random_unit_quaternion(rng: &mut impl Rng) -> [f64; 4] {
    let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

/// Point at a given range, azimuth and elevation in the sonar frame of `pose`.
pub fn point_in_view(pose: &Pose, range: f64, azimuth: f64, elevation: f64) -> Vector3<f64> {
    let local = PolarElevationPoint { range, azimuth, elevation }.to_cartesian();
    pose.sonar_to_world(&local)
}

/// Sonar-frame point at zero elevation that projects onto polar pixel
/// center `(w, h)`.
pub fn point_on_pixel(intr: &SonarIntrinsics, w: usize, h: usize, elevation: f64) -> Vector3<f64> {
    let rt = intr.polar_transform.invert(&Vector2::new(w as f64, h as f64));
    PolarElevationPoint { range: rt.x, azimuth: rt.y, elevation }.to_cartesian()
}

/// A handful of overlapping anisotropic Gaussians inside the view of a
/// small sonar, clustered so that several occlude one another.
pub fn clustered_scene(rng: &mut impl Rng, pose: &Pose, intr: &SonarIntrinsics, n: usize) -> Scene {
    let az = 0.25 * intr.azimuth_fov;
    let el = 0.2 * intr.elevation_fov;
    let mid = 0.5 * (intr.min_range + intr.max_range);
    let span = 0.25 * (intr.max_range - intr.min_range);
    Scene::from_gaussians((0..n).map(|_| {
        let mean = point_in_view(
            pose,
            rng.random_range(mid - span..mid + span),
            rng.random_range(-az..az),
            rng.random_range(-el..el),
        );
        Gaussian3D {
            mean,
            log_scales: Vector3::from_fn(|_, _| rng.random_range(0.02f64..0.08).ln()),
            rotation: random_unit_quaternion(rng),
            intensity_logit: logit(rng.random_range(0.15..0.5)),
            opacity_logit: logit(rng.random_range(0.2..0.85)),
        }
    }))
}

/// Smallest relative distance of any thresholded quantity to its
/// threshold. Finite differences are only meaningful when this is well
/// above the perturbation size.
pub fn smoothness_margin(scene: &Scene, pose: &Pose, intr: &SonarIntrinsics) -> f64 {
    let (_, state) = render_forward(scene, pose, intr);
    let proj = state.projected();
    let mut margin = f64::INFINITY;
    let check = |q: f64, opacity: f64| {
        let raw = opacity * (-0.5 * q).exp();
        ((q - MAX_MAHALANOBIS_SQ).abs() / MAX_MAHALANOBIS_SQ)
            .min((raw - ALPHA_MIN).abs() / ALPHA_MIN)
            .min((raw - ALPHA_MAX).abs())
    };
    for p in proj {
        let s = &p.polar;
        for h in 0..intr.height {
            for w in 0..intr.width {
                margin = margin.min(check(s.mahalanobis_sq(&Vector2::new(w as f64, h as f64)), s.opacity));
            }
        }
    }
    for (i, recv) in proj.iter().enumerate() {
        for (j, occ) in proj.iter().enumerate() {
            if i == j {
                continue;
            }
            let (r, o) = (&recv.elevation_azimuth, &occ.elevation_azimuth);
            margin = margin.min((r.range - o.range).abs());
            margin = margin.min(check(o.mahalanobis_sq(&r.mean), o.opacity));
        }
    }
    for &v in state.unclamped() {
        margin = margin.min((v - 1.0).abs());
    }
    margin
}

/// Central difference of `f` with respect to one scalar.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn assert_close(analytic: f64, numeric: f64, rel: f64, abs: f64, what: &str) {
    let tol = abs + rel * numeric.abs().max(analytic.abs());
    assert!(
        (analytic - numeric).abs() <= tol,
        "{what}: analytic {analytic:e} vs numeric {numeric:e}"
    );
}

/// PSNR straight from the definition.
pub fn scalar_psnr(a: &[f64], b: &[f64]) -> f64 {
    let mut sum = 0.0;
    for i in 0..a.len() {
        sum += (a[i] - b[i]).powi(2);
    }
    let mse = sum / a.len() as f64;
    10.0 * (1.0 / mse).log10()
}

/// SSIM evaluated window by window with explicit 2D Gaussian weights.
pub fn scalar_ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let mut weights = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in weights.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d2 = (i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2);
            *v = (-d2 / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = (y + i) * w + x + j;
                    ma += weights[i][j] / total * a[k];
                    mb += weights[i][j] / total * b[k];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = (y + i) * w + x + j;
                    let wt = weights[i][j] / total;
                    va += wt * (a[k] - ma).powi(2);
                    vb += wt * (b[k] - mb).powi(2);
                    cov += wt * (a[k] - ma) * (b[k] - mb);
                }
            }
            acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}

/// Azimuth-bank noise map by direct summation over components.
pub fn scalar_azimuth_noise(model: &echosplat::noise::NoiseModel, n: usize, grid: &echosplat::noise::PixelGrid) -> Vec<f64> {
    let bank = &model.azimuth[n];
    let k = bank.k;
    let mut out = Vec::new();
    for h in 0..grid.ranges.len() {
        let denom: f64 = (0..k).map(|j| bank.mix_logits[h * k + j].exp()).sum();
        for &theta in &grid.azimuths {
            let mut v = 0.0;
            for j in 0..k {
                let pi = bank.mix_logits[h * k + j].exp() / denom;
                let sigma = 1e-3 + bank.log_sigmas[h * k + j].exp();
                v += pi * (-(theta - bank.means[h * k + j]).powi(2) / (2.0 * sigma * sigma)).exp();
            }
            out.push(bank.log_gains[h].exp() * v);
        }
    }
    out
}

/// Range-bank noise map by direct summation over components.
pub fn scalar_range_noise(model: &echosplat::noise::NoiseModel, n: usize, grid: &echosplat::noise::PixelGrid) -> Vec<f64> {
    let bank = &model.range[n];
    let k = bank.k;
    let (height, width) = (grid.ranges.len(), grid.azimuths.len());
    let mut out = vec![0.0; height * width];
    for w in 0..width {
        let denom: f64 = (0..k).map(|j| bank.mix_logits[w * k + j].exp()).sum();
        for h in 0..height {
            let r = grid.ranges[h];
            let mut v = 0.0;
            for j in 0..k {
                let pi = bank.mix_logits[w * k + j].exp() / denom;
                let sigma = 1e-3 + bank.log_sigmas[w * k + j].exp();
                v += pi * (-(r - bank.means[w * k + j]).powi(2) / (2.0 * sigma * sigma)).exp();
            }
            out[h * width + w] = bank.log_gains[w].exp() * v;
        }
    }
    out
}

pub fn randomize_noise(model: &mut echosplat::noise::NoiseModel, rng: &mut impl Rng) {
    for bank in model.azimuth.iter_mut().chain(model.range.iter_mut()) {
        bank.mix_logits.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        bank.log_sigmas.iter_mut().for_each(|v| *v = rng.random_range(-2.5..-0.5));
        bank.log_gains.iter_mut().for_each(|v| *v = rng.random_range(-2.0..0.0));
        bank.means.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
}

/// Random sonar-frame point with range in `[0.5, 50]` and `|φ| < 80°`.
pub fn random_sonar_point(rng: &mut impl Rng) -> Vector3<f64> {
    let r = rng.random_range(0.5..50.0);
    let theta = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let phi = rng.random_range(-80f64.to_radians()..80f64.to_radians());
    PolarElevationPoint { range: r, azimuth: theta, elevation: phi }.to_cartesian()
}

/// Largest Frobenius-relative deviation of the analytic polar-elevation
/// Jacobian from central differences (step `h`) over `n` random points.
pub fn jacobian_fd_error(rng: &mut impl Rng, n: usize, h: f64) -> f64 {
    use echosplat::geometry::{cartesian_to_polar_elevation, polar_elevation_jacobian};
    let coords = |p: &Vector3<f64>| {
        let pe = cartesian_to_polar_elevation(p).unwrap();
        Vector3::new(pe.range, pe.azimuth, pe.elevation)
    };
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let p = random_sonar_point(rng);
        let j = polar_elevation_jacobian(&p).unwrap();
        let mut numeric = nalgebra::Matrix3::zeros();
        for c in 0..3 {
            let mut e = Vector3::zeros();
            e[c] = h;
            numeric.set_column(c, &((coords(&(p + e)) - coords(&(p - e))) / (2.0 * h)));
        }
        worst = worst.max((j - numeric).norm() / j.norm());
    }
    worst
}

/// Random covariance whose largest standard deviation is `sigma_max`.
pub fn random_covariance(rng: &mut impl Rng, sigma_max: f64) -> nalgebra::Matrix3<f64> {
    let q = random_unit_quaternion(rng);
    let r = echosplat::gaussian::quaternion_to_rotation(&q);
    let s = Vector3::new(sigma_max, rng.random_range(0.2..1.0) * sigma_max, rng.random_range(0.2..1.0) * sigma_max);
    r * nalgebra::Matrix3::from_diagonal(&s.component_mul(&s)) * r.transpose()
}

/// Frobenius-relative difference between the linearized pixel covariance
/// and the empirical covariance of `samples` points drawn from N(μ, Σ) and
/// pushed through the exact projection. `μ` sits at a random in-view
/// position of a random pose, and 3σ is `fraction` of its range.
pub fn covariance_mc_error(rng: &mut impl Rng, frame: echosplat::geometry::ImageFrame, samples: usize, fraction: f64) -> f64 {
    use echosplat::geometry::{project_covariance, project_point};
    use rand_distr::StandardNormal;
    let intr = SonarIntrinsics::from_fov(90f64.to_radians(), 20f64.to_radians(), 1.0, 10.0, 512, 399).unwrap();
    let eye = Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0));
    let target = eye + Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let pose = Pose::look_at(eye, target, Vector3::z()).unwrap();
    let range = rng.random_range(2.0..9.0);
    let mean = point_in_view(
        &pose,
        range,
        rng.random_range(-0.4..0.4) * intr.azimuth_fov,
        rng.random_range(-0.4..0.4) * intr.elevation_fov,
    );
    let cov = random_covariance(rng, fraction * range / 3.0);
    let analytic = project_covariance(&cov, &pose, &mean, frame, &intr).unwrap();
    let l = cov.cholesky().unwrap().l();
    let mut sum = Vector2::zeros();
    let mut outer = nalgebra::Matrix2::zeros();
    let pts: Vec<Vector2<f64>> = (0..samples)
        .map(|_| {
            let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            project_point(&pose, &(mean + l * z), frame, &intr).unwrap()
        })
        .collect();
    for p in &pts {
        sum += p;
    }
    let m = sum / samples as f64;
    for p in &pts {
        let d = p - m;
        outer += d * d.transpose();
    }
    let empirical = outer / (samples as f64 - 1.0);
    (analytic - empirical).norm() / empirical.norm()
}

/// Symmetric mean nearest-neighbour distance by exhaustive search.
pub fn brute_chamfer(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let nn = |p: &[f64; 3], set: &[[f64; 3]]| {
        set.iter()
            .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let ab = a.iter().map(|p| nn(p, b)).sum::<f64>() / a.len() as f64;
    let ba = b.iter().map(|p| nn(p, a)).sum::<f64>() / b.len() as f64;
    0.5 * ab + 0.5 * ba
}

/// Largest nearest-neighbour distance in either direction, exhaustively.
pub fn brute_hausdorff(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let nn = |p: &[f64; 3], set: &[[f64; 3]]| {
        set.iter()
            .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let ab = a.iter().map(|p| nn(p, b)).fold(0.0, f64::max);
    let ba = b.iter().map(|p| nn(p, a)).fold(0.0, f64::max);
    ab.max(ba)
}

pub fn random_cloud(rng: &mut impl Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect()
}

/// Renders by visiting every pixel and every Gaussian, with a quadratic
/// transmittance scan and no tiles, grids or culling.
pub fn brute_force_render(scene: &Scene, pose: &Pose, intr: &SonarIntrinsics) -> Vec<f64> {
    let proj: Vec<_> = (0..scene.len())
        .filter_map(|i| project_gaussian_unculled(i, &scene.get(i), pose, intr).ok())
        .collect();
    let t: Vec<f64> = proj
        .iter()
        .map(|recv| {
            proj.iter()
                .filter(|o| o.elevation_azimuth.range < recv.elevation_azimuth.range)
                .fold(1.0, |t, o| {
                    let q = o.elevation_azimuth.mahalanobis_sq(&recv.elevation_azimuth.mean);
                    let a = o.elevation_azimuth.opacity * (-0.5 * q).exp();
                    if q <= 9.0 && a >= 1.0 / 255.0 {
                        t * (1.0 - a)
                    } else {
                        t
                    }
                })
        })
        .collect();
    let mut img = vec![0.0; intr.pixel_count()];
    for h in 0..intr.height {
        for w in 0..intr.width {
            let px = Vector2::new(w as f64, h as f64);
            let mut v = 0.0;
            for (p, t) in proj.iter().zip(&t) {
                let s = &p.polar;
                let q = s.mahalanobis_sq(&px);
                let a = (s.opacity * (-0.5 * q).exp()).min(0.99);
                if q <= 9.0 && a >= 1.0 / 255.0 {
                    v += s.intensity * a * t;
                }
            }
            img[h * intr.width + w] = v.clamp(0.0, 1.0);
        }
    }
    img
}

/// Weighted image sum used as a scalar loss for gradient checks.
pub fn weighted_sum(scene: &Scene, pose: &Pose, intr: &SonarIntrinsics, weights: &[f64]) -> f64 {
    let (_, state) = render_forward(scene, pose, intr);
    state
        .unclamped()
        .iter()
        .zip(weights)
        .map(|(v, w)| v.clamp(0.0, 1.0) * w)
        .sum()
}

/// `(name, analytic, central difference)` for every parameter of `scene`
/// under the weighted-sum loss.
pub fn scene_gradient_pairs(
    scene: &Scene,
    pose: &Pose,
    intr: &SonarIntrinsics,
    weights: &[f64],
    grads: &echosplat::raster::SceneGradients,
) -> Vec<(String, f64, f64)> {
    let h = 1e-6;
    let mut out = Vec::new();
    let mut probe = |name: String, analytic: f64, set: &dyn Fn(&mut Scene, f64), x: f64| {
        let numeric = central_difference(
            |v| {
                let mut s = scene.clone();
                set(&mut s, v);
                weighted_sum(&s, pose, intr, weights)
            },
            x,
            h,
        );
        out.push((name, analytic, numeric));
    };
    for i in 0..scene.len() {
        for k in 0..3 {
            probe(format!("mean[{i}][{k}]"), grads.means[i][k], &|s, v| s.means[i][k] = v, scene.means[i][k]);
            probe(format!("log_scale[{i}][{k}]"), grads.log_scales[i][k], &|s, v| s.log_scales[i][k] = v, scene.log_scales[i][k]);
        }
        for k in 0..4 {
            probe(format!("rotation[{i}][{k}]"), grads.rotations[i][k], &|s, v| s.rotations[i][k] = v, scene.rotations[i][k]);
        }
        probe(format!("intensity[{i}]"), grads.intensity_logits[i], &|s, v| s.intensity_logits[i] = v, scene.intensity_logits[i]);
        probe(format!("opacity[{i}]"), grads.opacity_logits[i], &|s, v| s.opacity_logits[i] = v, scene.opacity_logits[i]);
    }
    out
}

/// Largest `|a − n| / (rel·max(|a|, |n|) + abs)` over the pairs, with the
/// offending name. Values at most 1 pass.
pub fn worst_violation(pairs: &[(String, f64, f64)], rel: f64, abs: f64) -> (f64, String) {
    pairs
        .iter()
        .map(|(name, a, n)| ((a - n).abs() / (rel * a.abs().max(n.abs()) + abs), name.clone()))
        .fold((0.0, String::new()), |best, cur| if cur.0 > best.0 { cur } else { best })
}
