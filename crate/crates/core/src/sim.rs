//! Ray-cast forward-looking sonar simulator.
//!
//! Every azimuth column fires a fan of rays across the elevation aperture.
//! The first hit of each ray deposits a Lambertian return into the range
//! bin of its hit distance.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Image, SonarFrame};
use crate::geometry::{to_pixel, PolarElevationPoint, Pose, SonarIntrinsics};
use crate::noise::PixelGrid;

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Sphere { center: Vector3<f64>, radius: f64 },
    /// Axis-aligned box.
    Cuboid { min: Vector3<f64>, max: Vector3<f64> },
    Mesh { vertices: Vec<Vector3<f64>>, triangles: Vec<[usize; 3]> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub reflectivity: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimScene {
    pub primitives: Vec<Primitive>,
}

/// First intersection along a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub normal: Vector3<f64>,
    pub reflectivity: f64,
}

const HIT_EPS: f64 = 1e-9;

fn hit_sphere(o: &Vector3<f64>, d: &Vector3<f64>, c: &Vector3<f64>, r: f64) -> Option<(f64, Vector3<f64>)> {
    let oc = o - c;
    let b = oc.dot(d);
    let disc = b * b - (oc.norm_squared() - r * r);
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let t = if -b - s > HIT_EPS { -b - s } else { -b + s };
    (t > HIT_EPS).then(|| (t, (o + t * d - c) / r))
}

fn hit_cuboid(o: &Vector3<f64>, d: &Vector3<f64>, lo: &Vector3<f64>, hi: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let (t0, t1) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
        let (t0, t1) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
        if t0 > t_near {
            t_near = t0;
            axis = a;
        }
        t_far = t_far.min(t1);
    }
    if t_near > t_far || t_near <= HIT_EPS {
        return None;
    }
    let mut n = Vector3::zeros();
    n[axis] = -d[axis].signum();
    Some((t_near, n))
}

fn hit_triangle(o: &Vector3<f64>, d: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    let (e1, e2) = (b - a, c - a);
    let p = d.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let s = o - a;
    let u = s.dot(&p) / det;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = d.dot(&q) / det;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) / det;
    let n = e1.cross(&e2).normalize();
    // Two-sided: face the incoming ray.
    (t > HIT_EPS).then(|| (t, if n.dot(d) > 0.0 { -n } else { n }))
}

impl SimScene {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self> {
        for p in &primitives {
            if !(0.0..=1.0).contains(&p.reflectivity) {
                return Err(Error::invalid("reflectivity", format!("{} is outside [0, 1]", p.reflectivity)));
            }
        }
        Ok(Self { primitives })
    }

    /// Axis-aligned cube of side `size` centered at `center`.
    pub fn cube(center: Vector3<f64>, size: f64) -> Self {
        let h = Vector3::repeat(0.5 * size);
        Self {
            primitives: vec![Primitive {
                shape: Shape::Cuboid {
                    min: center - h,
                    max: center + h,
                },
                reflectivity: 1.0,
            }],
        }
    }

    pub fn sphere(center: Vector3<f64>, radius: f64) -> Self {
        Self {
            primitives: vec![Primitive {
                shape: Shape::Sphere { center, radius },
                reflectivity: 1.0,
            }],
        }
    }

    /// Thin vertical plate facing the x axis.
    pub fn panel(center: Vector3<f64>, width: f64, height: f64) -> Self {
        let h = Vector3::new(0.01, 0.5 * width, 0.5 * height);
        Self {
            primitives: vec![Primitive {
                shape: Shape::Cuboid {
                    min: center - h,
                    max: center + h,
                },
                reflectivity: 1.0,
            }],
        }
    }

    /// Capped vertical cylinder as a triangle mesh.
    pub fn barrel(center: Vector3<f64>, radius: f64, height: f64, segments: usize) -> Self {
        let segments = segments.max(3);
        let mut vertices = Vec::new();
        for z in [-0.5 * height, 0.5 * height] {
            for s in 0..segments {
                let a = std::f64::consts::TAU * s as f64 / segments as f64;
                vertices.push(center + Vector3::new(radius * a.cos(), radius * a.sin(), z));
            }
        }
        vertices.push(center - Vector3::new(0.0, 0.0, 0.5 * height));
        vertices.push(center + Vector3::new(0.0, 0.0, 0.5 * height));
        let (bottom, top) = (2 * segments, 2 * segments + 1);
        let mut triangles = Vec::new();
        for s in 0..segments {
            let n = (s + 1) % segments;
            triangles.push([s, n, segments + n]);
            triangles.push([s, segments + n, segments + s]);
            triangles.push([bottom, n, s]);
            triangles.push([top, segments + s, segments + n]);
        }
        Self {
            primitives: vec![Primitive {
                shape: Shape::Mesh { vertices, triangles },
                reflectivity: 1.0,
            }],
        }
    }

    /// Named scene centered at the origin.
    pub fn preset(name: &str) -> Result<Self> {
        let o = Vector3::zeros();
        Ok(match name {
            "cube" => Self::cube(o, 1.0),
            "sphere" => Self::sphere(o, 0.5),
            "panel" => Self::panel(o, 1.2, 0.8),
            "barrel" => Self::barrel(o, 0.3, 0.9, 48),
            other => return Err(Error::invalid("scene", format!("unknown preset {other:?}"))),
        })
    }

    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |t: f64, n: Vector3<f64>, refl: f64| {
            if best.is_none_or(|b| t < b.distance) {
                best = Some(Hit {
                    distance: t,
                    normal: n,
                    reflectivity: refl,
                });
            }
        };
        for p in &self.primitives {
            match &p.shape {
                Shape::Sphere { center, radius } => {
                    if let Some((t, n)) = hit_sphere(origin, dir, center, *radius) {
                        consider(t, n, p.reflectivity);
                    }
                }
                Shape::Cuboid { min, max } => {
                    if let Some((t, n)) = hit_cuboid(origin, dir, min, max) {
                        consider(t, n, p.reflectivity);
                    }
                }
                Shape::Mesh { vertices, triangles } => {
                    for tri in triangles {
                        let [a, b, c] = tri.map(|i| vertices[i]);
                        if let Some((t, n)) = hit_triangle(origin, dir, &a, &b, &c) {
                            consider(t, n, p.reflectivity);
                        }
                    }
                }
            }
        }
        best
    }

    /// Area-weighted uniform samples over every primitive's surface.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut patches: Vec<(f64, Patch)> = Vec::new();
        for p in &self.primitives {
            match &p.shape {
                Shape::Sphere { center, radius } => {
                    patches.push((4.0 * std::f64::consts::PI * radius * radius, Patch::Sphere(*center, *radius)));
                }
                Shape::Cuboid { min, max } => {
                    let size = max - min;
                    for axis in 0..3 {
                        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                        for side in [min[axis], max[axis]] {
                            let mut origin = *min;
                            origin[axis] = side;
                            let mut eu = Vector3::zeros();
                            eu[u] = size[u];
                            let mut ev = Vector3::zeros();
                            ev[v] = size[v];
                            patches.push((size[u] * size[v], Patch::Parallelogram(origin, eu, ev)));
                        }
                    }
                }
                Shape::Mesh { vertices, triangles } => {
                    for t in triangles {
                        let [a, b, c] = t.map(|i| vertices[i]);
                        patches.push((0.5 * (b - a).cross(&(c - a)).norm(), Patch::Triangle(a, b, c)));
                    }
                }
            }
        }
        let total: f64 = patches.iter().map(|p| p.0).sum();
        if n == 0 || total <= 0.0 {
            return Vec::new();
        }
        let mut cumulative = Vec::with_capacity(patches.len());
        let mut acc = 0.0;
        for (a, _) in &patches {
            acc += a;
            cumulative.push(acc);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let u = rng.random_range(0.0..total);
                let k = cumulative.partition_point(|&c| c <= u).min(patches.len() - 1);
                patches[k].1.sample(&mut rng).into()
            })
            .collect()
    }
}

enum Patch {
    Sphere(Vector3<f64>, f64),
    Parallelogram(Vector3<f64>, Vector3<f64>, Vector3<f64>),
    Triangle(Vector3<f64>, Vector3<f64>, Vector3<f64>),
}

impl Patch {
    fn sample(&self, rng: &mut impl Rng) -> Vector3<f64> {
        match self {
            Patch::Sphere(c, r) => loop {
                let v = Vector3::from_fn(|_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
                let n = v.norm();
                if n > 1e-12 {
                    break c + v * (*r / n);
                }
            },
            Patch::Parallelogram(o, u, v) => o + rng.random::<f64>() * u + rng.random::<f64>() * v,
            Patch::Triangle(a, b, c) => {
                let (mut s, mut t) = (rng.random::<f64>(), rng.random::<f64>());
                if s + t > 1.0 {
                    (s, t) = (1.0 - s, 1.0 - t);
                }
                a + s * (b - a) + t * (c - a)
            }
        }
    }
}

/// Side-lobe streaks along azimuth in random range rows, plus speckle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticNoise {
    pub streaks_per_image: usize,
    /// Peak value of a streak.
    pub streak_gain: f64,
    /// Angular width of a streak bump (radians).
    pub streak_sigma: f64,
    /// Each pixel receives `speckle_amplitude · u²`, `u ~ U(0, 1)`.
    pub speckle_amplitude: f64,
}

impl Default for SyntheticNoise {
    fn default() -> Self {
        Self {
            streaks_per_image: 5,
            streak_gain: 0.35,
            streak_sigma: 0.15,
            speckle_amplitude: 0.08,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Rays per azimuth column across the elevation aperture.
    pub subdivisions: usize,
    /// Scale returns by `(min_range / r)²`.
    pub range_falloff: bool,
    pub noise: Option<SyntheticNoise>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            subdivisions: 64,
            range_falloff: false,
            noise: None,
        }
    }
}

/// Clean image, and the noisy one when noise is enabled.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedFrame {
    pub pose: Pose,
    pub clean: Image,
    pub noisy: Option<Image>,
    /// Range rows that received a streak.
    pub streak_rows: Vec<usize>,
}

impl SimulatedFrame {
    /// The image a sensor would deliver.
    pub fn observed(&self) -> &Image {
        self.noisy.as_ref().unwrap_or(&self.clean)
    }
}

fn render_clean(scene: &SimScene, pose: &Pose, intr: &SonarIntrinsics, cfg: &SimConfig, grid: &PixelGrid) -> Image {
    let subdivisions = cfg.subdivisions.max(1);
    let origin = pose.position();
    let to_world = pose.rotation().transpose();
    let columns: Vec<Vec<f64>> = (0..intr.width)
        .into_par_iter()
        .map(|w| {
            let mut col = vec![0.0; intr.height];
            let theta = grid.azimuths[w];
            for s in 0..subdivisions {
                let phi = intr.elevation_fov * ((s as f64 + 0.5) / subdivisions as f64 - 0.5);
                let local = PolarElevationPoint {
                    range: 1.0,
                    azimuth: theta,
                    elevation: phi,
                }
                .to_cartesian();
                let dir = to_world * local;
                let Some(hit) = scene.intersect(&origin, &dir) else { continue };
                let r = hit.distance;
                if r < intr.min_range || r >= intr.max_range {
                    continue;
                }
                let row = to_pixel(&intr.polar_transform, &Vector2::new(r, theta)).y.round();
                if row < 0.0 || row >= intr.height as f64 {
                    continue;
                }
                let mut v = hit.reflectivity * (-dir.dot(&hit.normal)).max(0.0) / subdivisions as f64;
                if cfg.range_falloff {
                    v *= (intr.min_range / r).powi(2);
                }
                col[row as usize] += v;
            }
            col
        })
        .collect();
    Image::from_fn(intr.height, intr.width, |h, w| columns[w][h].min(1.0))
}

/// Simulates one frame, returning the clean image and, if configured, a
/// noisy copy.
pub fn simulate(scene: &SimScene, pose: &Pose, intr: &SonarIntrinsics, cfg: &SimConfig, seed: u64) -> SimulatedFrame {
    let grid = PixelGrid::new(intr);
    let clean = render_clean(scene, pose, intr, cfg, &grid);
    let Some(noise) = &cfg.noise else {
        return SimulatedFrame {
            pose: *pose,
            clean,
            noisy: None,
            streak_rows: Vec::new(),
        };
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noisy = clean.clone();
    let mut rows = Vec::new();
    for _ in 0..noise.streaks_per_image {
        let row = rng.random_range(0..intr.height);
        let center = rng.random_range(-0.5 * intr.azimuth_fov..0.5 * intr.azimuth_fov);
        for (w, theta) in grid.azimuths.iter().enumerate() {
            let v = noise.streak_gain * (-(theta - center).powi(2) / (2.0 * noise.streak_sigma.powi(2))).exp();
            noisy.set(row, w, noisy.get(row, w) + v);
        }
        rows.push(row);
    }
    for v in noisy.as_mut_slice() {
        let u: f64 = rng.random();
        *v += noise.speckle_amplitude * u * u;
    }
    noisy.clamp01();
    rows.sort_unstable();
    rows.dedup();
    SimulatedFrame {
        pose: *pose,
        clean,
        noisy: Some(noisy),
        streak_rows: rows,
    }
}

/// One observed frame.
pub fn simulate_frame(scene: &SimScene, pose: &Pose, intr: &SonarIntrinsics, cfg: &SimConfig, seed: u64) -> SonarFrame {
    let f = simulate(scene, pose, intr, cfg, seed);
    SonarFrame {
        image: f.noisy.unwrap_or(f.clean),
        pose: f.pose,
    }
}

/// `n` poses evenly spaced on a horizontal circle of `radius` around
/// `center`, raised by `height`, all looking at `center`.
pub fn generate_orbit_trajectory(center: Vector3<f64>, radius: f64, n: usize, height: f64) -> Result<Vec<Pose>> {
    if n == 0 || !(radius > 0.0) {
        return Err(Error::invalid("orbit", format!("needs n >= 1 and radius > 0, got {n} and {radius}")));
    }
    (0..n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            let p = center + Vector3::new(radius * a.cos(), radius * a.sin(), height);
            Pose::look_at(p, center, Vector3::z())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intr() -> SonarIntrinsics {
        SonarIntrinsics::from_fov(30f64.to_radians(), 20f64.to_radians(), 2.0, 8.0, 120, 64).unwrap()
    }

    #[test]
    fn empty_scene_is_black() {
        let f = simulate_frame(&SimScene::default(), &Pose::identity(), &intr(), &SimConfig::default(), 0);
        assert!(f.image.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sphere_peak_at_near_surface() {
        let i = intr();
        let scene = SimScene::sphere(Vector3::new(5.0, 0.0, 0.0), 1.0);
        let f = simulate_frame(&scene, &Pose::identity(), &i, &SimConfig::default(), 0);
        let (mut best, mut at) = (0.0, (0, 0));
        for h in 0..i.height {
            for w in 0..i.width {
                if f.image.get(h, w) > best {
                    best = f.image.get(h, w);
                    at = (h, w);
                }
            }
        }
        let row = to_pixel(&i.polar_transform, &Vector2::new(4.0, 0.0)).y.round() as usize;
        assert_eq!(at.0, row);
        assert!((at.1 as f64 - (i.width as f64 - 1.0) / 2.0).abs() <= 0.5);
    }

    #[test]
    fn orbit_axes_pass_through_center() {
        let c = Vector3::new(0.3, -0.2, 0.1);
        for n in [1, 4, 7] {
            let poses = generate_orbit_trajectory(c, 5.0, n, 1.0).unwrap();
            for p in &poses {
                let to_c = c - p.position();
                let off = to_c - p.axis() * p.axis().dot(&to_c);
                assert!(off.norm() < 1e-9);
            }
        }
        let four = generate_orbit_trajectory(Vector3::zeros(), 5.0, 4, 2.0).unwrap();
        assert!((four[1].position() - Vector3::new(0.0, 5.0, 2.0)).norm() < 1e-12);
        assert!(generate_orbit_trajectory(c, 5.0, 0, 1.0).is_err());
    }

    #[test]
    fn surface_samples_lie_on_sphere() {
        let s = SimScene::sphere(Vector3::new(1.0, 2.0, 3.0), 1.0);
        let pts = s.sample_surface(1000, 4);
        assert!(pts.iter().all(|p| ((Vector3::from(*p) - Vector3::new(1.0, 2.0, 3.0)).norm() - 1.0).abs() < 1e-9));
        assert!(s.sample_surface(0, 4).is_empty());
    }

    #[test]
    fn noisy_frames_are_deterministic() {
        let i = intr();
        let cfg = SimConfig {
            noise: Some(SyntheticNoise::default()),
            ..SimConfig::default()
        };
        let scene = SimScene::preset("barrel").unwrap();
        let pose = Pose::look_at(Vector3::new(-5.0, 0.0, 0.5), Vector3::zeros(), Vector3::z()).unwrap();
        let a = simulate(&scene, &pose, &i, &cfg, 9);
        let b = simulate(&scene, &pose, &i, &cfg, 9);
        assert_eq!(a, b);
        assert!(!a.streak_rows.is_empty());
        assert!(a.clean.max() > 0.0);
    }
}
