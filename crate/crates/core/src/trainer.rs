//! Two-stage optimization of a Gaussian scene against posed sonar images.
//!
//! Stage 1 fits the Gaussians alone. Stage 2 additionally composites each
//! training view's learned noise into the rendered image before the loss,
//! so streaks and speckle are explained by the noise model rather than by
//! geometry.

use std::path::Path;
use std::time::Instant;

use nalgebra::Vector3;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::frame::Image;
use crate::gaussian::{logit, quaternion_to_rotation, Gaussian3D, Scene};
use crate::geometry::{PolarElevationPoint, Pose};
use crate::metrics::ssim_with_gradient;
use crate::noise::{
    apply_noise, apply_noise_backward, azimuth_noise, noise_backward, range_noise, GmmBank, NoiseModel, PixelGrid,
};
use crate::optim::Adam;
use crate::raster::{render_backward_with_state, render_forward, SceneGradients};
use crate::spatial::PointIndex;

/// Mean over views of `(1 − λ)·L1 + λ·(1 − SSIM)`, with the gradient with
/// respect to every rendered pixel.
pub fn multiview_loss(rendered: &[Image], reference: &[Image], lambda: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    if rendered.is_empty() || rendered.len() != reference.len() {
        return Err(Error::shape(format!("{} views", rendered.len().max(1)), format!("{} references", reference.len())));
    }
    let b = rendered.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(rendered.len());
    for (r, g) in rendered.iter().zip(reference) {
        r.ensure_same_shape(g)?;
        let n = r.len() as f64;
        let mut l1 = 0.0;
        let mut grad: Vec<f64> = r
            .as_slice()
            .iter()
            .zip(g.as_slice())
            .map(|(x, y)| {
                l1 += (x - y).abs();
                let s = if x > y {
                    1.0
                } else if x < y {
                    -1.0
                } else {
                    0.0
                };
                (1.0 - lambda) * s / (n * b)
            })
            .collect();
        l1 /= n;
        let mut view = (1.0 - lambda) * l1;
        // Identical views sit at the loss minimum; skip the SSIM gradient,
        // whose roundoff Adam would otherwise amplify into full steps.
        if lambda > 0.0 && r.as_slice() != g.as_slice() {
            let (s, ds) = ssim_with_gradient(r, g)?;
            view += lambda * (1.0 - s);
            for (d, e) in grad.iter_mut().zip(ds) {
                *d -= lambda * e / b;
            }
        }
        total += view;
        grads.push(grad);
    }
    Ok((total / b, grads))
}

/// Mean distance from each point to its three nearest neighbours.
fn neighbour_scales(points: &[[f64; 3]]) -> Result<Vec<f64>> {
    if points.len() < 2 {
        return Ok(vec![1e-2; points.len()]);
    }
    let index = PointIndex::new(points)?;
    Ok(points
        .iter()
        .map(|p| {
            let d = index.nearest_distances(p, 4);
            let others = &d[1..];
            (others.iter().sum::<f64>() / others.len() as f64).max(1e-4)
        })
        .collect())
}

/// Seeds Gaussians by back-projecting bright training pixels at random
/// elevations. At most `budget` Gaussians are created.
pub fn initialize_from_images(ds: &Dataset, tau: f64, samples_per_pixel: usize, budget: usize, opacity: f64, seed: u64) -> Result<Scene> {
    let intr = &ds.intrinsics;
    let mut bright = Vec::new();
    for &f in &ds.train {
        let img = &ds.frames[f].image;
        for h in 0..img.height() {
            for w in 0..img.width() {
                let v = img.get(h, w);
                if v > tau {
                    bright.push((f, h, w, v));
                }
            }
        }
    }
    if bright.is_empty() {
        return Err(Error::EmptyInitialization(format!("no training pixel exceeds {tau}")));
    }
    let spp = samples_per_pixel.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = (budget / spp).max(1).min(bright.len());
    let mut chosen = sample_indices(&mut rng, bright.len(), keep).into_vec();
    chosen.sort_unstable();
    let mut points = Vec::with_capacity(keep * spp);
    let mut values = Vec::with_capacity(keep * spp);
    for k in chosen {
        let (f, h, w, v) = bright[k];
        let rt = intr.polar_transform.invert(&nalgebra::Vector2::new(w as f64, h as f64));
        for _ in 0..spp {
            let phi = if intr.elevation_fov > 0.0 {
                rng.random_range(-0.5 * intr.elevation_fov..=0.5 * intr.elevation_fov)
            } else {
                0.0
            };
            let local = PolarElevationPoint {
                range: rt.x,
                azimuth: rt.y,
                elevation: phi,
            }
            .to_cartesian();
            points.push(ds.frames[f].pose.sonar_to_world(&local).into());
            values.push(v);
        }
    }
    let scales = neighbour_scales(&points)?;
    Ok(Scene::from_gaussians(points.iter().zip(&values).zip(&scales).map(|((p, &v), &s)| {
        Gaussian3D::isotropic(Vector3::from(*p), s, v.clamp(0.01, 0.99), opacity)
    })))
}

/// Appearance given to Gaussians seeded from a point cloud.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointInit {
    pub intensity: f64,
    pub opacity: f64,
    pub budget: usize,
}

impl Default for PointInit {
    fn default() -> Self {
        Self {
            intensity: 0.5,
            opacity: 0.1,
            budget: 30_000,
        }
    }
}

/// One isotropic Gaussian per point, uniformly subsampled to the budget.
pub fn initialize_from_pointcloud(points: &[[f64; 3]], init: &PointInit, seed: u64) -> Result<Scene> {
    if points.is_empty() {
        return Err(Error::EmptyInitialization("point cloud is empty".into()));
    }
    let chosen: Vec<[f64; 3]> = if points.len() > init.budget {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample_indices(&mut rng, points.len(), init.budget.max(1)).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| points[i]).collect()
    } else {
        points.to_vec()
    };
    let scales = neighbour_scales(&chosen)?;
    Ok(Scene::from_gaussians(
        chosen
            .iter()
            .zip(&scales)
            .map(|(p, &s)| Gaussian3D::isotropic(Vector3::from(*p), s, init.intensity, init.opacity)),
    ))
}

/// Running sums of the per-view pixel-space positional gradient norm.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradStats {
    pub sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradStats {
    pub fn new(n: usize) -> Self {
        Self {
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn add(&mut self, g: &SceneGradients) {
        for i in 0..self.sum.len() {
            if g.visible[i] {
                self.sum[i] += g.pixel_mean_norms[i];
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.sum[i] / self.count[i] as f64
        }
    }
}

/// Where each Gaussian of a densified scene came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Densified {
    pub scene: Scene,
    /// `Some(i)` for a surviving Gaussian `i` of the input, `None` for new ones.
    pub origin: Vec<Option<usize>>,
}

/// Clones small Gaussians and splits large ones whose mean positional
/// gradient exceeds the threshold, then drops nearly transparent and
/// oversized ones.
pub fn densify_and_prune(scene: &Scene, stats: &GradStats, cfg: &TrainConfig, extent: f64, rng: &mut impl Rng) -> Densified {
    let n = scene.len();
    let mut candidates: Vec<usize> = if stats.sum.len() == n {
        (0..n).filter(|&i| stats.mean(i) > cfg.densify_threshold).collect()
    } else {
        Vec::new()
    };
    candidates.sort_by(|&a, &b| stats.mean(b).total_cmp(&stats.mean(a)).then(a.cmp(&b)));
    candidates.truncate(cfg.max_gaussians.saturating_sub(n));
    candidates.sort_unstable();

    let big = 0.01 * extent;
    let mut split = vec![false; n];
    let mut out = Scene::new();
    let mut origin = Vec::new();
    let mut extra = Vec::new();
    for &i in &candidates {
        let g = scene.get(i);
        if g.scales().max() > big {
            split[i] = true;
            let m = quaternion_to_rotation(&g.rotation) * nalgebra::Matrix3::from_diagonal(&g.scales());
            for _ in 0..2 {
                let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                let mut child = g;
                child.mean = g.mean + m * z;
                child.log_scales = g.log_scales.map(|s| s - 1.6f64.ln());
                extra.push(child);
            }
        } else {
            extra.push(g);
        }
    }
    for i in 0..n {
        if !split[i] {
            out.push(scene.get(i));
            origin.push(Some(i));
        }
    }
    for g in extra {
        out.push(g);
        origin.push(None);
    }
    let too_big = cfg.prune_scale * extent;
    let keep: Vec<bool> = out
        .iter()
        .map(|g| g.opacity() >= cfg.prune_opacity && g.scales().max() <= too_big)
        .collect();
    out.retain_mask(&keep);
    let origin = origin.into_iter().zip(&keep).filter(|(_, &k)| k).map(|(o, _)| o).collect();
    Densified { scene: out, origin }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Geometry,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub stage: u8,
    pub loss: f64,
    pub count: usize,
    pub wall_clock: f64,
}

const GROUPS: [(&str, usize); 5] = [("means", 3), ("log_scales", 3), ("rotations", 4), ("intensity_logits", 1), ("opacity_logits", 1)];

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    iteration: usize,
    groups: Vec<(String, usize)>,
    noise_steps: Vec<u64>,
    noise_lengths: Vec<[usize; 2]>,
    dtype: String,
}

/// Owns the scene, the noise model, optimizer state and the random stream
/// for one training run.
#[derive(Clone)]
pub struct Trainer<'a> {
    pub config: TrainConfig,
    dataset: &'a Dataset,
    grid: PixelGrid,
    pub scene: Scene,
    pub noise: NoiseModel,
    optim: [Adam; 5],
    noise_optim: Vec<[Adam; 2]>,
    noise_steps: Vec<u64>,
    step: u64,
    rng: ChaCha8Rng,
    iteration: usize,
    extent: f64,
    stats: GradStats,
    log: Vec<LogEntry>,
    started: Instant,
}

/// Radius of the training sensor positions around their centroid, ×1.1.
pub fn camera_extent(poses: &[Pose]) -> f64 {
    if poses.is_empty() {
        return 1.0;
    }
    let c: Vector3<f64> = poses.iter().map(|p| p.position()).sum::<Vector3<f64>>() / poses.len() as f64;
    let r = poses.iter().map(|p| (p.position() - c).norm()).fold(0.0, f64::max);
    if r > 0.0 {
        1.1 * r
    } else {
        1.0
    }
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, scene: Scene, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if dataset.train.is_empty() {
            return Err(Error::invalid("dataset", "no training frames"));
        }
        let noise = NoiseModel::new(dataset.train.len(), &dataset.intrinsics, config.noise_components)?;
        Self::with_noise(dataset, scene, noise, config)
    }

    pub fn with_noise(dataset: &'a Dataset, mut scene: Scene, noise: NoiseModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if noise.images() != dataset.train.len() {
            return Err(Error::shape(dataset.train.len(), noise.images()));
        }
        scene.normalize_rotations();
        let n = scene.len();
        let poses: Vec<Pose> = dataset.train.iter().map(|&i| dataset.frames[i].pose).collect();
        let noise_len = |b: &GmmBank| b.values().count();
        Ok(Self {
            grid: PixelGrid::new(&dataset.intrinsics),
            optim: GROUPS.map(|(_, w)| Adam::new(n * w)),
            noise_optim: (0..noise.images())
                .map(|k| [Adam::new(noise_len(&noise.azimuth[k])), Adam::new(noise_len(&noise.range[k]))])
                .collect(),
            noise_steps: vec![0; noise.images()],
            noise,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            iteration: 0,
            extent: camera_extent(&poses),
            stats: GradStats::new(n),
            log: Vec::new(),
            started: Instant::now(),
            scene,
            dataset,
            config,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn dataset(&self) -> &Dataset {
        self.dataset
    }

    fn mean_rate(&self) -> f64 {
        let total = (self.config.stage1_iterations + self.config.stage2_iterations).max(1) as f64;
        let t = (self.iteration as f64 / total).min(1.0);
        let (a, b) = (self.config.lr_mean, self.config.lr_mean_final);
        self.extent * a * (b / a).powf(t)
    }

    /// Renders training slot `slot` as it enters the loss.
    fn view(&self, slot: usize, with_noise: bool) -> Result<(Image, crate::raster::RenderState, Option<(Image, Image, Image)>)> {
        let f = &self.dataset.frames[self.dataset.train[slot]];
        let (out, state) = render_forward(&self.scene, &f.pose, &self.dataset.intrinsics);
        if !with_noise {
            return Ok((out.image, state, None));
        }
        let a = azimuth_noise(&self.noise, slot, &self.grid)?;
        let r = range_noise(&self.noise, slot, &self.grid)?;
        let composite = apply_noise(&out.image, &a, &r)?;
        Ok((composite, state, Some((out.image, a, r))))
    }

    /// One optimizer step on a random batch of training views. Returns
    /// the batch loss before the update.
    pub fn step(&mut self, stage: Stage) -> Result<f64> {
        let with_noise = stage == Stage::Joint && self.config.noise_enabled;
        let ntrain = self.dataset.train.len();
        let b = self.config.batch_size.min(ntrain);
        let slots = sample_indices(&mut self.rng, ntrain, b).into_vec();
        let intr = &self.dataset.intrinsics;

        let mut rendered = Vec::with_capacity(b);
        let mut states = Vec::with_capacity(b);
        let mut parts = Vec::with_capacity(b);
        let mut refs = Vec::with_capacity(b);
        for &s in &slots {
            let (img, state, p) = self.view(s, with_noise)?;
            rendered.push(img);
            states.push(state);
            parts.push(p);
            refs.push(self.dataset.frames[self.dataset.train[s]].image.clone());
        }
        let (loss, grads) = multiview_loss(&rendered, &refs, self.config.lambda_dssim)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                detail: format!("batch loss is {loss}"),
            });
        }

        let mut total = SceneGradients::zeros(self.scene.len());
        let mut noise_grads = Vec::new();
        for (k, &s) in slots.iter().enumerate() {
            let f = &self.dataset.frames[self.dataset.train[s]];
            let upstream = match &parts[k] {
                Some((clean, a, r)) => {
                    let g = apply_noise_backward(clean, a, r, &grads[k])?;
                    noise_grads.push((s, noise_backward(&self.noise, s, &self.grid, &g)?));
                    g
                }
                None => grads[k].clone(),
            };
            let g = render_backward_with_state(&self.scene, &f.pose, intr, &states[k], &upstream);
            // Densification statistics use the single-view gradient.
            let mut single = g.clone();
            single.pixel_mean_norms.iter_mut().for_each(|v| *v *= b as f64);
            self.stats.add(&single);
            total.accumulate(&g);
        }
        if let Some(bad) = first_non_finite(&total) {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                detail: bad,
            });
        }

        self.step += 1;
        let rates = [
            self.mean_rate(),
            self.config.lr_scale,
            self.config.lr_rotation,
            self.config.lr_intensity,
            self.config.lr_opacity,
        ];
        let t = self.step;
        let [o0, o1, o2, o3, o4] = &mut self.optim;
        o0.step(self.scene.means.as_flattened_mut(), total.means.as_flattened(), rates[0], t);
        o1.step(self.scene.log_scales.as_flattened_mut(), total.log_scales.as_flattened(), rates[1], t);
        o2.step(self.scene.rotations.as_flattened_mut(), total.rotations.as_flattened(), rates[2], t);
        o3.step(&mut self.scene.intensity_logits, &total.intensity_logits, rates[3], t);
        o4.step(&mut self.scene.opacity_logits, &total.opacity_logits, rates[4], t);
        self.scene.normalize_rotations();

        for (s, g) in noise_grads {
            self.noise_steps[s] += 1;
            let t = self.noise_steps[s];
            let lr = self.config.lr_noise;
            for (bank, grad, opt) in [
                (&mut self.noise.azimuth[s], &g.azimuth, 0usize),
                (&mut self.noise.range[s], &g.range, 1usize),
            ] {
                let mut params: Vec<f64> = bank.values().collect();
                let gv: Vec<f64> = grad.values().collect();
                if gv.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteLoss {
                        iteration: self.iteration,
                        detail: format!("noise gradient of training view {s}"),
                    });
                }
                self.noise_optim[s][opt].step(&mut params, &gv, lr, t);
                for (dst, v) in bank.values_mut().zip(params) {
                    // Silenced gains stay silenced.
                    if dst.is_finite() {
                        *dst = v;
                    }
                }
            }
        }

        self.iteration += 1;
        let it = self.iteration;
        let c = &self.config;
        if c.densify_interval > 0 && it >= c.densify_from && it < c.densify_until && it.is_multiple_of(c.densify_interval) {
            self.densify();
        }
        self.log.push(LogEntry {
            iteration: it,
            stage: if stage == Stage::Geometry { 1 } else { 2 },
            loss,
            count: self.scene.len(),
            wall_clock: self.started.elapsed().as_secs_f64(),
        });
        Ok(loss)
    }

    fn densify(&mut self) {
        let d = densify_and_prune(&self.scene, &self.stats, &self.config, self.extent, &mut self.rng);
        for (opt, (_, w)) in self.optim.iter_mut().zip(GROUPS) {
            opt.remap_rows(w, &d.origin);
        }
        self.scene = d.scene;
        self.stats = GradStats::new(self.scene.len());
    }

    /// Runs `iterations` steps, calling `checkpoint` every configured
    /// interval.
    pub fn run(&mut self, stage: Stage, iterations: usize, mut checkpoint: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        for _ in 0..iterations {
            self.step(stage)?;
            let every = self.config.checkpoint_interval;
            if every > 0 && self.iteration.is_multiple_of(every) {
                checkpoint(self)?;
            }
            if self.iteration.is_multiple_of(100) {
                let last = self.log.last().unwrap();
                log::info!("iteration {} loss {:.5} gaussians {}", last.iteration, last.loss, last.count);
            }
        }
        Ok(())
    }

    /// Mean loss over all training views without updating anything.
    pub fn training_loss(&self, stage: Stage) -> Result<f64> {
        let with_noise = stage == Stage::Joint && self.config.noise_enabled;
        let mut total = 0.0;
        for s in 0..self.dataset.train.len() {
            let (img, _, _) = self.view(s, with_noise)?;
            let reference = &self.dataset.frames[self.dataset.train[s]].image;
            total += multiview_loss(&[img], std::slice::from_ref(reference), self.config.lambda_dssim)?.0;
        }
        Ok(total / self.dataset.train.len() as f64)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::ply::write_scene(&dir.join("scene.ply"), &self.scene)?;
        self.noise.save(&dir.join("noise.bin"))?;
        let header = OptimizerHeader {
            step: self.step,
            iteration: self.iteration,
            groups: GROUPS.iter().map(|(n, w)| (n.to_string(), *w)).collect(),
            noise_steps: self.noise_steps.clone(),
            noise_lengths: self.noise_optim.iter().map(|[a, r]| [a.len(), r.len()]).collect(),
            dtype: "f64".into(),
        };
        let mut payload = Vec::new();
        let all = self.optim.iter().chain(self.noise_optim.iter().flatten());
        for opt in all {
            for v in opt.m.iter().chain(&opt.v) {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::noise::write_blob(&dir.join("optimizer.bin"), &header, &payload)
    }

    pub fn write_metrics_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["iteration", "stage", "loss", "count", "wall_clock"])
            .map_err(|e| csv_error(path, e))?;
        for e in &self.log {
            w.write_record([
                e.iteration.to_string(),
                e.stage.to_string(),
                format!("{:e}", e.loss),
                e.count.to_string(),
                format!("{:.3}", e.wall_clock),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

fn first_non_finite(g: &SceneGradients) -> Option<String> {
    let groups: [(&str, Vec<f64>, usize); 5] = [
        ("mean", g.means.as_flattened().to_vec(), 3),
        ("log_scale", g.log_scales.as_flattened().to_vec(), 3),
        ("rotation", g.rotations.as_flattened().to_vec(), 4),
        ("intensity", g.intensity_logits.clone(), 1),
        ("opacity", g.opacity_logits.clone(), 1),
    ];
    for (name, values, w) in groups {
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Some(format!("{name} gradient of Gaussian {} is {}", k / w, values[k]));
        }
    }
    None
}

/// Stage 1 as a standalone call.
pub fn train_stage1(scene: Scene, dataset: &Dataset, config: &TrainConfig) -> Result<Scene> {
    let mut t = Trainer::new(dataset, scene, config.clone())?;
    t.run(Stage::Geometry, config.stage1_iterations, |_| Ok(()))?;
    Ok(t.scene)
}

/// Stage 2 as a standalone call.
pub fn train_stage2(scene: Scene, noise: NoiseModel, dataset: &Dataset, config: &TrainConfig) -> Result<(Scene, NoiseModel)> {
    let mut t = Trainer::with_noise(dataset, scene, noise, config.clone())?;
    t.run(Stage::Joint, config.stage2_iterations, |_| Ok(()))?;
    Ok((t.scene, t.noise))
}

/// Initial intensity for a pixel value, as a logit.
pub fn intensity_logit(v: f64) -> f64 {
    logit(v.clamp(0.01, 0.99))
}
