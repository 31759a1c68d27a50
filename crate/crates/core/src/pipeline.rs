//! End-to-end steps shared by the command line and the test suites:
//! simulate a dataset, train both stages into a run directory, render and
//! evaluate views.
//!
//! ```text
//! run/config.toml        configuration used
//! run/run.json           dataset location and extent
//! run/split.json         train and test frame indices
//! run/scene.ply          final Gaussians
//! run/noise.bin          final noise model
//! run/optimizer.bin      final optimizer state
//! run/metrics.csv        iteration, stage, loss, count, wall_clock
//! run/checkpoints/NNNNNN/{scene.ply, noise.bin, optimizer.bin}
//! ```

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, NovelViewNoise, SimulateConfig, TrainConfig};
use crate::dataset::{read_json, Dataset};
use crate::error::{Error, Result};
use crate::frame::{Image, SonarFrame};
use crate::gaussian::{Gaussian3D, Scene};
use crate::geometry::{PolarElevationPoint, SonarIntrinsics};
use crate::metrics::MetricReport;
use crate::noise::{apply_noise, azimuth_noise, range_noise, NoiseModel, PixelGrid};
use crate::raster::render;
use crate::sim::{generate_orbit_trajectory, simulate, SimScene};
use crate::trainer::{initialize_from_images, LogEntry, Stage, Trainer};

/// A simulated dataset with its ground truth.
#[derive(Clone, Debug)]
pub struct SimulatedDataset {
    pub dataset: Dataset,
    /// Area-uniform samples of the true surface.
    pub surface: Vec<[f64; 3]>,
    /// Range rows that received a synthetic streak, per frame.
    pub streak_rows: Vec<Vec<usize>>,
}

/// Orbits the named preset scene, simulating one frame per pose. Frame `i`
/// draws its noise from seed `seed + i`.
pub fn simulate_dataset(cfg: &SimulateConfig, test_every: usize, seed: u64) -> Result<SimulatedDataset> {
    let scene = SimScene::preset(&cfg.scene)?;
    let intr = cfg.intrinsics()?;
    let poses = generate_orbit_trajectory(Vector3::zeros(), cfg.orbit_radius, cfg.views, cfg.orbit_height)?;
    let sim = cfg.sim_config();
    let mut frames = Vec::with_capacity(poses.len());
    let mut clean = Vec::with_capacity(poses.len());
    let mut streak_rows = Vec::with_capacity(poses.len());
    for (i, pose) in poses.iter().enumerate() {
        let f = simulate(&scene, pose, &intr, &sim, seed.wrapping_add(i as u64));
        frames.push(SonarFrame {
            image: f.observed().clone(),
            pose: f.pose,
        });
        clean.push(f.clean);
        streak_rows.push(f.streak_rows);
    }
    let mut dataset = Dataset::new(frames, intr, test_every)?;
    if cfg.noise.is_some() {
        dataset = dataset.with_clean(clean)?;
    }
    Ok(SimulatedDataset {
        dataset,
        surface: scene.sample_surface(cfg.surface_points, seed),
        streak_rows,
    })
}

/// Writes the dataset directory plus `gt.ply` and, for noisy data,
/// `streaks.json`.
pub fn save_simulated(sim: &SimulatedDataset, dir: &Path) -> Result<()> {
    sim.dataset.save(dir)?;
    crate::ply::write_points(&dir.join("gt.ply"), &sim.surface)?;
    if sim.dataset.clean.is_some() {
        write_json(&dir.join("streaks.json"), &sim.streak_rows)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub dataset: PathBuf,
    pub extent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Result of a full two-stage run.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub scene: Scene,
    pub noise: NoiseModel,
    pub log: Vec<LogEntry>,
}

/// Seeds from the dataset images and trains both stages, writing the run
/// directory when `out` is given.
pub fn train_from_images(ds: &Dataset, cfg: &TrainConfig, out: Option<(&Path, &Path)>) -> Result<TrainedModel> {
    let init = initialize_from_images(
        ds,
        cfg.init_intensity_threshold,
        cfg.init_samples_per_pixel,
        cfg.init_budget,
        cfg.init_opacity,
        cfg.seed,
    )?;
    train_run(ds, init, cfg, out)
}

/// Trains both stages from `init`. `out` is `(run dir, dataset dir)`.
pub fn train_run(ds: &Dataset, init: Scene, cfg: &TrainConfig, out: Option<(&Path, &Path)>) -> Result<TrainedModel> {
    let mut t = Trainer::new(ds, init, cfg.clone())?;
    if let Some((dir, data)) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let config = Config {
            train: cfg.clone(),
            ..Config::default()
        };
        std::fs::write(dir.join("config.toml"), config.to_toml()).map_err(|e| Error::io(dir, e))?;
        write_json(
            &dir.join("run.json"),
            &RunInfo {
                dataset: data.to_path_buf(),
                extent: t.extent(),
            },
        )?;
        write_json(
            &dir.join("split.json"),
            &Split {
                train: ds.train.clone(),
                test: ds.test.clone(),
            },
        )?;
    }
    let checkpoint = |t: &Trainer| -> Result<()> {
        match out {
            Some((dir, _)) => t.save_checkpoint(&dir.join("checkpoints").join(format!("{:06}", t.iteration()))),
            None => Ok(()),
        }
    };
    t.run(Stage::Geometry, cfg.stage1_iterations, checkpoint)?;
    t.run(Stage::Joint, cfg.stage2_iterations, checkpoint)?;
    if let Some((dir, _)) = out {
        t.save_checkpoint(dir)?;
        t.write_metrics_csv(&dir.join("metrics.csv"))?;
    }
    Ok(TrainedModel {
        scene: t.scene.clone(),
        noise: t.noise.clone(),
        log: t.log().to_vec(),
    })
}

/// A trained run loaded back from disk.
#[derive(Clone, Debug)]
pub struct LoadedRun {
    pub config: Config,
    pub info: RunInfo,
    pub dataset: Dataset,
    pub scene: Scene,
    pub noise: NoiseModel,
}

impl LoadedRun {
    pub fn load(dir: &Path) -> Result<Self> {
        let config = Config::load(&dir.join("config.toml"))?;
        let info: RunInfo = read_json(&dir.join("run.json"))?;
        let split: Split = read_json(&dir.join("split.json"))?;
        let data = if info.dataset.is_absolute() {
            info.dataset.clone()
        } else {
            std::env::current_dir().map_err(|e| Error::io(dir, e))?.join(&info.dataset)
        };
        let mut dataset = Dataset::load(&data, config.train.test_every)?;
        // The recorded split is authoritative.
        dataset.train = split.train;
        dataset.test = split.test;
        Ok(Self {
            scene: crate::ply::read_scene(&dir.join("scene.ply"))?,
            noise: NoiseModel::load(&dir.join("noise.bin"))?,
            config,
            info,
            dataset,
        })
    }
}

/// How a view is rendered.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewMode {
    /// Gaussians only.
    Denoised,
    /// Gaussians plus learned noise.
    Noisy(NovelViewNoise),
}

/// Renders frame `index` of the dataset. Noisy renders of frames without
/// learned noise follow the novel-view policy.
pub fn render_view(scene: &Scene, noise: &NoiseModel, ds: &Dataset, index: usize, mode: ViewMode) -> Result<Image> {
    let frame = ds.frames.get(index).ok_or(Error::IndexOutOfRange {
        index,
        len: ds.len(),
    })?;
    let clean = render(scene, &frame.pose, &ds.intrinsics).image;
    let ViewMode::Noisy(policy) = mode else {
        return Ok(clean);
    };
    let slot = match ds.train.iter().position(|&i| i == index) {
        Some(s) => Some(s),
        None if policy == NovelViewNoise::Nearest => nearest_training_slot(ds, index),
        None => None,
    };
    let Some(slot) = slot else {
        return Ok(clean);
    };
    let grid = PixelGrid::new(&ds.intrinsics);
    apply_noise(&clean, &azimuth_noise(noise, slot, &grid)?, &range_noise(noise, slot, &grid)?)
}

fn nearest_training_slot(ds: &Dataset, index: usize) -> Option<usize> {
    let p = ds.frames[index].pose.position();
    ds.train
        .iter()
        .enumerate()
        .min_by(|(_, &a), (_, &b)| {
            let da = (ds.frames[a].pose.position() - p).norm();
            let db = (ds.frames[b].pose.position() - p).norm();
            da.total_cmp(&db)
        })
        .map(|(s, _)| s)
}

/// Compares denoised renders of `indices` against the noise-free images
/// when the dataset has them, else against the observed ones.
pub fn evaluate(scene: &Scene, ds: &Dataset, indices: &[usize]) -> Result<MetricReport> {
    let mut pairs = Vec::with_capacity(indices.len());
    for &i in indices {
        let img = render(scene, &ds.frames[i].pose, &ds.intrinsics).image;
        pairs.push((i, img));
    }
    MetricReport::compute(pairs.iter().map(|(i, img)| (*i, img, ds.clean_image(*i))))
}

/// `n` random Gaussians inside the view frustum of a sonar at the identity
/// pose, for throughput measurements.
pub fn random_frustum_scene(intr: &SonarIntrinsics, n: usize, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Scene::from_gaussians((0..n).map(|_| {
        let p = PolarElevationPoint {
            range: rng.random_range(intr.min_range + 0.2..intr.max_range - 0.2),
            azimuth: rng.random_range(-0.45..0.45) * intr.azimuth_fov,
            elevation: rng.random_range(-0.45..0.45) * intr.elevation_fov,
        }
        .to_cartesian();
        Gaussian3D::isotropic(
            p,
            rng.random_range(0.01..0.05),
            rng.random_range(0.1..0.9),
            rng.random_range(0.05..0.5),
        )
    }))
}
