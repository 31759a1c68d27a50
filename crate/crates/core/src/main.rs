use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use echosplat::config::Config;
use echosplat::dataset::{write_png, Dataset};
use echosplat::gaussian::Scene;
use echosplat::geometry::{Pose, SonarIntrinsics};
use echosplat::pipeline::{evaluate, random_frustum_scene, render_view, save_simulated, simulate_dataset, train_from_images, train_run, LoadedRun, ViewMode};
use echosplat::raster::oracle::render_per_pixel_transmittance_oracle;
use echosplat::raster::render;
use echosplat::reconstruction::reconstruct;
use echosplat::sim::SyntheticNoise;
use echosplat::spatial::{chamfer_distance, hausdorff_distance};
use echosplat::trainer::{initialize_from_pointcloud, PointInit};
use echosplat::Error;

#[derive(Parser)]
#[command(name = "echosplat", version, about = "Gaussian splatting for imaging sonar")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Random seed; overrides the configuration file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 picks the number of cores.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a posed sonar dataset of a preset scene.
    Simulate {
        /// cube, sphere, panel or barrel.
        #[arg(long)]
        scene: Option<String>,
        #[arg(long)]
        views: Option<usize>,
        /// Inject synthetic streak and speckle noise.
        #[arg(long)]
        noise: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train both stages on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Seed Gaussians from this point cloud instead of the images.
        #[arg(long)]
        init_points: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Render one dataset pose of a trained run.
    Render {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        pose_index: usize,
        /// Gaussians only (the default).
        #[arg(long, conflicts_with = "noisy")]
        denoise: bool,
        /// Gaussians plus the learned noise.
        #[arg(long)]
        noisy: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Extract a mesh from a trained run.
    Mesh {
        #[arg(long)]
        run: PathBuf,
        /// Ground-truth points to score the mesh against.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score denoised renders of a run against its dataset.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[command(flatten)]
        common: Common,
    },
    /// Compare rendering throughput with the per-pixel transmittance baseline.
    Bench {
        /// Benchmark this run's scene; otherwise a random scene is used.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        gaussians: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SplitArg {
    Train,
    Test,
    All,
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type CliResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ECHOSPLAT_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::NonFiniteLoss { .. }) { 3 } else { 2 })
        }
    }
}

fn setup(common: &Common) -> std::result::Result<(Config, usize), Failure> {
    let threads = if common.threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        common.threads
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot start {threads} threads: {e}")))?;
    let mut config = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = common.seed {
        config.train.seed = s;
    }
    Ok((config, threads))
}

fn require_out(common: &Common) -> std::result::Result<&Path, Failure> {
    common.out.as_deref().ok_or_else(|| Failure::Usage("--out <dir> is required".into()))
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Data(Error::Io { path: dir.into(), source: e }))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)? + "\n";
    std::fs::write(path, text).map_err(|e| Failure::Data(Error::Io { path: path.into(), source: e }))
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Simulate { scene, views, noise, common } => {
            let (mut config, _) = setup(&common)?;
            let out = require_out(&common)?;
            let sim = &mut config.simulate;
            if let Some(s) = scene {
                sim.scene = s;
            }
            if let Some(v) = views {
                sim.views = v;
            }
            if noise && sim.noise.is_none() {
                sim.noise = Some(SyntheticNoise::default());
            }
            let data = simulate_dataset(sim, config.train.test_every, config.train.seed)?;
            create_dir(out)?;
            save_simulated(&data, out)?;
            log::info!("wrote {} frames to {}", data.dataset.len(), out.display());
            Ok(())
        }
        Command::Train { data, init_points, common } => {
            let (config, _) = setup(&common)?;
            let out = require_out(&common)?;
            let ds = Dataset::load(&data, config.train.test_every)?;
            let data = std::fs::canonicalize(&data).map_err(|e| Failure::Data(Error::Io { path: data.clone(), source: e }))?;
            let cfg = &config.train;
            let model = match init_points {
                Some(p) => {
                    let points = echosplat::ply::read_points(&p)?;
                    let init = PointInit {
                        opacity: cfg.init_opacity,
                        budget: cfg.init_budget,
                        ..PointInit::default()
                    };
                    let scene = initialize_from_pointcloud(&points, &init, cfg.seed)?;
                    train_run(&ds, scene, cfg, Some((out, &data)))?
                }
                None => train_from_images(&ds, cfg, Some((out, &data)))?,
            };
            log::info!("trained {} Gaussians", model.scene.len());
            Ok(())
        }
        Command::Render {
            run,
            pose_index,
            denoise: _,
            noisy,
            common,
        } => {
            let (config, _) = setup(&common)?;
            let out = require_out(&common)?;
            let loaded = LoadedRun::load(&run)?;
            let mode = if noisy {
                ViewMode::Noisy(config.render.novel_view_noise)
            } else {
                ViewMode::Denoised
            };
            let img = render_view(&loaded.scene, &loaded.noise, &loaded.dataset, pose_index, mode)?;
            create_dir(out)?;
            let name = format!("render_{pose_index:05}_{}.png", if noisy { "noisy" } else { "denoised" });
            write_png(&out.join(name), &img)?;
            Ok(())
        }
        Command::Mesh { run, gt, common } => {
            let (config, _) = setup(&common)?;
            let out = require_out(&common)?;
            let loaded = LoadedRun::load(&run)?;
            let (points, mesh) = reconstruct(&loaded.scene, &config.mesh, config.train.seed)?;
            create_dir(out)?;
            echosplat::ply::write_points(&out.join("points.ply"), &points)?;
            mesh.write_stl(&out.join("mesh.stl"))?;
            mesh.write_obj(&out.join("mesh.obj"))?;
            if let Some(gt) = gt {
                let truth = echosplat::ply::read_points(&gt)?;
                let report = MeshReport {
                    vertices: mesh.vertices.len(),
                    triangles: mesh.triangles.len(),
                    chamfer: chamfer_distance(&mesh.vertices, &truth)?,
                    hausdorff: hausdorff_distance(&mesh.vertices, &truth)?,
                };
                write_json(&out.join("mesh_metrics.json"), &report)?;
                println!("{}", serde_json::to_string(&report).map_err(Error::from)?);
            }
            Ok(())
        }
        Command::Eval { run, split, common } => {
            setup(&common)?;
            let loaded = LoadedRun::load(&run)?;
            let ds = &loaded.dataset;
            let indices: Vec<usize> = match split {
                SplitArg::Train => ds.train.clone(),
                SplitArg::Test => ds.test.clone(),
                SplitArg::All => (0..ds.len()).collect(),
            };
            let report = evaluate(&loaded.scene, ds, &indices)?;
            let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
            if let Some(out) = &common.out {
                create_dir(out)?;
                write_json(&out.join("metrics.json"), &report)?;
            }
            println!("{text}");
            Ok(())
        }
        Command::Bench {
            run,
            gaussians,
            repeats,
            common,
        } => {
            let (config, threads) = setup(&common)?;
            let (scene, pose, intr) = match run {
                Some(r) => {
                    let l = LoadedRun::load(&r)?;
                    let pose = l.dataset.frames.first().ok_or_else(|| Failure::Usage("run dataset is empty".into()))?.pose;
                    (l.scene, pose, l.dataset.intrinsics)
                }
                None => {
                    let intr = config.simulate.intrinsics()?;
                    let scene = random_frustum_scene(&intr, gaussians, config.train.seed);
                    (scene, Pose::identity(), intr)
                }
            };
            let report = bench(&scene, &pose, &intr, repeats.max(1), threads);
            if let Some(out) = &common.out {
                create_dir(out)?;
                write_json(&out.join("bench.json"), &report)?;
            }
            println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct MeshReport {
    vertices: usize,
    triangles: usize,
    chamfer: f64,
    hausdorff: f64,
}

#[derive(Serialize)]
struct BenchReport {
    gaussians: usize,
    height: usize,
    width: usize,
    threads: usize,
    repeats: usize,
    render_fps: f64,
    oracle_fps: f64,
    speedup: f64,
    /// Deviation of the render from per-pixel transmittance, which measures
    /// the cost of one transmittance per Gaussian.
    max_abs_difference: f64,
    mean_abs_difference: f64,
}

fn bench(scene: &Scene, pose: &Pose, intr: &SonarIntrinsics, repeats: usize, threads: usize) -> BenchReport {
    let fps = |f: &dyn Fn()| {
        f();
        let start = Instant::now();
        for _ in 0..repeats {
            f();
        }
        repeats as f64 / start.elapsed().as_secs_f64()
    };
    let render_fps = fps(&|| {
        std::hint::black_box(render(scene, pose, intr));
    });
    let oracle_fps = fps(&|| {
        std::hint::black_box(render_per_pixel_transmittance_oracle(scene, pose, intr));
    });
    let fast = render(scene, pose, intr).image;
    let exact = render_per_pixel_transmittance_oracle(scene, pose, intr);
    let diffs: Vec<f64> = fast.as_slice().iter().zip(exact.as_slice()).map(|(a, b)| (a - b).abs()).collect();
    BenchReport {
        max_abs_difference: diffs.iter().copied().fold(0.0, f64::max),
        mean_abs_difference: diffs.iter().sum::<f64>() / diffs.len().max(1) as f64,
        gaussians: scene.len(),
        height: intr.height,
        width: intr.width,
        threads,
        repeats,
        render_fps,
        oracle_fps,
        speedup: render_fps / oracle_fps,
    }
}
