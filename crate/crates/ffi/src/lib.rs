//! C interface to the `echosplat` library.
//!
//! Objects are exposed as opaque handles created by `*_new` or `*_load`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`EchosplatStatus`]; on failure a description is available from
//! [`echosplat_last_error_message`] on the same thread. Images are row-major
//! `double` buffers of `rows * columns` values, rows indexing range.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use echosplat::config::Config;
use echosplat::dataset::Dataset;
use echosplat::frame::Image;
use echosplat::gaussian::{Gaussian3D, Scene};
use echosplat::geometry::{Pose, SonarIntrinsics};
use echosplat::pipeline::{render_view, save_simulated, simulate_dataset, train_from_images, LoadedRun, ViewMode};
use echosplat::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EchosplatStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    ShapeMismatch = 5,
    OutOfRange = 6,
    Empty = 7,
    NonFinite = 8,
    Degenerate = 9,
    Panic = 10,
}

/// Sensor pose: row-major rotation and translation of the world-to-sonar
/// transform `p_s = R p + t`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EchosplatPose {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

/// A set of 3D Gaussians.
pub struct EchosplatScene {
    inner: Scene,
}

/// Sonar intrinsics.
pub struct EchosplatSensor {
    inner: SonarIntrinsics,
}

/// A trained run directory with its dataset.
pub struct EchosplatRun {
    inner: LoadedRun,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(EchosplatStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::DegeneratePoint { .. } => EchosplatStatus::Degenerate,
            Error::ShapeMismatch { .. } | Error::ImageTooSmall { .. } => EchosplatStatus::ShapeMismatch,
            Error::IndexOutOfRange { .. } => EchosplatStatus::OutOfRange,
            Error::EmptyInitialization(_) | Error::EmptyCloud(_) | Error::EmptyMesh { .. } => EchosplatStatus::Empty,
            Error::NonFiniteLoss { .. } => EchosplatStatus::NonFinite,
            Error::Invalid { .. } => EchosplatStatus::InvalidArgument,
            Error::Io { .. } => EchosplatStatus::Io,
            Error::Format { .. } | Error::Json(_) | Error::Toml(_) | Error::Image(_) => EchosplatStatus::Format,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: EchosplatStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, turning errors and panics into a status and a stored message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EchosplatStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EchosplatStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            EchosplatStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(fail(EchosplatStatus::NullPointer, format!("{what} is null")));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(EchosplatStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn optional_config(p: *const c_char) -> Result<Config, Failure> {
    if p.is_null() {
        Ok(Config::default())
    } else {
        Ok(Config::load(&path_arg(p, "config path")?)?)
    }
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(EchosplatStatus::NullPointer, format!("{what} is null")))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(EchosplatStatus::NullPointer, format!("{what} is null")))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(EchosplatStatus::NullPointer, "output pointer is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(EchosplatStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_image(img: &Image, out: *mut f64, len: usize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(EchosplatStatus::NullPointer, "output buffer is null"));
    }
    if len != img.len() {
        return Err(fail(
            EchosplatStatus::ShapeMismatch,
            format!("output buffer holds {len} values, image has {}", img.len()),
        ));
    }
    std::ptr::copy_nonoverlapping(img.as_slice().as_ptr(), out, len);
    Ok(())
}

unsafe fn points(p: *const f64, n: usize, what: &str) -> Result<Vec<[f64; 3]>, Failure> {
    let flat = slice(p, n * 3, what)?;
    Ok(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

fn pose(p: &EchosplatPose) -> Result<Pose, Failure> {
    let r = Matrix3::from_row_slice(&p.rotation);
    Ok(Pose::new(r, Vector3::from(p.translation))?)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn echosplat_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (truncated
/// and NUL-terminated) and returns the buffer size needed for all of it,
/// or 0 when there is no error.
///
/// # Safety
/// `buf` must be null or valid for `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn echosplat_last_error_message(buf: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            return 0;
        };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && capacity > 0 {
            let n = (bytes.len() - 1).min(capacity - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Sonar with the given fields of view (radians), range window (metres)
/// and polar image size.
///
/// # Safety
/// `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn echosplat_sensor_new(
    azimuth_fov: f64,
    elevation_fov: f64,
    min_range: f64,
    max_range: f64,
    rows: usize,
    columns: usize,
    out: *mut *mut EchosplatSensor,
) -> EchosplatStatus {
    guard(|| {
        let inner = SonarIntrinsics::from_fov(azimuth_fov, elevation_fov, min_range, max_range, rows, columns)?;
        store(out, EchosplatSensor { inner })
    })
}

/// # Safety
/// `sensor` must be null or a handle from [`echosplat_sensor_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn echosplat_sensor_free(sensor: *mut EchosplatSensor) {
    if !sensor.is_null() {
        drop(Box::from_raw(sensor));
    }
}

/// Polar image size.
///
/// # Safety
/// `sensor` must be a live handle; `rows` and `columns` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn echosplat_sensor_shape(sensor: *const EchosplatSensor, rows: *mut usize, columns: *mut usize) -> EchosplatStatus {
    guard(|| {
        let s = &handle(sensor, "sensor")?.inner;
        *handle_mut(rows, "rows")? = s.height;
        *handle_mut(columns, "columns")? = s.width;
        Ok(())
    })
}

/// Empty scene.
///
/// # Safety
/// `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn echosplat_scene_new(out: *mut *mut EchosplatScene) -> EchosplatStatus {
    guard(|| store(out, EchosplatScene { inner: Scene::new() }))
}

/// Reads a scene PLY file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn echosplat_scene_load(path: *const c_char, out: *mut *mut EchosplatScene) -> EchosplatStatus {
    guard(|| {
        let inner = echosplat::ply::read_scene(&path_arg(path, "path")?)?;
        store(out, EchosplatScene { inner })
    })
}

/// Writes a scene PLY file.
///
/// # Safety
/// `scene` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn echosplat_scene_save(scene: *const EchosplatScene, path: *const c_char) -> EchosplatStatus {
    guard(|| Ok(echosplat::ply::write_scene(&path_arg(path, "path")?, &handle(scene, "scene")?.inner)?))
}

/// # Safety
/// `scene` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn echosplat_scene_free(scene: *mut EchosplatScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Number of Gaussians.
///
/// # Safety
/// `scene` must be a live handle and `len` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn echosplat_scene_len(scene: *const EchosplatScene, len: *mut usize) -> EchosplatStatus {
    guard(|| {
        *handle_mut(len, "len")? = handle(scene, "scene")?.inner.len();
        Ok(())
    })
}

/// Appends an isotropic Gaussian. `intensity` and `opacity` lie in (0, 1).
///
/// # Safety
/// `scene` must be a live handle and `mean` point to three doubles.
#[no_mangle]
pub unsafe extern "C" fn echosplat_scene_add_isotropic(
    scene: *mut EchosplatScene,
    mean: *const f64,
    scale: f64,
    intensity: f64,
    opacity: f64,
) -> EchosplatStatus {
    guard(|| {
        let s = handle_mut(scene, "scene")?;
        let m = slice(mean, 3, "mean")?;
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !(scale > 0.0 && scale.is_finite()) || !unit(intensity) || !unit(opacity) || m.iter().any(|v| !v.is_finite()) {
            return Err(fail(EchosplatStatus::InvalidArgument, "scale must be positive and finite, intensity and opacity in (0, 1)"));
        }
        s.inner.push(Gaussian3D::isotropic(Vector3::new(m[0], m[1], m[2]), scale, intensity, opacity));
        Ok(())
    })
}

/// Renders the polar image seen from `pose` into `out` (`len` must equal
/// rows × columns).
///
/// # Safety
/// Handles must be live, `pose` valid for a read and `out` for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn echosplat_render(
    scene: *const EchosplatScene,
    sensor: *const EchosplatSensor,
    pose_in: *const EchosplatPose,
    out: *mut f64,
    len: usize,
) -> EchosplatStatus {
    guard(|| {
        let p = pose(handle(pose_in, "pose")?)?;
        let img = echosplat::raster::render(&handle(scene, "scene")?.inner, &p, &handle(sensor, "sensor")?.inner).image;
        write_image(&img, out, len)
    })
}

/// Simulates a dataset from the `[simulate]` section of `config_path`
/// (defaults when null) into `out_dir`.
///
/// # Safety
/// `config_path` must be null or NUL-terminated; `out_dir` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn echosplat_simulate(config_path: *const c_char, out_dir: *const c_char) -> EchosplatStatus {
    guard(|| {
        let config = optional_config(config_path)?;
        let out = path_arg(out_dir, "out_dir")?;
        let sim = simulate_dataset(&config.simulate, config.train.test_every, config.train.seed)?;
        save_simulated(&sim, &out)?;
        Ok(())
    })
}

/// Trains both stages on the dataset in `data_dir`, writing a run
/// directory to `out_dir`.
///
/// # Safety
/// `config_path` must be null or NUL-terminated; the directories NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn echosplat_train(data_dir: *const c_char, config_path: *const c_char, out_dir: *const c_char) -> EchosplatStatus {
    guard(|| {
        let config = optional_config(config_path)?;
        let data = path_arg(data_dir, "data_dir")?;
        let out = path_arg(out_dir, "out_dir")?;
        let ds = Dataset::load(&data, config.train.test_every)?;
        let data = std::fs::canonicalize(&data).map_err(|e| fail(EchosplatStatus::Io, format!("{}: {e}", data.display())))?;
        train_from_images(&ds, &config.train, Some((&out, &data)))?;
        Ok(())
    })
}

/// Loads a trained run directory.
///
/// # Safety
/// `dir` must be NUL-terminated and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn echosplat_run_load(dir: *const c_char, out: *mut *mut EchosplatRun) -> EchosplatStatus {
    guard(|| {
        let inner = LoadedRun::load(Path::new(&path_arg(dir, "dir")?))?;
        store(out, EchosplatRun { inner })
    })
}

/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn echosplat_run_free(run: *mut EchosplatRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Number of frames in the run's dataset.
///
/// # Safety
/// `run` must be a live handle and `count` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn echosplat_run_frame_count(run: *const EchosplatRun, count: *mut usize) -> EchosplatStatus {
    guard(|| {
        *handle_mut(count, "count")? = handle(run, "run")?.inner.dataset.len();
        Ok(())
    })
}

/// Copy of the run's trained scene; free it with [`echosplat_scene_free`].
///
/// # Safety
/// `run` must be a live handle and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn echosplat_run_scene(run: *const EchosplatRun, out: *mut *mut EchosplatScene) -> EchosplatStatus {
    guard(|| {
        let inner = handle(run, "run")?.inner.scene.clone();
        store(out, EchosplatScene { inner })
    })
}

/// Renders dataset frame `index`. Non-zero `noisy` adds the learned noise.
///
/// # Safety
/// `run` must be a live handle and `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn echosplat_run_render(run: *const EchosplatRun, index: usize, noisy: c_int, out: *mut f64, len: usize) -> EchosplatStatus {
    guard(|| {
        let r = &handle(run, "run")?.inner;
        let mode = if noisy != 0 {
            ViewMode::Noisy(r.config.render.novel_view_noise)
        } else {
            ViewMode::Denoised
        };
        let img = render_view(&r.scene, &r.noise, &r.dataset, index, mode)?;
        write_image(&img, out, len)
    })
}

unsafe fn image_pair(a: *const f64, b: *const f64, rows: usize, columns: usize) -> Result<(Image, Image), Failure> {
    let n = rows * columns;
    let ia = Image::from_vec(rows, columns, slice(a, n, "a")?.to_vec())?;
    let ib = Image::from_vec(rows, columns, slice(b, n, "b")?.to_vec())?;
    Ok((ia, ib))
}

/// Peak signal-to-noise ratio in dB of two images with values in [0, 1].
///
/// # Safety
/// `a` and `b` must hold `rows * columns` doubles; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn echosplat_psnr(a: *const f64, b: *const f64, rows: usize, columns: usize, out: *mut f64) -> EchosplatStatus {
    guard(|| {
        let (ia, ib) = image_pair(a, b, rows, columns)?;
        *handle_mut(out, "out")? = echosplat::metrics::psnr(&ia, &ib)?;
        Ok(())
    })
}

/// Mean structural similarity of two images.
///
/// # Safety
/// `a` and `b` must hold `rows * columns` doubles; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn echosplat_ssim(a: *const f64, b: *const f64, rows: usize, columns: usize, out: *mut f64) -> EchosplatStatus {
    guard(|| {
        let (ia, ib) = image_pair(a, b, rows, columns)?;
        *handle_mut(out, "out")? = echosplat::metrics::ssim(&ia, &ib)?;
        Ok(())
    })
}

/// Chamfer distance between point sets of `na` and `nb` xyz triples.
///
/// # Safety
/// `a` must hold `3 * na` doubles, `b` `3 * nb`; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn echosplat_chamfer_distance(a: *const f64, na: usize, b: *const f64, nb: usize, out: *mut f64) -> EchosplatStatus {
    guard(|| {
        let d = echosplat::spatial::chamfer_distance(&points(a, na, "a")?, &points(b, nb, "b")?)?;
        *handle_mut(out, "out")? = d;
        Ok(())
    })
}

/// Hausdorff distance between point sets of `na` and `nb` xyz triples.
///
/// # Safety
/// `a` must hold `3 * na` doubles, `b` `3 * nb`; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn echosplat_hausdorff_distance(a: *const f64, na: usize, b: *const f64, nb: usize, out: *mut f64) -> EchosplatStatus {
    guard(|| {
        let d = echosplat::spatial::hausdorff_distance(&points(a, na, "a")?, &points(b, nb, "b")?)?;
        *handle_mut(out, "out")? = d;
        Ok(())
    })
}
