use std::ffi::{c_char, CString};
use std::ptr;

use echosplat_ffi::*;

fn identity() -> EchosplatPose {
    EchosplatPose {
        rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        translation: [0.0; 3],
    }
}

fn last_error() -> String {
    let mut buf = vec![0u8; 512];
    let n = unsafe { echosplat_last_error_message(buf.as_mut_ptr().cast::<c_char>(), buf.len()) };
    assert!(n > 0);
    let end = buf.iter().position(|&b| b == 0).unwrap();
    String::from_utf8(buf[..end].to_vec()).unwrap()
}

fn sensor() -> *mut EchosplatSensor {
    let mut s = ptr::null_mut();
    let st = unsafe { echosplat_sensor_new(0.7, 0.3, 1.0, 4.0, 24, 20, &mut s) };
    assert_eq!(st, EchosplatStatus::Ok);
    s
}

#[test]
fn render_through_handles() {
    unsafe {
        let s = sensor();
        let (mut rows, mut cols) = (0, 0);
        assert_eq!(echosplat_sensor_shape(s, &mut rows, &mut cols), EchosplatStatus::Ok);
        assert_eq!((rows, cols), (24, 20));

        let mut scene = ptr::null_mut();
        assert_eq!(echosplat_scene_new(&mut scene), EchosplatStatus::Ok);
        let mean = [2.5, 0.0, 0.0];
        assert_eq!(echosplat_scene_add_isotropic(scene, mean.as_ptr(), 0.1, 0.6, 0.7), EchosplatStatus::Ok);
        let mut len = 0;
        assert_eq!(echosplat_scene_len(scene, &mut len), EchosplatStatus::Ok);
        assert_eq!(len, 1);

        let mut img = vec![0.0; rows * cols];
        assert_eq!(echosplat_render(scene, s, &identity(), img.as_mut_ptr(), img.len()), EchosplatStatus::Ok);
        assert!(img.iter().any(|&v| v > 0.05));
        assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));

        // Wrong buffer size.
        assert_eq!(echosplat_render(scene, s, &identity(), img.as_mut_ptr(), 3), EchosplatStatus::ShapeMismatch);
        assert!(last_error().contains("3 values"));

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("s.ply").to_str().unwrap()).unwrap();
        assert_eq!(echosplat_scene_save(scene, path.as_ptr()), EchosplatStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(echosplat_scene_load(path.as_ptr(), &mut loaded), EchosplatStatus::Ok);
        let mut again = vec![0.0; rows * cols];
        assert_eq!(echosplat_render(loaded, s, &identity(), again.as_mut_ptr(), again.len()), EchosplatStatus::Ok);
        assert_eq!(img, again);

        echosplat_scene_free(loaded);
        echosplat_scene_free(scene);
        echosplat_sensor_free(s);
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(echosplat_sensor_new(0.7, 0.3, 4.0, 1.0, 24, 20, &mut s), EchosplatStatus::InvalidArgument);
        assert!(s.is_null());
        assert_eq!(echosplat_sensor_new(0.7, 0.3, 1.0, 4.0, 24, 20, ptr::null_mut()), EchosplatStatus::NullPointer);
        assert_eq!(echosplat_scene_len(ptr::null(), &mut 0), EchosplatStatus::NullPointer);
        assert!(last_error().contains("scene"));

        let missing = CString::new("/nonexistent/scene.ply").unwrap();
        let mut scene = ptr::null_mut();
        assert_eq!(echosplat_scene_load(missing.as_ptr(), &mut scene), EchosplatStatus::Io);

        let s = sensor();
        let mut empty = ptr::null_mut();
        echosplat_scene_new(&mut empty);
        let mut bad = identity();
        bad.rotation[0] = 2.0;
        let mut img = vec![0.0; 480];
        assert_eq!(echosplat_render(empty, s, &bad, img.as_mut_ptr(), img.len()), EchosplatStatus::InvalidArgument);
        assert_eq!(echosplat_scene_add_isotropic(empty, [0.0; 3].as_ptr(), 0.1, 1.5, 0.5), EchosplatStatus::InvalidArgument);

        let a = [0.0, 0.0, 0.0];
        let mut d = 0.0;
        assert_eq!(echosplat_chamfer_distance(a.as_ptr(), 1, ptr::null(), 0, &mut d), EchosplatStatus::Empty);
        echosplat_scene_free(empty);
        echosplat_sensor_free(s);

        // Freeing null is a no-op.
        echosplat_scene_free(ptr::null_mut());
        echosplat_sensor_free(ptr::null_mut());
        echosplat_run_free(ptr::null_mut());
    }
}

#[test]
fn last_error_truncates() {
    unsafe {
        echosplat_scene_len(ptr::null(), &mut 0);
        let mut small = [1 as c_char; 4];
        let need = echosplat_last_error_message(small.as_mut_ptr(), small.len());
        assert!(need > 4);
        assert_eq!(small[3], 0);
        assert_eq!(echosplat_last_error_message(ptr::null_mut(), 0), need);
    }
}

#[test]
fn metrics_match_library() {
    let a: Vec<f64> = (0..144).map(|i| (i % 13) as f64 / 13.0).collect();
    let b: Vec<f64> = a.iter().map(|v| v * 0.9 + 0.05).collect();
    let (mut p, mut s) = (0.0, 0.0);
    unsafe {
        assert_eq!(echosplat_psnr(a.as_ptr(), b.as_ptr(), 12, 12, &mut p), EchosplatStatus::Ok);
        assert_eq!(echosplat_ssim(a.as_ptr(), b.as_ptr(), 12, 12, &mut s), EchosplatStatus::Ok);
        assert_eq!(echosplat_ssim(a.as_ptr(), b.as_ptr(), 4, 36, &mut s), EchosplatStatus::ShapeMismatch);
    }
    let ia = echosplat::frame::Image::from_vec(12, 12, a.clone()).unwrap();
    let ib = echosplat::frame::Image::from_vec(12, 12, b.clone()).unwrap();
    assert_eq!(p, echosplat::metrics::psnr(&ia, &ib).unwrap());

    let x = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
    let y = [0.0, 0.0, 0.0];
    let (mut c, mut h) = (0.0, 0.0);
    unsafe {
        assert_eq!(echosplat_chamfer_distance(x.as_ptr(), 2, y.as_ptr(), 1, &mut c), EchosplatStatus::Ok);
        assert_eq!(echosplat_hausdorff_distance(x.as_ptr(), 2, y.as_ptr(), 1, &mut h), EchosplatStatus::Ok);
    }
    assert_eq!(c, 0.25);
    assert_eq!(h, 1.0);
}

#[test]
fn simulate_train_and_load_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.toml");
    std::fs::write(
        &config,
        "[train]\nstage1_iterations = 3\nstage2_iterations = 3\nbatch_size = 2\ninit_budget = 200\n\n\
         [simulate]\nscene = \"sphere\"\nviews = 9\nazimuth_fov_deg = 40.0\nmin_range = 3.5\nmax_range = 6.5\n\
         rows = 24\ncolumns = 24\nsubdivisions = 8\nsurface_points = 100\n",
    )
    .unwrap();
    let c = |p: &std::path::Path| CString::new(p.to_str().unwrap()).unwrap();
    let (cfg, data, run) = (c(&config), c(&dir.path().join("data")), c(&dir.path().join("run")));
    unsafe {
        assert_eq!(echosplat_simulate(cfg.as_ptr(), data.as_ptr()), EchosplatStatus::Ok);
        assert_eq!(echosplat_train(data.as_ptr(), cfg.as_ptr(), run.as_ptr()), EchosplatStatus::Ok);
        let mut handle = ptr::null_mut();
        assert_eq!(echosplat_run_load(run.as_ptr(), &mut handle), EchosplatStatus::Ok);
        let mut frames = 0;
        assert_eq!(echosplat_run_frame_count(handle, &mut frames), EchosplatStatus::Ok);
        assert_eq!(frames, 9);
        let mut img = vec![0.0; 24 * 24];
        assert_eq!(echosplat_run_render(handle, 1, 1, img.as_mut_ptr(), img.len()), EchosplatStatus::Ok);
        assert_eq!(echosplat_run_render(handle, 99, 0, img.as_mut_ptr(), img.len()), EchosplatStatus::OutOfRange);
        let mut scene = ptr::null_mut();
        assert_eq!(echosplat_run_scene(handle, &mut scene), EchosplatStatus::Ok);
        let mut n = 0;
        echosplat_scene_len(scene, &mut n);
        assert!(n > 0);
        echosplat_scene_free(scene);
        echosplat_run_free(handle);
    }
}

#[test]
fn header_is_valid_c_and_cpp() {
    let dir = tempfile::tempdir().unwrap();
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"echosplat.h\"\nint main(void) {\n  EchosplatSensor *s = NULL;\n  EchosplatStatus st = echosplat_sensor_new(0.7, 0.3, 1.0, 4.0, 24, 20, &s);\n  EchosplatPose p = {{1,0,0,0,1,0,0,0,1},{0,0,0}};\n  (void)p;\n  echosplat_sensor_free(s);\n  return st == ECHOSPLAT_STATUS_OK ? 0 : 1;\n}\n",
    )
    .unwrap();
    for (compiler, extra) in [("cc", vec!["-std=c99"]), ("c++", vec!["-x", "c++"])] {
        let status = std::process::Command::new(compiler)
            .args(&extra)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-I", header])
            .arg(&src)
            .status()
            .unwrap_or_else(|e| panic!("{compiler}: {e}"));
        assert!(status.success(), "{compiler} rejected the header");
    }
}
