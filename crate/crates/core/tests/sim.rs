use nalgebra::{Vector2, Vector3};
use echosplat::geometry::{to_pixel, Pose, SonarIntrinsics};
use echosplat::noise::PixelGrid;
use echosplat::sim::*;

fn intr() -> SonarIntrinsics {
    SonarIntrinsics::from_fov(30f64.to_radians(), 20f64.to_radians(), 2.0, 8.0, 240, 64).unwrap()
}

fn wall(x: f64, half_y: f64) -> Primitive {
    Primitive {
        shape: Shape::Cuboid {
            min: Vector3::new(x, -half_y, -50.0),
            max: Vector3::new(x + 0.05, half_y, 50.0),
        },
        reflectivity: 1.0,
    }
}

/// Analytic image of an infinite wall `x = d` seen from the identity pose:
/// the ray at (θ, φ) hits at `d / (cos θ cos φ)` with incidence cosine
/// `cos θ cos φ`.
fn wall_oracle(i: &SonarIntrinsics, d: f64, subdivisions: usize) -> Vec<f64> {
    let grid = PixelGrid::new(i);
    let mut img = vec![0.0; i.height * i.width];
    for (w, &theta) in grid.azimuths.iter().enumerate() {
        for s in 0..subdivisions {
            let phi = i.elevation_fov * ((s as f64 + 0.5) / subdivisions as f64 - 0.5);
            let c = theta.cos() * phi.cos();
            let r = d / c;
            let row = to_pixel(&i.polar_transform, &Vector2::new(r, theta)).y.round() as usize;
            img[row * i.width + w] += c / subdivisions as f64;
        }
    }
    img
}

#[test]
fn wall_matches_incidence_oracle() {
    let i = intr();
    let cfg = SimConfig { subdivisions: 32, ..Default::default() };
    let scene = SimScene::new(vec![wall(3.0, 50.0)]).unwrap();
    let f = simulate_frame(&scene, &Pose::identity(), &i, &cfg, 0);
    let oracle = wall_oracle(&i, 3.0, 32);
    for (a, b) in f.image.as_slice().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
    // One band near 3 m whose column totals fall off toward the edges.
    let band = to_pixel(&i.polar_transform, &Vector2::new(3.0, 0.0)).y.round() as usize;
    let totals: Vec<f64> = (0..i.width).map(|w| (0..i.height).map(|h| f.image.get(h, w)).sum()).collect();
    let center = i.width / 2;
    for w in center..i.width - 1 {
        assert!(totals[w + 1] < totals[w]);
    }
    for w in 1..center {
        assert!(totals[w - 1] < totals[w]);
    }
    for h in 0..i.height {
        if h + 8 < band || h > band + 8 {
            assert!((0..i.width).all(|w| f.image.get(h, w) == 0.0));
        }
    }
}

#[test]
fn box_samples_follow_face_areas() {
    let scene = SimScene::new(vec![Primitive {
        shape: Shape::Cuboid {
            min: Vector3::zeros(),
            max: Vector3::new(1.0, 2.0, 3.0),
        },
        reflectivity: 1.0,
    }])
    .unwrap();
    let n = 60_000;
    let pts = scene.sample_surface(n, 9);
    assert_eq!(pts.len(), n);
    let hi = [1.0, 2.0, 3.0];
    // Faces normal to x, y, z have areas 6, 3 and 2 (each appears twice).
    let mut counts = [0usize; 3];
    for p in &pts {
        let axis = (0..3).find(|&a| p[a].abs() < 1e-9 || (p[a] - hi[a]).abs() < 1e-9).expect("point on a face");
        counts[axis] += 1;
    }
    let areas = [6.0, 3.0, 2.0];
    for a in 0..3 {
        let expected = n as f64 * areas[a] / 11.0;
        assert!((counts[a] as f64 - expected).abs() < 0.05 * expected, "axis {a}: {} vs {expected}", counts[a]);
    }
    assert!(scene.sample_surface(0, 1).is_empty());
}

#[test]
fn occluder_blanks_target_band() {
    let i = intr();
    let cfg = SimConfig { subdivisions: 32, ..Default::default() };
    let target = SimScene::new(vec![wall(6.0, 50.0)]).unwrap();
    let both = SimScene::new(vec![wall(6.0, 50.0), wall(4.0, 0.4)]).unwrap();
    let alone = simulate_frame(&target, &Pose::identity(), &i, &cfg, 0);
    let blocked = simulate_frame(&both, &Pose::identity(), &i, &cfg, 0);
    let grid = PixelGrid::new(&i);
    let near_row = to_pixel(&i.polar_transform, &Vector2::new(5.0, 0.0)).y;
    let mut occluded_columns = 0;
    for (w, &theta) in grid.azimuths.iter().enumerate() {
        let far: f64 = (0..i.height).filter(|&h| h as f64 > near_row).map(|h| blocked.image.get(h, w)).sum();
        let reference: f64 = (0..i.height).filter(|&h| h as f64 > near_row).map(|h| alone.image.get(h, w)).sum();
        // Every ray of this column meets the occluder before the target.
        if 4.05 * theta.tan().abs() < 0.4 {
            assert_eq!(far, 0.0, "column {w}");
            occluded_columns += 1;
        } else if 4.0 * theta.tan().abs() > 0.4 {
            assert_eq!(far, reference, "column {w}");
        }
    }
    assert!(occluded_columns > 0);
}

#[test]
fn doubling_subdivisions_converges() {
    let i = SonarIntrinsics::from_fov(30f64.to_radians(), 20f64.to_radians(), 3.0, 7.0, 64, 64).unwrap();
    let scene = SimScene::sphere(Vector3::new(5.0, 0.0, 0.0), 0.8);
    let render = |s| simulate_frame(&scene, &Pose::identity(), &i, &SimConfig { subdivisions: s, ..Default::default() }, 0).image;
    let (a, b) = (render(512), render(1024));
    let peak = a.max();
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        assert!((x - y).abs() < 0.02 * peak, "{x} vs {y}");
    }
}

#[test]
fn sphere_surface_and_orbit_examples() {
    let pts = SimScene::sphere(Vector3::new(1.0, 2.0, 3.0), 1.0).sample_surface(1000, 3);
    assert!(pts.iter().all(|p| ((Vector3::from(*p) - Vector3::new(1.0, 2.0, 3.0)).norm() - 1.0).abs() < 1e-9));
    let one = generate_orbit_trajectory(Vector3::zeros(), 5.0, 1, 0.0).unwrap();
    assert!((one[0].position() - Vector3::new(5.0, 0.0, 0.0)).norm() < 1e-12);
    let four = generate_orbit_trajectory(Vector3::zeros(), 5.0, 4, 0.0).unwrap();
    let expected = [[5.0, 0.0], [0.0, 5.0], [-5.0, 0.0], [0.0, -5.0]];
    for (p, e) in four.iter().zip(expected) {
        assert!((p.position() - Vector3::new(e[0], e[1], 0.0)).norm() < 1e-12);
    }
    assert!(generate_orbit_trajectory(Vector3::zeros(), 0.0, 4, 0.0).is_err());
    assert!(generate_orbit_trajectory(Vector3::zeros(), 1.0, 0, 0.0).is_err());
}

#[test]
fn falloff_scales_returns() {
    let i = intr();
    let scene = SimScene::new(vec![wall(4.0, 50.0)]).unwrap();
    let plain = simulate_frame(&scene, &Pose::identity(), &i, &SimConfig::default(), 0).image;
    let cfg = SimConfig { range_falloff: true, ..Default::default() };
    let faded = simulate_frame(&scene, &Pose::identity(), &i, &cfg, 0).image;
    let grid = PixelGrid::new(&i);
    let w = i.width / 2;
    for h in 0..i.height {
        let (p, f) = (plain.get(h, w), faded.get(h, w));
        if p > 0.0 {
            let r = grid.ranges[h];
            // Bin centers differ from exact hit ranges by at most half a bin.
            let half = 0.5 * (grid.ranges[1] - grid.ranges[0]);
            let lo = (i.min_range / (r + half)).powi(2);
            let hi = (i.min_range / (r - half)).powi(2);
            assert!(f >= p * lo - 1e-12 && f <= p * hi + 1e-12);
        }
    }
}
