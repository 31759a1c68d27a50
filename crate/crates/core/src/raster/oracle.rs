//! Reference renderer that re-evaluates transmittance at every pixel.
//!
//! For pixel column `w` and receiver `i` the occluders are evaluated at the
//! elevation-azimuth point with the receiver's elevation and the pixel's
//! azimuth. The fast renderer instead freezes `T_i` at the receiver's own
//! footprint center. This is the baseline it is benchmarked against.

use nalgebra::Vector2;
use rayon::prelude::*;

use super::{polar_alpha, prepare, OccluderGrid};
use crate::frame::Image;
use crate::gaussian::{Scene, Splat2D};
use crate::geometry::{Pose, SonarIntrinsics};

pub fn render_per_pixel_transmittance_oracle(scene: &Scene, pose: &Pose, intr: &SonarIntrinsics) -> Image {
    let (projected, _) = prepare(scene, pose, intr, false);
    let polar: Vec<Splat2D> = projected.iter().map(|p| p.polar).collect();
    let ea: Vec<Splat2D> = projected.iter().map(|p| p.elevation_azimuth).collect();
    let grid = OccluderGrid::build(&ea);
    let (height, width) = (intr.height, intr.width);

    let transmittance_at = |i: usize, column: f64| -> f64 {
        let point = Vector2::new(column, ea[i].mean.y);
        let mut t = 1.0;
        for &j in grid.candidates(&point) {
            let occ = &ea[j as usize];
            if occ.range >= ea[i].range {
                break;
            }
            if let Some(a) = super::occlusion_alpha(occ, &point) {
                t *= 1.0 - a;
            }
        }
        t
    };

    let rows: Vec<Vec<f64>> = (0..height)
        .into_par_iter()
        .map(|h| {
            (0..width)
                .map(|w| {
                    let px = Vector2::new(w as f64, h as f64);
                    let mut acc = 0.0;
                    for (i, s) in polar.iter().enumerate() {
                        if let Some(a) = polar_alpha(s, &px) {
                            acc += s.intensity * a.alpha * transmittance_at(i, w as f64);
                        }
                    }
                    acc.clamp(0.0, 1.0)
                })
                .collect()
        })
        .collect();
    Image::from_vec(height, width, rows.concat()).expect("oracle buffer shape")
}
