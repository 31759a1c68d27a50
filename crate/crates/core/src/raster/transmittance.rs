//! Range-direction transmittance, evaluated once per Gaussian at its
//! elevation-azimuth mean.

use nalgebra::Vector2;
use rayon::prelude::*;

use super::{ALPHA_MIN, MAX_MAHALANOBIS_SQ};
use crate::gaussian::Splat2D;

/// Largest grid side; the cell size grows to respect it.
const MAX_GRID_SIDE: usize = 256;

/// One occluder that dims a receiving splat.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OcclusionTerm {
    /// Position of the occluder in the range-sorted splat list.
    pub occluder: u32,
    /// `α̂` of the occluder evaluated at the receiver.
    pub alpha: f64,
}

/// Coarse bucket grid over elevation-azimuth footprints. Each cell lists
/// the splats whose 3σ box overlaps it, in ascending range order.
pub struct OccluderGrid {
    origin: Vector2<f64>,
    cell: f64,
    nx: usize,
    ny: usize,
    offsets: Vec<u32>,
    entries: Vec<u32>,
}

impl OccluderGrid {
    /// `splats` must already be sorted by ascending range.
    pub fn build(splats: &[Splat2D]) -> Self {
        if splats.is_empty() {
            return Self {
                origin: Vector2::zeros(),
                cell: 1.0,
                nx: 1,
                ny: 1,
                offsets: vec![0, 0],
                entries: Vec::new(),
            };
        }
        let mut lo = Vector2::repeat(f64::INFINITY);
        let mut hi = Vector2::repeat(f64::NEG_INFINITY);
        let mut sizes: Vec<f64> = Vec::with_capacity(splats.len());
        for s in splats {
            lo = lo.inf(&(s.mean - s.extent));
            hi = hi.sup(&(s.mean + s.extent));
            sizes.push(s.extent.x.max(s.extent.y));
        }
        let mid = sizes.len() / 2;
        let (_, median, _) = sizes.select_nth_unstable_by(mid, f64::total_cmp);
        let span = (hi - lo).max();
        let cell = median.max(1.0).max(span / MAX_GRID_SIDE as f64);
        let nx = (((hi.x - lo.x) / cell).floor() as usize + 1).min(MAX_GRID_SIDE + 1);
        let ny = (((hi.y - lo.y) / cell).floor() as usize + 1).min(MAX_GRID_SIDE + 1);

        let cell_span = |s: &Splat2D| {
            let a = ((s.mean - s.extent - lo) / cell).map(|v| (v.floor().max(0.0)) as usize);
            let b = ((s.mean + s.extent - lo) / cell).map(|v| v.floor().max(0.0) as usize);
            (a.x.min(nx - 1), b.x.min(nx - 1), a.y.min(ny - 1), b.y.min(ny - 1))
        };
        let mut counts = vec![0u32; nx * ny + 1];
        for s in splats {
            let (x0, x1, y0, y1) = cell_span(s);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    counts[y * nx + x + 1] += 1;
                }
            }
        }
        for k in 1..counts.len() {
            counts[k] += counts[k - 1];
        }
        let offsets = counts;
        let mut fill = offsets.clone();
        let mut entries = vec![0u32; *offsets.last().unwrap() as usize];
        for (j, s) in splats.iter().enumerate() {
            let (x0, x1, y0, y1) = cell_span(s);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let c = y * nx + x;
                    entries[fill[c] as usize] = j as u32;
                    fill[c] += 1;
                }
            }
        }
        Self {
            origin: lo,
            cell,
            nx,
            ny,
            offsets,
            entries,
        }
    }

    /// Splats (sorted positions) whose footprint box may contain `point`.
    pub fn candidates(&self, point: &Vector2<f64>) -> &[u32] {
        let c = (point - self.origin) / self.cell;
        if !(c.x >= 0.0 && c.y >= 0.0) {
            return &[];
        }
        let (x, y) = (c.x.floor() as usize, c.y.floor() as usize);
        if x >= self.nx || y >= self.ny {
            return &[];
        }
        let k = y * self.nx + x;
        &self.entries[self.offsets[k] as usize..self.offsets[k + 1] as usize]
    }
}

/// `α̂` of `occluder` at `point`, or `None` when the term is skipped.
#[inline]
pub fn occlusion_alpha(occluder: &Splat2D, point: &Vector2<f64>) -> Option<f64> {
    let q = occluder.mahalanobis_sq(point);
    if q > MAX_MAHALANOBIS_SQ {
        return None;
    }
    let alpha = occluder.opacity * (-0.5 * q).exp();
    (alpha >= ALPHA_MIN).then_some(alpha)
}

/// Transmittance of every splat in `sorted` (ascending range), optionally
/// keeping the individual product terms for the backward pass.
pub(crate) fn transmittance_pass(sorted: &[Splat2D], keep_terms: bool) -> (Vec<f64>, Vec<Vec<OcclusionTerm>>) {
    let grid = OccluderGrid::build(sorted);
    let results: Vec<(f64, Vec<OcclusionTerm>)> = sorted
        .par_iter()
        .map(|receiver| {
            let mut t = 1.0;
            let mut terms = Vec::new();
            for &j in grid.candidates(&receiver.mean) {
                let occluder = &sorted[j as usize];
                // Strictly nearer only; candidates are range-sorted.
                if occluder.range >= receiver.range {
                    break;
                }
                if let Some(alpha) = occlusion_alpha(occluder, &receiver.mean) {
                    t *= 1.0 - alpha;
                    if keep_terms {
                        terms.push(OcclusionTerm { occluder: j, alpha });
                    }
                }
            }
            (t, terms)
        })
        .collect();
    results.into_iter().unzip()
}

/// Permutation sorting splats by ascending range (ties by input order).
pub fn range_order(splats: &[Splat2D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| splats[a].range.total_cmp(&splats[b].range).then(a.cmp(&b)));
    order
}

/// Per-splat transmittance `T_i = Π_{r_j < r_i} (1 − α̂_j(μ_i))` over
/// elevation-azimuth footprints, returned in input order.
pub fn compute_transmittances(splats_ea: &[Splat2D]) -> Vec<f64> {
    let order = range_order(splats_ea);
    let sorted: Vec<Splat2D> = order.iter().map(|&i| splats_ea[i]).collect();
    let (t_sorted, _) = transmittance_pass(&sorted, false);
    let mut out = vec![1.0; splats_ea.len()];
    for (k, &i) in order.iter().enumerate() {
        out[i] = t_sorted[k];
    }
    out
}
