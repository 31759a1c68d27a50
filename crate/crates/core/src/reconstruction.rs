//! Gaussian scene to point cloud to triangle mesh.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{quaternion_to_rotation, Scene};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    fn corner(&self, t: &[u32; 3], k: usize) -> Vector3<f64> {
        Vector3::from(self.vertices[t[k] as usize])
    }

    /// Volume enclosed by the mesh, positive for outward-facing triangles.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| self.corner(t, 0).dot(&self.corner(t, 1).cross(&self.corner(t, 2))) / 6.0)
            .sum()
    }

    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (std::array::from_fn(|i| lo[i].min(v[i])), std::array::from_fn(|i| hi[i].max(v[i])))
        }))
    }

    pub fn write_stl(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        let mut header = [0u8; 80];
        let tag = b"echosplat";
        header[..tag.len()].copy_from_slice(tag);
        f.write_all(&header).map_err(io)?;
        f.write_all(&(self.triangles.len() as u32).to_le_bytes()).map_err(io)?;
        for t in &self.triangles {
            let (a, b, c) = (self.corner(t, 0), self.corner(t, 1), self.corner(t, 2));
            let n = (b - a).cross(&(c - a)).normalize();
            for v in [n, a, b, c] {
                for x in v.iter() {
                    f.write_all(&(*x as f32).to_le_bytes()).map_err(io)?;
                }
            }
            f.write_all(&[0, 0]).map_err(io)?;
        }
        f.flush().map_err(io)
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        for v in &self.vertices {
            writeln!(f, "v {} {} {}", v[0], v[1], v[2]).map_err(io)?;
        }
        for t in &self.triangles {
            writeln!(f, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).map_err(io)?;
        }
        f.flush().map_err(io)
    }
}

/// Draws `samples` points per Gaussian from its distribution truncated at
/// Mahalanobis distance 3 and keeps those whose opacity-weighted density
/// exceeds `threshold`. Each Gaussian uses its own random stream, so the
/// result does not depend on scheduling.
pub fn sample_point_cloud(scene: &Scene, threshold: f64, samples: usize, seed: u64) -> Result<Vec<[f64; 3]>> {
    if scene.is_empty() {
        return Err(Error::EmptyCloud("scene has no Gaussians".into()));
    }
    let per: Vec<Vec<[f64; 3]>> = (0..scene.len())
        .into_par_iter()
        .map(|i| {
            let g = scene.get(i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let m = quaternion_to_rotation(&g.rotation) * nalgebra::Matrix3::from_diagonal(&g.scales());
            let opacity = g.opacity();
            let mut out = Vec::new();
            for _ in 0..samples {
                let z = loop {
                    let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                    if z.norm_squared() <= 9.0 {
                        break z;
                    }
                };
                if opacity * (-0.5 * z.norm_squared()).exp() > threshold {
                    out.push((g.mean + m * z).into());
                }
            }
            out
        })
        .collect();
    let points: Vec<[f64; 3]> = per.concat();
    if points.is_empty() {
        return Err(Error::EmptyCloud(format!("no sample exceeded density {threshold}")));
    }
    Ok(points)
}

pub const NORMALIZATION_QUANTILE: f64 = 0.95;

/// Scalar field on a regular grid; node `(i, j, k)` sits at
/// `origin + voxel · (i, j, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub origin: [f64; 3],
    pub voxel: f64,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl DensityGrid {
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn position(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        Vector3::new(
            self.origin[0] + self.voxel * i as f64,
            self.origin[1] + self.voxel * j as f64,
            self.origin[2] + self.voxel * k as f64,
        )
    }

    /// Trilinear deposit of unit masses. Densities are divided by the
    /// [`NORMALIZATION_QUANTILE`] of the occupied nodes and clamped to 1, so
    /// a few very dense nodes cannot push the rest of a thin shell below the
    /// iso level.
    /// The grid covers the points' bounding box plus two voxels per side.
    pub fn deposit(points: &[[f64; 3]], voxel: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud("nothing to deposit".into()));
        }
        if !(voxel > 0.0) {
            return Err(Error::invalid("voxel size", format!("{voxel} is not positive")));
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let origin: [f64; 3] = std::array::from_fn(|a| lo[a] - 2.0 * voxel);
        let dims: [usize; 3] = std::array::from_fn(|a| ((hi[a] - lo[a]) / voxel).ceil() as usize + 5);
        let cells = dims.iter().product::<usize>();
        if cells > 1 << 28 {
            return Err(Error::invalid("voxel size", format!("{voxel} gives a {dims:?} grid")));
        }
        let mut grid = Self {
            origin,
            voxel,
            dims,
            data: vec![0.0; cells],
        };
        for p in points {
            let f: [f64; 3] = std::array::from_fn(|a| (p[a] - origin[a]) / voxel);
            let base: [usize; 3] = std::array::from_fn(|a| f[a].floor() as usize);
            let t: [f64; 3] = std::array::from_fn(|a| f[a] - base[a] as f64);
            for corner in 0..8 {
                let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
                let w: f64 = (0..3).map(|a| if o[a] == 1 { t[a] } else { 1.0 - t[a] }).product();
                let idx = grid.index(base[0] + o[0], base[1] + o[1], base[2] + o[2]);
                grid.data[idx] += w;
            }
        }
        let mut occupied: Vec<f64> = grid.data.iter().copied().filter(|&v| v > 0.0).collect();
        if !occupied.is_empty() {
            let k = ((occupied.len() - 1) as f64 * NORMALIZATION_QUANTILE) as usize;
            let (_, &mut scale, _) = occupied.select_nth_unstable_by(k, f64::total_cmp);
            grid.data.iter_mut().for_each(|v| *v = (*v / scale).min(1.0));
        }
        Ok(grid)
    }
}

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

fn edge_between(a: usize, b: usize) -> usize {
    EDGES
        .iter()
        .position(|e| (e[0] == a && e[1] == b) || (e[0] == b && e[1] == a))
        .expect("corners share an edge")
}

/// Cube faces as corner cycles, counter-clockwise seen from outside.
fn faces() -> Vec<[usize; 4]> {
    let mut out = Vec::new();
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2 {
            let find = |cu: usize, cv: usize| {
                (0..8)
                    .find(|&c| CORNERS[c][axis] == side && CORNERS[c][u] == cu && CORNERS[c][v] == cv)
                    .unwrap()
            };
            let mut f = [find(0, 0), find(1, 0), find(1, 1), find(0, 1)];
            if side == 0 {
                f.reverse();
            }
            out.push(f);
        }
    }
    out
}

/// Closed loops of crossed edges for one corner configuration. On every
/// face each run of inside corners is cut off by its own segment, so
/// ambiguous faces keep inside corners apart and neighbouring cells agree.
fn case_loops(case: usize) -> Vec<Vec<usize>> {
    let inside = |c: usize| case >> c & 1 == 1;
    let mut next = [usize::MAX; 12];
    for f in faces() {
        let mut crossings = Vec::new();
        for k in 0..4 {
            let (a, b) = (f[k], f[(k + 1) % 4]);
            if inside(a) != inside(b) {
                crossings.push((edge_between(a, b), inside(a)));
            }
        }
        let n = crossings.len();
        for p in 0..n {
            let (edge, leaving) = crossings[p];
            if leaving {
                next[edge] = crossings[(p + n - 1) % n].0;
            }
        }
    }
    let mut seen = [false; 12];
    let mut loops = Vec::new();
    for start in 0..12 {
        if next[start] == usize::MAX || seen[start] {
            continue;
        }
        let mut l = Vec::new();
        let mut e = start;
        while !seen[e] {
            seen[e] = true;
            l.push(e);
            e = next[e];
        }
        loops.push(l);
    }
    loops
}

fn fan(loops: &[Vec<usize>], flip: bool) -> Vec<[u8; 3]> {
    let mut tris = Vec::new();
    for l in loops {
        for i in 1..l.len() - 1 {
            let t = [l[0] as u8, l[i] as u8, l[i + 1] as u8];
            tris.push(if flip { [t[0], t[2], t[1]] } else { t });
        }
    }
    tris
}

fn edge_midpoint(e: usize) -> Vector3<f64> {
    let [a, b] = EDGES[e];
    Vector3::from_fn(|i, _| 0.5 * (CORNERS[a][i] + CORNERS[b][i]) as f64)
}

/// Triangles (as edge triples) for each of the 256 corner configurations,
/// wound so normals point from inside (above iso) to outside.
pub fn triangle_table() -> &'static [Vec<[u8; 3]>; 256] {
    static TABLE: OnceLock<[Vec<[u8; 3]>; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        // Orient by the single-corner case: its normal must point away
        // from corner 0.
        let t = fan(&case_loops(1), false)[0];
        let [a, b, c] = t.map(|e| edge_midpoint(e as usize));
        let flip = (b - a).cross(&(c - a)).dot(&Vector3::new(1.0, 1.0, 1.0)) < 0.0;
        std::array::from_fn(|case| fan(&case_loops(case), flip))
    })
}

/// Extracts the `iso` level set; nodes above `iso` are inside.
pub fn extract_isosurface(grid: &DensityGrid, iso: f64) -> Result<TriangleMesh> {
    let table = triangle_table();
    let [nx, ny, nz] = grid.dims;
    let mut mesh = TriangleMesh::default();
    let mut shared: HashMap<usize, u32> = HashMap::new();
    for k in 0..nz.saturating_sub(1) {
        for j in 0..ny.saturating_sub(1) {
            for i in 0..nx.saturating_sub(1) {
                let node = |c: usize| [i + CORNERS[c][0], j + CORNERS[c][1], k + CORNERS[c][2]];
                let value = |c: usize| {
                    let n = node(c);
                    grid.data[grid.index(n[0], n[1], n[2])]
                };
                let mut case = 0;
                for c in 0..8 {
                    if value(c) > iso {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let mut vertex = |e: usize| -> u32 {
                    let [a, b] = EDGES[e];
                    let (na, nb) = (node(a), node(b));
                    let lo = if na <= nb { na } else { nb };
                    let axis = (0..3).find(|&x| na[x] != nb[x]).unwrap();
                    let key = grid.index(lo[0], lo[1], lo[2]) * 3 + axis;
                    *shared.entry(key).or_insert_with(|| {
                        let (va, vb) = (value(a), value(b));
                        let t = (iso - va) / (vb - va);
                        let pa = grid.position(na[0], na[1], na[2]);
                        let pb = grid.position(nb[0], nb[1], nb[2]);
                        mesh.vertices.push((pa + t * (pb - pa)).into());
                        (mesh.vertices.len() - 1) as u32
                    })
                };
                let tris: Vec<[u32; 3]> = table[case]
                    .iter()
                    .map(|t| [vertex(t[0] as usize), vertex(t[1] as usize), vertex(t[2] as usize)])
                    .collect();
                for t in tris {
                    let [a, b, c] = t.map(|v| Vector3::from(mesh.vertices[v as usize]));
                    if 0.5 * (b - a).cross(&(c - a)).norm() >= 1e-12 {
                        mesh.triangles.push(t);
                    }
                }
            }
        }
    }
    if mesh.triangles.is_empty() {
        return Err(Error::EmptyMesh { iso });
    }
    Ok(mesh)
}

/// Deposits `points` on a grid of the given voxel size and extracts the
/// `iso` level of the normalized density.
pub fn marching_cubes(points: &[[f64; 3]], voxel: f64, iso: f64) -> Result<TriangleMesh> {
    let grid = DensityGrid::deposit(points, voxel)?;
    extract_isosurface(&grid, iso)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshConfig {
    pub samples_per_gaussian: usize,
    /// Defaults to 0.3 × the median opacity.
    pub density_threshold: Option<f64>,
    /// Defaults to the largest side of the cloud's bounding box / 256.
    pub voxel_size: Option<f64>,
    pub iso: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            samples_per_gaussian: 32,
            density_threshold: None,
            voxel_size: None,
            iso: 0.5,
        }
    }
}

pub fn default_density_threshold(scene: &Scene) -> f64 {
    let mut o: Vec<f64> = scene.iter().map(|g| g.opacity()).collect();
    if o.is_empty() {
        return 0.0;
    }
    let mid = o.len() / 2;
    let (_, m, _) = o.select_nth_unstable_by(mid, f64::total_cmp);
    0.3 * *m
}

pub fn default_voxel_size(points: &[[f64; 3]]) -> f64 {
    let mut extent: f64 = 0.0;
    for a in 0..3 {
        let (lo, hi) = points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p[a]), h.max(p[a])));
        extent = extent.max(hi - lo);
    }
    if extent > 0.0 {
        extent / 256.0
    } else {
        1e-2
    }
}

/// Samples the scene and meshes the resulting cloud.
pub fn reconstruct(scene: &Scene, cfg: &MeshConfig, seed: u64) -> Result<(Vec<[f64; 3]>, TriangleMesh)> {
    let threshold = cfg.density_threshold.unwrap_or_else(|| default_density_threshold(scene));
    let points = sample_point_cloud(scene, threshold, cfg.samples_per_gaussian, seed)?;
    let voxel = cfg.voxel_size.unwrap_or_else(|| default_voxel_size(&points));
    let mesh = marching_cubes(&points, voxel, cfg.iso)?;
    Ok((points, mesh))
}
