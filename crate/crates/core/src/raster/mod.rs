//! Tiled sonar splatting.
//!
//! Occlusion is resolved along range in the elevation-azimuth frame, one
//! transmittance value per Gaussian at its footprint center. Intensity is
//! then accumulated along elevation in the polar frame as a plain weighted
//! sum `I(px) = Σ I_i α_i(px) T_i`, clamped to `[0, 1]`.
//!
//! Both passes run tile- or splat-parallel; every reduction happens in a
//! fixed order so results are independent of the thread count.

pub mod oracle;
pub mod transmittance;

use nalgebra::Vector2;
use rayon::prelude::*;

pub use oracle::render_per_pixel_transmittance_oracle;
pub use transmittance::{compute_transmittances, occlusion_alpha, range_order, OccluderGrid, OcclusionTerm};

use crate::frame::Image;
use crate::gaussian::{project_scene, projection_backward, ProjectedGaussian, Scene, Splat2D, SplatGradient};
use crate::geometry::{Pose, SonarIntrinsics};

/// Cap on a single splat's polar opacity.
pub const ALPHA_MAX: f64 = 0.99;
/// Contributions below this opacity are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Footprints end at Mahalanobis distance 3.
pub const MAX_MAHALANOBIS_SQ: f64 = 9.0;
pub const TILE_SIZE: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    /// Clamped clean image.
    pub image: Image,
    /// Number of splats contributing to each pixel.
    pub contributors: Vec<u32>,
    pub gradients: Option<SceneGradients>,
}

/// Per-Gaussian gradients laid out like [`Scene`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneGradients {
    pub means: Vec<[f64; 3]>,
    pub log_scales: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub intensity_logits: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    /// Norm of the gradient with respect to the polar pixel mean; the
    /// densification signal.
    pub pixel_mean_norms: Vec<f64>,
    pub visible: Vec<bool>,
}

impl SceneGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            means: vec![[0.0; 3]; n],
            log_scales: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            intensity_logits: vec![0.0; n],
            opacity_logits: vec![0.0; n],
            pixel_mean_norms: vec![0.0; n],
            visible: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn accumulate(&mut self, other: &SceneGradients) {
        assert_eq!(self.len(), other.len());
        fn add<const N: usize>(a: &mut [[f64; N]], b: &[[f64; N]]) {
            for (x, y) in a.iter_mut().zip(b) {
                for k in 0..N {
                    x[k] += y[k];
                }
            }
        }
        add(&mut self.means, &other.means);
        add(&mut self.log_scales, &other.log_scales);
        add(&mut self.rotations, &other.rotations);
        for (x, y) in self.intensity_logits.iter_mut().zip(&other.intensity_logits) {
            *x += y;
        }
        for (x, y) in self.opacity_logits.iter_mut().zip(&other.opacity_logits) {
            *x += y;
        }
        for (x, y) in self.pixel_mean_norms.iter_mut().zip(&other.pixel_mean_norms) {
            *x += y;
        }
        for (x, y) in self.visible.iter_mut().zip(&other.visible) {
            *x |= y;
        }
    }

    pub fn scale(&mut self, f: f64) {
        self.means.iter_mut().flatten().for_each(|v| *v *= f);
        self.log_scales.iter_mut().flatten().for_each(|v| *v *= f);
        self.rotations.iter_mut().flatten().for_each(|v| *v *= f);
        self.intensity_logits.iter_mut().for_each(|v| *v *= f);
        self.opacity_logits.iter_mut().for_each(|v| *v *= f);
    }

    /// Iterates every parameter gradient as one flat sequence.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.means
            .iter()
            .flatten()
            .chain(self.log_scales.iter().flatten())
            .chain(self.rotations.iter().flatten())
            .chain(&self.intensity_logits)
            .chain(&self.opacity_logits)
            .copied()
    }
}

/// Splat lists per 16×16 tile of the polar image.
pub(crate) struct TileBins {
    tiles_x: usize,
    tiles_y: usize,
    offsets: Vec<u32>,
    entries: Vec<u32>,
}

/// Inclusive pixel span of a footprint clipped to the image, if non-empty.
fn pixel_span(s: &Splat2D, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
    let x0 = (s.mean.x - s.extent.x).ceil().max(0.0);
    let x1 = (s.mean.x + s.extent.x).floor().min(width as f64 - 1.0);
    let y0 = (s.mean.y - s.extent.y).ceil().max(0.0);
    let y1 = (s.mean.y + s.extent.y).floor().min(height as f64 - 1.0);
    (x0 <= x1 && y0 <= y1).then_some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
}

/// Footprint pixels of `s` inside one tile.
fn tile_span(
    s: &Splat2D,
    rows: &std::ops::Range<usize>,
    cols: &std::ops::Range<usize>,
    width: usize,
    height: usize,
) -> Option<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    let (x0, x1, y0, y1) = pixel_span(s, width, height)?;
    let r = y0.max(rows.start)..(y1 + 1).min(rows.end);
    let c = x0.max(cols.start)..(x1 + 1).min(cols.end);
    (!r.is_empty() && !c.is_empty()).then_some((r, c))
}

impl TileBins {
    pub(crate) fn build(splats: &[Splat2D], width: usize, height: usize) -> Self {
        let tiles_x = width.div_ceil(TILE_SIZE);
        let tiles_y = height.div_ceil(TILE_SIZE);
        let spans: Vec<Option<(usize, usize, usize, usize)>> = splats
            .iter()
            .map(|s| pixel_span(s, width, height).map(|(x0, x1, y0, y1)| (x0 / TILE_SIZE, x1 / TILE_SIZE, y0 / TILE_SIZE, y1 / TILE_SIZE)))
            .collect();
        let mut counts = vec![0u32; tiles_x * tiles_y + 1];
        for &(tx0, tx1, ty0, ty1) in spans.iter().flatten() {
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    counts[ty * tiles_x + tx + 1] += 1;
                }
            }
        }
        for k in 1..counts.len() {
            counts[k] += counts[k - 1];
        }
        let mut fill = counts.clone();
        let mut entries = vec![0u32; *counts.last().unwrap() as usize];
        for (i, span) in spans.iter().enumerate() {
            if let Some((tx0, tx1, ty0, ty1)) = *span {
                for ty in ty0..=ty1 {
                    for tx in tx0..=tx1 {
                        let t = ty * tiles_x + tx;
                        entries[fill[t] as usize] = i as u32;
                        fill[t] += 1;
                    }
                }
            }
        }
        Self {
            tiles_x,
            tiles_y,
            offsets: counts,
            entries,
        }
    }

    pub(crate) fn tile_count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    pub(crate) fn splats(&self, tile: usize) -> &[u32] {
        &self.entries[self.offsets[tile] as usize..self.offsets[tile + 1] as usize]
    }

    /// Pixel rows and columns covered by a tile.
    pub(crate) fn pixels(&self, tile: usize, width: usize, height: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let cols = tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(width);
        let rows = ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(height);
        (rows, cols)
    }
}

/// Polar-frame opacity of a splat at a pixel center.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PixelAlpha {
    pub alpha: f64,
    pub capped: bool,
}

#[inline]
pub(crate) fn polar_alpha(s: &Splat2D, px: &Vector2<f64>) -> Option<PixelAlpha> {
    let q = s.mahalanobis_sq(px);
    if q > MAX_MAHALANOBIS_SQ {
        return None;
    }
    let raw = s.opacity * (-0.5 * q).exp();
    if raw < ALPHA_MIN {
        return None;
    }
    Some(PixelAlpha {
        alpha: raw.min(ALPHA_MAX),
        capped: raw > ALPHA_MAX,
    })
}

/// Everything the backward pass needs from a forward render.
pub struct RenderState {
    /// Visible Gaussians sorted by range; `polar.transmittance` is filled.
    projected: Vec<ProjectedGaussian>,
    terms: Vec<Vec<OcclusionTerm>>,
    tiles: TileBins,
    unclamped: Vec<f64>,
    height: usize,
    width: usize,
}

impl RenderState {
    pub fn visible_count(&self) -> usize {
        self.projected.len()
    }

    /// Range-sorted visible projections with transmittances filled.
    pub fn projected(&self) -> &[ProjectedGaussian] {
        &self.projected
    }

    /// Image before the output clamp.
    pub fn unclamped(&self) -> &[f64] {
        &self.unclamped
    }
}

/// Projects, sorts and computes transmittances; shared by the renderer and
/// the per-pixel oracle.
pub(crate) fn prepare(scene: &Scene, pose: &Pose, intr: &SonarIntrinsics, keep_terms: bool) -> (Vec<ProjectedGaussian>, Vec<Vec<OcclusionTerm>>) {
    let projected = project_scene(scene, pose, intr);
    let ea: Vec<Splat2D> = projected.iter().map(|p| p.elevation_azimuth).collect();
    let order = range_order(&ea);
    let mut sorted: Vec<ProjectedGaussian> = order.iter().map(|&i| projected[i]).collect();
    let sorted_ea: Vec<Splat2D> = sorted.iter().map(|p| p.elevation_azimuth).collect();
    let (t, terms) = transmittance::transmittance_pass(&sorted_ea, keep_terms);
    for (p, t) in sorted.iter_mut().zip(t) {
        p.polar.transmittance = t;
        p.elevation_azimuth.transmittance = t;
    }
    (sorted, terms)
}

/// Forward pass that also returns the state for [`render_backward_with_state`].
pub fn render_forward(scene: &Scene, pose: &Pose, intr: &SonarIntrinsics) -> (RenderOutput, RenderState) {
    let (projected, terms) = prepare(scene, pose, intr, true);
    let (height, width) = (intr.height, intr.width);
    let polar: Vec<Splat2D> = projected.iter().map(|p| p.polar).collect();
    let tiles = TileBins::build(&polar, width, height);

    let per_tile: Vec<(Vec<f64>, Vec<u32>)> = (0..tiles.tile_count())
        .into_par_iter()
        .map(|tile| {
            let (rows, cols) = tiles.pixels(tile, width, height);
            let list = tiles.splats(tile);
            let tw = cols.len();
            let mut values = vec![0.0; rows.len() * tw];
            let mut counts = vec![0u32; rows.len() * tw];
            // Splat-major over each footprint; every pixel still sums its
            // terms in list order.
            for &k in list {
                let s = &polar[k as usize];
                let Some((r, c)) = tile_span(s, &rows, &cols, width, height) else { continue };
                for h in r {
                    for w in c.clone() {
                        if let Some(a) = polar_alpha(s, &Vector2::new(w as f64, h as f64)) {
                            let i = (h - rows.start) * tw + (w - cols.start);
                            values[i] += s.intensity * a.alpha * s.transmittance;
                            counts[i] += 1;
                        }
                    }
                }
            }
            (values, counts)
        })
        .collect();

    let mut unclamped = vec![0.0; height * width];
    let mut contributors = vec![0u32; height * width];
    for (tile, (values, counts)) in per_tile.into_iter().enumerate() {
        let (rows, cols) = tiles.pixels(tile, width, height);
        let mut k = 0;
        for h in rows {
            for w in cols.clone() {
                unclamped[h * width + w] = values[k];
                contributors[h * width + w] = counts[k];
                k += 1;
            }
        }
    }
    let clamped: Vec<f64> = unclamped.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let output = RenderOutput {
        image: Image::from_vec(height, width, clamped).expect("render buffer shape"),
        contributors,
        gradients: None,
    };
    let state = RenderState {
        projected,
        terms,
        tiles,
        unclamped,
        height,
        width,
    };
    (output, state)
}

/// Renders the clean polar image of `scene` seen from `pose`.
pub fn render(scene: &Scene, pose: &Pose, intr: &SonarIntrinsics) -> RenderOutput {
    render_forward(scene, pose, intr).0
}

#[derive(Clone, Copy, Debug, Default)]
struct SplatAccum {
    intensity: f64,
    transmittance: f64,
    opacity: f64,
    polar: SplatGradient,
}

impl SplatAccum {
    fn add(&mut self, o: &SplatAccum) {
        self.intensity += o.intensity;
        self.transmittance += o.transmittance;
        self.opacity += o.opacity;
        self.polar.add(&o.polar);
    }
}

struct OccluderGrad {
    occluder: u32,
    opacity: f64,
    ea: SplatGradient,
}

/// Analytic gradients of `Σ_px dL/dI(px) · I(px)` with respect to every
/// scene parameter. `dl_dimage` is indexed like the image; pixels where the
/// output clamp saturated pass no gradient.
pub fn render_backward_with_state(
    scene: &Scene,
    pose: &Pose,
    intr: &SonarIntrinsics,
    state: &RenderState,
    dl_dimage: &[f64],
) -> SceneGradients {
    assert_eq!(dl_dimage.len(), state.height * state.width, "gradient image shape");
    let (height, width) = (state.height, state.width);
    let n = state.projected.len();
    let tiles = &state.tiles;

    let per_tile: Vec<Vec<(u32, SplatAccum)>> = (0..tiles.tile_count())
        .into_par_iter()
        .map(|tile| {
            let list = tiles.splats(tile);
            let mut acc = vec![SplatAccum::default(); list.len()];
            let (rows, cols) = tiles.pixels(tile, width, height);
            for (slot, &k) in acc.iter_mut().zip(list) {
                let s = &state.projected[k as usize].polar;
                let Some((r, c)) = tile_span(s, &rows, &cols, width, height) else { continue };
                for h in r {
                    for w in c.clone() {
                        let idx = h * width + w;
                        let g = dl_dimage[idx];
                        let v = state.unclamped[idx];
                        if g == 0.0 || !(0.0..=1.0).contains(&v) {
                            continue;
                        }
                        let px = Vector2::new(w as f64, h as f64);
                        let Some(a) = polar_alpha(s, &px) else { continue };
                        slot.intensity += g * a.alpha * s.transmittance;
                        slot.transmittance += g * s.intensity * a.alpha;
                        if a.capped {
                            continue;
                        }
                        let d_alpha = g * s.intensity * s.transmittance;
                        slot.opacity += d_alpha * a.alpha / s.opacity;
                        let dq = -0.5 * a.alpha * d_alpha;
                        let dx = px.x - s.mean.x;
                        let dy = px.y - s.mean.y;
                        let [ca, cb, cc] = s.conic;
                        slot.polar.mean.x -= 2.0 * dq * (ca * dx + cb * dy);
                        slot.polar.mean.y -= 2.0 * dq * (cb * dx + cc * dy);
                        slot.polar.conic[0] += dq * dx * dx;
                        slot.polar.conic[1] += dq * 2.0 * dx * dy;
                        slot.polar.conic[2] += dq * dy * dy;
                    }
                }
            }
            list.iter().copied().zip(acc).collect()
        })
        .collect();

    let mut accum = vec![SplatAccum::default(); n];
    for tile in &per_tile {
        for (k, a) in tile {
            accum[*k as usize].add(a);
        }
    }

    // Transmittance products: gradient flows to the receiver's EA mean and
    // to each occluder's EA mean, EA conic and opacity.
    let per_receiver: Vec<(Vector2<f64>, Vec<OccluderGrad>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let d_t = accum[i].transmittance;
            let terms = &state.terms[i];
            let mut recv = Vector2::zeros();
            if d_t == 0.0 || terms.is_empty() {
                return (recv, Vec::new());
            }
            let receiver = &state.projected[i].elevation_azimuth;
            let t = receiver.transmittance;
            let grads = terms
                .iter()
                .map(|term| {
                    let occ = &state.projected[term.occluder as usize].elevation_azimuth;
                    let d_alpha = -d_t * t / (1.0 - term.alpha);
                    let dq = -0.5 * term.alpha * d_alpha;
                    let e = receiver.mean - occ.mean;
                    let [ca, cb, cc] = occ.conic;
                    let ge = Vector2::new(2.0 * dq * (ca * e.x + cb * e.y), 2.0 * dq * (cb * e.x + cc * e.y));
                    recv += ge;
                    OccluderGrad {
                        occluder: term.occluder,
                        opacity: d_alpha * term.alpha / occ.opacity,
                        ea: SplatGradient {
                            mean: -ge,
                            conic: [dq * e.x * e.x, dq * 2.0 * e.x * e.y, dq * e.y * e.y],
                        },
                    }
                })
                .collect();
            (recv, grads)
        })
        .collect();

    let mut ea_grads = vec![SplatGradient::default(); n];
    for (i, (recv, occluders)) in per_receiver.iter().enumerate() {
        ea_grads[i].mean += recv;
        for o in occluders {
            let j = o.occluder as usize;
            accum[j].opacity += o.opacity;
            ea_grads[j].add(&o.ea);
        }
    }

    let per_gaussian: Vec<_> = (0..n)
        .into_par_iter()
        .map(|k| {
            let p = &state.projected[k];
            let g = scene.get(p.index);
            let a = &accum[k];
            let geom = projection_backward(&g, pose, intr, &a.polar, &ea_grads[k]).unwrap_or_default();
            let i = p.polar.intensity;
            let o = p.polar.opacity;
            (p.index, geom, a.intensity * i * (1.0 - i), a.opacity * o * (1.0 - o), a.polar.mean.norm())
        })
        .collect();

    let mut grads = SceneGradients::zeros(scene.len());
    for (idx, geom, d_int, d_op, mean_norm) in per_gaussian {
        grads.means[idx] = geom.mean.into();
        grads.log_scales[idx] = geom.log_scales.into();
        grads.rotations[idx] = geom.rotation;
        grads.intensity_logits[idx] = d_int;
        grads.opacity_logits[idx] = d_op;
        grads.pixel_mean_norms[idx] = mean_norm;
        grads.visible[idx] = true;
    }
    grads
}

/// Recomputes the forward pass and returns parameter gradients.
pub fn render_backward(scene: &Scene, pose: &Pose, intr: &SonarIntrinsics, dl_dimage: &[f64]) -> SceneGradients {
    let (_, state) = render_forward(scene, pose, intr);
    render_backward_with_state(scene, pose, intr, &state, dl_dimage)
}

/// Forward render with the gradient buffers of `dl_dimage` attached.
pub fn render_with_gradients(scene: &Scene, pose: &Pose, intr: &SonarIntrinsics, dl_dimage: &[f64]) -> RenderOutput {
    let (mut out, state) = render_forward(scene, pose, intr);
    out.gradients = Some(render_backward_with_state(scene, pose, intr, &state, dl_dimage));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{logit, Gaussian3D};
    use crate::geometry::to_pixel;
    use nalgebra::Vector3;

    fn intrinsics() -> SonarIntrinsics {
        SonarIntrinsics::from_fov(60f64.to_radians(), 20f64.to_radians(), 2.0, 8.0, 64, 48).unwrap()
    }

    #[test]
    fn empty_scene_renders_black() {
        let out = render(&Scene::new(), &Pose::identity(), &intrinsics());
        assert!(out.image.as_slice().iter().all(|&v| v == 0.0));
        assert!(out.contributors.iter().all(|&c| c == 0));
    }

    /// Places a Gaussian exactly on pixel center `(w, h)`.
    fn on_pixel(intr: &SonarIntrinsics, w: usize, h: usize) -> Vector3<f64> {
        let rt = intr.polar_transform.invert(&Vector2::new(w as f64, h as f64));
        crate::geometry::PolarElevationPoint {
            range: rt.x,
            azimuth: rt.y,
            elevation: 0.0,
        }
        .to_cartesian()
    }

    #[test]
    fn single_gaussian_center_pixel_equals_opacity() {
        let intr = intrinsics();
        let mean = on_pixel(&intr, 20, 30);
        let g = Gaussian3D::isotropic(mean, 0.03, 0.5, 0.8);
        let mut scene = Scene::from_gaussians([g]);
        scene.intensity_logits[0] = 50.0; // I = 1 to double precision
        let out = render(&scene, &Pose::identity(), &intr);
        let center = to_pixel(&intr.polar_transform, &Vector2::new(mean.norm(), 0.0));
        assert!((center.y - 30.0).abs() < 1e-9);
        assert!((out.image.get(30, 20) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let intr = intrinsics();
        let scene = Scene::from_gaussians([
            Gaussian3D::isotropic(on_pixel(&intr, 20, 30), 0.05, 0.6, 0.5),
            Gaussian3D::isotropic(on_pixel(&intr, 22, 20), 0.08, 0.4, 0.7),
        ]);
        let grads = render_backward(&scene, &Pose::identity(), &intr, &vec![0.0; intr.pixel_count()]);
        assert!(grads.values().all(|v| v == 0.0));
    }

    #[test]
    fn center_pixel_opacity_gradient_is_sigmoid_slope() {
        let intr = intrinsics();
        let ol = logit(0.6);
        let mut g = Gaussian3D::isotropic(on_pixel(&intr, 20, 30), 0.03, 0.5, 0.6);
        g.intensity_logit = 50.0;
        g.opacity_logit = ol;
        let scene = Scene::from_gaussians([g]);
        let mut dl = vec![0.0; intr.pixel_count()];
        dl[30 * intr.width + 20] = 1.0;
        let grads = render_backward(&scene, &Pose::identity(), &intr, &dl);
        let s = crate::gaussian::sigmoid(ol);
        assert!((grads.opacity_logits[0] - s * (1.0 - s)).abs() < 1e-12);
    }

    #[test]
    fn doubling_intensity_doubles_unclamped_image() {
        let intr = intrinsics();
        let mut scene = Scene::from_gaussians((0..6).map(|k| {
            Gaussian3D::isotropic(on_pixel(&intr, 10 + 4 * k, 12 + 5 * k), 0.06, 0.1, 0.3)
        }));
        let (_, a) = render_forward(&scene, &Pose::identity(), &intr);
        for l in &mut scene.intensity_logits {
            let i = crate::gaussian::sigmoid(*l);
            *l = logit(2.0 * i);
        }
        let (_, b) = render_forward(&scene, &Pose::identity(), &intr);
        assert!(b.unclamped().iter().all(|&v| v <= 1.0));
        for (x, y) in a.unclamped().iter().zip(b.unclamped()) {
            assert!((2.0 * x - y).abs() < 1e-9);
        }
    }
}
