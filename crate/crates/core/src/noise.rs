//! Learnable per-image sonar noise.
//!
//! Each training image owns two banks of 1D Gaussian mixtures: one over
//! azimuth for every range row, one over range for every azimuth column.
//! The bumps are unnormalized, so a component's peak equals its weight
//! times the bin gain. The two maps are added to the clean render.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Image;
use crate::geometry::SonarIntrinsics;
use nalgebra::Vector2;

/// Floor on component widths (radians or meters).
pub const SIGMA_MIN: f64 = 1e-3;
pub const INITIAL_LOG_GAIN: f64 = -6.0;
pub const DEFAULT_COMPONENTS: usize = 4;

/// Azimuth and range sample positions of the pixel centers.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelGrid {
    /// One angle per column; decreasing, since positive azimuth is on the left.
    pub azimuths: Vec<f64>,
    /// One range per row, increasing.
    pub ranges: Vec<f64>,
}

impl PixelGrid {
    pub fn new(intr: &SonarIntrinsics) -> Self {
        let t = &intr.polar_transform;
        Self {
            azimuths: (0..intr.width).map(|w| t.invert(&Vector2::new(w as f64, 0.0)).y).collect(),
            ranges: (0..intr.height).map(|h| t.invert(&Vector2::new(0.0, h as f64)).x).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.ranges.len()
    }

    pub fn width(&self) -> usize {
        self.azimuths.len()
    }
}

/// `bins` independent K-component mixtures over a 1D domain. Per-component
/// tensors are laid out bin-major: entry `b * k + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmBank {
    pub k: usize,
    pub mix_logits: Vec<f64>,
    pub means: Vec<f64>,
    pub log_sigmas: Vec<f64>,
    pub log_gains: Vec<f64>,
}

impl GmmBank {
    /// Components spread evenly over `[lo, hi]` with equal weights.
    pub fn new(bins: usize, k: usize, lo: f64, hi: f64) -> Self {
        let span = hi - lo;
        let sigma = span / (2.0 * k as f64);
        let means_bin: Vec<f64> = (0..k).map(|j| lo + (j as f64 + 0.5) / k as f64 * span).collect();
        Self {
            k,
            mix_logits: vec![0.0; bins * k],
            means: (0..bins).flat_map(|_| means_bin.iter().copied()).collect(),
            log_sigmas: vec![(sigma - SIGMA_MIN).max(SIGMA_MIN).ln(); bins * k],
            log_gains: vec![INITIAL_LOG_GAIN; bins],
        }
    }

    pub fn zeros_like(other: &GmmBank) -> Self {
        Self {
            k: other.k,
            mix_logits: vec![0.0; other.mix_logits.len()],
            means: vec![0.0; other.means.len()],
            log_sigmas: vec![0.0; other.log_sigmas.len()],
            log_gains: vec![0.0; other.log_gains.len()],
        }
    }

    pub fn bins(&self) -> usize {
        self.log_gains.len()
    }

    pub fn gain(&self, b: usize) -> f64 {
        self.log_gains[b].exp()
    }

    pub fn sigma(&self, b: usize, j: usize) -> f64 {
        SIGMA_MIN + self.log_sigmas[b * self.k + j].exp()
    }

    /// Softmax of the bin's mixing logits.
    pub fn weights(&self, b: usize) -> Vec<f64> {
        let logits = &self.mix_logits[b * self.k..(b + 1) * self.k];
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    /// Mixture value of bin `b` at coordinate `x`.
    pub fn value(&self, b: usize, x: f64) -> f64 {
        let pi = self.weights(b);
        self.gain(b) * (0..self.k).map(|j| pi[j] * self.bump(b, j, x)).sum::<f64>()
    }

    fn bump(&self, b: usize, j: usize, x: f64) -> f64 {
        let d = x - self.means[b * self.k + j];
        let s = self.sigma(b, j);
        (-d * d / (2.0 * s * s)).exp()
    }

    /// Adds the gradient of `Σ_x upstream(x) · value(b, x)` for bin `b`
    /// into `grad`.
    fn accumulate_bin(&self, b: usize, xs: impl Iterator<Item = (f64, f64)> + Clone, grad: &mut GmmBank) {
        let k = self.k;
        let pi = self.weights(b);
        let g = self.gain(b);
        let mut d_pi = vec![0.0; k];
        let mut d_mean = vec![0.0; k];
        let mut d_sigma = vec![0.0; k];
        for (x, up) in xs {
            if up == 0.0 {
                continue;
            }
            for j in 0..k {
                let d = x - self.means[b * k + j];
                let s = self.sigma(b, j);
                let e = (-d * d / (2.0 * s * s)).exp();
                d_pi[j] += up * g * e;
                let w = up * g * pi[j] * e;
                d_mean[j] += w * d / (s * s);
                d_sigma[j] += w * d * d / (s * s * s);
            }
        }
        // dL/d(log g) = Σ up · value, and value = g Σ π e.
        grad.log_gains[b] += (0..k).map(|j| d_pi[j] * pi[j]).sum::<f64>();
        let dot: f64 = (0..k).map(|j| pi[j] * d_pi[j]).sum();
        for j in 0..k {
            grad.mix_logits[b * k + j] += pi[j] * (d_pi[j] - dot);
            grad.means[b * k + j] += d_mean[j];
            grad.log_sigmas[b * k + j] += d_sigma[j] * self.log_sigmas[b * k + j].exp();
        }
    }

    fn tensors(&self) -> [&Vec<f64>; 4] {
        [&self.mix_logits, &self.means, &self.log_sigmas, &self.log_gains]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.mix_logits, &mut self.means, &mut self.log_sigmas, &mut self.log_gains]
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors().into_iter().flatten().copied()
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.tensors_mut().into_iter().flatten()
    }
}

/// Noise parameters for every training image.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModel {
    pub k: usize,
    pub height: usize,
    pub width: usize,
    pub azimuth_fov: f64,
    pub min_range: f64,
    pub max_range: f64,
    /// Per image: one mixture over azimuth for each of the `height` rows.
    pub azimuth: Vec<GmmBank>,
    /// Per image: one mixture over range for each of the `width` columns.
    pub range: Vec<GmmBank>,
}

/// Gradients with the same layout as the model's banks.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseGradients {
    pub azimuth: GmmBank,
    pub range: GmmBank,
}

impl NoiseModel {
    pub fn new(images: usize, intr: &SonarIntrinsics, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("noise components", "must be at least 1"));
        }
        let half = 0.5 * intr.azimuth_fov;
        Ok(Self {
            k,
            height: intr.height,
            width: intr.width,
            azimuth_fov: intr.azimuth_fov,
            min_range: intr.min_range,
            max_range: intr.max_range,
            azimuth: vec![GmmBank::new(intr.height, k, -half, half); images],
            range: vec![GmmBank::new(intr.width, k, intr.min_range, intr.max_range); images],
        })
    }

    pub fn images(&self) -> usize {
        self.azimuth.len()
    }

    fn check_index(&self, n: usize) -> Result<()> {
        if n >= self.images() {
            return Err(Error::IndexOutOfRange {
                index: n,
                len: self.images(),
            });
        }
        Ok(())
    }

    fn check_grid(&self, grid: &PixelGrid) -> Result<()> {
        if grid.height() != self.height || grid.width() != self.width {
            return Err(Error::shape(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", grid.height(), grid.width()),
            ));
        }
        Ok(())
    }

    /// Largest deviation of any mixture's weights from summing to one.
    pub fn max_mixing_error(&self) -> f64 {
        self.azimuth
            .iter()
            .chain(&self.range)
            .flat_map(|bank| (0..bank.bins()).map(move |b| (bank.weights(b).iter().sum::<f64>() - 1.0).abs()))
            .fold(0.0, f64::max)
    }

    /// Mean of every bin gain over all images and both banks.
    pub fn mean_gain(&self) -> f64 {
        let (sum, count) = self
            .azimuth
            .iter()
            .chain(&self.range)
            .flat_map(|bank| bank.log_gains.iter())
            .fold((0.0, 0usize), |(s, c), l| (s + l.exp(), c + 1));
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    /// Mean gain of each azimuth-bank row of image `n`.
    pub fn azimuth_row_gains(&self, n: usize) -> Result<Vec<f64>> {
        self.check_index(n)?;
        Ok(self.azimuth[n].log_gains.iter().map(|l| l.exp()).collect())
    }

    pub fn zero_gradients(&self) -> NoiseGradients {
        NoiseGradients {
            azimuth: GmmBank::zeros_like(&self.azimuth[0]),
            range: GmmBank::zeros_like(&self.range[0]),
        }
    }

    /// Pins every gain at zero, making both maps vanish.
    pub fn silence(&mut self) {
        for bank in self.azimuth.iter_mut().chain(self.range.iter_mut()) {
            bank.log_gains.iter_mut().for_each(|g| *g = f64::NEG_INFINITY);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = BlobHeader {
            n: self.images(),
            h: self.height,
            w: self.width,
            k: self.k,
            azimuth_fov: self.azimuth_fov,
            min_range: self.min_range,
            max_range: self.max_range,
            dtype: "f32".into(),
            tensors: tensor_names(),
        };
        let mut payload = Vec::new();
        for n in 0..self.images() {
            for bank in [&self.azimuth[n], &self.range[n]] {
                for v in bank.values() {
                    payload.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        write_blob(path, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, payload): (BlobHeader, Vec<u8>) = read_blob(path)?;
        if header.dtype != "f32" || header.tensors != tensor_names() || header.k == 0 {
            return Err(Error::Format {
                format: "noise blob",
                path: path.into(),
                reason: "unexpected tensor layout".into(),
            });
        }
        let intr_like = (header.h, header.w);
        let expected = header.n * (intr_like.0 * (3 * header.k + 1) + intr_like.1 * (3 * header.k + 1)) * 4;
        if payload.len() != expected {
            return Err(Error::Format {
                format: "noise blob",
                path: path.into(),
                reason: format!("payload is {} bytes, expected {expected}", payload.len()),
            });
        }
        let mut values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        let mut azimuth = Vec::with_capacity(header.n);
        let mut range = Vec::with_capacity(header.n);
        for _ in 0..header.n {
            for (bins, dst) in [(header.h, &mut azimuth), (header.w, &mut range)] {
                let mut bank = GmmBank::new(bins, header.k, 0.0, 1.0);
                for v in bank.values_mut() {
                    *v = values.next().unwrap();
                }
                dst.push(bank);
            }
        }
        Ok(Self {
            k: header.k,
            height: header.h,
            width: header.w,
            azimuth_fov: header.azimuth_fov,
            min_range: header.min_range,
            max_range: header.max_range,
            azimuth,
            range,
        })
    }
}

fn tensor_names() -> Vec<String> {
    ["azimuth", "range"]
        .iter()
        .flat_map(|bank| {
            ["mix_logits", "means", "log_sigmas", "log_gains"]
                .iter()
                .map(move |t| format!("{bank}.{t}"))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobHeader {
    n: usize,
    h: usize,
    w: usize,
    k: usize,
    azimuth_fov: f64,
    min_range: f64,
    max_range: f64,
    dtype: String,
    /// Per-image tensor order of the payload.
    tensors: Vec<String>,
}

/// Writes `u32 header length | JSON header | payload`.
pub(crate) fn write_blob<H: Serialize>(path: &Path, header: &H, payload: &[u8]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let len = u32::try_from(json.len()).map_err(|_| Error::invalid("blob header", "too large"))?;
    f.write_all(&len.to_le_bytes())
        .and_then(|_| f.write_all(&json))
        .and_then(|_| f.write_all(payload))
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn read_blob<H: for<'de> Deserialize<'de>>(path: &Path) -> Result<(H, Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Format {
        format: "blob",
        path: path.into(),
        reason: reason.into(),
    };
    if bytes.len() < 4 {
        return Err(bad("truncated header length"));
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if bytes.len() < 4 + len {
        return Err(bad("truncated header"));
    }
    let header = serde_json::from_slice(&bytes[4..4 + len])?;
    Ok((header, bytes[4 + len..].to_vec()))
}

/// `N_θ(h, w)`: the row-`h` azimuth mixture of image `n` at column `w`.
pub fn azimuth_noise(model: &NoiseModel, n: usize, grid: &PixelGrid) -> Result<Image> {
    model.check_index(n)?;
    model.check_grid(grid)?;
    let bank = &model.azimuth[n];
    let mut data = vec![0.0; model.height * model.width];
    data.par_chunks_mut(model.width).enumerate().for_each(|(h, row)| {
        for (w, v) in row.iter_mut().enumerate() {
            *v = bank.value(h, grid.azimuths[w]);
        }
    });
    Image::from_vec(model.height, model.width, data)
}

/// `N_r(h, w)`: the column-`w` range mixture of image `n` at row `h`.
pub fn range_noise(model: &NoiseModel, n: usize, grid: &PixelGrid) -> Result<Image> {
    model.check_index(n)?;
    model.check_grid(grid)?;
    let bank = &model.range[n];
    let mut data = vec![0.0; model.height * model.width];
    data.par_chunks_mut(model.width).enumerate().for_each(|(h, row)| {
        for (w, v) in row.iter_mut().enumerate() {
            *v = bank.value(w, grid.ranges[h]);
        }
    });
    Image::from_vec(model.height, model.width, data)
}

/// `clamp(clean + n_theta + n_range, 0, 1)`.
pub fn apply_noise(clean: &Image, n_theta: &Image, n_range: &Image) -> Result<Image> {
    clean.ensure_same_shape(n_theta)?;
    clean.ensure_same_shape(n_range)?;
    let data = clean
        .as_slice()
        .iter()
        .zip(n_theta.as_slice())
        .zip(n_range.as_slice())
        .map(|((c, a), b)| (c + a + b).clamp(0.0, 1.0))
        .collect();
    Image::from_vec(clean.height(), clean.width(), data)
}

/// Gradient reaching each summand of [`apply_noise`]; zero where the sum
/// saturated.
pub fn apply_noise_backward(clean: &Image, n_theta: &Image, n_range: &Image, upstream: &[f64]) -> Result<Vec<f64>> {
    clean.ensure_same_shape(n_theta)?;
    clean.ensure_same_shape(n_range)?;
    if upstream.len() != clean.len() {
        return Err(Error::shape(clean.len(), upstream.len()));
    }
    Ok((0..clean.len())
        .map(|i| {
            let s = clean.as_slice()[i] + n_theta.as_slice()[i] + n_range.as_slice()[i];
            if (0.0..=1.0).contains(&s) {
                upstream[i]
            } else {
                0.0
            }
        })
        .collect())
}

/// Gradients of `Σ upstream · (N_θ + N_r)` for image `n`.
pub fn noise_backward(model: &NoiseModel, n: usize, grid: &PixelGrid, upstream: &[f64]) -> Result<NoiseGradients> {
    model.check_index(n)?;
    model.check_grid(grid)?;
    let (height, width) = (model.height, model.width);
    if upstream.len() != height * width {
        return Err(Error::shape(height * width, upstream.len()));
    }
    let az = &model.azimuth[n];
    let rg = &model.range[n];
    let mut out = model.zero_gradients();
    let rows: Vec<GmmBank> = (0..height)
        .into_par_iter()
        .map(|h| {
            let mut g = GmmBank::zeros_like(az);
            let row = &upstream[h * width..(h + 1) * width];
            az.accumulate_bin(h, grid.azimuths.iter().copied().zip(row.iter().copied()), &mut g);
            g
        })
        .collect();
    for g in rows {
        add_bank(&mut out.azimuth, &g);
    }
    let cols: Vec<GmmBank> = (0..width)
        .into_par_iter()
        .map(|w| {
            let mut g = GmmBank::zeros_like(rg);
            let col = (0..height).map(|h| (grid.ranges[h], upstream[h * width + w]));
            rg.accumulate_bin(w, col, &mut g);
            g
        })
        .collect();
    for g in cols {
        add_bank(&mut out.range, &g);
    }
    Ok(out)
}

fn add_bank(dst: &mut GmmBank, src: &GmmBank) {
    for (d, s) in dst.values_mut().zip(src.values()) {
        *d += s;
    }
}
