//! PSNR and single-scale SSIM.

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::frame::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// `10 log10(1 / MSE)` for images on a unit dynamic range; `+∞` for
/// identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let mse = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut t: [f64; SSIM_WINDOW] = std::array::from_fn(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

/// Valid-region separable correlation: output is `(h-10) × (w-10)`.
fn filter_valid(data: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut horiz = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            horiz[y * ow + x] = (0..SSIM_WINDOW).map(|j| taps[j] * data[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| taps[i] * horiz[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an `(h-10) × (w-10)` map back to
/// `h × w`.
fn filter_adjoint(map: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut vert = vec![0.0; h * ow];
    for y in 0..oh {
        for i in 0..SSIM_WINDOW {
            for x in 0..ow {
                vert[(y + i) * ow + x] += taps[i] * map[y * ow + x];
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            let v = vert[y * ow + x];
            for j in 0..SSIM_WINDOW {
                out[y * w + x + j] += taps[j] * v;
            }
        }
    }
    out
}

fn check_ssim_input(a: &Image, b: &Image) -> Result<()> {
    a.ensure_same_shape(b)?;
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            height: a.height(),
            width: a.width(),
            min: SSIM_WINDOW,
        });
    }
    Ok(())
}

struct SsimMaps {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    e_aa: Vec<f64>,
    e_bb: Vec<f64>,
    e_ab: Vec<f64>,
}

fn ssim_maps(a: &Image, b: &Image, taps: &[f64; SSIM_WINDOW]) -> SsimMaps {
    let (h, w) = a.shape();
    let (x, y) = (a.as_slice(), b.as_slice());
    let sq = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..x.len()).map(f).collect() };
    SsimMaps {
        mu_a: filter_valid(x, h, w, taps),
        mu_b: filter_valid(y, h, w, taps),
        e_aa: filter_valid(&sq(&|i| x[i] * x[i]), h, w, taps),
        e_bb: filter_valid(&sq(&|i| y[i] * y[i]), h, w, taps),
        e_ab: filter_valid(&sq(&|i| x[i] * y[i]), h, w, taps),
    }
}

/// Mean SSIM over all valid 11×11 window positions (no padding).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_ssim_input(a, b)?;
    let m = ssim_maps(a, b, &gaussian_taps());
    let n = m.mu_a.len();
    let total: f64 = (0..n)
        .map(|p| {
            let (ma, mb) = (m.mu_a[p], m.mu_b[p]);
            let va = m.e_aa[p] - ma * ma;
            let vb = m.e_bb[p] - mb * mb;
            let cov = m.e_ab[p] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

/// SSIM and its gradient with respect to every pixel of `a`.
pub fn ssim_with_gradient(a: &Image, b: &Image) -> Result<(f64, Vec<f64>)> {
    check_ssim_input(a, b)?;
    let taps = gaussian_taps();
    let (h, w) = a.shape();
    let m = ssim_maps(a, b, &taps);
    let n = m.mu_a.len();
    let inv_n = 1.0 / n as f64;
    let mut g_mu = vec![0.0; n];
    let mut g_aa = vec![0.0; n];
    let mut g_ab = vec![0.0; n];
    let mut total = 0.0;
    for p in 0..n {
        let (ma, mb) = (m.mu_a[p], m.mu_b[p]);
        let a1 = 2.0 * ma * mb + SSIM_C1;
        let a2 = 2.0 * (m.e_ab[p] - ma * mb) + SSIM_C2;
        let b1 = ma * ma + mb * mb + SSIM_C1;
        let b2 = (m.e_aa[p] - ma * ma) + (m.e_bb[p] - mb * mb) + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        g_mu[p] = inv_n * s * (2.0 * mb / a1 - 2.0 * mb / a2 - 2.0 * ma / b1 + 2.0 * ma / b2);
        g_aa[p] = -inv_n * s / b2;
        g_ab[p] = inv_n * 2.0 * a1 / (b1 * b2);
    }
    let d_mu = filter_adjoint(&g_mu, h, w, &taps);
    let d_aa = filter_adjoint(&g_aa, h, w, &taps);
    let d_ab = filter_adjoint(&g_ab, h, w, &taps);
    let (x, y) = (a.as_slice(), b.as_slice());
    let grad = (0..h * w).map(|i| d_mu[i] + 2.0 * x[i] * d_aa[i] + y[i] * d_ab[i]).collect();
    Ok((total * inv_n, grad))
}

fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn deserialize_db<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("invalid dB value {t:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub index: usize,
    #[serde(serialize_with = "serialize_db", deserialize_with = "deserialize_db")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(serialize_with = "serialize_db", deserialize_with = "deserialize_db")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub per_image: Vec<ImageMetrics>,
}

impl MetricReport {
    /// Scores `(index, rendered, reference)` triples.
    pub fn compute<'a>(pairs: impl IntoIterator<Item = (usize, &'a Image, &'a Image)>) -> Result<Self> {
        let per_image = pairs
            .into_iter()
            .map(|(index, a, b)| {
                Ok(ImageMetrics {
                    index,
                    psnr: psnr(a, b)?,
                    ssim: ssim(a, b)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = per_image.len().max(1) as f64;
        Ok(Self {
            mean_psnr: per_image.iter().map(|m| m.psnr).sum::<f64>() / n,
            mean_ssim: per_image.iter().map(|m| m.ssim).sum::<f64>() / n,
            per_image,
        })
    }
}
