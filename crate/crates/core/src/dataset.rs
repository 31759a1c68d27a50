//! Posed sonar image collections and their on-disk layout.
//!
//! ```text
//! images/00000.png      16-bit grayscale observed frames
//! images_clean/...      noise-free frames (simulated data only)
//! poses.json            [{index, R: 9 row-major floats, t: 3 floats}]
//! intrinsics.json       sensor description
//! ```

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Image, SonarFrame};
use crate::geometry::{Pose, SonarIntrinsics};

pub const DEFAULT_TEST_EVERY: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub frames: Vec<SonarFrame>,
    pub intrinsics: SonarIntrinsics,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Noise-free counterparts of `frames`, when known.
    pub clean: Option<Vec<Image>>,
}

/// Every `every`-th frame (starting at 0) is held out; with fewer than two
/// frames everything is used for training.
pub fn split_indices(n: usize, every: usize) -> (Vec<usize>, Vec<usize>) {
    if n < 2 || every < 2 {
        return ((0..n).collect(), Vec::new());
    }
    (0..n).partition(|i| i % every != 0)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRecord {
    index: usize,
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
}

fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
    Image::from_vec(h as usize, w as usize, data)
}

/// Writes `[0, 1]` values as 16-bit grayscale.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let data: Vec<u16> = img
        .as_slice()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(img.width() as u32, img.height() as u32, data)
        .expect("buffer matches dimensions");
    buf.save(path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

impl Dataset {
    pub fn new(frames: Vec<SonarFrame>, intrinsics: SonarIntrinsics, test_every: usize) -> Result<Self> {
        intrinsics.validate()?;
        for f in &frames {
            if f.image.shape() != (intrinsics.height, intrinsics.width) {
                return Err(Error::shape(
                    format!("{}x{}", intrinsics.height, intrinsics.width),
                    format!("{}x{}", f.image.height(), f.image.width()),
                ));
            }
        }
        let (train, test) = split_indices(frames.len(), test_every);
        Ok(Self {
            frames,
            intrinsics,
            train,
            test,
            clean: None,
        })
    }

    pub fn with_clean(mut self, clean: Vec<Image>) -> Result<Self> {
        if clean.len() != self.frames.len() {
            return Err(Error::shape(self.frames.len(), clean.len()));
        }
        self.clean = Some(clean);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Noise-free image of frame `i` if known, else the observed one.
    pub fn clean_image(&self, i: usize) -> &Image {
        self.clean.as_ref().map_or(&self.frames[i].image, |c| &c[i])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        for (i, f) in self.frames.iter().enumerate() {
            write_png(&images.join(format!("{i:05}.png")), &f.image)?;
        }
        if let Some(clean) = &self.clean {
            let d = dir.join("images_clean");
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            for (i, img) in clean.iter().enumerate() {
                write_png(&d.join(format!("{i:05}.png")), img)?;
            }
        }
        let poses: Vec<PoseRecord> = self
            .frames
            .iter()
            .enumerate()
            .map(|(index, f)| {
                let r = f.pose.rotation();
                PoseRecord {
                    index,
                    r: std::array::from_fn(|k| r[(k / 3, k % 3)]),
                    t: (*f.pose.translation()).into(),
                }
            })
            .collect();
        write_json(&dir.join("poses.json"), &poses)?;
        write_json(&dir.join("intrinsics.json"), &self.intrinsics)
    }

    pub fn load(dir: &Path, test_every: usize) -> Result<Self> {
        let intrinsics: SonarIntrinsics = read_json(&dir.join("intrinsics.json"))?;
        let mut poses: Vec<PoseRecord> = read_json(&dir.join("poses.json"))?;
        poses.sort_by_key(|p| p.index);
        let mut frames = Vec::with_capacity(poses.len());
        for (k, p) in poses.iter().enumerate() {
            if p.index != k {
                return Err(Error::Format {
                    format: "poses.json",
                    path: dir.join("poses.json"),
                    reason: format!("indices are not contiguous at {k}"),
                });
            }
            let pose = Pose::new(Matrix3::from_row_slice(&p.r), Vector3::from(p.t))?;
            let image = read_png(&dir.join("images").join(format!("{k:05}.png")))?;
            frames.push(SonarFrame { image, pose });
        }
        let mut ds = Self::new(frames, intrinsics, test_every)?;
        let clean_dir = dir.join("images_clean");
        if clean_dir.is_dir() {
            let clean = (0..ds.len())
                .map(|k| read_png(&clean_dir.join(format!("{k:05}.png"))))
                .collect::<Result<Vec<_>>>()?;
            ds = ds.with_clean(clean)?;
        }
        Ok(ds)
    }
}
