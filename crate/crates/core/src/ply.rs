//! Binary little-endian PLY for point clouds and Gaussian scenes.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::gaussian::{Gaussian3D, Scene};

const SCENE_PROPERTIES: [&str; 12] = [
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "intensity", "opacity",
];

#[derive(Clone, Copy, PartialEq)]
enum Scalar {
    F32,
    F64,
}

fn write_vertices(path: &Path, names: &[&str], scalar: Scalar, rows: impl ExactSizeIterator<Item = Vec<f64>>) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let ty = if scalar == Scalar::F32 { "float" } else { "double" };
    let mut header = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", rows.len());
    for n in names {
        header += &format!("property {ty} {n}\n");
    }
    header += "end_header\n";
    f.write_all(header.as_bytes()).map_err(io)?;
    for row in rows {
        for v in row {
            match scalar {
                Scalar::F32 => f.write_all(&(v as f32).to_le_bytes()),
                Scalar::F64 => f.write_all(&v.to_le_bytes()),
            }
            .map_err(io)?;
        }
    }
    f.flush().map_err(io)
}

/// Reads the vertex element as named `f64` columns.
fn read_vertices(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let bad = |reason: String| Error::Format {
        format: "ply",
        path: path.into(),
        reason,
    };
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut first = true;
    loop {
        line.clear();
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(bad("missing end_header".into()));
        }
        let t: Vec<&str> = line.split_whitespace().collect();
        if first {
            if t != ["ply"] {
                return Err(bad("missing ply magic".into()));
            }
            first = false;
            continue;
        }
        match t.as_slice() {
            ["format", fmt, _] if *fmt != "binary_little_endian" => return Err(bad(format!("unsupported format {fmt}"))),
            ["element", "vertex", n] => count = Some(n.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            ["element", other, _] => return Err(bad(format!("unsupported element {other}"))),
            ["property", ty, name] => {
                let s = match *ty {
                    "float" | "float32" => Scalar::F32,
                    "double" | "float64" => Scalar::F64,
                    other => return Err(bad(format!("unsupported property type {other}"))),
                };
                props.push((name.to_string(), s));
            }
            ["end_header"] => break,
            _ => {}
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element".into()))?;
    let mut rows = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        let mut row = Vec::with_capacity(props.len());
        for (_, s) in &props {
            let v = match s {
                Scalar::F32 => {
                    r.read_exact(&mut buf[..4]).map_err(|e| Error::io(path, e))?;
                    f32::from_le_bytes(buf[..4].try_into().unwrap()) as f64
                }
                Scalar::F64 => {
                    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
                    f64::from_le_bytes(buf)
                }
            };
            row.push(v);
        }
        rows.push(row);
    }
    Ok((props.into_iter().map(|(n, _)| n).collect(), rows))
}

pub fn write_points(path: &Path, points: &[[f64; 3]]) -> Result<()> {
    write_vertices(path, &["x", "y", "z"], Scalar::F32, points.iter().map(|p| p.to_vec()))
}

pub fn read_points(path: &Path) -> Result<Vec<[f64; 3]>> {
    let (names, rows) = read_vertices(path)?;
    let col = |n: &str| {
        names.iter().position(|x| x == n).ok_or_else(|| Error::Format {
            format: "ply",
            path: path.into(),
            reason: format!("missing property {n}"),
        })
    };
    let (x, y, z) = (col("x")?, col("y")?, col("z")?);
    Ok(rows.iter().map(|r| [r[x], r[y], r[z]]).collect())
}

/// Stores raw parameters (log-scales, unnormalized quaternion, logits) in
/// double precision so a scene reloads bit-exactly.
pub fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    let rows = (0..scene.len()).map(|i| {
        let mut r = Vec::with_capacity(12);
        r.extend_from_slice(&scene.means[i]);
        r.extend_from_slice(&scene.log_scales[i]);
        r.extend_from_slice(&scene.rotations[i]);
        r.push(scene.intensity_logits[i]);
        r.push(scene.opacity_logits[i]);
        r
    });
    write_vertices(path, &SCENE_PROPERTIES, Scalar::F64, rows)
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let (names, rows) = read_vertices(path)?;
    if names != SCENE_PROPERTIES {
        return Err(Error::Format {
            format: "ply",
            path: path.into(),
            reason: "not a Gaussian scene".into(),
        });
    }
    Ok(Scene::from_gaussians(rows.iter().map(|r| Gaussian3D {
        mean: Vector3::new(r[0], r[1], r[2]),
        log_scales: Vector3::new(r[3], r[4], r[5]),
        rotation: [r[6], r[7], r[8], r[9]],
        intensity_logit: r[10],
        opacity_logit: r[11],
    })))
}
