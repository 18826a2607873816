//! File formats: point clouds, scenes, parameter sets and batch dumps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, RigidTransform};
use crate::linalg::Vec3;
use crate::pipeline::{ModelParams, SyntheticScene, TensorShape};
use crate::sampling::{PatchLayout, SampleBatch};
use crate::scalar::Real;

fn parse_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Parse(format!("{}:{line}: {msg}", path.display()))
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

/// Reads an ASCII PLY or a headerless `x,y,z` CSV, chosen by extension.
pub fn read_cloud<T: Real>(path: &Path) -> Result<PointCloud<T>> {
    let text = fs::read_to_string(path)?;
    let points = match extension(path).as_str() {
        "ply" => parse_ply(path, &text)?,
        "csv" => parse_xyz_csv(path, &text)?,
        other => return Err(Error::Parse(format!("unknown cloud extension {other:?}"))),
    };
    PointCloud::new(points)
}

pub fn write_cloud<T: Real>(path: &Path, cloud: &PointCloud<T>) -> Result<()> {
    let text = match extension(path).as_str() {
        "ply" => ply_text(cloud),
        "csv" => {
            let mut s = String::new();
            for p in cloud.points() {
                let _ = writeln!(s, "{},{},{}", p.x, p.y, p.z);
            }
            s
        }
        other => return Err(Error::Parse(format!("unknown cloud extension {other:?}"))),
    };
    fs::write(path, text)?;
    Ok(())
}

fn ply_text<T: Real>(cloud: &PointCloud<T>) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        cloud.len()
    );
    for p in cloud.points() {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    s
}

fn parse_ply<T: Real>(path: &Path, text: &str) -> Result<Vec<Vec3<T>>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(parse_err(path, 1, "missing ply magic")),
    }
    let mut count = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    for (i, line) in lines.by_ref() {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => return Err(parse_err(path, i + 1, "only ascii ply is supported")),
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|e| parse_err(path, i + 1, e))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", _, name] if in_vertex => props.push(name.to_string()),
            ["end_header"] => break,
            _ => {}
        }
    }
    let count = count.ok_or_else(|| parse_err(path, 0, "no vertex element"))?;
    let col = |name: &str| {
        props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| parse_err(path, 0, format!("no {name} property")))
    };
    let (cx, cy, cz) = (col("x")?, col("y")?, col("z")?);
    let mut out = Vec::with_capacity(count);
    for (i, line) in lines.take(count) {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|w| w.parse::<f64>().map_err(|e| parse_err(path, i + 1, e)))
            .collect::<Result<_>>()?;
        if vals.len() < props.len() {
            return Err(parse_err(path, i + 1, "short vertex line"));
        }
        out.push(Vec3::new(T::lit(vals[cx]), T::lit(vals[cy]), T::lit(vals[cz])));
    }
    if out.len() != count {
        return Err(parse_err(path, 0, format!("expected {count} vertices, found {}", out.len())));
    }
    Ok(out)
}

fn parse_xyz_csv<T: Real>(path: &Path, text: &str) -> Result<Vec<Vec3<T>>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|w| w.trim().parse::<f64>().map_err(|e| parse_err(path, i + 1, e)))
            .collect::<Result<_>>()?;
        if vals.len() != 3 {
            return Err(parse_err(path, i + 1, "expected x,y,z"));
        }
        out.push(Vec3::new(T::lit(vals[0]), T::lit(vals[1]), T::lit(vals[2])));
    }
    Ok(out)
}

/// Sidecar of a flat parameter file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsMeta {
    pub seed: u64,
    pub d: usize,
    pub rounds: usize,
    pub shapes: Vec<TensorShape>,
}

/// `params.bin` keeps its sidecar in `params.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes every tensor as little-endian `f64` plus the JSON sidecar.
pub fn write_params<T: Real>(path: &Path, params: &ModelParams<T>, seed: u64) -> Result<()> {
    let (values, shapes) = params.to_flat();
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in &values {
        bytes.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
    }
    fs::write(path, bytes)?;
    let d = params.aggregate[0].output_dim();
    let meta = ParamsMeta {
        seed,
        d,
        rounds: params.rounds(),
        shapes,
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

pub fn read_params<T: Real>(path: &Path) -> Result<(ModelParams<T>, ParamsMeta)> {
    let meta: ParamsMeta = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)
        .map_err(|e| Error::Parse(e.to_string()))?;
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Parse(format!("{} bytes is not a whole number of f64", bytes.len())));
    }
    let values: Vec<T> = bytes
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("chunk of 8"))))
        .collect();
    let mut params = ModelParams::pass_through(meta.d, meta.rounds);
    params.load_flat(&values, &meta.shapes)?;
    Ok((params, meta))
}

/// On-disk scene description; the cloud lives in a separate file next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub seed: u64,
    /// Row-major 3×3 intrinsics of the input image.
    pub intrinsics: [f64; 9],
    pub width: usize,
    pub height: usize,
    pub downsample: usize,
    pub patch_size: usize,
    /// Ground-truth world-to-camera pose as a 3×4 row-major line.
    pub gt_pose: String,
    /// Cloud path relative to the scene file.
    pub cloud: String,
}

/// Writes `scene.json`, the cloud as `cloud_name` and `gt_pose.txt` into `dir`.
pub fn write_scene<T: Real>(dir: &Path, scene: &SyntheticScene<T>, cloud_name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    write_cloud(&dir.join(cloud_name), &scene.cloud)?;
    let k = scene.intrinsics.to_flat().map(|v| v.to_f64_lossy());
    let pose = scene.gt_pose.to_pose_line();
    let file = SceneFile {
        seed: scene.seed,
        intrinsics: k,
        width: scene.intrinsics.width,
        height: scene.intrinsics.height,
        downsample: scene.downsample,
        patch_size: scene.layout.w,
        gt_pose: pose.clone(),
        cloud: cloud_name.to_string(),
    };
    let path = dir.join("scene.json");
    let json = serde_json::to_string_pretty(&file).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(&path, json)?;
    fs::write(dir.join("gt_pose.txt"), format!("{pose}\n"))?;
    Ok(path)
}

pub fn read_scene<T: Real>(path: &Path) -> Result<SyntheticScene<T>> {
    let file: SceneFile =
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Parse(e.to_string()))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let cloud = read_cloud(&dir.join(&file.cloud))?;
    let intrinsics = CameraIntrinsics::from_flat(&file.intrinsics.map(T::lit), file.width, file.height)?;
    let gt_pose = RigidTransform::from_pose_line(&file.gt_pose)?;
    let ds = file.downsample.max(1);
    if file.width % ds != 0 || file.height % ds != 0 {
        return Err(Error::InvalidConfig("downsample must divide the image size".into()));
    }
    let layout = PatchLayout::for_image(file.width / ds, file.height / ds, file.patch_size)?;
    Ok(SyntheticScene {
        cloud,
        intrinsics,
        gt_pose,
        layout,
        downsample: ds,
        seed: file.seed,
    })
}

/// First line of a pose file.
pub fn read_pose<T: Real>(path: &Path) -> Result<RigidTransform<T>> {
    let text = fs::read_to_string(path)?;
    let line = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::Parse(format!("{}: empty pose file", path.display())))?;
    RigidTransform::from_pose_line(line)
}

/// One JSON object per line.
pub fn batches_to_json_lines<T: Real + Serialize>(batches: &[SampleBatch<T>]) -> Result<String> {
    let mut out = String::new();
    for b in batches {
        out.push_str(&serde_json::to_string(b).map_err(|e| Error::Parse(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn batches_from_json_lines<T: Real + DeserializeOwned>(text: &str) -> Result<Vec<SampleBatch<T>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Parse(e.to_string())))
        .collect()
}
