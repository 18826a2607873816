use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geom::{project_cloud, CameraIntrinsics, RigidTransform};
use crate::linalg::Vec3;
use crate::sampling::PatchLayout;
use crate::scalar::Real;

use super::config::PipelineConfig;

const CAMERA_HEIGHT: f64 = 1.6;
const WALL_DEPTH: f64 = 40.0;
const BEHIND_FRACTION: f64 = 0.15;
/// Out-of-image points project at most this fraction of the image size
/// beyond its border. A wider band leaves few proxies inside the image.
const OUTSIDE_BAND: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene<T: Real> {
    pub cloud: PointCloud<T>,
    /// Intrinsics of the input image.
    pub intrinsics: CameraIntrinsics<T>,
    /// World-to-camera ground truth.
    pub gt_pose: RigidTransform<T>,
    pub layout: PatchLayout,
    pub downsample: usize,
    pub seed: u64,
}

impl<T: Real> SyntheticScene<T> {
    /// Intrinsics of the matching grid.
    pub fn grid_intrinsics(&self) -> CameraIntrinsics<T> {
        scale_intrinsics(&self.intrinsics, self.downsample)
    }

    /// Fraction of the cloud projecting into the image under the ground truth.
    pub fn frustum_fraction(&self) -> f64 {
        let inside = project_cloud(&self.intrinsics, &self.gt_pose, self.cloud.points()).len();
        inside as f64 / self.cloud.len().max(1) as f64
    }
}

pub fn scale_intrinsics<T: Real>(k: &CameraIntrinsics<T>, factor: usize) -> CameraIntrinsics<T> {
    let s = T::from_usize_lossy(factor.max(1));
    CameraIntrinsics {
        fx: k.fx / s,
        fy: k.fy / s,
        cx: k.cx / s,
        cy: k.cy / s,
        width: k.width / factor.max(1),
        height: k.height / factor.max(1),
    }
}

pub fn scene_intrinsics<T: Real>(config: &PipelineConfig) -> Result<CameraIntrinsics<T>> {
    let f = config.focal_ratio * config.image_width as f64;
    CameraIntrinsics::new(
        T::lit(f),
        T::lit(f),
        T::lit(config.image_width as f64 / 2.0),
        T::lit(config.image_height as f64 / 2.0),
        config.image_width,
        config.image_height,
    )
}

struct Blob {
    center: Vec3<f64>,
    radius: f64,
}

/// Depth along the ray `(x, y, 1)` to the nearest surface: blobs, the ground
/// below the camera, or the back wall.
fn ray_depth(blobs: &[Blob], x: f64, y: f64) -> f64 {
    let mut best = WALL_DEPTH;
    if y > 0.0 {
        best = best.min(CAMERA_HEIGHT / y);
    }
    let d = Vec3::new(x, y, 1.0);
    let dd = d.norm_squared();
    for b in blobs {
        let half_b = d.dot(b.center);
        let c = b.center.norm_squared() - b.radius * b.radius;
        let disc = half_b * half_b - dd * c;
        if disc < 0.0 {
            continue;
        }
        let t = (half_b - disc.sqrt()) / dd;
        if t > 0.0 {
            best = best.min(t);
        }
    }
    best
}

fn random_blobs<R: Rng + ?Sized>(rng: &mut R) -> Vec<Blob> {
    let count = rng.random_range(4..=8);
    (0..count)
        .map(|_| {
            let z: f64 = rng.random_range(5.0..30.0);
            Blob {
                center: Vec3::new(
                    rng.random_range(-1.5..1.5) * z,
                    rng.random_range(-0.15..0.1) * z,
                    z,
                ),
                radius: rng.random_range(0.5..3.0),
            }
        })
        .collect()
}

/// Camera-frame points. In-image points sit on distinct integer pixels of
/// the matching grid when there are few enough of them; the rest lie in a
/// band at least one patch outside the image, some mirrored behind the camera.
fn camera_points<R: Rng + ?Sized>(config: &PipelineConfig, rng: &mut R) -> Vec<Vec3<f64>> {
    let (gw, gh) = (config.grid_width() as f64, config.grid_height() as f64);
    let f = config.focal_ratio * gw;
    let (cx, cy) = (gw / 2.0, gh / 2.0);
    let blobs = random_blobs(rng);
    let at = |u: f64, v: f64| {
        let (x, y) = ((u - cx) / f, (v - cy) / f);
        let z = ray_depth(&blobs, x, y);
        Vec3::new(x * z, y * z, z)
    };

    let n = config.num_points;
    let n_in = ((config.inside_fraction * n as f64).round() as usize).min(n);
    let pixels = config.grid_width() * config.grid_height();
    let mut out = Vec::with_capacity(n);
    if n_in <= pixels {
        for p in index::sample(rng, pixels, n_in) {
            let (u, v) = (p % config.grid_width(), p / config.grid_width());
            out.push(at(u as f64, v as f64));
        }
    } else {
        for _ in 0..n_in {
            out.push(at(rng.random_range(0.0..gw - 1.0), rng.random_range(0.0..gh - 1.0)));
        }
    }
    let margin = config.patch_size as f64;
    while out.len() < n {
        let u = rng.random_range(-OUTSIDE_BAND * gw..(1.0 + OUTSIDE_BAND) * gw);
        let v = rng.random_range(-OUTSIDE_BAND * gh..(1.0 + OUTSIDE_BAND) * gh);
        let near_image = u > -margin && u < gw + margin && v > -margin && v < gh + margin;
        if near_image {
            continue;
        }
        let p = at(u, v);
        out.push(if rng.random::<f64>() < BEHIND_FRACTION { -p } else { p });
    }
    out
}

/// A seeded scene: blobs, ground and a back wall seen by a canonical camera,
/// moved into the world frame by the inverse of a random ground-plane pose.
pub fn generate_scene<T: Real, R: Rng + ?Sized>(config: &PipelineConfig, rng: &mut R) -> Result<SyntheticScene<T>> {
    config.validate()?;
    let intrinsics = scene_intrinsics::<T>(config)?;
    let layout = config.layout()?;
    for _ in 0..config.max_retries.max(1) {
        let mut cam = camera_points(config, rng);
        cam.shuffle(rng);
        let gt_pose: RigidTransform<T> = config.pose.sample(rng);
        let inv = gt_pose.inverse();
        let points: Vec<Vec3<T>> = cam.iter().map(|p| inv.apply(p.cast())).collect();
        let scene = SyntheticScene {
            cloud: PointCloud::new(points)?,
            intrinsics,
            gt_pose,
            layout,
            downsample: config.downsample,
            seed: config.seed,
        };
        if scene.frustum_fraction() >= config.min_frustum_fraction {
            return Ok(scene);
        }
    }
    Err(Error::RetryExhausted(config.max_retries.max(1)))
}
