use rand::Rng;

use crate::attention::{random_features, sinusoidal_embedding, FeatureMatrix};
use crate::error::{Error, Result};
use crate::geom::{project_point, Pixel};
use crate::linalg::Matrix;
use crate::scalar::Real;

use super::config::FeatureMode;
use super::scene::SyntheticScene;

/// Coordinate scale of the per-pixel embedding. At `π` the kernel between
/// two integer pixels drops to at most 0.879 away from the diagonal.
pub const FINE_FREQUENCY: f64 = std::f64::consts::PI;
/// Matching score of a point and its exact pixel.
pub const FINE_GAIN: f64 = 600.0;
/// Halfway between the exact-pixel score and the best off-pixel score.
pub const FINE_SLACK: f64 = FINE_GAIN * 0.94;
/// Matching score of a proxy whose points all fall in one patch.
pub const COARSE_GAIN: f64 = 200.0;
/// Low enough that a proxy with a single point in the image still claims
/// its patch, while proxies outside keep their mass in the slack row.
pub const COARSE_SLACK: f64 = 1.0;
/// Grid coordinate embedded for points behind the camera.
pub const BEHIND_SENTINEL: f64 = -1000.0;

/// Matching features for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFeatures<T> {
    /// One row per patch, row-major over the patch grid.
    pub patch: FeatureMatrix<T>,
    /// One row per grid pixel, indexed `v * width + u`.
    pub pixel: FeatureMatrix<T>,
    /// Per point, compared against patches.
    pub point_coarse: FeatureMatrix<T>,
    /// Per point, compared against pixels.
    pub point_fine: FeatureMatrix<T>,
}

/// `[emb(σu), emb(σv)]` with `d / 2` channels per axis, scaled so that the
/// pairwise score `<a, b> / √d` of two equal coordinates equals `gain`.
pub fn embed_pixels<T: Real>(coords: &[(T, T)], d: usize, frequency: f64, gain: f64) -> Result<FeatureMatrix<T>> {
    if d % 4 != 0 {
        return Err(Error::OddChannels(d));
    }
    let s = T::lit(frequency);
    let us: Vec<T> = coords.iter().map(|c| c.0 * s).collect();
    let vs: Vec<T> = coords.iter().map(|c| c.1 * s).collect();
    let eu = sinusoidal_embedding(&us, d / 2)?;
    let ev = sinusoidal_embedding(&vs, d / 2)?;
    let amp = T::lit((gain * (d as f64).sqrt() / (d as f64 / 2.0)).sqrt());
    Ok(Matrix::from_fn(coords.len(), d, |r, c| {
        amp * if c < d / 2 { eu[(r, c)] } else { ev[(r, c - d / 2)] }
    }))
}

/// Scene features. In oracle mode every pixel embeds its own coordinate and
/// every point its ground-truth grid projection, so true matches score
/// highest. At the patch level a patch carries its cell code and a point the
/// code of the patch it lands in, or zero outside the image. Random mode
/// draws everything from a seeded Gaussian.
pub fn oracle_features<T: Real, R: Rng + ?Sized>(
    scene: &SyntheticScene<T>,
    mode: FeatureMode,
    d: usize,
    rng: &mut R,
) -> Result<SceneFeatures<T>> {
    let layout = scene.layout;
    let (gw, gh) = (layout.width(), layout.height());
    let n = scene.cloud.len();
    if mode == FeatureMode::Random {
        return Ok(SceneFeatures {
            patch: random_features(layout.num_patches(), d, rng),
            pixel: random_features(gw * gh, d, rng),
            point_coarse: random_features(n, d, rng),
            point_fine: random_features(n, d, rng),
        });
    }
    let k = scene.grid_intrinsics();
    let sentinel = T::lit(BEHIND_SENTINEL);
    let projections: Vec<(T, T)> = scene
        .cloud
        .points()
        .iter()
        .map(|&p| match project_point(&k, &scene.gt_pose, p) {
            Ok(px) => (px.u, px.v),
            Err(_) => (sentinel, sentinel),
        })
        .collect();
    let cells: Vec<Option<usize>> = projections
        .iter()
        .map(|&(u, v)| {
            let px = Pixel::new(u, v);
            if k.contains(&px) {
                layout.patch_of(&px)
            } else {
                None
            }
        })
        .collect();
    let all: Vec<Option<usize>> = (0..layout.num_patches()).map(Some).collect();
    let pixels: Vec<(T, T)> = (0..gw * gh)
        .map(|i| (T::from_usize_lossy(i % gw), T::from_usize_lossy(i / gw)))
        .collect();
    Ok(SceneFeatures {
        patch: embed_cells(&all, layout.grid_cols, layout.grid_rows, d, COARSE_GAIN),
        pixel: embed_pixels(&pixels, d, FINE_FREQUENCY, FINE_GAIN)?,
        point_coarse: embed_cells(&cells, layout.grid_cols, layout.grid_rows, d, COARSE_GAIN),
        point_fine: embed_pixels(&projections, d, FINE_FREQUENCY, FINE_GAIN)?,
    })
}

/// Wave vectors `(m, n)` of the periodic `cols × rows` lattice, one per
/// conjugate pair, with real-valued modes left out. When more than `pairs`
/// exist, modes are dropped greedily to keep the code kernel small between
/// nearby columns, where a proxy's patches compete.
fn lattice_modes(cols: usize, rows: usize, pairs: usize) -> Vec<(usize, usize)> {
    let mut modes = Vec::new();
    for n in 0..rows {
        for m in 0..cols {
            let conj = ((cols - m) % cols, (rows - n) % rows);
            if (m, n) != conj && (n, m) < (conj.1, conj.0) {
                modes.push((m, n));
            }
        }
    }
    let offsets: Vec<(usize, usize)> = (0..rows)
        .flat_map(|dr| (0..cols).map(move |dc| (dc, dr)))
        .skip(1)
        .collect();
    let weight: Vec<f64> = offsets.iter().map(|&(dc, _)| (-(dc.min(cols - dc) as f64)).exp()).collect();
    let phase = |(m, n): (usize, usize), (dc, dr): (usize, usize)| {
        (std::f64::consts::TAU * ((m * dc) as f64 / cols as f64 + (n * dr) as f64 / rows as f64)).cos()
    };
    let mut sums: Vec<f64> = offsets.iter().map(|&o| modes.iter().map(|&md| phase(md, o)).sum()).collect();
    while modes.len() > pairs {
        let cost = |drop: usize| -> f64 {
            offsets
                .iter()
                .zip(&sums)
                .zip(&weight)
                .map(|((&o, s), w)| w * (s - phase(modes[drop], o)).powi(2))
                .sum()
        };
        let drop = (0..modes.len()).min_by(|&a, &b| cost(a).total_cmp(&cost(b))).unwrap_or(0);
        for (s, &o) in sums.iter_mut().zip(&offsets) {
            *s -= phase(modes[drop], o);
        }
        modes.remove(drop);
    }
    modes
}

/// Plane-wave code of a patch cell on the periodic patch lattice, zero for
/// `None`. Channels `2k, 2k+1` hold the cosine and sine of the `k`-th lattice
/// mode. Equal cells score `gain`, distinct cells close to zero; with fewer
/// channels than cells the codes cannot all be orthogonal.
pub fn embed_cells<T: Real>(cells: &[Option<usize>], cols: usize, rows: usize, d: usize, gain: f64) -> FeatureMatrix<T> {
    let modes = lattice_modes(cols, rows, d / 2);
    let pairs = modes.len();
    let amp = (gain * (d as f64).sqrt() / pairs.max(1) as f64).sqrt();
    let mut out = Matrix::zeros(cells.len(), d);
    for (r, cell) in cells.iter().enumerate() {
        let Some(c) = *cell else { continue };
        let (col, row) = ((c % cols) as f64, (c / cols) as f64);
        for (k, &(m, n)) in modes.iter().enumerate() {
            let theta = std::f64::consts::TAU * (m as f64 * col / cols as f64 + n as f64 * row / rows as f64);
            out[(r, 2 * k)] = T::lit(amp * theta.cos());
            out[(r, 2 * k + 1)] = T::lit(amp * theta.sin());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;

    #[test]
    fn equal_coordinates_score_the_gain() {
        let f = embed_pixels(&[(3.0f64, 7.0), (3.0, 7.0), (4.0, 7.0)], 64, FINE_FREQUENCY, FINE_GAIN).unwrap();
        let s = |i, j| dot(f.row(i), f.row(j)) / 8.0;
        assert!((s(0, 1) - FINE_GAIN).abs() < 1e-9);
        assert!(s(0, 2) < FINE_GAIN * 0.88);
    }

    #[test]
    fn cell_codes_are_nearly_orthogonal() {
        let cells: Vec<Option<usize>> = (0..80).map(Some).chain([None]).collect();
        let f: Matrix<f64> = embed_cells(&cells, 16, 5, 64, 200.0);
        let s = |i, j| dot(f.row(i), f.row(j)) / 8.0;
        for i in 0..80 {
            assert!((s(i, i) - 200.0).abs() < 1e-9);
            for j in 0..80 {
                let dc = (i % 16).abs_diff(j % 16);
                let bound = if dc.min(16 - dc) <= 2 { 0.1 } else { 0.3 };
                if i != j {
                    assert!(s(i, j).abs() < bound * 200.0, "{i} {j} {}", s(i, j));
                }
            }
        }
        assert!(f.row(80).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn small_lattice_keeps_every_mode() {
        // 4×3 has 12 cells: (0,0) and (2,0) are real, the other 10 form 5 pairs.
        assert_eq!(lattice_modes(4, 3, 100).len(), 5);
        let cells: Vec<Option<usize>> = (0..12).map(Some).collect();
        let f: Matrix<f64> = embed_cells(&cells, 4, 3, 16, 1.0);
        assert!((dot(f.row(5), f.row(5)) / 4.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn own_pixel_is_the_best_match() {
        let pixels: Vec<(f64, f64)> = (0..40 * 128).map(|i| ((i % 128) as f64, (i / 128) as f64)).collect();
        let f = embed_pixels(&pixels, 64, FINE_FREQUENCY, FINE_GAIN).unwrap();
        for probe in [0, 77, 1000, 5119] {
            let best = (0..pixels.len())
                .max_by(|&a, &b| dot(f.row(probe), f.row(a)).total_cmp(&dot(f.row(probe), f.row(b))))
                .unwrap();
            assert_eq!(best, probe);
        }
    }
}
