//! Coarse-to-fine resampling: fixed-size point and pixel batches per matched
//! point proxy, with binary validity masks.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::ProxyDecomposition;
use crate::error::{Error, Result};
use crate::geom::Pixel;
use crate::scalar::Real;
use crate::transport::ScoreMatrix;

pub const DEFAULT_POINTS_PER_PROXY: usize = 65;
pub const DEFAULT_TOP_PATCHES: usize = 3;
pub const DEFAULT_PATCH_SIZE: usize = 8;

/// Non-overlapping `w × w` patches tiling an image, numbered row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLayout {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub w: usize,
}

impl PatchLayout {
    /// Layout for a `width × height` image; `w` must divide both.
    pub fn for_image(width: usize, height: usize, w: usize) -> Result<Self> {
        if w == 0 || width % w != 0 || height % w != 0 || width == 0 || height == 0 {
            return Err(Error::InvalidConfig(format!(
                "patch size {w} does not tile a {width}x{height} image"
            )));
        }
        Ok(Self {
            grid_rows: height / w,
            grid_cols: width / w,
            w,
        })
    }

    #[inline]
    pub fn num_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    #[inline]
    pub fn pixels_per_patch(&self) -> usize {
        self.w * self.w
    }

    pub fn width(&self) -> usize {
        self.grid_cols * self.w
    }

    pub fn height(&self) -> usize {
        self.grid_rows * self.w
    }

    /// Top-left pixel `(u0, v0)` of patch `i`.
    #[inline]
    pub fn origin(&self, i: usize) -> (usize, usize) {
        ((i % self.grid_cols) * self.w, (i / self.grid_cols) * self.w)
    }

    /// Integer pixel coordinates of patch `i`, row-major.
    pub fn patch_pixels<T: Real>(&self, i: usize) -> Vec<Pixel<T>> {
        let (u0, v0) = self.origin(i);
        let mut out = Vec::with_capacity(self.pixels_per_patch());
        for dv in 0..self.w {
            for du in 0..self.w {
                out.push(Pixel::new(
                    T::from_usize_lossy(u0 + du),
                    T::from_usize_lossy(v0 + dv),
                ));
            }
        }
        out
    }

    /// Patch whose half-open range `[u0, u0+w) × [v0, v0+w)` holds `px`.
    pub fn patch_of<T: Real>(&self, px: &Pixel<T>) -> Option<usize> {
        if !(px.u >= T::zero() && px.v >= T::zero()) {
            return None;
        }
        let w = T::from_usize_lossy(self.w);
        let col = (px.u / w).floor().to_usize()?;
        let row = (px.v / w).floor().to_usize()?;
        if col >= self.grid_cols || row >= self.grid_rows {
            return None;
        }
        Some(row * self.grid_cols + col)
    }

    /// Linear index `v * width + u` of an integer pixel.
    #[inline]
    pub fn pixel_index(&self, u: usize, v: usize) -> usize {
        v * self.width() + u
    }
}

/// Which coarse matrix drives the resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleFrom {
    GroundTruth,
    #[default]
    Predicted,
}

/// Points and pixels resampled for one matched point proxy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch<T> {
    pub proxy_index: usize,
    pub point_indices: Vec<usize>,
    pub point_mask: Vec<bool>,
    pub patch_indices: Vec<usize>,
    pub pixel_coords: Vec<Pixel<T>>,
    pub pixel_mask: Vec<bool>,
}

impl<T: Real> SampleBatch<T> {
    pub fn valid_points(&self) -> usize {
        self.point_mask.iter().filter(|&&m| m).count()
    }

    pub fn valid_pixels(&self) -> usize {
        self.pixel_mask.iter().filter(|&&m| m).count()
    }
}

/// Columns of the coarse matrix with a positive sum, ascending.
pub fn select_matched_proxies<T: Real>(s: &ScoreMatrix<T>) -> Vec<usize> {
    let (r, c) = (s.inner_rows(), s.inner_cols());
    (0..c)
        .filter(|&j| (0..r).map(|i| s.get(i, j)).sum::<T>() > T::zero())
        .collect()
}

/// Independent RNG stream for proxy `j` under a run seed.
pub fn proxy_rng(seed: u64, j: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(j as u64 + 1);
    rng
}

/// `n` member indices of a group with the validity mask.
///
/// Large groups are subsampled uniformly without replacement. Small groups
/// list every member once (mask 1) and then repeat members cyclically
/// (mask 0) until `n` entries exist.
pub fn sample_group<R: Rng + ?Sized>(members: &[usize], n: usize, rng: &mut R) -> Result<(Vec<usize>, Vec<bool>)> {
    if n == 0 {
        return Err(Error::InvalidConfig("points per proxy must be positive".into()));
    }
    if members.is_empty() {
        return Err(Error::EmptyList);
    }
    if members.len() >= n {
        let picks = index::sample(rng, members.len(), n);
        let idx = picks.into_iter().map(|p| members[p]).collect();
        return Ok((idx, vec![true; n]));
    }
    let idx = (0..n).map(|i| members[i % members.len()]).collect();
    let mask = (0..n).map(|i| i < members.len()).collect();
    Ok((idx, mask))
}

/// [`sample_group`] over group `j` of a decomposition.
pub fn sample_points<R: Rng + ?Sized>(
    decomp: &ProxyDecomposition,
    j: usize,
    n: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<bool>)> {
    if j >= decomp.num_groups() {
        return Err(Error::IndexOutOfRange {
            index: j,
            len: decomp.num_groups(),
        });
    }
    sample_group(decomp.members(j), n, rng)
}

/// Selected patches, their pixels and the pixel mask for column `j`.
pub type PixelSample<T> = (Vec<usize>, Vec<Pixel<T>>, Vec<bool>);

/// The `k` highest-scoring patches of column `j` (ties to the lower row).
/// Patches with a zero score fill the tail with mask 0.
pub fn sample_pixels<T: Real>(
    s: &ScoreMatrix<T>,
    j: usize,
    k: usize,
    layout: &PatchLayout,
) -> Result<PixelSample<T>> {
    let rows = s.inner_rows();
    if rows != layout.num_patches() {
        return Err(Error::DimensionMismatch(format!(
            "{rows} score rows for {} patches",
            layout.num_patches()
        )));
    }
    if j >= s.inner_cols() {
        return Err(Error::IndexOutOfRange {
            index: j,
            len: s.inner_cols(),
        });
    }
    if k == 0 || k > rows {
        return Err(Error::InvalidConfig(format!("cannot pick {k} of {rows} patches")));
    }
    let mut order: Vec<usize> = (0..rows).collect();
    order.sort_by(|&a, &b| {
        s.get(b, j)
            .partial_cmp(&s.get(a, j))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    let ppp = layout.pixels_per_patch();
    let mut coords = Vec::with_capacity(k * ppp);
    let mut mask = Vec::with_capacity(k * ppp);
    for &p in &order {
        let valid = s.get(p, j) > T::zero();
        coords.extend(layout.patch_pixels::<T>(p));
        mask.extend(std::iter::repeat_n(valid, ppp));
    }
    Ok((order, coords, mask))
}

/// Full batch for proxy `j`: points from `decomp`, pixels from `s`.
pub fn build_batch<T: Real, R: Rng + ?Sized>(
    s: &ScoreMatrix<T>,
    decomp: &ProxyDecomposition,
    j: usize,
    n: usize,
    k: usize,
    layout: &PatchLayout,
    rng: &mut R,
) -> Result<SampleBatch<T>> {
    let (point_indices, point_mask) = sample_points(decomp, j, n, rng)?;
    let (patch_indices, pixel_coords, pixel_mask) = sample_pixels(s, j, k, layout)?;
    Ok(SampleBatch {
        proxy_index: j,
        point_indices,
        point_mask,
        patch_indices,
        pixel_coords,
        pixel_mask,
    })
}
