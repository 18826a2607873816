//! Point-to-pixel matching inside each resampled batch and extraction of the
//! correspondence set.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attention::FeatureMatrix;
use crate::error::{Error, Result};
use crate::geom::Pixel;
use crate::linalg::Vec3;
use crate::sampling::SampleBatch;
use crate::scalar::Real;
use crate::transport::{add_slack, pairwise_scores, sinkhorn, strip_slack, ScoreMatrix};

/// Columns whose masked interior mass falls below this are dropped.
pub const MIN_COLUMN_MASS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMode {
    #[default]
    Argmax,
    Expectation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence<T> {
    pub pixel: Pixel<T>,
    pub point: Vec3<T>,
    pub confidence: T,
    pub proxy_index: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CorrespondenceSet<T> {
    pub entries: Vec<Correspondence<T>>,
}

impl<T: Real> CorrespondenceSet<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            entries: indices.iter().map(|&i| self.entries[i]).collect(),
        }
    }

    /// `u,v,x,y,z,confidence,proxy` with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("u,v,x,y,z,confidence,proxy\n");
        for c in &self.entries {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                c.pixel.u, c.pixel.v, c.point.x, c.point.y, c.point.z, c.confidence, c.proxy_index
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (n == 0 && line.starts_with('u')) {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 7 {
                return Err(Error::Parse(format!("line {}: expected 7 fields", n + 1)));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map(T::lit)
                    .map_err(|e| Error::Parse(format!("line {}: {s:?}: {e}", n + 1)))
            };
            entries.push(Correspondence {
                pixel: Pixel::new(num(f[0])?, num(f[1])?),
                point: Vec3::new(num(f[2])?, num(f[3])?, num(f[4])?),
                confidence: num(f[5])?,
                proxy_index: f[6]
                    .parse()
                    .map_err(|e| Error::Parse(format!("line {}: proxy: {e}", n + 1)))?,
            });
        }
        Ok(Self { entries })
    }
}

/// Masked scores, slack augmentation and Sinkhorn for one batch. The slack
/// row and column stay on the returned plan.
pub fn fine_match<T: Real>(
    f_pixels: &FeatureMatrix<T>,
    f_points: &FeatureMatrix<T>,
    pixel_mask: &[bool],
    point_mask: &[bool],
    sinkhorn_iters: usize,
    slack_value: T,
) -> Result<ScoreMatrix<T>> {
    if f_pixels.cols() != f_points.cols() {
        return Err(Error::DimensionMismatch("pixel and point channels differ".into()));
    }
    let d = pairwise_scores(f_pixels, f_points, f_pixels.cols(), Some(pixel_mask), Some(point_mask))?;
    sinkhorn(&add_slack(&d, slack_value)?, sinkhorn_iters)
}

/// Column-normalized, mask-filtered probabilities over the batch pixels for
/// every sampled point; `None` for masked or massless columns.
pub fn column_distributions<T: Real>(
    plan: &ScoreMatrix<T>,
    batch: &SampleBatch<T>,
) -> Result<Vec<Option<Vec<T>>>> {
    let s = strip_slack(plan)?;
    let (m, n) = (s.inner_rows(), s.inner_cols());
    if m != batch.pixel_coords.len() || n != batch.point_indices.len() {
        return Err(Error::DimensionMismatch(format!(
            "plan {m}x{n} for a batch of {} pixels and {} points",
            batch.pixel_coords.len(),
            batch.point_indices.len()
        )));
    }
    let floor = T::lit(MIN_COLUMN_MASS);
    Ok((0..n)
        .map(|j| {
            if !batch.point_mask[j] {
                return None;
            }
            let col: Vec<T> = (0..m)
                .map(|i| if batch.pixel_mask[i] { s.get(i, j) } else { T::zero() })
                .collect();
            let total: T = col.iter().copied().sum();
            if !(total >= floor) {
                return None;
            }
            Some(col.into_iter().map(|v| v / total).collect())
        })
        .collect())
}

/// Point-to-pixel correspondences of one batch, in sampled-point order.
pub fn extract_correspondences<T: Real>(
    plan: &ScoreMatrix<T>,
    batch: &SampleBatch<T>,
    points: &[Vec3<T>],
    mode: ExtractionMode,
) -> Result<Vec<Correspondence<T>>> {
    let dists = column_distributions(plan, batch)?;
    let mut out = Vec::new();
    for (j, dist) in dists.into_iter().enumerate() {
        let Some(p) = dist else { continue };
        let point = *points.get(batch.point_indices[j]).ok_or(Error::IndexOutOfRange {
            index: batch.point_indices[j],
            len: points.len(),
        })?;
        let (best, conf) = p
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        let pixel = match mode {
            ExtractionMode::Argmax => batch.pixel_coords[best],
            ExtractionMode::Expectation => {
                let (mut u, mut v) = (T::zero(), T::zero());
                for (w, px) in p.iter().zip(&batch.pixel_coords) {
                    u += *w * px.u;
                    v += *w * px.v;
                }
                Pixel::new(u, v)
            }
        };
        out.push(Correspondence {
            pixel,
            point,
            confidence: conf.min(T::one()),
            proxy_index: batch.proxy_index,
        });
    }
    Ok(out)
}

/// Correspondences of every batch ordered by proxy, filtered by confidence.
pub fn collect<T: Real>(
    batches: &[SampleBatch<T>],
    plans: &[ScoreMatrix<T>],
    points: &[Vec3<T>],
    mode: ExtractionMode,
    confidence_floor: T,
) -> Result<CorrespondenceSet<T>> {
    if batches.len() != plans.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} batches for {} plans",
            batches.len(),
            plans.len()
        )));
    }
    let mut order: Vec<usize> = (0..batches.len()).collect();
    order.sort_by_key(|&i| batches[i].proxy_index);
    let mut entries = Vec::new();
    for i in order {
        let found = extract_correspondences(&plans[i], &batches[i], points, mode)?;
        entries.extend(found.into_iter().filter(|c| c.confidence >= confidence_floor));
    }
    Ok(CorrespondenceSet { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    fn batch(m: usize, n: usize) -> SampleBatch<f64> {
        SampleBatch {
            proxy_index: 4,
            point_indices: (0..n).collect(),
            point_mask: vec![true; n],
            patch_indices: vec![0],
            pixel_coords: (0..m).map(|i| Pixel::new(2.0 * i as f64, 0.0)).collect(),
            pixel_mask: vec![true; m],
        }
    }

    fn plan(rows: &[Vec<f64>]) -> ScoreMatrix<f64> {
        ScoreMatrix {
            values: Matrix::from_rows(rows).unwrap(),
            has_slack: true,
        }
    }

    #[test]
    fn one_hot_column_same_in_both_modes() {
        let b = batch(2, 1);
        let p = plan(&[vec![0.0, 0.0], vec![0.7, 0.3], vec![0.3, 0.0]]);
        let pts = vec![Vec3::new(1.0, 2.0, 3.0)];
        for mode in [ExtractionMode::Argmax, ExtractionMode::Expectation] {
            let c = extract_correspondences(&p, &b, &pts, mode).unwrap();
            assert_eq!(c.len(), 1);
            assert_eq!(c[0].pixel, Pixel::new(2.0, 0.0));
            assert_eq!(c[0].confidence, 1.0);
            assert_eq!(c[0].proxy_index, 4);
        }
    }

    #[test]
    fn uniform_column_expectation_is_the_mean() {
        let b = batch(2, 1);
        let p = plan(&[vec![0.25, 0.0], vec![0.25, 0.0], vec![0.5, 0.0]]);
        let pts = vec![Vec3::new(0.0, 0.0, 1.0)];
        let c = extract_correspondences(&p, &b, &pts, ExtractionMode::Expectation).unwrap();
        assert_eq!(c[0].pixel, Pixel::new(1.0, 0.0));
        assert_eq!(c[0].confidence, 0.5);
    }

    #[test]
    fn masked_and_massless_columns_dropped() {
        let mut b = batch(2, 3);
        b.point_mask[1] = false;
        let p = plan(&[
            vec![0.5, 0.5, 0.0, 0.0],
            vec![0.5, 0.5, 1e-14, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ]);
        let pts = vec![Vec3::zeros(); 3];
        let c = extract_correspondences(&p, &b, &pts, ExtractionMode::Argmax).unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn empty_collection() {
        let c = collect::<f64>(&[], &[], &[], ExtractionMode::Argmax, 0.0).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn csv_round_trip() {
        let set = CorrespondenceSet {
            entries: vec![Correspondence {
                pixel: Pixel::new(3.0, 4.5),
                point: Vec3::new(-1.0, 0.25, 7.0),
                confidence: 0.75,
                proxy_index: 2,
            }],
        };
        assert_eq!(CorrespondenceSet::<f64>::from_csv(&set.to_csv()).unwrap(), set);
        assert!(CorrespondenceSet::<f64>::from_csv("u,v\n1,2\n").is_err());
    }
}
