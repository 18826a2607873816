//! Ground-truth weight matrices and the weighted negative log-likelihood
//! losses for the coarse (set-to-patch) and fine (point-to-pixel) plans.

use serde::{Deserialize, Serialize};

use crate::cloud::ProxyDecomposition;
use crate::error::{Error, Result};
use crate::geom::{project_point, CameraIntrinsics, RigidTransform};
use crate::linalg::{Matrix, Vec3};
use crate::sampling::{PatchLayout, SampleBatch};
use crate::scalar::Real;
use crate::transport::{marginal_targets, sinkhorn_log, sinkhorn_log_plan_vjp, ScoreMatrix};

/// Smallest value passed to `ln` inside the losses.
pub const LOG_FLOOR: f64 = 1e-30;
/// Default fine positive radius in pixels.
pub const DEFAULT_TAU: f64 = 1.0;

/// Per patch/set projection counts and the two ratio matrices
/// (`N_I × N_q`).
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseRatios<T> {
    /// Fraction of set `j` landing in patch `i`.
    pub r_left: Matrix<T>,
    /// Fraction of the points landing in patch `i` that come from set `j`.
    pub r_right: Matrix<T>,
    /// Points of set `j` landing in patch `i`.
    pub counts: Matrix<T>,
    /// All cloud points landing in patch `i`.
    pub patch_totals: Vec<usize>,
}

/// Patch hit by every point under the ground-truth pose (`None` when the
/// point is behind the camera or outside the image).
pub fn point_patches<T: Real>(
    k: &CameraIntrinsics<T>,
    gt: &RigidTransform<T>,
    points: &[Vec3<T>],
    layout: &PatchLayout,
) -> Vec<Option<usize>> {
    points
        .iter()
        .map(|&p| match project_point(k, gt, p) {
            Ok(px) if k.contains(&px) => layout.patch_of(&px),
            _ => None,
        })
        .collect()
}

/// Both projection ratio matrices from one projection pass.
pub fn coarse_ratios<T: Real>(
    k: &CameraIntrinsics<T>,
    gt: &RigidTransform<T>,
    points: &[Vec3<T>],
    decomp: &ProxyDecomposition,
    layout: &PatchLayout,
) -> Result<CoarseRatios<T>> {
    if decomp.num_points() != points.len() {
        return Err(Error::DimensionMismatch(format!(
            "decomposition covers {} points, cloud has {}",
            decomp.num_points(),
            points.len()
        )));
    }
    let (ni, nq) = (layout.num_patches(), decomp.num_groups());
    let mut counts = vec![0usize; ni * nq];
    let mut totals = vec![0usize; ni];
    for (idx, patch) in point_patches(k, gt, points, layout).into_iter().enumerate() {
        if let Some(i) = patch {
            counts[i * nq + decomp.assignment()[idx]] += 1;
            totals[i] += 1;
        }
    }
    let sizes = decomp.group_sizes();
    let count_at = |i: usize, j: usize| T::from_usize_lossy(counts[i * nq + j]);
    let r_left = Matrix::from_fn(ni, nq, |i, j| count_at(i, j) / T::from_usize_lossy(sizes[j]));
    let r_right = Matrix::from_fn(ni, nq, |i, j| {
        if totals[i] == 0 {
            T::zero()
        } else {
            count_at(i, j) / T::from_usize_lossy(totals[i])
        }
    });
    Ok(CoarseRatios {
        r_left,
        r_right,
        counts: Matrix::from_fn(ni, nq, count_at),
        patch_totals: totals,
    })
}

/// `(N_I + 1) × (N_q + 1)` coarse supervision weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseWeightMatrix<T> {
    pub values: Matrix<T>,
}

impl<T: Real> CoarseWeightMatrix<T> {
    /// Interior block, i.e. the ground-truth coarse score matrix.
    pub fn interior(&self) -> ScoreMatrix<T> {
        let (r, c) = (self.values.rows() - 1, self.values.cols() - 1);
        ScoreMatrix::new(Matrix::from_fn(r, c, |i, j| self.values[(i, j)]))
    }
}

fn clamp01<T: Real>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

/// Interior `min(r_left, r_right)`; the slack column holds
/// `1 − Σ_k r_right[i][k]`, the slack row `1 − Σ_k r_left[k][j]`.
pub fn coarse_weight_matrix<T: Real>(r_left: &Matrix<T>, r_right: &Matrix<T>) -> Result<CoarseWeightMatrix<T>> {
    if r_left.rows() != r_right.rows() || r_left.cols() != r_right.cols() {
        return Err(Error::DimensionMismatch("ratio matrices differ in shape".into()));
    }
    let (ni, nq) = (r_left.rows(), r_left.cols());
    let mut w = Matrix::zeros(ni + 1, nq + 1);
    for i in 0..ni {
        for j in 0..nq {
            w[(i, j)] = r_left[(i, j)].min(r_right[(i, j)]);
        }
        let s: T = r_right.row(i).iter().copied().sum();
        w[(i, nq)] = clamp01(T::one() - s);
    }
    for j in 0..nq {
        let s: T = (0..ni).map(|i| r_left[(i, j)]).sum();
        w[(ni, j)] = clamp01(T::one() - s);
    }
    Ok(CoarseWeightMatrix { values: w })
}

/// `−Σ W log S / Σ W`, or 0 when all weights vanish.
pub fn weighted_nll<T: Real>(plan: &Matrix<T>, weights: &Matrix<T>) -> Result<T> {
    if plan.rows() != weights.rows() || plan.cols() != weights.cols() {
        return Err(Error::DimensionMismatch(format!(
            "plan {}x{} vs weights {}x{}",
            plan.rows(),
            plan.cols(),
            weights.rows(),
            weights.cols()
        )));
    }
    let floor = T::lit(LOG_FLOOR);
    let mut num = T::zero();
    let mut den = T::zero();
    for (&s, &w) in plan.as_slice().iter().zip(weights.as_slice()) {
        if w == T::zero() {
            continue;
        }
        if !(s > T::zero()) || !s.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        num -= w * s.max(floor).ln();
        den += w;
    }
    if den == T::zero() {
        return Ok(T::zero());
    }
    let loss = num / den;
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFiniteLoss)
    }
}

/// Projected point proportion loss on the augmented coarse plan.
pub fn coarse_loss<T: Real>(plan_aug: &ScoreMatrix<T>, w: &CoarseWeightMatrix<T>) -> Result<T> {
    if !plan_aug.has_slack {
        return Err(Error::NoSlack);
    }
    weighted_nll(&plan_aug.values, &w.values)
}

/// Coarse loss of `sinkhorn(scores_aug)` and its gradient with respect to
/// every augmented score entry, by reverse differentiation through the
/// unrolled log-domain iterations.
pub fn coarse_loss_and_gradient<T: Real>(
    scores_aug: &ScoreMatrix<T>,
    w: &CoarseWeightMatrix<T>,
    iterations: usize,
) -> Result<(T, Matrix<T>)> {
    if !scores_aug.has_slack {
        return Err(Error::NoSlack);
    }
    let z = &scores_aug.values;
    if w.values.rows() != z.rows() || w.values.cols() != z.cols() {
        return Err(Error::DimensionMismatch("weights do not match scores".into()));
    }
    let (a, b) = marginal_targets::<T>(z.rows(), z.cols(), true);
    let sol = sinkhorn_log(z, &a, &b, iterations)?;
    let plan = sol.log_plan.map(|x| x.exp());
    let loss = weighted_nll(&plan, &w.values)?;
    let total: T = w.values.as_slice().iter().copied().sum();
    let floor = T::lit(LOG_FLOOR);
    let upstream = Matrix::from_fn(z.rows(), z.cols(), |i, j| {
        if total == T::zero() || plan[(i, j)] < floor {
            T::zero()
        } else {
            -w.values[(i, j)] / total
        }
    });
    let grad = sinkhorn_log_plan_vjp(z, &a, &b, iterations, &upstream)?;
    Ok((loss, grad))
}

/// `(m + 1) × (n + 1)` fine supervision weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineWeightMatrix<T> {
    pub values: Matrix<T>,
}

/// Binary interior marking sampled pixels within `tau` of a sampled point's
/// ground-truth projection, masked by both sampling masks; slack edges hold
/// `max(0, 1 − row/column sum)`.
pub fn fine_weight_matrix<T: Real>(
    batch: &SampleBatch<T>,
    k: &CameraIntrinsics<T>,
    gt: &RigidTransform<T>,
    points: &[Vec3<T>],
    tau: T,
) -> Result<FineWeightMatrix<T>> {
    let (m, n) = (batch.pixel_coords.len(), batch.point_indices.len());
    if batch.pixel_mask.len() != m || batch.point_mask.len() != n {
        return Err(Error::DimensionMismatch("batch masks".into()));
    }
    let projections: Vec<_> = batch
        .point_indices
        .iter()
        .map(|&idx| {
            points
                .get(idx)
                .copied()
                .ok_or(Error::IndexOutOfRange {
                    index: idx,
                    len: points.len(),
                })
                .map(|p| project_point(k, gt, p).ok())
        })
        .collect::<Result<_>>()?;
    let mut w = Matrix::zeros(m + 1, n + 1);
    for (i, px) in batch.pixel_coords.iter().enumerate() {
        if !batch.pixel_mask[i] {
            continue;
        }
        for (j, proj) in projections.iter().enumerate() {
            if !batch.point_mask[j] {
                continue;
            }
            if let Some(p) = proj {
                if px.distance(p) <= tau {
                    w[(i, j)] = T::one();
                }
            }
        }
    }
    for j in 0..n {
        let s: T = (0..m).map(|i| w[(i, j)]).sum();
        w[(m, j)] = (T::one() - s).max(T::zero());
    }
    for i in 0..m {
        let s: T = (0..n).map(|j| w[(i, j)]).sum();
        w[(i, n)] = (T::one() - s).max(T::zero());
    }
    Ok(FineWeightMatrix { values: w })
}

/// Per-proxy fine loss terms; `None` for proxies whose weights sum to 0.
pub fn fine_loss_terms<T: Real>(
    plans: &[ScoreMatrix<T>],
    weights: &[FineWeightMatrix<T>],
) -> Result<Vec<Option<T>>> {
    if plans.len() != weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} plans for {} weight matrices",
            plans.len(),
            weights.len()
        )));
    }
    plans
        .iter()
        .zip(weights)
        .map(|(p, w)| {
            if !p.has_slack {
                return Err(Error::NoSlack);
            }
            if w.values.as_slice().iter().all(|&x| x == T::zero()) {
                return Ok(None);
            }
            weighted_nll(&p.values, &w.values).map(Some)
        })
        .collect()
}

/// Sum of the per-proxy weighted negative log-likelihoods.
pub fn fine_loss<T: Real>(plans: &[ScoreMatrix<T>], weights: &[FineWeightMatrix<T>]) -> Result<T> {
    Ok(fine_loss_terms(plans, weights)?.into_iter().flatten().sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_term_loss() {
        let mut w = Matrix::zeros(3, 3);
        w[(1, 1)] = 1.0;
        let mut s = Matrix::filled(3, 3, 0.1);
        s[(1, 1)] = 0.5;
        let plan = ScoreMatrix { values: s, has_slack: true };
        let loss = coarse_loss(&plan, &CoarseWeightMatrix { values: w }).unwrap();
        assert!((loss - 0.5f64.ln().abs()).abs() < 1e-15);
    }

    #[test]
    fn perfect_plan_and_empty_weights() {
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let s = Matrix::from_rows(&[vec![1.0, 0.3], vec![0.2, 0.1]]).unwrap();
        assert_eq!(weighted_nll(&s, &w).unwrap(), 0.0);
        assert_eq!(weighted_nll(&s, &Matrix::zeros(2, 2)).unwrap(), 0.0);
        let zero = Matrix::zeros(2, 2);
        assert_eq!(weighted_nll(&zero, &w), Err(Error::NonFiniteLoss));
        let tiny = Matrix::from_rows(&[vec![1e-40, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!((weighted_nll(&tiny, &w).unwrap() - 1e-30f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn weight_matrix_slack_accounting() {
        let rl = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let rr = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let w = coarse_weight_matrix(&rl, &rr).unwrap().values;
        assert_eq!(w[(0, 0)], 1.0);
        assert_eq!(w[(0, 2)], 0.0);
        assert_eq!(w[(2, 0)], 0.0);
        assert_eq!(w[(2, 1)], 1.0);
        assert_eq!(w[(1, 2)], 1.0);
        assert_eq!(w[(2, 2)], 0.0);
    }
}
