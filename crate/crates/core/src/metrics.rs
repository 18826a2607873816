//! Correspondence and registration quality measures.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finematch::CorrespondenceSet;
use crate::geom::{project_point, rotation_to_euler, CameraIntrinsics, RigidTransform};
use crate::linalg::{Mat3, Vec3};
use crate::pose::PoseEstimate;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Inlier pixel distance.
    pub tau_d: f64,
    /// Inlier ratio a pair must exceed to count as matched.
    pub tau_m: f64,
    /// Rotation error bound in degrees.
    pub tau_r: f64,
    /// Translation error bound in meters.
    pub tau_t: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            tau_d: 1.0,
            tau_m: 0.10,
            tau_r: 10.0,
            tau_t: 5.0,
        }
    }
}

/// Fraction of pairs whose pixel lies strictly within `tau_d` of the ground
/// truth projection of its point. Empty sets give 0.
pub fn inlier_ratio<T: Real>(
    c: &CorrespondenceSet<T>,
    k: &CameraIntrinsics<T>,
    gt: &RigidTransform<T>,
    tau_d: T,
) -> T {
    if c.is_empty() {
        return T::zero();
    }
    let hits = c
        .entries
        .iter()
        .filter(|e| matches!(project_point(k, gt, e.point), Ok(q) if q.distance(&e.pixel) < tau_d))
        .count();
    T::from_usize_lossy(hits) / T::from_usize_lossy(c.len())
}

/// Fraction of inlier ratios strictly above `tau_m`.
pub fn feature_matching_recall<T: Real>(irs: &[T], tau_m: T) -> Result<T> {
    if irs.is_empty() {
        return Err(Error::EmptyList);
    }
    let hits = irs.iter().filter(|&&ir| ir > tau_m).count();
    Ok(T::from_usize_lossy(hits) / T::from_usize_lossy(irs.len()))
}

/// Sum of absolute Euler angles (degrees) of `R⁻¹ R̄`.
pub fn rre<T: Real>(r: &Mat3<T>, r_gt: &Mat3<T>) -> T {
    let rel = r.transpose().mul_mat(r_gt);
    rotation_to_euler(&rel).degrees.iter().map(|a| a.abs()).sum()
}

pub fn rte<T: Real>(t: Vec3<T>, t_gt: Vec3<T>) -> T {
    (t - t_gt).norm()
}

/// Fraction of `(rre, rte)` pairs with both errors strictly under threshold.
pub fn registration_recall<T: Real>(errors: &[(T, T)], tau_r: T, tau_t: T) -> Result<T> {
    if errors.is_empty() {
        return Err(Error::EmptyList);
    }
    let hits = errors.iter().filter(|(r, t)| *r < tau_r && *t < tau_t).count();
    Ok(T::from_usize_lossy(hits) / T::from_usize_lossy(errors.len()))
}

/// Per-pair evaluation. Errors are `None` when no pose was estimated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub ir: f64,
    pub irr: f64,
    pub num_correspondences: usize,
    pub num_retained: usize,
    pub rre: Option<f64>,
    pub rte: Option<f64>,
    pub success: bool,
}

impl PairRecord {
    /// Evaluates one pair against its ground truth pose.
    pub fn evaluate<T: Real>(
        c: &CorrespondenceSet<T>,
        k: &CameraIntrinsics<T>,
        gt: &RigidTransform<T>,
        estimate: Option<&PoseEstimate<T>>,
        thresholds: &Thresholds,
    ) -> Self {
        let tau_d = T::lit(thresholds.tau_d);
        let ir = inlier_ratio(c, k, gt, tau_d).to_f64_lossy();
        let (irr, retained, rre_v, rte_v) = match estimate {
            Some(e) => {
                let kept = c.subset(&e.inlier_indices);
                (
                    inlier_ratio(&kept, k, gt, tau_d).to_f64_lossy(),
                    kept.len(),
                    Some(rre(e.transform.rotation(), gt.rotation()).to_f64_lossy()),
                    Some(rte(e.transform.translation(), gt.translation()).to_f64_lossy()),
                )
            }
            None => (0.0, 0, None, None),
        };
        let success = matches!((rre_v, rte_v), (Some(r), Some(t)) if r < thresholds.tau_r && t < thresholds.tau_t);
        Self {
            ir,
            irr,
            num_correspondences: c.len(),
            num_retained: retained,
            rre: rre_v,
            rte: rte_v,
            success,
        }
    }

    fn errors_or_failure(&self) -> (f64, f64) {
        (self.rre.unwrap_or(f64::INFINITY), self.rte.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ir: f64,
    pub irr: f64,
    pub fmr: f64,
    pub fmrr: f64,
    pub rr: f64,
    /// Mean over successful registrations; `None` when there are none.
    pub rre_mean: Option<f64>,
    pub rte_mean: Option<f64>,
    pub thresholds: Thresholds,
    pub pairs: Vec<PairRecord>,
}

impl MetricsReport {
    pub fn from_pairs(pairs: Vec<PairRecord>, thresholds: Thresholds) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyList);
        }
        let n = pairs.len() as f64;
        let irs: Vec<f64> = pairs.iter().map(|p| p.ir).collect();
        let irrs: Vec<f64> = pairs.iter().map(|p| p.irr).collect();
        let errs: Vec<(f64, f64)> = pairs.iter().map(PairRecord::errors_or_failure).collect();
        let ok: Vec<&PairRecord> = pairs.iter().filter(|p| p.success).collect();
        let mean_of = |f: fn(&PairRecord) -> Option<f64>| {
            (!ok.is_empty()).then(|| ok.iter().filter_map(|p| f(p)).sum::<f64>() / ok.len() as f64)
        };
        Ok(Self {
            ir: irs.iter().sum::<f64>() / n,
            irr: irrs.iter().sum::<f64>() / n,
            fmr: feature_matching_recall(&irs, thresholds.tau_m)?,
            fmrr: feature_matching_recall(&irrs, thresholds.tau_m)?,
            rr: registration_recall(&errs, thresholds.tau_r, thresholds.tau_t)?,
            rre_mean: mean_of(|p| p.rre),
            rte_mean: mean_of(|p| p.rte),
            thresholds,
            pairs,
        })
    }

    /// Threshold-sweep curves as `curve,threshold,value` rows: the fraction
    /// of pairs with RRE under each rotation bound, with RTE under each
    /// translation bound, and with IR at or below each ratio.
    pub fn sweep_csv(&self, rotation_bounds: &[f64], translation_bounds: &[f64], ir_bounds: &[f64]) -> String {
        let n = self.pairs.len().max(1) as f64;
        let frac = |pred: &dyn Fn(&PairRecord) -> bool| self.pairs.iter().filter(|p| pred(p)).count() as f64 / n;
        let mut s = String::from("curve,threshold,value\n");
        for &b in rotation_bounds {
            let _ = writeln!(s, "rr_rotation,{b},{}", frac(&|p| p.rre.is_some_and(|r| r < b)));
        }
        for &b in translation_bounds {
            let _ = writeln!(s, "rr_translation,{b},{}", frac(&|p| p.rte.is_some_and(|t| t < b)));
        }
        for &b in ir_bounds {
            let _ = writeln!(s, "ir_cdf,{b},{}", frac(&|p| p.ir <= b));
        }
        s
    }
}

/// Evenly spaced bounds `0, step, 2 step, …, max`.
pub fn sweep_grid(max: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| max * i as f64 / steps.max(1) as f64).collect()
}
