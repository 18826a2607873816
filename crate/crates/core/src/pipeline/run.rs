use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attentive_aggregate, masked_cross_attention, point_transformer_layer, scalar_attention, sinusoidal_pe,
    FeatureMatrix,
};
use crate::cloud::{hierarchical_decompose, HierarchicalDecomposition, ProxyDecomposition};
use crate::error::{Error, Result};
use crate::finematch::{collect, fine_match, CorrespondenceSet};
use crate::geom::CameraIntrinsics;
use crate::linalg::Vec3;
use crate::metrics::PairRecord;
use crate::pose::{ransac_pnp, PoseEstimate};
use crate::sampling::{build_batch, proxy_rng, select_matched_proxies, PatchLayout, SampleBatch, SampleFrom};
use crate::scalar::Real;
use crate::supervision::{coarse_loss, coarse_ratios, coarse_weight_matrix, fine_loss, fine_weight_matrix, CoarseWeightMatrix};
use crate::transport::{
    add_slack, marginal_residuals, pairwise_scores, sinkhorn, strip_slack_and_threshold, ScoreMatrix,
    DEFAULT_SLACK_VALUE,
};

use super::config::{FeatureMode, PipelineConfig};
use super::features::{oracle_features, SceneFeatures, COARSE_SLACK, FINE_SLACK};
use super::model::ModelParams;
use super::scene::SyntheticScene;

/// Stream offsets keep the feature, weight and pose RNGs apart from the
/// per-proxy sampling streams (which use `1..=proxies`).
const FEATURE_STREAM: u64 = 1 << 40;
const MODEL_STREAM: u64 = (1 << 40) + 1;

/// Sizes observed at each stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageShapes {
    pub points: usize,
    pub first_level: usize,
    pub point_proxies: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub pixel_proxies: usize,
    pub matched_proxies: usize,
    /// Pixels and points per batch.
    pub batch_pixels: usize,
    pub batch_points: usize,
    pub feature_dim: usize,
}

/// A loss value, or the reason it could not be evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: Option<f64>,
    pub error: Option<String>,
}

impl<T: Real> From<Result<T>> for LossValue {
    fn from(r: Result<T>) -> Self {
        match r {
            Ok(v) => Self {
                value: Some(v.to_f64_lossy()),
                error: None,
            },
            Err(e) => Self {
                value: None,
                error: Some(e.to_string()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub coarse: LossValue,
    pub fine: LossValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput<T: Real> {
    /// Coarse transport plan including the slack row and column.
    pub coarse_plan: ScoreMatrix<T>,
    /// Slack-free coarse plan after thresholding.
    pub coarse_matches: ScoreMatrix<T>,
    pub matched_proxies: Vec<usize>,
    pub batches: Vec<SampleBatch<T>>,
    pub fine_plans: Vec<ScoreMatrix<T>>,
    pub correspondences: CorrespondenceSet<T>,
    pub estimate: Option<PoseEstimate<T>>,
    pub registration_error: Option<String>,
    pub record: PairRecord,
    pub losses: Option<Losses>,
    pub shapes: StageShapes,
    /// Largest row and column mass error over every transport plan.
    pub marginal_residual: f64,
}

/// Ground-truth coarse weights for a scene and decomposition.
pub fn coarse_ground_truth<T: Real>(
    scene: &SyntheticScene<T>,
    decomp: &ProxyDecomposition,
) -> Result<CoarseWeightMatrix<T>> {
    let r = coarse_ratios(&scene.grid_intrinsics(), &scene.gt_pose, scene.cloud.points(), decomp, &scene.layout)?;
    coarse_weight_matrix(&r.r_left, &r.r_right)
}

/// First-level features rescaled so that an unweighted mean over each
/// second-level group equals the mean over its points.
fn size_weighted<T: Real>(level1: &FeatureMatrix<T>, hier: &HierarchicalDecomposition) -> FeatureMatrix<T> {
    let size = |g: usize| hier.first.members(g).len() as f64;
    let mut out = level1.clone();
    for j in 0..hier.second.num_groups() {
        let children = hier.second.members(j);
        let total: f64 = children.iter().map(|&g| size(g)).sum();
        for &g in children {
            let w = T::lit(size(g) * children.len() as f64 / total);
            for v in out.row_mut(g) {
                *v = *v * w;
            }
        }
    }
    out
}

/// Point proxy features: attentive aggregation over both levels. With
/// `point_weighted`, first-level proxies enter the second level in
/// proportion to their point counts.
fn aggregate_points<T: Real>(
    points: &[Vec3<T>],
    hier: &HierarchicalDecomposition,
    features: &FeatureMatrix<T>,
    params: &ModelParams<T>,
    point_weighted: bool,
) -> Result<(FeatureMatrix<T>, FeatureMatrix<T>, Vec<Vec3<T>>)> {
    let first_centers: Vec<Vec3<T>> = hier.first.center_indices().iter().map(|&c| points[c]).collect();
    let first_center_feats = features.select_rows(hier.first.center_indices());
    let level1 = attentive_aggregate(
        &hier.first,
        &first_centers,
        points,
        &first_center_feats,
        features,
        &params.aggregate[0],
    )?;
    let second_centers: Vec<Vec3<T>> = hier.second.center_indices().iter().map(|&c| first_centers[c]).collect();
    let inputs = if point_weighted { size_weighted(&level1, hier) } else { level1.clone() };
    let second_center_feats = inputs.select_rows(hier.second.center_indices());
    let level2 = attentive_aggregate(
        &hier.second,
        &second_centers,
        &first_centers,
        &second_center_feats,
        &inputs,
        &params.aggregate[1],
    )?;
    Ok((level1, level2, second_centers))
}

/// Alternating self- and cross-attention between the two proxy sets.
fn learn_proxies<T: Real>(
    mut pixels: FeatureMatrix<T>,
    mut points: FeatureMatrix<T>,
    point_coords: &[Vec3<T>],
    neighbors: usize,
    params: &ModelParams<T>,
) -> Result<(FeatureMatrix<T>, FeatureMatrix<T>)> {
    let k = neighbors.min(point_coords.len());
    for r in 0..params.rounds() {
        points = point_transformer_layer(point_coords, &points, k, &params.point_self[r])?;
        pixels = scalar_attention(&params.pixel_self[r], &pixels, &pixels)?;
        let new_pixels = scalar_attention(&params.cross_to_pixels[r], &pixels, &points)?;
        points = scalar_attention(&params.cross_to_points[r], &points, &pixels)?;
        pixels = new_pixels;
    }
    Ok((pixels, points))
}

fn slack_values(config: &PipelineConfig) -> (f64, f64) {
    let (c, f) = match config.features {
        FeatureMode::Oracle => (COARSE_SLACK, FINE_SLACK),
        FeatureMode::Random => (DEFAULT_SLACK_VALUE, DEFAULT_SLACK_VALUE),
    };
    (config.coarse_slack.unwrap_or(c), config.fine_slack.unwrap_or(f))
}

fn batch_pixel_features<T: Real>(
    grid: &FeatureMatrix<T>,
    layout: &PatchLayout,
    batch: &SampleBatch<T>,
) -> Result<FeatureMatrix<T>> {
    let rows: Vec<usize> = batch
        .pixel_coords
        .iter()
        .map(|px| {
            let (u, v) = (px.u.to_usize(), px.v.to_usize());
            match (u, v) {
                (Some(u), Some(v)) if u < layout.width() && v < layout.height() => Ok(layout.pixel_index(u, v)),
                _ => Err(Error::IndexOutOfRange {
                    index: usize::MAX,
                    len: layout.width() * layout.height(),
                }),
            }
        })
        .collect::<Result<_>>()?;
    Ok(grid.select_rows(&rows))
}

/// Features and weights drawn from the config's seed, one stream each.
pub fn seeded_inputs<T: Real>(
    scene: &SyntheticScene<T>,
    config: &PipelineConfig,
) -> Result<(SceneFeatures<T>, ModelParams<T>)> {
    let d = config.feature_dim;
    let mut feature_rng = ChaCha8Rng::seed_from_u64(config.seed);
    feature_rng.set_stream(FEATURE_STREAM);
    let features = oracle_features(scene, config.features, d, &mut feature_rng)?;
    let mut model_rng = ChaCha8Rng::seed_from_u64(config.seed);
    model_rng.set_stream(MODEL_STREAM);
    let params = ModelParams::for_mode(config.features, d, config.attention_rounds, &mut model_rng);
    Ok((features, params))
}

/// Every stage from proxy generation to metrics on one scene.
pub fn run_pipeline<T: Real>(scene: &SyntheticScene<T>, config: &PipelineConfig) -> Result<PipelineOutput<T>> {
    config.validate()?;
    let (features, params) = seeded_inputs(scene, config)?;
    run_with(scene, config, &features, &params)
}

/// [`run_pipeline`] with explicit features and weights.
pub fn run_with<T: Real>(
    scene: &SyntheticScene<T>,
    config: &PipelineConfig,
    features: &SceneFeatures<T>,
    params: &ModelParams<T>,
) -> Result<PipelineOutput<T>> {
    config.validate()?;
    let layout = scene.layout;
    let k_grid: CameraIntrinsics<T> = scene.grid_intrinsics();
    let points = scene.cloud.points();
    let (coarse_slack, fine_slack) = slack_values(config);

    // Proxy generation.
    let hier = hierarchical_decompose(points, config.level_counts, 0)?;
    let decomp = hier.composed();
    let (level1, point_proxy_feats, proxy_coords) = aggregate_points(
        points,
        &hier,
        &features.point_coarse,
        params,
        config.features == FeatureMode::Oracle,
    )?;

    // Proxy learning.
    let mut pixel_proxy_feats = features.patch.clone();
    if config.features == FeatureMode::Random {
        pixel_proxy_feats = pixel_proxy_feats.add(&sinusoidal_pe(layout.num_patches(), d_of(features))?)?;
    }
    let (pixel_proxy_feats, point_proxy_feats) =
        learn_proxies(pixel_proxy_feats, point_proxy_feats, &proxy_coords, config.neighbors, params)?;

    // Coarse matching. Untrained weights let residual updates grow without
    // bound, so random-mode proxies are brought back to unit scale first.
    let (pixel_proxy_feats, point_proxy_feats) = match config.features {
        FeatureMode::Random => (unit_rms(&pixel_proxy_feats), unit_rms(&point_proxy_feats)),
        FeatureMode::Oracle => (pixel_proxy_feats, point_proxy_feats),
    };
    let scores = pairwise_scores(&pixel_proxy_feats, &point_proxy_feats, d_of(features), None, None)?;
    let coarse_plan = sinkhorn(&add_slack(&scores, T::lit(coarse_slack))?, config.sinkhorn_iters)?;
    let coarse_matches = strip_slack_and_threshold(&coarse_plan, T::lit(config.tau_c))?;
    let (mut residual_r, mut residual_c) = marginal_residuals(&coarse_plan);

    let gt_weights = if config.sample_from == SampleFrom::GroundTruth || config.compute_losses {
        Some(coarse_ground_truth(scene, &decomp)?)
    } else {
        None
    };
    let driver = match (&config.sample_from, &gt_weights) {
        (SampleFrom::GroundTruth, Some(w)) => w.interior(),
        _ => coarse_matches.clone(),
    };
    let matched_proxies = select_matched_proxies(&driver);

    // Coarse-to-fine sampling, masked attention and fine matching.
    let grid_feats = if config.grid_attention {
        scalar_attention(&params.grid_cross, &features.pixel, &level1)?
    } else {
        features.pixel.clone()
    };
    let mut batches = Vec::with_capacity(matched_proxies.len());
    let mut fine_plans = Vec::with_capacity(matched_proxies.len());
    for &j in &matched_proxies {
        let mut rng = proxy_rng(config.seed, j);
        let batch = build_batch(
            &driver,
            &decomp,
            j,
            config.points_per_proxy,
            config.top_patches,
            &layout,
            &mut rng,
        )?;
        let f_pix = batch_pixel_features(&grid_feats, &layout, &batch)?;
        let f_pts = features.point_fine.select_rows(&batch.point_indices);
        let f_pix = masked_cross_attention(&params.fine_cross, &f_pix, &f_pts, &batch.pixel_mask, &batch.point_mask)?;
        let plan = fine_match(
            &f_pix,
            &f_pts,
            &batch.pixel_mask,
            &batch.point_mask,
            config.sinkhorn_iters,
            T::lit(fine_slack),
        )?;
        let (r, c) = marginal_residuals(&plan);
        residual_r = residual_r.max(r);
        residual_c = residual_c.max(c);
        batches.push(batch);
        fine_plans.push(plan);
    }
    if batches.len() != matched_proxies.len() || fine_plans.len() != batches.len() {
        return Err(Error::DimensionMismatch("one batch and plan per matched proxy".into()));
    }

    // Correspondences, pose and metrics.
    let correspondences = collect(
        &batches,
        &fine_plans,
        points,
        config.extraction,
        T::lit(config.confidence_floor),
    )?;
    let (estimate, registration_error) = match ransac_pnp(
        &correspondences,
        &k_grid,
        config.ransac_iters,
        T::lit(config.inlier_gate),
        config.seed,
    ) {
        Ok(e) => (Some(e), None),
        Err(e @ (Error::NoConsensus(_) | Error::TooFewPoints { .. })) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    let record = PairRecord::evaluate(
        &correspondences,
        &k_grid,
        &scene.gt_pose,
        estimate.as_ref(),
        &config.thresholds,
    );

    let losses = match (config.compute_losses, &gt_weights) {
        (true, Some(w)) => {
            let fine_w = batches
                .iter()
                .map(|b| fine_weight_matrix(b, &k_grid, &scene.gt_pose, points, T::lit(config.tau)))
                .collect::<Result<Vec<_>>>()?;
            Some(Losses {
                coarse: coarse_loss(&coarse_plan, w).into(),
                fine: fine_loss(&fine_plans, &fine_w).into(),
            })
        }
        _ => None,
    };

    let shapes = StageShapes {
        points: points.len(),
        first_level: hier.first.num_groups(),
        point_proxies: hier.num_proxies(),
        grid_height: layout.height(),
        grid_width: layout.width(),
        pixel_proxies: layout.num_patches(),
        matched_proxies: matched_proxies.len(),
        batch_pixels: config.top_patches * layout.pixels_per_patch(),
        batch_points: config.points_per_proxy,
        feature_dim: d_of(features),
    };
    Ok(PipelineOutput {
        coarse_plan,
        coarse_matches,
        matched_proxies,
        batches,
        fine_plans,
        correspondences,
        estimate,
        registration_error,
        record,
        losses,
        shapes,
        marginal_residual: residual_r.max(residual_c).to_f64_lossy(),
    })
}

/// Rows scaled to unit root-mean-square; zero rows stay zero.
fn unit_rms<T: Real>(m: &FeatureMatrix<T>) -> FeatureMatrix<T> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let ms = row.iter().map(|&x| x * x).sum::<T>() / T::from_usize_lossy(row.len());
        if ms > T::zero() {
            let s = ms.sqrt();
            row.iter_mut().for_each(|x| *x = *x / s);
        }
    }
    out
}

fn d_of<T: Real>(f: &SceneFeatures<T>) -> usize {
    f.patch.cols()
}
