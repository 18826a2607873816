use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finematch::ExtractionMode;
use crate::geom::{PoseSampler, UpAxis};
use crate::metrics::Thresholds;
use crate::sampling::{PatchLayout, SampleFrom};

/// Where the matching features come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Embeddings of ground-truth projections; true matches score highest.
    #[default]
    Oracle,
    /// Seeded Gaussian features and attention weights.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub num_points: usize,
    pub level_counts: [usize; 2],
    /// Input image size in pixels.
    pub image_width: usize,
    pub image_height: usize,
    /// Matching runs on the image scaled down by this factor.
    pub downsample: usize,
    /// Focal length as a fraction of the image width.
    pub focal_ratio: f64,
    pub patch_size: usize,
    pub points_per_proxy: usize,
    pub top_patches: usize,
    pub feature_dim: usize,
    pub attention_rounds: usize,
    pub neighbors: usize,
    /// Cross-attention between first-level point features and the full
    /// pixel grid before fine matching.
    pub grid_attention: bool,
    pub sinkhorn_iters: usize,
    pub tau_c: f64,
    pub tau: f64,
    pub ransac_iters: usize,
    pub inlier_gate: f64,
    pub thresholds: Thresholds,
    pub extraction: ExtractionMode,
    pub sample_from: SampleFrom,
    pub features: FeatureMode,
    /// Slack scores; `None` picks the default for the feature mode.
    pub coarse_slack: Option<f64>,
    pub fine_slack: Option<f64>,
    pub confidence_floor: f64,
    /// Fraction of generated points placed inside the image.
    pub inside_fraction: f64,
    /// Minimum accepted fraction of points projecting into the image.
    pub min_frustum_fraction: f64,
    pub max_retries: usize,
    pub pose: PoseSampler,
    pub compute_losses: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PipelineConfig {
    pub fn desk() -> Self {
        Self {
            num_points: 4096,
            level_counts: [128, 32],
            image_width: 128,
            image_height: 40,
            downsample: 1,
            focal_ratio: 0.5,
            patch_size: 8,
            points_per_proxy: 65,
            top_patches: 3,
            feature_dim: 64,
            attention_rounds: 2,
            neighbors: 8,
            grid_attention: false,
            sinkhorn_iters: 100,
            tau_c: 0.01,
            tau: 1.0,
            ransac_iters: 500,
            inlier_gate: 1.0,
            thresholds: Thresholds::default(),
            extraction: ExtractionMode::Argmax,
            sample_from: SampleFrom::Predicted,
            features: FeatureMode::Oracle,
            coarse_slack: None,
            fine_slack: None,
            confidence_floor: 0.0,
            inside_fraction: 0.5,
            min_frustum_fraction: 0.3,
            max_retries: 20,
            pose: PoseSampler {
                max_translation: 10.0,
                max_rotation_deg: 180.0,
                up_axis: UpAxis::Y,
            },
            compute_losses: true,
            seed: 0,
        }
    }

    /// Full-size shapes: 40960 points, 1280/256 proxies, 512×160 input
    /// matched on the 128×40 grid.
    pub fn full() -> Self {
        Self {
            num_points: 40960,
            level_counts: [1280, 256],
            image_width: 512,
            image_height: 160,
            downsample: 4,
            grid_attention: true,
            ..Self::desk()
        }
    }

    pub fn grid_width(&self) -> usize {
        self.image_width / self.downsample.max(1)
    }

    pub fn grid_height(&self) -> usize {
        self.image_height / self.downsample.max(1)
    }

    pub fn layout(&self) -> Result<PatchLayout> {
        PatchLayout::for_image(self.grid_width(), self.grid_height(), self.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        let counts = [
            ("num_points", self.num_points),
            ("downsample", self.downsample),
            ("patch_size", self.patch_size),
            ("points_per_proxy", self.points_per_proxy),
            ("top_patches", self.top_patches),
            ("feature_dim", self.feature_dim),
            ("neighbors", self.neighbors),
            ("sinkhorn_iters", self.sinkhorn_iters),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(&format!("{name} must be positive"));
            }
        }
        if self.image_width % self.downsample != 0 || self.image_height % self.downsample != 0 {
            return bad("downsample must divide the image size");
        }
        let layout = self.layout()?;
        let [n1, n2] = self.level_counts;
        if n2 == 0 || n2 > n1 || n1 > self.num_points {
            return bad("level counts must satisfy 0 < n2 <= n1 <= num_points");
        }
        if self.top_patches > layout.num_patches() {
            return bad("top_patches exceeds the patch count");
        }
        if self.feature_dim % 4 != 0 {
            return bad("feature_dim must be a multiple of 4");
        }
        let positive = [
            ("focal_ratio", self.focal_ratio),
            ("tau_c", self.tau_c),
            ("tau", self.tau),
            ("inlier_gate", self.inlier_gate),
            ("tau_d", self.thresholds.tau_d),
            ("tau_r", self.thresholds.tau_r),
            ("tau_t", self.thresholds.tau_t),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.thresholds.tau_m) {
            return bad("tau_m must lie in [0, 1]");
        }
        if !(self.inside_fraction > 0.0 && self.inside_fraction <= 1.0)
            || !(0.0..=1.0).contains(&self.min_frustum_fraction)
        {
            return bad("fractions must lie in [0, 1]");
        }
        if self.pose.max_translation < 0.0 || self.pose.max_rotation_deg < 0.0 {
            return bad("pose ranges must be non-negative");
        }
        Ok(())
    }
}
