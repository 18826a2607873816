//! Synthetic scenes, oracle features and end-to-end orchestration.

mod config;
mod features;
mod model;
mod run;
mod scene;

pub use config::{FeatureMode, PipelineConfig};
pub use features::{
    embed_cells, embed_pixels, oracle_features, SceneFeatures, COARSE_GAIN, COARSE_SLACK, FINE_GAIN, FINE_SLACK,
};
pub use model::{ModelParams, TensorShape};
pub use run::{coarse_ground_truth, run_pipeline, run_with, seeded_inputs, LossValue, Losses, PipelineOutput, StageShapes};
pub use scene::{generate_scene, scale_intrinsics, scene_intrinsics, SyntheticScene};
