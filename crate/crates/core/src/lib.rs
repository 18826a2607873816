//! Coarse-to-fine image-to-point-cloud correspondence and camera registration.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases at the
//! crate root fix the scalar to `f64`.

pub mod attention;
pub mod cloud;
pub mod error;
pub mod finematch;
pub mod geom;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod pose;
pub mod sampling;
pub mod scalar;
pub mod supervision;
pub mod transport;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Vec3d = linalg::Vec3<f64>;
pub type Mat3d = linalg::Mat3<f64>;
pub type Pixeld = geom::Pixel<f64>;
pub type Intrinsics = geom::CameraIntrinsics<f64>;
pub type Pose = geom::RigidTransform<f64>;
pub type Cloud = cloud::PointCloud<f64>;
pub type Scores = transport::ScoreMatrix<f64>;
pub type Batch = sampling::SampleBatch<f64>;
pub type Correspondences = finematch::CorrespondenceSet<f64>;
