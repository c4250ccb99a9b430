//! Arbitrary-rate point cloud upsampling by midpoint interpolation followed
//! by iterative refinement that descends the gradient of a point-to-point
//! distance field. The field is either an exact nearest-point oracle (when
//! ground truth is available) or a small learned network that approximates
//! it, trained on Gaussian-jittered queries.

pub mod cloud;
pub mod error;
pub mod field;
pub mod io;
pub mod knn;
pub mod metrics;
pub mod sampling;
pub mod synth;
pub mod tensor;

pub use cloud::{denormalize, normalize, NormalizeTransform, Point3, PointCloud, TriMesh};
pub use error::{Error, Result};
pub use field::{mesh_distance, DistanceField, ExactOracle};
pub use knn::SpatialIndex;
pub use sampling::{
    extract_patches, fps, merge_patches, midpoint_interpolate, InterpolationConfig, Patch,
    PatchConfig,
};
