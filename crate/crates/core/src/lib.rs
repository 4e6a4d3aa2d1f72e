pub mod bfk;
pub mod decoder;
pub mod error;
pub mod fault;
pub mod geometry;
pub mod gradcheck;
pub mod labels;
pub mod ops;
pub mod pipeline;
pub mod query_select;
pub mod scene;
pub mod tensor;
pub mod verify;
pub mod view_transform;

pub use error::{Error, Result};
pub use geometry::{BevGrid, CameraModel, FeaturePyramid, PyramidLevel};
pub use tensor::{LinearMap, ParamSet, Tensor};
