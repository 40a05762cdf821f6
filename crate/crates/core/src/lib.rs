//! Action keypoint networks: select the most informative spatio-temporal
//! positions of an intermediate video feature map, arrange them as an
//! ordered point cloud, and classify it with 1D convolutions compacted from
//! the original 2D back-end.

pub mod backbone;
pub mod classifier;
pub mod cost;
pub mod error;
pub mod harness;
pub mod keypoint;
pub mod model;
pub mod points;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Element, Graph, NodeId, ParamStore, Tensor};
