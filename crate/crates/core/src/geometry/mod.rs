//! Pose algebra, point clouds, nearest-neighbor search and closed-form alignment.

mod cloud;
mod kdtree;
pub mod ply;
mod pose;
mod umeyama;

pub use cloud::PointCloud;
pub use kdtree::{KdTree, Neighbor, NnIndex};
pub use pose::{
    hat, se3_left_jacobian_inv, se3_right_jacobian_inv, so3_exp, so3_left_jacobian,
    so3_left_jacobian_inv, so3_log, Pose3, Twist6, LOG_ANGLE_LIMIT,
};
pub use umeyama::{umeyama_align, Alignment};
