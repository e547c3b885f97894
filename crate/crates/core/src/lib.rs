//! Map-anchored LiDAR mapping: synthetic session generation from a reference
//! map, descriptor-based place recognition, anchored pose-graph alignment of
//! drifted sessions, and change detection against the reference.

pub mod change;
pub mod error;
pub mod geometry;
pub mod isc;
pub mod ogm;
pub mod pipeline;
pub mod posegraph;
pub mod registration;
pub mod session;
pub mod sim;
pub mod synthetic;

pub use error::{Error, Result};
pub use geometry::{NnIndex, PointCloud, Pose3, Twist6};
pub use session::{Keyframe, Session, Trajectory};
