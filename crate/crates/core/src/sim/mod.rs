//! Triangle meshes with ray queries and a spinning-LiDAR simulator.

mod lidar;
mod mesh;
mod reference;

pub use lidar::{build_reference_session, simulate_scan, simulate_scan_with_stream, LidarModel};
pub use mesh::{load_mesh, MeshBuilder, RayHit, TriangleMesh};
pub use reference::{map_to_session, MapSession, MapToSessionParams};
