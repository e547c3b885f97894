//! Reference session from a map: occupancy grid, skeleton, scan locations and
//! simulated keyframes.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::{build_reference_session, LidarModel, TriangleMesh};
use crate::error::Result;
use crate::geometry::PointCloud;
use crate::isc::IscParams;
use crate::ogm::{grid_from_cloud, grid_from_mesh, sample_scan_locations, skeletonize, GridParams, OccupancyGrid, SamplingParams, ScanLocationList};
use crate::session::Session;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapToSessionParams {
    pub grid: GridParams,
    pub sampling: SamplingParams,
    /// Sensor height above the floor, meters.
    pub sensor_height: f64,
    /// The location chain starts at the location nearest this point.
    pub start: [f64; 2],
    pub lidar: LidarModel,
    pub isc: IscParams,
}

impl Default for MapToSessionParams {
    fn default() -> Self {
        Self {
            grid: GridParams::default(),
            sampling: SamplingParams::default(),
            sensor_height: 1.2,
            start: [0.0, 0.0],
            lidar: LidarModel::default(),
            isc: IscParams::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MapSession {
    pub grid: OccupancyGrid,
    pub locations: ScanLocationList,
    pub session: Session,
}

/// Builds the grid from `grid_cloud` when given, otherwise from the mesh, and
/// simulates one scan per sampled location against `mesh`.
pub fn map_to_session(mesh: &TriangleMesh, grid_cloud: Option<&PointCloud>, floor_z: f64, params: &MapToSessionParams) -> Result<MapSession> {
    params.grid.validate()?;
    params.lidar.validate()?;
    params.isc.validate()?;
    let grid = match grid_cloud {
        Some(c) => grid_from_cloud(c, floor_z, &params.grid)?,
        None => grid_from_mesh(mesh, floor_z, &params.grid)?,
    };
    let skeleton = skeletonize(&grid)?;
    let start = Vector2::new(params.start[0], params.start[1]);
    let locations = sample_scan_locations(&grid, &skeleton, &params.sampling, start, floor_z + params.sensor_height)?;
    let session = build_reference_session(mesh, &locations, &params.lidar, &params.isc)?;
    Ok(MapSession { grid, locations, session })
}
