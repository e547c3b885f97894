use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TriangleMesh;
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Pose3};
use crate::isc::IscParams;
use crate::ogm::ScanLocationList;
use crate::session::{Edge, Keyframe, Session, DEFAULT_ODOMETRY_VARIANCE};

/// Spinning multi-channel LiDAR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarModel {
    /// Degrees between consecutive azimuth samples.
    pub azimuth_resolution: f64,
    /// `[min, max]` elevation in degrees.
    pub vertical_fov: [f64; 2],
    pub vertical_channels: usize,
    pub max_range: f64,
    /// Gaussian range noise, meters.
    pub range_noise_sigma: f64,
    pub noise_seed: u64,
}

impl Default for LidarModel {
    fn default() -> Self {
        Self {
            azimuth_resolution: 0.1728,
            vertical_fov: [-45.0, 45.0],
            vertical_channels: 32,
            max_range: 15.0,
            range_noise_sigma: 0.03,
            noise_seed: 0,
        }
    }
}

impl LidarModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.azimuth_resolution > 0.0) {
            return Err(Error::InvalidParameter("azimuth_resolution must be > 0".into()));
        }
        if !(self.vertical_fov[0] < self.vertical_fov[1]) {
            return Err(Error::InvalidParameter("vertical_fov min must be below max".into()));
        }
        if self.vertical_channels == 0 {
            return Err(Error::InvalidParameter("vertical_channels must be >= 1".into()));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::InvalidParameter("max_range must be > 0".into()));
        }
        if !(self.range_noise_sigma >= 0.0) {
            return Err(Error::InvalidParameter("range_noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn rays_per_revolution(&self) -> usize {
        ((360.0 / self.azimuth_resolution).round() as usize).max(1)
    }

    /// Channel elevations in radians, evenly spaced including both FoV ends.
    pub fn elevations(&self) -> Vec<f64> {
        let [lo, hi] = self.vertical_fov;
        if self.vertical_channels == 1 {
            return vec![(0.5 * (lo + hi)).to_radians()];
        }
        let step = (hi - lo) / (self.vertical_channels - 1) as f64;
        (0..self.vertical_channels)
            .map(|c| (lo + c as f64 * step).to_radians())
            .collect()
    }

    /// Unit ray directions in the sensor frame, channel-major.
    pub fn directions(&self) -> Vec<Vector3<f64>> {
        let n = self.rays_per_revolution();
        let mut out = Vec::with_capacity(n * self.vertical_channels);
        for el in self.elevations() {
            let (se, ce) = el.sin_cos();
            for k in 0..n {
                let az = k as f64 * std::f64::consts::TAU / n as f64;
                let (sa, ca) = az.sin_cos();
                out.push(Vector3::new(ce * ca, ce * sa, se));
            }
        }
        out
    }
}

/// One scan at `sensor_pose`; points are in the sensor frame and the channel
/// holds the ring index. `stream` selects an independent noise sequence so that
/// scans can be simulated in any order.
pub fn simulate_scan_with_stream(
    mesh: &TriangleMesh,
    sensor_pose: &Pose3,
    model: &LidarModel,
    stream: u64,
) -> PointCloud {
    let n = model.rays_per_revolution();
    let dirs = model.directions();
    let origin = *sensor_pose.translation();
    let hits: Vec<Option<f64>> = dirs
        .par_iter()
        .with_min_len(512)
        .map(|d| {
            let wd = sensor_pose.rotate_vector(d);
            mesh.raycast(&origin, &wd, model.max_range).map(|h| h.distance)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(model.noise_seed);
    rng.set_stream(stream);
    let noise = (model.range_noise_sigma > 0.0)
        .then(|| Normal::new(0.0, model.range_noise_sigma).expect("valid sigma"));
    let mut pts = Vec::new();
    let mut ring = Vec::new();
    for (i, h) in hits.into_iter().enumerate() {
        let Some(r) = h else { continue };
        let r = match &noise {
            Some(nd) => r + nd.sample(&mut rng),
            None => r,
        };
        if r <= 0.0 {
            continue;
        }
        pts.push(dirs[i] * r);
        ring.push((i / n) as f64);
    }
    PointCloud::with_channel(pts, ring).expect("finite ray returns")
}

pub fn simulate_scan(mesh: &TriangleMesh, sensor_pose: &Pose3, model: &LidarModel) -> PointCloud {
    simulate_scan_with_stream(mesh, sensor_pose, model, 0)
}

/// One keyframe per location at identity heading, scans simulated with the
/// keyframe index as noise stream, descriptors computed. Timestamps are the
/// keyframe indices in seconds.
pub fn build_reference_session(
    mesh: &TriangleMesh,
    locations: &ScanLocationList,
    model: &LidarModel,
    descriptor_params: &IscParams,
) -> Result<Session> {
    model.validate()?;
    descriptor_params.validate()?;
    if locations.is_empty() {
        return Err(Error::InvalidParameter("no scan locations".into()));
    }
    let poses: Vec<Pose3> = locations.positions().map(Pose3::from_translation).collect();
    let keyframes = poses
        .iter()
        .enumerate()
        .map(|(i, pose)| Keyframe {
            index: i,
            timestamp: i as f64,
            odom_pose: *pose,
            scan: simulate_scan_with_stream(mesh, pose, model, i as u64),
            descriptor: None,
        })
        .collect();
    let mut s = Session::from_keyframes(
        keyframes,
        "reference",
        Edge::isotropic_information(DEFAULT_ODOMETRY_VARIANCE),
    )?;
    s.compute_descriptors(descriptor_params);
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::MeshBuilder;
    use nalgebra::Vector2;

    fn closed_cube(half: f64) -> TriangleMesh {
        MeshBuilder::new()
            .aabb(Vector3::repeat(-half), Vector3::repeat(half))
            .build()
            .unwrap()
    }

    fn noiseless(channels: usize, az: f64, range: f64) -> LidarModel {
        LidarModel {
            azimuth_resolution: az,
            vertical_fov: [-40.0, 40.0],
            vertical_channels: channels,
            max_range: range,
            range_noise_sigma: 0.0,
            noise_seed: 0,
        }
    }

    #[test]
    fn rays_per_revolution_rounds() {
        assert_eq!(LidarModel::default().rays_per_revolution(), 2083);
    }

    #[test]
    fn single_horizontal_ray_on_wall() {
        let wall = MeshBuilder::new()
            .quad(
                Vector3::new(5.0, -1.0, -1.0),
                Vector3::new(5.0, 1.0, -1.0),
                Vector3::new(5.0, 1.0, 1.0),
                Vector3::new(5.0, -1.0, 1.0),
            )
            .build()
            .unwrap();
        let m = LidarModel {
            azimuth_resolution: 360.0,
            vertical_fov: [-1.0, 1.0],
            vertical_channels: 1,
            ..noiseless(1, 360.0, 15.0)
        };
        let c = simulate_scan(&wall, &Pose3::identity(), &m);
        assert_eq!(c.len(), 1);
        assert!((c.points()[0] - Vector3::new(5.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn closed_cube_every_ray_returns() {
        let mesh = closed_cube(5.0);
        let m = noiseless(16, 2.0, 15.0);
        let c = simulate_scan(&mesh, &Pose3::identity(), &m);
        assert_eq!(c.len(), 16 * 180);
        for p in c.iter() {
            assert!(p.norm() <= 5.0 * 3f64.sqrt() + 1e-9);
            // analytic box intersection: the largest coordinate sits on a face
            assert!((p.abs().max() - 5.0).abs() < 1e-9);
        }
    }

    #[test]
    fn range_cutoff() {
        let mesh = closed_cube(5.0);
        let c = simulate_scan(&mesh, &Pose3::identity(), &noiseless(8, 5.0, 2.0));
        assert!(c.is_empty());
    }

    #[test]
    fn deterministic_and_stream_dependent() {
        let mesh = closed_cube(5.0);
        let m = LidarModel { range_noise_sigma: 0.03, noise_seed: 7, ..noiseless(8, 3.0, 15.0) };
        let pose = Pose3::from_yaw(0.3, Vector3::new(0.5, -1.0, 0.2));
        let a = simulate_scan_with_stream(&mesh, &pose, &m, 3);
        let b = simulate_scan_with_stream(&mesh, &pose, &m, 3);
        let c = simulate_scan_with_stream(&mesh, &pose, &m, 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.len() <= 8 * 120);
    }

    #[test]
    fn rigid_invariance() {
        let mut b = MeshBuilder::new();
        b.aabb(Vector3::repeat(-6.0), Vector3::repeat(6.0));
        b.aabb(Vector3::new(1.0, 1.0, -1.0), Vector3::new(2.0, 3.0, 0.5));
        let mesh = b.build().unwrap();
        let m = noiseless(8, 3.0, 15.0);
        let t = Pose3::exp(&crate::geometry::Twist6::new(
            Vector3::new(0.4, -0.7, 0.1),
            Vector3::new(0.05, -0.02, 0.8),
        ));
        let a = simulate_scan(&mesh, &t, &m);
        let b = simulate_scan(&mesh.transformed(&t.inverse()), &Pose3::identity(), &m);
        assert_eq!(a.len(), b.len());
        for (p, q) in a.iter().zip(b.iter()) {
            assert!((p - q).norm() < 1e-6);
        }
    }

    #[test]
    fn noiseless_points_on_surface() {
        let mut b = MeshBuilder::new();
        b.aabb(Vector3::repeat(-6.0), Vector3::repeat(6.0));
        let mesh = b.build().unwrap();
        let pose = Pose3::from_yaw(0.7, Vector3::new(1.0, 2.0, -0.5));
        let c = simulate_scan(&mesh, &pose, &noiseless(8, 4.0, 20.0));
        for p in c.iter() {
            let w = pose.transform_point(p);
            assert!((w.abs().max() - 6.0).abs() < 1e-6);
        }
    }

    #[test]
    fn reference_session_from_locations() {
        let mesh = closed_cube(8.0);
        let locs = ScanLocationList {
            points: (0..5).map(|i| Vector2::new(i as f64 - 2.0, 0.5)).collect(),
            height: 1.0,
        };
        let s = build_reference_session(&mesh, &locs, &noiseless(8, 3.0, 15.0), &IscParams::default()).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s.odometry_edges().len(), 4);
        for e in s.odometry_edges() {
            assert!((e.relative.translation() - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
            assert!(e.relative.angle() < 1e-12);
        }
        assert!(s.keyframes().iter().all(|k| !k.scan.is_empty() && k.descriptor.is_some()));

        let one = ScanLocationList { points: vec![Vector2::zeros()], height: 0.0 };
        let s = build_reference_session(&mesh, &one, &noiseless(8, 3.0, 15.0), &IscParams::default()).unwrap();
        assert_eq!((s.len(), s.odometry_edges().len()), (1, 0));
    }
}
