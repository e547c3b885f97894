//! Sessions: a pose graph plus per-keyframe scans and descriptors.

mod ape;
mod g2o;
mod io;
mod tum;

use nalgebra::Matrix6;
use serde::{Deserialize, Serialize};

pub use ape::{associate, evaluate_ape, ApeOptions, ApeReport, ErrorStats};
pub use g2o::{read_g2o, read_g2o_graph, write_g2o, write_g2o_graph, G2oGraph};
pub use io::{load_keyframes, load_session, save_session, LoadOptions, SessionManifest};
pub use tum::{read_tum, write_tum, Trajectory};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Pose3};
use crate::isc::IscDescriptor;

/// Default odometry variance applied to every component when a session does
/// not carry its own edge uncertainty.
pub const DEFAULT_ODOMETRY_VARIANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub index: usize,
    /// Seconds.
    pub timestamp: f64,
    /// Pose in the session's local frame.
    pub odom_pose: Pose3,
    /// Sensor-frame scan.
    pub scan: PointCloud,
    pub descriptor: Option<IscDescriptor>,
}

/// A relative-pose constraint `from → to` with its information matrix
/// (inverse covariance, `(rho, phi)` ordering).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    /// `relative(pose_to, pose_from)`.
    pub relative: Pose3,
    pub information: Matrix6<f64>,
}

impl Edge {
    pub fn covariance(&self) -> Option<Matrix6<f64>> {
        self.information.try_inverse()
    }

    pub fn isotropic_information(variance: f64) -> Matrix6<f64> {
        Matrix6::identity() / variance
    }
}

#[derive(Debug, Clone)]
pub struct Session {
    keyframes: Vec<Keyframe>,
    odometry_edges: Vec<Edge>,
    loop_edges: Vec<Edge>,
    pub frame_label: String,
}

impl Session {
    /// Builds a session, synthesizing odometry edges from consecutive poses.
    pub fn from_keyframes(
        keyframes: Vec<Keyframe>,
        frame_label: impl Into<String>,
        odometry_information: Matrix6<f64>,
    ) -> Result<Self> {
        let odometry_edges = keyframes
            .windows(2)
            .map(|w| Edge {
                from: w[0].index,
                to: w[1].index,
                relative: w[1].odom_pose.relative(&w[0].odom_pose),
                information: odometry_information,
            })
            .collect();
        Self::new(keyframes, odometry_edges, Vec::new(), frame_label)
    }

    pub fn new(
        keyframes: Vec<Keyframe>,
        odometry_edges: Vec<Edge>,
        loop_edges: Vec<Edge>,
        frame_label: impl Into<String>,
    ) -> Result<Self> {
        let s = Self {
            keyframes,
            odometry_edges,
            loop_edges,
            frame_label: frame_label.into(),
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        for (i, k) in self.keyframes.iter().enumerate() {
            if k.index != i {
                return Err(Error::InvalidSession(format!(
                    "keyframe {i} has index {}",
                    k.index
                )));
            }
            if i > 0 && k.timestamp < self.keyframes[i - 1].timestamp {
                return Err(Error::InvalidSession(format!(
                    "timestamps decrease at keyframe {i}"
                )));
            }
        }
        let n = self.keyframes.len();
        for e in self.odometry_edges.iter().chain(&self.loop_edges) {
            if e.from >= n || e.to >= n {
                return Err(Error::InvalidSession(format!(
                    "edge {}->{} references a missing keyframe",
                    e.from, e.to
                )));
            }
        }
        for e in &self.odometry_edges {
            if e.to != e.from + 1 {
                return Err(Error::InvalidSession(format!(
                    "odometry edge {}->{} is not consecutive",
                    e.from, e.to
                )));
            }
            let expected = self.keyframes[e.to]
                .odom_pose
                .relative(&self.keyframes[e.from].odom_pose);
            if expected.max_abs_diff(&e.relative) > 1e-9 {
                return Err(Error::InvalidSession(format!(
                    "odometry edge {}->{} disagrees with keyframe poses",
                    e.from, e.to
                )));
            }
        }
        Ok(())
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn keyframe(&self, i: usize) -> &Keyframe {
        &self.keyframes[i]
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn odometry_edges(&self) -> &[Edge] {
        &self.odometry_edges
    }

    pub fn loop_edges(&self) -> &[Edge] {
        &self.loop_edges
    }

    pub fn poses(&self) -> Vec<Pose3> {
        self.keyframes.iter().map(|k| k.odom_pose).collect()
    }

    pub fn trajectory(&self) -> Trajectory {
        Trajectory::from_pairs(
            self.keyframes
                .iter()
                .map(|k| (k.timestamp, k.odom_pose))
                .collect(),
        )
    }

    /// Computes any missing descriptors.
    pub fn compute_descriptors(&mut self, params: &crate::isc::IscParams) {
        use rayon::prelude::*;
        self.keyframes.par_iter_mut().for_each(|k| {
            if k.descriptor.is_none() {
                k.descriptor = Some(crate::isc::make_descriptor(&k.scan, params));
            }
        });
    }

    /// Recomputes every descriptor, replacing existing ones.
    pub fn recompute_descriptors(&mut self, params: &crate::isc::IscParams) {
        for k in &mut self.keyframes {
            k.descriptor = None;
        }
        self.compute_descriptors(params);
    }

    /// Descriptors in keyframe order, or `None` if any is missing.
    pub fn descriptors(&self) -> Option<Vec<&IscDescriptor>> {
        self.keyframes.iter().map(|k| k.descriptor.as_ref()).collect()
    }

    /// Keeps keyframes at least `min_gap` seconds after the previously kept one.
    /// Indices are renumbered and odometry edges re-synthesized; loop edges
    /// touching dropped keyframes are discarded.
    pub fn decimated(&self, min_gap: f64) -> Result<Session> {
        if min_gap <= 0.0 || self.keyframes.is_empty() {
            return Ok(self.clone());
        }
        let info = self
            .odometry_edges
            .first()
            .map_or_else(|| Edge::isotropic_information(DEFAULT_ODOMETRY_VARIANCE), |e| e.information);
        let mut map = vec![None; self.keyframes.len()];
        let mut kept: Vec<Keyframe> = Vec::new();
        for k in &self.keyframes {
            if kept
                .last()
                .is_none_or(|last| k.timestamp - last.timestamp >= min_gap)
            {
                map[k.index] = Some(kept.len());
                let mut k = k.clone();
                k.index = kept.len();
                kept.push(k);
            }
        }
        let mut s = Session::from_keyframes(kept, self.frame_label.clone(), info)?;
        s.loop_edges = self
            .loop_edges
            .iter()
            .filter_map(|e| {
                let from = map[e.from]?;
                let to = map[e.to]?;
                Some(Edge { from, to, ..*e })
            })
            .collect();
        Ok(s)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use nalgebra::Vector3;

    pub(crate) fn chain(n: usize) -> Session {
        let kfs = (0..n)
            .map(|i| Keyframe {
                index: i,
                timestamp: i as f64 * 0.5,
                odom_pose: Pose3::from_yaw(0.1 * i as f64, Vector3::new(i as f64, 0.2 * i as f64, 0.0)),
                scan: PointCloud::new(vec![Vector3::new(1.0, i as f64, 0.0)]).unwrap(),
                descriptor: None,
            })
            .collect();
        Session::from_keyframes(kfs, "query", Edge::isotropic_information(1e-4)).unwrap()
    }

    #[test]
    fn edges_match_poses() {
        let s = chain(4);
        assert_eq!(s.odometry_edges().len(), 3);
        for e in s.odometry_edges() {
            let a = s.keyframe(e.from).odom_pose;
            let b = s.keyframe(e.to).odom_pose;
            assert!(a.compose(&e.relative).max_abs_diff(&b) < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_edges() {
        let s = chain(3);
        let mut bad = s.odometry_edges().to_vec();
        bad[0].relative = Pose3::identity();
        assert!(Session::new(s.keyframes().to_vec(), bad, vec![], "x").is_err());
        let loops = vec![Edge { from: 0, to: 7, ..s.odometry_edges()[0] }];
        assert!(Session::new(s.keyframes().to_vec(), s.odometry_edges().to_vec(), loops, "x").is_err());
    }

    #[test]
    fn decimation_by_time_gap() {
        let s = chain(7);
        let d = s.decimated(1.0).unwrap();
        assert_eq!(d.len(), 4);
        assert_eq!(d.keyframe(1).timestamp, 1.0);
        assert_eq!(d.odometry_edges().len(), 3);
        assert_eq!(s.decimated(0.0).unwrap().len(), 7);
    }
}
