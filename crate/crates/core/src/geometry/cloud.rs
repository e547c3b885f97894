use std::collections::BTreeMap;

use nalgebra::Vector3;

use super::Pose3;
use crate::error::{Error, Result};

/// An ordered set of 3-D points with an optional per-point scalar channel.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
    channel: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        check_finite(&points)?;
        Ok(Self {
            points,
            channel: None,
        })
    }

    pub fn with_channel(points: Vec<Vector3<f64>>, channel: Vec<f64>) -> Result<Self> {
        check_finite(&points)?;
        if channel.len() != points.len() {
            return Err(Error::LengthMismatch {
                left: points.len(),
                right: channel.len(),
            });
        }
        Ok(Self {
            points,
            channel: Some(channel),
        })
    }

    /// Builds a cloud from points that are already known to be finite.
    pub(crate) fn from_trusted(points: Vec<Vector3<f64>>) -> Self {
        debug_assert!(check_finite(&points).is_ok());
        Self {
            points,
            channel: None,
        }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn channel(&self) -> Option<&[f64]> {
        self.channel.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vector3<f64>> {
        self.points.iter()
    }

    pub fn into_points(self) -> Vec<Vector3<f64>> {
        self.points
    }

    /// Applies `pose` to every point. The channel is carried over.
    pub fn transformed(&self, pose: &Pose3) -> PointCloud {
        let r = pose.rotation_matrix();
        let t = *pose.translation();
        PointCloud {
            points: self.points.iter().map(|p| r * p + t).collect(),
            channel: self.channel.clone(),
        }
    }

    /// Appends all points of `other`. Channels survive only if both clouds have one.
    pub fn extend_from(&mut self, other: &PointCloud) {
        match (&mut self.channel, &other.channel) {
            (Some(a), Some(b)) => a.extend_from_slice(b),
            (None, _) if self.points.is_empty() => self.channel = other.channel.clone(),
            _ => self.channel = None,
        }
        self.points.extend_from_slice(&other.points);
    }

    pub fn centroid(&self) -> Option<Vector3<f64>> {
        if self.points.is_empty() {
            return None;
        }
        let sum: Vector3<f64> = self.points.iter().sum();
        Some(sum / self.points.len() as f64)
    }

    /// Axis-aligned bounds as `(min, max)`.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = self.points.first()?;
        let mut lo = *first;
        let mut hi = *first;
        for p in &self.points[1..] {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        Some((lo, hi))
    }

    /// One point per occupied voxel: the centroid of the points that fell in it.
    /// Output order follows voxel index order, so it does not depend on input order.
    pub fn voxel_downsample(&self, voxel: f64) -> PointCloud {
        if voxel <= 0.0 || self.points.is_empty() {
            return self.clone();
        }
        let inv = 1.0 / voxel;
        let mut cells: BTreeMap<(i64, i64, i64), (Vector3<f64>, usize)> = BTreeMap::new();
        for p in &self.points {
            let key = (
                (p.x * inv).floor() as i64,
                (p.y * inv).floor() as i64,
                (p.z * inv).floor() as i64,
            );
            let e = cells.entry(key).or_insert((Vector3::zeros(), 0));
            e.0 += p;
            e.1 += 1;
        }
        PointCloud::from_trusted(cells.into_values().map(|(s, n)| s / n as f64).collect())
    }

    /// One input point per occupied voxel: the one closest to the voxel's
    /// centroid (lowest input index on ties). Same ordering as
    /// [`voxel_downsample`](Self::voxel_downsample).
    pub fn voxel_select(&self, voxel: f64) -> PointCloud {
        if voxel <= 0.0 || self.points.is_empty() {
            return PointCloud::from_trusted(self.points.clone());
        }
        let inv = 1.0 / voxel;
        let key = |p: &Vector3<f64>| ((p.x * inv).floor() as i64, (p.y * inv).floor() as i64, (p.z * inv).floor() as i64);
        let mut cells: BTreeMap<(i64, i64, i64), (Vector3<f64>, usize, Option<(f64, usize)>)> = BTreeMap::new();
        for p in &self.points {
            let e = cells.entry(key(p)).or_insert((Vector3::zeros(), 0, None));
            e.0 += p;
            e.1 += 1;
        }
        for (i, p) in self.points.iter().enumerate() {
            let e = cells.get_mut(&key(p)).expect("voxel seen in first pass");
            let d = (p - e.0 / e.1 as f64).norm_squared();
            if e.2.is_none_or(|(best, _)| d < best) {
                e.2 = Some((d, i));
            }
        }
        PointCloud::from_trusted(cells.into_values().map(|(_, _, b)| self.points[b.expect("non-empty voxel").1]).collect())
    }

    /// Points satisfying `keep`, channel preserved.
    pub fn filtered(&self, mut keep: impl FnMut(&Vector3<f64>) -> bool) -> PointCloud {
        let mut points = Vec::new();
        let mut channel = self.channel.as_ref().map(|_| Vec::new());
        for (i, p) in self.points.iter().enumerate() {
            if keep(p) {
                points.push(*p);
                if let (Some(out), Some(src)) = (channel.as_mut(), self.channel.as_ref()) {
                    out.push(src[i]);
                }
            }
        }
        PointCloud { points, channel }
    }
}

impl FromIterator<Vector3<f64>> for PointCloud {
    /// Collects points; non-finite points are dropped.
    fn from_iter<I: IntoIterator<Item = Vector3<f64>>>(iter: I) -> Self {
        PointCloud::from_trusted(
            iter.into_iter()
                .filter(|p| p.iter().all(|c| c.is_finite()))
                .collect(),
        )
    }
}

fn check_finite(points: &[Vector3<f64>]) -> Result<()> {
    match points
        .iter()
        .position(|p| !p.iter().all(|c| c.is_finite()))
    {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nan() {
        let err = PointCloud::new(vec![Vector3::zeros(), Vector3::new(f64::NAN, 0.0, 0.0)]);
        assert!(matches!(err, Err(Error::NonFinite { index: 1 })));
    }

    #[test]
    fn voxel_downsample_merges_cells() {
        let cloud = PointCloud::new(vec![
            Vector3::new(0.01, 0.01, 0.01),
            Vector3::new(0.03, 0.03, 0.03),
            Vector3::new(1.05, 0.0, 0.0),
        ])
        .unwrap();
        let d = cloud.voxel_downsample(0.1);
        assert_eq!(d.len(), 2);
        assert!((d.points()[0] - Vector3::new(0.02, 0.02, 0.02)).norm() < 1e-12);
    }

    #[test]
    fn voxel_select_keeps_input_points() {
        let cloud = PointCloud::new(vec![
            Vector3::new(0.01, 0.01, 0.01),
            Vector3::new(0.05, 0.05, 0.05),
            Vector3::new(0.08, 0.08, 0.08),
            Vector3::new(1.05, 0.0, 0.0),
        ])
        .unwrap();
        let d = cloud.voxel_select(0.1);
        assert_eq!(d.points(), &[Vector3::new(0.05, 0.05, 0.05), Vector3::new(1.05, 0.0, 0.0)]);
    }

    #[test]
    fn transform_then_inverse() {
        let pose = Pose3::from_yaw(0.3, Vector3::new(1.0, -2.0, 0.5));
        let cloud = PointCloud::new(vec![Vector3::new(1.0, 2.0, 3.0)]).unwrap();
        let back = cloud.transformed(&pose).transformed(&pose.inverse());
        assert!((back.points()[0] - cloud.points()[0]).norm() < 1e-12);
    }
}
