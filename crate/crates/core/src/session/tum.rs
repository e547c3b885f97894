use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::Pose3;

/// Timestamped poses, timestamps strictly increasing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    entries: Vec<(f64, Pose3)>,
}

impl Trajectory {
    /// Builds a trajectory; entries are sorted by timestamp and exact duplicates
    /// of a timestamp keep the first occurrence.
    pub fn from_pairs(mut entries: Vec<(f64, Pose3)>) -> Self {
        entries.sort_by(|a, b| a.0.total_cmp(&b.0));
        entries.dedup_by(|b, a| a.0 == b.0);
        Self { entries }
    }

    pub fn entries(&self) -> &[(f64, Pose3)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn timestamps(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    pub fn poses(&self) -> impl Iterator<Item = &Pose3> + '_ {
        self.entries.iter().map(|e| &e.1)
    }

    pub fn to_tum_string(&self) -> String {
        let mut s = String::with_capacity(self.entries.len() * 100);
        for (t, p) in &self.entries {
            let q = p.rotation().quaternion();
            let tr = p.translation();
            let _ = writeln!(
                s,
                "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
                t, tr.x, tr.y, tr.z, q.i, q.j, q.k, q.w
            );
        }
        s
    }

    pub fn parse_tum(text: &str, source: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(source, ln + 1, "non-numeric field"))?;
            if vals.len() != 8 {
                return Err(Error::parse(
                    source,
                    ln + 1,
                    format!("expected 8 fields, found {}", vals.len()),
                ));
            }
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::parse(source, ln + 1, "non-finite value"));
            }
            let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
            if q.norm() < 1e-9 {
                return Err(Error::parse(source, ln + 1, "zero quaternion"));
            }
            let pose = Pose3::new(
                UnitQuaternion::new_normalize(q),
                Vector3::new(vals[1], vals[2], vals[3]),
            );
            if let Some((last, _)) = entries.last() {
                if vals[0] <= *last {
                    return Err(Error::parse(
                        source,
                        ln + 1,
                        "timestamps must be strictly increasing",
                    ));
                }
            }
            entries.push((vals[0], pose));
        }
        Ok(Self { entries })
    }
}

/// Writes `timestamp tx ty tz qx qy qz qw` lines with 9 decimal places.
pub fn write_tum(traj: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, traj.to_tum_string()).map_err(|e| Error::io(path, e))
}

pub fn read_tum(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Trajectory::parse_tum(&text, &path.display().to_string())
}
