//! On-disk session layout:
//!
//! ```text
//! <dir>/poses.tum               keyframe odometry poses
//! <dir>/scans/<stamp>.ply       one sensor-frame scan per keyframe
//! <dir>/descriptors/<stamp>.csv optional descriptor matrices
//! <dir>/graph.g2o               pose graph (odometry + loop edges)
//! <dir>/manifest.json           label and descriptor parameters
//! ```
//!
//! `<stamp>` is the timestamp printed with 9 decimals.

use std::path::{Path, PathBuf};

use nalgebra::Matrix6;
use serde::{Deserialize, Serialize};

use super::{read_g2o_graph, read_tum, write_g2o, write_tum, Edge, Keyframe, Session};
use crate::error::{Error, Result};
use crate::geometry::ply::{self, PlyFormat};
use crate::isc::{IscDescriptor, IscParams};

const STAMP_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub label: String,
    pub keyframes: usize,
    pub descriptor_params: Option<IscParams>,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Keep only keyframes at least this many seconds apart; 0 keeps all.
    pub min_time_gap: f64,
    pub odometry_information: Matrix6<f64>,
    pub label: Option<String>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            min_time_gap: 0.0,
            odometry_information: Edge::isotropic_information(super::DEFAULT_ODOMETRY_VARIANCE),
            label: None,
        }
    }
}

pub fn stamp_name(t: f64) -> String {
    format!("{t:.9}")
}

fn list_scans(dir: &Path) -> Result<Vec<(f64, PathBuf)>> {
    let scan_dir = if dir.join("scans").is_dir() {
        dir.join("scans")
    } else {
        dir.to_path_buf()
    };
    let rd = std::fs::read_dir(&scan_dir).map_err(|e| Error::io(&scan_dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(&scan_dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("ply") {
            continue;
        }
        let Some(stamp) = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<f64>().ok())
        else {
            continue;
        };
        out.push((stamp, path));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

/// Loads keyframes from per-keyframe PLY scans plus a TUM poses file and
/// synthesizes odometry edges between consecutive poses.
pub fn load_keyframes(dir: impl AsRef<Path>, options: &LoadOptions) -> Result<Session> {
    let dir = dir.as_ref();
    let scans = list_scans(dir)?;
    if scans.is_empty() {
        return Err(Error::EmptyDirectory(dir.to_path_buf()));
    }
    let poses = read_tum(dir.join("poses.tum"))?;
    let entries = poses.entries();

    let mut matched = vec![false; entries.len()];
    let mut keyframes = Vec::with_capacity(scans.len());
    for (stamp, path) in &scans {
        let pos = entries.partition_point(|e| e.0 < stamp - STAMP_TOLERANCE);
        let Some(j) = (pos..entries.len())
            .take_while(|&j| entries[j].0 <= stamp + STAMP_TOLERANCE)
            .next()
        else {
            return Err(Error::TimestampMismatch(*stamp));
        };
        matched[j] = true;
        let scan = ply::read_cloud(path)?;
        let desc_path = dir
            .join("descriptors")
            .join(format!("{}.csv", stamp_name(*stamp)));
        let descriptor = if desc_path.is_file() {
            Some(IscDescriptor::read_csv(&desc_path)?)
        } else {
            None
        };
        keyframes.push(Keyframe {
            index: keyframes.len(),
            timestamp: entries[j].0,
            odom_pose: entries[j].1,
            scan,
            descriptor,
        });
    }
    if let Some(j) = matched.iter().position(|m| !m) {
        return Err(Error::MissingScan(entries[j].0));
    }

    let label = options.label.clone().or_else(|| {
        std::fs::read_to_string(dir.join("manifest.json"))
            .ok()
            .and_then(|t| serde_json::from_str::<SessionManifest>(&t).ok())
            .map(|m| m.label)
    });
    let session = Session::from_keyframes(
        keyframes,
        label.unwrap_or_else(|| "query".to_string()),
        options.odometry_information,
    )?;
    session.decimated(options.min_time_gap)
}

/// [`load_keyframes`] plus loop edges and odometry information from `graph.g2o`
/// when present.
pub fn load_session(dir: impl AsRef<Path>, options: &LoadOptions) -> Result<Session> {
    let dir = dir.as_ref();
    let session = load_keyframes(dir, options)?;
    let graph_path = dir.join("graph.g2o");
    if !graph_path.is_file() || options.min_time_gap > 0.0 {
        return Ok(session);
    }
    let graph = read_g2o_graph(&graph_path)?;
    let mut odometry = session.odometry_edges().to_vec();
    let mut loops = Vec::new();
    for e in graph.edges {
        if e.to == e.from + 1 {
            if let Some(o) = odometry.get_mut(e.from) {
                if o.relative.max_abs_diff(&e.relative) <= 1e-7 {
                    o.information = e.information;
                    continue;
                }
            }
        }
        loops.push(e);
    }
    let label = session.frame_label.clone();
    let keyframes = session.keyframes().to_vec();
    Session::new(keyframes, odometry, loops, label)
}

/// Writes a session in the layout read by [`load_session`]. Output bytes depend
/// only on the session content.
pub fn save_session(
    session: &Session,
    dir: impl AsRef<Path>,
    descriptor_params: Option<&IscParams>,
) -> Result<()> {
    let dir = dir.as_ref();
    let scans = dir.join("scans");
    std::fs::create_dir_all(&scans).map_err(|e| Error::io(&scans, e))?;
    let has_desc = session.keyframes().iter().any(|k| k.descriptor.is_some());
    if has_desc {
        let d = dir.join("descriptors");
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for k in session.keyframes() {
        let name = stamp_name(k.timestamp);
        ply::write_cloud(
            scans.join(format!("{name}.ply")),
            &k.scan,
            PlyFormat::BinaryLittleEndian,
        )?;
        if let Some(d) = &k.descriptor {
            d.write_csv(dir.join("descriptors").join(format!("{name}.csv")))?;
        }
    }
    write_tum(&session.trajectory(), dir.join("poses.tum"))?;
    write_g2o(session, dir.join("graph.g2o"))?;
    let manifest = SessionManifest {
        label: session.frame_label.clone(),
        keyframes: session.len(),
        descriptor_params: descriptor_params.cloned(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::tests::chain;

    #[test]
    fn save_then_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = chain(3);
        save_session(&s, dir.path(), None).unwrap();
        let back = load_keyframes(dir.path(), &LoadOptions::default()).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.odometry_edges().len(), 2);
        for (a, b) in s.keyframes().iter().zip(back.keyframes()) {
            assert!(a.odom_pose.max_abs_diff(&b.odom_pose) < 1e-9);
            assert_eq!(a.scan, b.scan);
        }
        assert_eq!(back.frame_label, "query");
    }

    #[test]
    fn pose_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_session(&chain(3), dir.path(), None).unwrap();
        let text = std::fs::read_to_string(dir.path().join("poses.tum")).unwrap();
        let two: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        std::fs::write(dir.path().join("poses.tum"), two).unwrap();
        assert!(matches!(
            load_keyframes(dir.path(), &LoadOptions::default()),
            Err(Error::TimestampMismatch(_))
        ));
    }

    #[test]
    fn extra_pose_is_missing_scan() {
        let dir = tempfile::tempdir().unwrap();
        save_session(&chain(3), dir.path(), None).unwrap();
        let mut text = std::fs::read_to_string(dir.path().join("poses.tum")).unwrap();
        text.push_str("99.0 0 0 0 0 0 0 1\n");
        std::fs::write(dir.path().join("poses.tum"), text).unwrap();
        assert!(matches!(
            load_keyframes(dir.path(), &LoadOptions::default()),
            Err(Error::MissingScan(_))
        ));
    }

    #[test]
    fn empty_directory() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_keyframes(dir.path(), &LoadOptions::default()),
            Err(Error::EmptyDirectory(_))
        ));
    }
}
