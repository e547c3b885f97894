use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix6, Quaternion, UnitQuaternion, Vector3};

use super::{Edge, Keyframe, Session};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Pose3};

const VERTEX: &str = "VERTEX_SE3:QUAT";
const EDGE: &str = "EDGE_SE3:QUAT";

/// Plain pose graph as stored in a g2o file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct G2oGraph {
    pub vertices: Vec<(usize, Pose3)>,
    pub edges: Vec<Edge>,
}

fn push_pose(s: &mut String, p: &Pose3) {
    let t = p.translation();
    let q = p.rotation().quaternion();
    let _ = write!(s, " {} {} {} {} {} {} {}", t.x, t.y, t.z, q.i, q.j, q.k, q.w);
}

impl G2oGraph {
    pub fn to_g2o_string(&self) -> String {
        let mut s = String::new();
        for (id, p) in &self.vertices {
            let _ = write!(s, "{VERTEX} {id}");
            push_pose(&mut s, p);
            s.push('\n');
        }
        for e in &self.edges {
            let _ = write!(s, "{EDGE} {} {}", e.from, e.to);
            push_pose(&mut s, &e.relative);
            for r in 0..6 {
                for c in r..6 {
                    let _ = write!(s, " {}", e.information[(r, c)]);
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut g = G2oGraph::default();
        for (ln, line) in text.lines().enumerate() {
            let line_no = ln + 1;
            let mut toks = line.split_whitespace();
            let Some(tag) = toks.next() else { continue };
            if tag.starts_with('#') || tag == "FIX" {
                continue;
            }
            let nums: Vec<f64> = toks
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(source, line_no, "non-numeric field"))?;
            let pose = |v: &[f64]| -> Result<Pose3> {
                let q = Quaternion::new(v[6], v[3], v[4], v[5]);
                if q.norm() < 1e-9 {
                    return Err(Error::parse(source, line_no, "zero quaternion"));
                }
                Ok(Pose3::new(
                    UnitQuaternion::new_normalize(q),
                    Vector3::new(v[0], v[1], v[2]),
                ))
            };
            let as_id = |v: f64| -> Result<usize> {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::parse(source, line_no, "invalid vertex id"))
                }
            };
            match tag {
                VERTEX => {
                    if nums.len() != 8 {
                        return Err(Error::parse(source, line_no, "vertex needs 8 fields"));
                    }
                    g.vertices.push((as_id(nums[0])?, pose(&nums[1..])?));
                }
                EDGE => {
                    if nums.len() != 30 {
                        return Err(Error::parse(source, line_no, "edge needs 30 fields"));
                    }
                    let mut info = Matrix6::zeros();
                    let mut k = 9;
                    for r in 0..6 {
                        for c in r..6 {
                            info[(r, c)] = nums[k];
                            info[(c, r)] = nums[k];
                            k += 1;
                        }
                    }
                    g.edges.push(Edge {
                        from: as_id(nums[0])?,
                        to: as_id(nums[1])?,
                        relative: pose(&nums[2..9])?,
                        information: info,
                    });
                }
                other => {
                    return Err(Error::parse(source, line_no, format!("unknown record '{other}'")))
                }
            }
        }
        Ok(g)
    }
}

pub fn write_g2o_graph(graph: &G2oGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, graph.to_g2o_string()).map_err(|e| Error::io(path, e))
}

pub fn read_g2o_graph(path: impl AsRef<Path>) -> Result<G2oGraph> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    G2oGraph::parse(&text, &path.display().to_string())
}

impl From<&Session> for G2oGraph {
    fn from(s: &Session) -> Self {
        G2oGraph {
            vertices: s.keyframes().iter().map(|k| (k.index, k.odom_pose)).collect(),
            edges: s
                .odometry_edges()
                .iter()
                .chain(s.loop_edges())
                .copied()
                .collect(),
        }
    }
}

pub fn write_g2o(session: &Session, path: impl AsRef<Path>) -> Result<()> {
    write_g2o_graph(&G2oGraph::from(session), path)
}

/// Reads a graph-only session: keyframes carry empty scans and use the vertex
/// id as timestamp. Consecutive edges that agree with the vertex poses become
/// odometry edges; all others are loop edges.
pub fn read_g2o(path: impl AsRef<Path>) -> Result<Session> {
    let path = path.as_ref();
    let pname = path.display().to_string();
    let mut g = read_g2o_graph(path)?;
    g.vertices.sort_by_key(|v| v.0);
    for (i, (id, _)) in g.vertices.iter().enumerate() {
        if *id != i {
            return Err(Error::parse(&pname, 0, "vertex ids must be contiguous from 0"));
        }
    }
    let keyframes: Vec<Keyframe> = g
        .vertices
        .iter()
        .map(|&(id, pose)| Keyframe {
            index: id,
            timestamp: id as f64,
            odom_pose: pose,
            scan: PointCloud::empty(),
            descriptor: None,
        })
        .collect();
    let n = keyframes.len();
    let mut odometry = Vec::new();
    let mut loops = Vec::new();
    for e in g.edges {
        if e.from >= n || e.to >= n {
            return Err(Error::parse(&pname, 0, format!("edge {}->{} references a missing vertex", e.from, e.to)));
        }
        let consistent = e.to == e.from + 1
            && keyframes[e.to]
                .odom_pose
                .relative(&keyframes[e.from].odom_pose)
                .max_abs_diff(&e.relative)
                <= 1e-9;
        if consistent && !odometry.iter().any(|o: &Edge| o.from == e.from) {
            odometry.push(e);
        } else {
            loops.push(e);
        }
    }
    odometry.sort_by_key(|e| e.from);
    Session::new(keyframes, odometry, loops, "g2o")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::tests::chain;

    #[test]
    fn empty_session_writes_nothing() {
        let s = Session::from_keyframes(vec![], "x", Matrix6::identity()).unwrap();
        assert_eq!(G2oGraph::from(&s).to_g2o_string(), "");
    }

    #[test]
    fn two_pose_chain_counts() {
        let text = G2oGraph::from(&chain(2)).to_g2o_string();
        assert_eq!(text.lines().filter(|l| l.starts_with(VERTEX)).count(), 2);
        assert_eq!(text.lines().filter(|l| l.starts_with(EDGE)).count(), 1);
    }

    #[test]
    fn graph_round_trip() {
        let mut s = chain(5);
        let mut info = Matrix6::from_fn(|r, c| if r == c { 100.0 + r as f64 } else { 0.5 / (1 + r + c) as f64 });
        info = (info + info.transpose()) * 0.5;
        let loops = vec![Edge {
            from: 0,
            to: 4,
            relative: Pose3::from_yaw(0.3, Vector3::new(1.0, 2.0, 3.0)),
            information: info,
        }];
        s = Session::new(s.keyframes().to_vec(), s.odometry_edges().to_vec(), loops, "q").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.g2o");
        write_g2o(&s, &p).unwrap();
        let back = read_g2o(&p).unwrap();
        assert_eq!(back.len(), 5);
        for (a, b) in s.keyframes().iter().zip(back.keyframes()) {
            assert!(a.odom_pose.max_abs_diff(&b.odom_pose) < 1e-7);
        }
        assert_eq!(back.odometry_edges().len(), 4);
        assert_eq!(back.loop_edges().len(), 1);
        // information recovered exactly
        assert_eq!(back.loop_edges()[0].information, info);
        assert!(back.loop_edges()[0].relative.max_abs_diff(&loops_pose()) < 1e-7);
    }

    fn loops_pose() -> Pose3 {
        Pose3::from_yaw(0.3, Vector3::new(1.0, 2.0, 3.0))
    }

    #[test]
    fn parse_error_has_line_number() {
        let err = G2oGraph::parse("VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\nVERTEX_SE3:QUAT 1 0 0\n", "f").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = G2oGraph::parse("BOGUS 1 2\n", "f").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }
}
