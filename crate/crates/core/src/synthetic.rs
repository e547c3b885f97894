//! Synthetic indoor worlds and drifted query sessions with known ground truth.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose3;
use crate::isc::IscParams;
use crate::session::{Edge, Keyframe, Session, DEFAULT_ODOMETRY_VARIANCE};
use crate::sim::{simulate_scan_with_stream, LidarModel, MeshBuilder, TriangleMesh};

pub const WALL_THICKNESS: f64 = 0.2;
pub const CEILING_HEIGHT: f64 = 3.0;
const DOOR_HEIGHT: f64 = 2.1;

type Solid = (Vector3<f64>, Vector3<f64>);

/// Axis-aligned wall from `a` to `b` (one coordinate shared) with door gaps
/// given as `(start, end)` along the wall.
#[derive(Debug, Clone)]
pub struct Wall {
    pub a: Vector2<f64>,
    pub b: Vector2<f64>,
    pub doors: Vec<(f64, f64)>,
}

impl Wall {
    pub fn new(a: (f64, f64), b: (f64, f64), doors: &[(f64, f64)]) -> Self {
        Self {
            a: Vector2::new(a.0, a.1),
            b: Vector2::new(b.0, b.1),
            doors: doors.to_vec(),
        }
    }

    /// Wall pieces and door lintels.
    fn solids(&self) -> Vec<Solid> {
        let horizontal = (self.a.y - self.b.y).abs() < 1e-12;
        let (lo, hi) = if horizontal {
            (self.a.x.min(self.b.x), self.a.x.max(self.b.x))
        } else {
            (self.a.y.min(self.b.y), self.a.y.max(self.b.y))
        };
        let fixed = if horizontal { self.a.y } else { self.a.x };
        let h = WALL_THICKNESS / 2.0;
        let mut out = Vec::new();
        let mut block = |s: f64, e: f64, z0: f64, z1: f64| {
            if e - s <= 1e-9 {
                return;
            }
            out.push(if horizontal {
                (Vector3::new(s, fixed - h, z0), Vector3::new(e, fixed + h, z1))
            } else {
                (Vector3::new(fixed - h, s, z0), Vector3::new(fixed + h, e, z1))
            });
        };
        let mut doors = self.doors.clone();
        doors.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut cur = lo;
        for (s, e) in doors {
            block(cur, s, 0.0, CEILING_HEIGHT);
            block(s, e, DOOR_HEIGHT, CEILING_HEIGHT);
            cur = e;
        }
        block(cur, hi, 0.0, CEILING_HEIGHT);
        out
    }
}

/// Building description: interior footprint, walls, furniture boxes. Built
/// meshes contain only visible surfaces: floor and ceiling are single-sided
/// and faces buried in them are dropped.
#[derive(Debug, Clone)]
pub struct WorldLayout {
    pub min: Vector2<f64>,
    pub max: Vector2<f64>,
    /// Gaps in the outer wall, as `(wall, start, end)` with wall 0..4 being
    /// south, east, north, west.
    pub exits: Vec<(usize, f64, f64)>,
    pub walls: Vec<Wall>,
    pub boxes: Vec<Solid>,
    /// Floored rectangles outside the footprint.
    pub extra_floor: Vec<(Vector2<f64>, Vector2<f64>)>,
}

impl WorldLayout {
    pub fn empty_room(min: (f64, f64), max: (f64, f64)) -> Self {
        Self {
            min: Vector2::new(min.0, min.1),
            max: Vector2::new(max.0, max.1),
            exits: Vec::new(),
            walls: Vec::new(),
            boxes: Vec::new(),
            extra_floor: Vec::new(),
        }
    }

    pub fn with_box(mut self, min: (f64, f64, f64), max: (f64, f64, f64)) -> Self {
        self.boxes.push((Vector3::new(min.0, min.1, min.2), Vector3::new(max.0, max.1, max.2)));
        self
    }

    pub fn with_wall(mut self, wall: Wall) -> Self {
        self.walls.push(wall);
        self
    }

    fn solids(&self) -> Vec<Solid> {
        let t = WALL_THICKNESS;
        let h = t / 2.0;
        let (lo, hi) = (self.min, self.max);
        let doors = |side: usize| -> Vec<(f64, f64)> {
            self.exits.iter().filter(|e| e.0 == side).map(|e| (e.1, e.2)).collect()
        };
        let outer = [
            Wall::new((lo.x - t, lo.y - h), (hi.x + t, lo.y - h), &doors(0)),
            Wall::new((hi.x + h, lo.y), (hi.x + h, hi.y), &doors(1)),
            Wall::new((lo.x - t, hi.y + h), (hi.x + t, hi.y + h), &doors(2)),
            Wall::new((lo.x - h, lo.y), (lo.x - h, hi.y), &doors(3)),
        ];
        let mut out: Vec<Solid> = outer.iter().chain(&self.walls).flat_map(|w| w.solids()).collect();
        out.extend(self.boxes.iter().copied());
        out
    }

    pub fn build(&self) -> Result<TriangleMesh> {
        let solids = self.solids();
        let mut regions = vec![(self.min, self.max)];
        for &(side, s, e) in &self.exits {
            let t = WALL_THICKNESS;
            regions.push(match side {
                0 => (Vector2::new(s, self.min.y - t), Vector2::new(e, self.min.y)),
                1 => (Vector2::new(self.max.x, s), Vector2::new(self.max.x + t, e)),
                2 => (Vector2::new(s, self.max.y), Vector2::new(e, self.max.y + t)),
                _ => (Vector2::new(self.min.x - t, s), Vector2::new(self.min.x, e)),
            });
        }
        regions.extend(self.extra_floor.iter().copied());

        let mut xs: Vec<f64> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        for (a, b) in &regions {
            xs.extend([a.x, b.x]);
            ys.extend([a.y, b.y]);
        }
        for (a, b) in &solids {
            xs.extend([a.x, b.x]);
            ys.extend([a.y, b.y]);
        }
        for v in [&mut xs, &mut ys] {
            v.sort_by(f64::total_cmp);
            v.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        }
        let covers = |s: &Solid, c: &Vector2<f64>| s.0.x < c.x && c.x < s.1.x && s.0.y < c.y && c.y < s.1.y;
        let mut m = MeshBuilder::new();
        for j in 0..ys.len() - 1 {
            // runs of equal cells along x merge into one quad
            let mut run: Option<(usize, [bool; 2])> = None;
            for i in 0..=xs.len() - 1 {
                let flags = if i < xs.len() - 1 {
                    let c = Vector2::new(0.5 * (xs[i] + xs[i + 1]), 0.5 * (ys[j] + ys[j + 1]));
                    let inside = regions.iter().any(|(a, b)| a.x < c.x && c.x < b.x && a.y < c.y && c.y < b.y);
                    [
                        inside && !solids.iter().any(|s| s.0.z <= 1e-9 && covers(s, &c)),
                        inside && !solids.iter().any(|s| s.1.z >= CEILING_HEIGHT - 1e-9 && covers(s, &c)),
                    ]
                } else {
                    [false, false]
                };
                match run {
                    Some((_, f)) if f == flags => {}
                    _ => {
                        if let Some((i0, f)) = run {
                            let (x0, x1, y0, y1) = (xs[i0], xs[i], ys[j], ys[j + 1]);
                            if f[0] {
                                m.quad(
                                    Vector3::new(x0, y0, 0.0),
                                    Vector3::new(x1, y0, 0.0),
                                    Vector3::new(x1, y1, 0.0),
                                    Vector3::new(x0, y1, 0.0),
                                );
                            }
                            if f[1] {
                                let z = CEILING_HEIGHT;
                                m.quad(
                                    Vector3::new(x0, y0, z),
                                    Vector3::new(x0, y1, z),
                                    Vector3::new(x1, y1, z),
                                    Vector3::new(x1, y0, z),
                                );
                            }
                        }
                        run = Some((i, flags));
                    }
                }
            }
        }
        for (a, b) in &solids {
            let bottom = a.z > 1e-9;
            let top = b.z < CEILING_HEIGHT - 1e-9;
            m.aabb_faces(*a, *b, [bottom, top, true, true, true, true]);
        }
        m.build()
    }
}

/// 30 m × 20 m floor with a pillared hall and three rooms joined by doors.
pub fn multi_room_layout() -> WorldLayout {
    let mut w = WorldLayout::empty_room((0.0, 0.0), (30.0, 20.0));
    w.walls = vec![
        Wall::new((12.0, 0.0), (12.0, 20.0), &[(4.0, 5.5), (14.0, 15.5)]),
        Wall::new((12.1, 10.0), (30.0, 10.0), &[(20.0, 21.5)]),
        Wall::new((22.0, 10.1), (22.0, 20.0), &[(15.0, 16.5)]),
    ];
    let boxes = [
        // hall: pillars and a counter
        ((3.8, 7.8, 0.0), (4.2, 8.2, 3.0)),
        ((7.8, 7.8, 0.0), (8.2, 8.2, 3.0)),
        ((3.8, 11.8, 0.0), (4.2, 12.2, 3.0)),
        ((7.8, 11.8, 0.0), (8.2, 12.2, 3.0)),
        ((1.0, 17.0, 0.0), (5.0, 19.0, 1.1)),
        ((0.0, 0.0, 0.0), (0.6, 3.0, 2.0)),
        // south room: shelving and tables
        ((14.0, 0.0, 0.0), (18.0, 0.5, 2.2)),
        ((24.0, 1.5, 0.0), (26.0, 2.5, 0.8)),
        ((29.4, 6.0, 0.0), (30.0, 9.0, 1.8)),
        ((16.0, 7.5, 0.0), (17.0, 9.0, 1.4)),
        // north-west room
        ((12.1, 18.8, 0.0), (16.0, 20.0, 2.0)),
        ((17.0, 12.5, 0.0), (18.5, 13.5, 1.0)),
        // north-east room
        ((27.0, 12.0, 0.0), (30.0, 13.0, 1.5)),
        ((24.0, 18.0, 0.0), (25.5, 20.0, 2.4)),
    ];
    for (a, b) in boxes {
        w = w.with_box(a, b);
    }
    w
}

pub fn multi_room_world() -> Result<TriangleMesh> {
    multi_room_layout().build()
}

/// The multi-room world with a door in the east wall of the south room and an
/// L-shaped corridor outside it: 8 m east, then 12 m north. Returns
/// `(reference, extended)`; the corridor only exists in the extended mesh.
pub fn multi_room_world_with_exit() -> Result<(TriangleMesh, TriangleMesh)> {
    let mut layout = multi_room_layout();
    layout.exits.push((1, 4.0, 5.5));
    let reference = layout.build()?;
    let t = WALL_THICKNESS;
    let x0 = 30.0 + t;
    let (y0, y1) = (4.0, 5.5);
    let (xw, xe, yn) = (38.0, 39.5, 17.5);
    let v = |x: f64, y: f64| Vector2::new(x, y);
    layout.extra_floor = vec![(v(x0, y0), v(xe, y1)), (v(xw, y1), v(xe, yn))];
    let b = |a: (f64, f64, f64), c: (f64, f64, f64)| (Vector3::new(a.0, a.1, a.2), Vector3::new(c.0, c.1, c.2));
    let h = CEILING_HEIGHT;
    layout.boxes.extend([
        b((x0, y0 - t, 0.0), (xe + t, y0, h)),
        b((xe, y0, 0.0), (xe + t, yn + t, h)),
        b((xw - t, yn, 0.0), (xe, yn + t, h)),
        b((x0, y1, 0.0), (xw - t, y1 + t, h)),
        b((xw - t, y1, 0.0), (xw, yn, h)),
        b((33.0, y0, 0.0), (33.6, y0 + 0.3, 1.2)),
        b((xe - 0.4, 10.0, 0.0), (xe, 11.0, 1.8)),
        b((xw, 14.0, 0.0), (xw + 0.3, 14.5, 2.0)),
    ]);
    Ok((reference, layout.build()?))
}

/// Ground-truth keyframe poses along a polyline, every `spacing` meters of
/// arc length, heading along the current segment, at height `z`.
pub fn polyline_poses(waypoints: &[(f64, f64)], spacing: f64, z: f64) -> Result<Vec<Pose3>> {
    if waypoints.len() < 2 || !(spacing > 0.0) {
        return Err(Error::InvalidParameter("need >= 2 waypoints and spacing > 0".into()));
    }
    let mut out = Vec::new();
    let mut carry = 0.0;
    for w in waypoints.windows(2) {
        let a = Vector2::new(w[0].0, w[0].1);
        let b = Vector2::new(w[1].0, w[1].1);
        let len = (b - a).norm();
        if len < 1e-12 {
            continue;
        }
        let dir = (b - a) / len;
        let yaw = dir.y.atan2(dir.x);
        let mut s = carry;
        while s < len - 1e-9 {
            let p = a + dir * s;
            out.push(Pose3::from_yaw(yaw, Vector3::new(p.x, p.y, z)));
            s += spacing;
        }
        carry = s - len;
    }
    let last = waypoints[waypoints.len() - 1];
    let prev = waypoints[waypoints.len() - 2];
    let yaw = (last.1 - prev.1).atan2(last.0 - prev.0);
    out.push(Pose3::from_yaw(yaw, Vector3::new(last.0, last.1, z)));
    Ok(out)
}

/// Path through all four areas of the multi-room world.
pub fn multi_room_query_waypoints() -> Vec<(f64, f64)> {
    vec![
        (1.5, 4.75),
        (17.0, 4.75),
        (26.5, 4.75),
        (26.5, 7.5),
        (20.75, 7.5),
        (20.75, 15.75),
        (26.5, 15.75),
        (17.0, 15.75),
        (17.0, 14.75),
        (6.0, 14.75),
        (6.0, 9.5),
    ]
}

/// Path that leaves the south room through the east door and follows the
/// corridor to its end.
pub fn exit_query_waypoints() -> Vec<(f64, f64)> {
    vec![(1.5, 4.75), (26.5, 4.75), (38.75, 4.75), (38.75, 16.5)]
}

/// Constant per-keyframe odometry bias.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftModel {
    /// Degrees of yaw added to every odometry step.
    pub yaw_per_keyframe_deg: f64,
    /// Meters added along the body x axis of every odometry step.
    pub translation_per_keyframe: f64,
}

impl Default for DriftModel {
    fn default() -> Self {
        Self {
            yaw_per_keyframe_deg: 0.1,
            translation_per_keyframe: 0.01,
        }
    }
}

/// Odometry in a local frame whose origin is the first pose: every true step
/// is composed with the bias step.
pub fn drifted_odometry(ground_truth: &[Pose3], drift: &DriftModel) -> Vec<Pose3> {
    let bias = Pose3::from_yaw(
        drift.yaw_per_keyframe_deg.to_radians(),
        Vector3::new(drift.translation_per_keyframe, 0.0, 0.0),
    );
    let mut out = Vec::with_capacity(ground_truth.len());
    let mut cur = Pose3::identity();
    for (i, gt) in ground_truth.iter().enumerate() {
        if i > 0 {
            let step = gt.relative(&ground_truth[i - 1]);
            cur = cur.compose(&step).compose(&bias);
        }
        out.push(cur);
    }
    out
}

/// Query session: scans simulated at the ground-truth poses, odometry from
/// `odometry`, timestamps `t0 + index`.
pub fn simulate_session(
    mesh: &TriangleMesh,
    ground_truth: &[Pose3],
    odometry: &[Pose3],
    model: &LidarModel,
    descriptor_params: &IscParams,
    t0: f64,
    label: &str,
) -> Result<Session> {
    if ground_truth.len() != odometry.len() {
        return Err(Error::LengthMismatch { left: ground_truth.len(), right: odometry.len() });
    }
    model.validate()?;
    let keyframes = ground_truth
        .iter()
        .zip(odometry)
        .enumerate()
        .map(|(i, (gt, odom))| Keyframe {
            index: i,
            timestamp: t0 + i as f64,
            odom_pose: *odom,
            scan: simulate_scan_with_stream(mesh, gt, model, i as u64),
            descriptor: None,
        })
        .collect();
    let mut s = Session::from_keyframes(keyframes, label, Edge::isotropic_information(DEFAULT_ODOMETRY_VARIANCE))?;
    s.compute_descriptors(descriptor_params);
    Ok(s)
}

/// Single 10 m × 8 m room with a table and a cabinet, used by the change
/// detection fixtures.
pub fn change_room_layout() -> WorldLayout {
    WorldLayout::empty_room((0.0, 0.0), (10.0, 8.0))
        .with_box((0.0, 6.5, 0.0), (2.0, 8.0, 1.8))
        .with_box((7.0, 1.0, 0.0), (8.5, 2.0, 0.8))
}

/// Reference room plus the same room with a 1 m cube hanging at
/// `(4.5..5.5, 3.5..4.5, 1..2)`, straddling the sensor height so that its four
/// sides are visible; returns the cube centroid too.
pub fn box_insertion_fixture() -> Result<(TriangleMesh, TriangleMesh, Vector3<f64>)> {
    let reference = change_room_layout().build()?;
    let changed = change_room_layout().with_box((4.5, 3.5, 1.0), (5.5, 4.5, 2.0)).build()?;
    Ok((reference, changed, Vector3::new(5.0, 4.0, 1.5)))
}

/// Reference room with a partition wall at x = 6 (y from 0 to 4) and the
/// same room without it; returns the removed wall's box.
pub fn wall_removal_fixture() -> Result<(TriangleMesh, TriangleMesh, (Vector3<f64>, Vector3<f64>))> {
    let wall = Wall::new((6.0, 0.0), (6.0, 4.0), &[]);
    let reference = change_room_layout().with_wall(wall).build()?;
    let changed = change_room_layout().build()?;
    let h = WALL_THICKNESS / 2.0;
    Ok((reference, changed, (Vector3::new(6.0 - h, 0.0, 0.0), Vector3::new(6.0 + h, 4.0, CEILING_HEIGHT))))
}

/// Sensor poses observing the change room from several places.
pub fn change_room_poses(z: f64) -> Vec<Pose3> {
    [(2.0, 2.0, 0.3), (3.0, 5.0, -0.4), (8.5, 5.5, 2.5), (8.0, 3.5, 1.9), (4.0, 1.5, 0.9), (8.8, 7.0, -2.4)]
        .iter()
        .map(|&(x, y, yaw)| Pose3::from_yaw(yaw, Vector3::new(x, y, z)))
        .collect()
}
