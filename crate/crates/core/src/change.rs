//! Change detection against a reference cloud: log-odds occupancy fusion of
//! aligned scans, positive and negative differences, clustering and voxel
//! meshes for export.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ply::{write_cloud, write_mesh, PlyFormat};
use crate::geometry::{NnIndex, PointCloud, Pose3};

pub type VoxelKey = [i64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancyParams {
    pub hit: f64,
    pub miss: f64,
    pub clamp_min: f64,
    pub clamp_max: f64,
    /// Occupied iff log-odds > this.
    pub occupied_threshold: f64,
    /// Free iff log-odds < this.
    pub free_threshold: f64,
    /// Carving along a ray stops `carve_margin / sin(incidence)` short of the
    /// return, meters; 0 carves up to the endpoint voxel.
    pub carve_margin: f64,
    /// Lower bound on the incidence sine, also used when a return has no
    /// surface normal.
    pub min_incidence_sine: f64,
    /// Neighbors and search radius for scan normals.
    pub normal_k: usize,
    pub normal_radius: f64,
}

impl Default for OccupancyParams {
    fn default() -> Self {
        Self {
            hit: 0.85,
            miss: -0.4,
            clamp_min: -2.0,
            clamp_max: 3.5,
            occupied_threshold: 0.0,
            free_threshold: 0.0,
            carve_margin: 0.1,
            min_incidence_sine: 0.3,
            normal_k: 10,
            normal_radius: 0.5,
        }
    }
}

impl OccupancyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.hit > 0.0 && self.miss < 0.0) {
            return Err(Error::InvalidParameter("need hit > 0 and miss < 0".into()));
        }
        if !(self.clamp_min < 0.0 && self.clamp_max > 0.0) {
            return Err(Error::InvalidParameter("need clamp_min < 0 < clamp_max".into()));
        }
        if !(self.free_threshold <= self.occupied_threshold) {
            return Err(Error::InvalidParameter("free_threshold must not exceed occupied_threshold".into()));
        }
        if !(self.carve_margin >= 0.0 && self.min_incidence_sine > 0.0 && self.min_incidence_sine <= 1.0) {
            return Err(Error::InvalidParameter("need carve_margin >= 0 and min_incidence_sine in (0, 1]".into()));
        }
        if self.normal_k < 3 || !(self.normal_radius > 0.0) {
            return Err(Error::InvalidParameter("need normal_k >= 3 and normal_radius > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VoxelState {
    Occupied,
    Free,
    Unknown,
}

#[derive(Debug, Clone)]
pub struct OccupancyVoxelGrid {
    resolution: f64,
    origin: Vector3<f64>,
    params: OccupancyParams,
    log_odds: HashMap<VoxelKey, f64>,
    scans: usize,
}

impl OccupancyVoxelGrid {
    pub fn new(resolution: f64, origin: Vector3<f64>, params: OccupancyParams) -> Result<Self> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::InvalidParameter("resolution must be finite and > 0".into()));
        }
        params.validate()?;
        Ok(Self { resolution, origin, params, log_odds: HashMap::new(), scans: 0 })
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> &Vector3<f64> {
        &self.origin
    }

    pub fn params(&self) -> &OccupancyParams {
        &self.params
    }

    pub fn scans_integrated(&self) -> usize {
        self.scans
    }

    /// Number of voxels touched at least once.
    pub fn len(&self) -> usize {
        self.log_odds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_odds.is_empty()
    }

    pub fn key(&self, p: &Vector3<f64>) -> VoxelKey {
        let g = (p - self.origin) / self.resolution;
        [g.x.floor() as i64, g.y.floor() as i64, g.z.floor() as i64]
    }

    pub fn center(&self, k: &VoxelKey) -> Vector3<f64> {
        self.origin + Vector3::new(k[0] as f64 + 0.5, k[1] as f64 + 0.5, k[2] as f64 + 0.5) * self.resolution
    }

    pub fn log_odds(&self, k: &VoxelKey) -> Option<f64> {
        self.log_odds.get(k).copied()
    }

    pub fn state(&self, k: &VoxelKey) -> VoxelState {
        match self.log_odds.get(k) {
            Some(&l) if l > self.params.occupied_threshold => VoxelState::Occupied,
            Some(&l) if l < self.params.free_threshold => VoxelState::Free,
            _ => VoxelState::Unknown,
        }
    }

    pub fn state_at(&self, p: &Vector3<f64>) -> VoxelState {
        self.state(&self.key(p))
    }

    /// Voxels in `state`, sorted by key.
    pub fn voxels(&self, state: VoxelState) -> Vec<VoxelKey> {
        let mut v: Vec<VoxelKey> = self.log_odds.keys().filter(|k| self.state(k) == state).copied().collect();
        v.sort_unstable();
        v
    }

    /// Voxels a ray from `from` to the return `to` carves, in traversal order,
    /// given the surface normal at the return (if known). The endpoint voxel
    /// is never included.
    pub fn carved_voxels(&self, from: &Vector3<f64>, to: &Vector3<f64>, normal: Option<&Vector3<f64>>) -> Vec<VoxelKey> {
        let mut out = Vec::new();
        self.traverse(from, to, self.stop_short(from, to, normal), |k| out.push(k));
        out
    }

    fn stop_short(&self, from: &Vector3<f64>, to: &Vector3<f64>, normal: Option<&Vector3<f64>>) -> f64 {
        let eps = self.params.min_incidence_sine;
        let sine = match normal {
            Some(n) => ((to - from).normalize().dot(n).abs()).max(eps),
            None => eps,
        };
        self.params.carve_margin / sine
    }

    // 3-D DDA over the segment, ending `short` meters before `to`
    fn traverse(&self, from: &Vector3<f64>, to: &Vector3<f64>, short: f64, mut visit: impl FnMut(VoxelKey)) {
        let range = (to - from).norm();
        if !(range > 0.0) {
            return;
        }
        let t_stop = (range - short) / range;
        if t_stop <= 0.0 {
            return;
        }
        let o = (from - self.origin) / self.resolution;
        let e = (to - self.origin) / self.resolution;
        let d = e - o;
        let mut cur = [o.x.floor() as i64, o.y.floor() as i64, o.z.floor() as i64];
        let end = [e.x.floor() as i64, e.y.floor() as i64, e.z.floor() as i64];
        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for a in 0..3 {
            if d[a] > 0.0 {
                step[a] = 1;
                t_max[a] = ((cur[a] + 1) as f64 - o[a]) / d[a];
                t_delta[a] = 1.0 / d[a];
            } else if d[a] < 0.0 {
                step[a] = -1;
                t_max[a] = (cur[a] as f64 - o[a]) / d[a];
                t_delta[a] = -1.0 / d[a];
            }
        }
        let budget: i64 = (0..3).map(|a| (end[a] - cur[a]).abs()).sum::<i64>() + 1;
        let mut entry = 0.0;
        for _ in 0..budget {
            if cur == end || entry >= t_stop {
                return;
            }
            visit(cur);
            let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            entry = t_max[a];
            if entry > 1.0 {
                return;
            }
            cur[a] += step[a];
            t_max[a] += t_delta[a];
        }
    }

    fn update(&mut self, k: VoxelKey, delta: f64) {
        let (lo, hi) = (self.params.clamp_min, self.params.clamp_max);
        let v = self.log_odds.entry(k).or_insert(0.0);
        *v = (*v + delta).clamp(lo, hi);
    }

    /// Integrates one scan given in the sensor frame, with incidence taken
    /// from normals estimated in the scan itself.
    pub fn integrate_scan(&mut self, scan: &PointCloud, sensor_pose: &Pose3) {
        let normals = estimate_normals(scan, self.params.normal_k, self.params.normal_radius);
        let rotated: Vec<Option<Vector3<f64>>> = normals.iter().map(|n| n.map(|n| sensor_pose.rotate_vector(&n))).collect();
        self.integrate_with_normals(scan, sensor_pose, &rotated);
    }

    /// Like [`integrate_scan`](Self::integrate_scan) with caller-supplied
    /// world-frame normals, one per return. Every touched voxel is updated
    /// once per scan; a voxel holding a return takes the hit even if other
    /// rays of the same scan pass through it.
    pub fn integrate_with_normals(&mut self, scan: &PointCloud, sensor_pose: &Pose3, normals: &[Option<Vector3<f64>>]) {
        if scan.is_empty() {
            return;
        }
        let origin = *sensor_pose.translation();
        let ends: Vec<(Vector3<f64>, Option<Vector3<f64>>)> =
            scan.iter().enumerate().map(|(i, p)| (sensor_pose.transform_point(p), normals.get(i).copied().flatten())).collect();
        let hits: HashSet<VoxelKey> = ends.iter().map(|(p, _)| self.key(p)).collect();
        let misses: HashSet<VoxelKey> = ends
            .par_chunks(4096)
            .fold(HashSet::new, |mut set, chunk| {
                for (p, n) in chunk {
                    self.traverse(&origin, p, self.stop_short(&origin, p, n.as_ref()), |k| {
                        set.insert(k);
                    });
                }
                set
            })
            .reduce(HashSet::new, |mut a, b| {
                if a.len() < b.len() {
                    return b.into_iter().chain(a).collect();
                }
                a.extend(b);
                a
            });
        let (hit, miss) = (self.params.hit, self.params.miss);
        for k in misses.into_iter().filter(|k| !hits.contains(k)) {
            self.update(k, miss);
        }
        for k in hits {
            self.update(k, hit);
        }
        self.scans += 1;
    }
}

fn plane_normal(pts: &[Vector3<f64>]) -> Option<Vector3<f64>> {
    if pts.len() < 3 {
        return None;
    }
    let mean = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let mut c = Matrix3::zeros();
    for p in pts {
        let d = p - mean;
        c += d * d.transpose();
    }
    let eig = SymmetricEigen::new(c);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let [l0, l1, l2] = order.map(|i| eig.eigenvalues[i]);
    // a line or a blob gives no usable plane
    if !(l1 > 0.05 * l2 && l0 < 0.25 * l1) {
        return None;
    }
    Some(eig.eigenvectors.column(order[0]).into_owned())
}

/// Unit normal per point from a PCA of its `k` nearest neighbors within
/// `radius`; `None` where the neighborhood is not planar.
pub fn estimate_normals(cloud: &PointCloud, k: usize, radius: f64) -> Vec<Option<Vector3<f64>>> {
    let Ok(index) = NnIndex::build(cloud.points()) else {
        return vec![None; cloud.len()];
    };
    cloud
        .points()
        .par_iter()
        .map(|p| {
            let pts: Vec<Vector3<f64>> =
                index.knn(p, k).into_iter().filter(|n| n.distance_squared <= radius * radius).map(|n| index.point(n.index)).collect();
            plane_normal(&pts)
        })
        .collect()
}

/// Centers of the occupied voxels, sorted by key.
pub fn fused_cloud(grid: &OccupancyVoxelGrid) -> Result<PointCloud> {
    if grid.scans_integrated() == 0 {
        return Err(Error::EmptyGrid);
    }
    Ok(grid.voxels(VoxelState::Occupied).iter().map(|k| grid.center(k)).collect())
}

/// Splits `fused` into points farther than `threshold` from the reference
/// (positive differences) and the rest (unaltered).
pub fn detect_positive(fused: &PointCloud, reference: &NnIndex, threshold: f64) -> (PointCloud, PointCloud) {
    let far: Vec<bool> = fused.points().par_iter().map(|p| reference.nearest_within(p, threshold).is_none()).collect();
    let mut pd = Vec::new();
    let mut ue = Vec::new();
    for (p, f) in fused.iter().zip(far) {
        if f {
            pd.push(*p);
        } else {
            ue.push(*p);
        }
    }
    (pd.into_iter().collect(), ue.into_iter().collect())
}

/// Reference points the new scans looked through: the point's voxel is free
/// and so is the space one voxel in front of and behind the reference surface
/// there. Where the reference is not locally planar, all six face neighbors
/// of the voxel must be free. Surfaces only ever seen from one side (floors,
/// faces of solid objects) therefore never qualify through grazing rays.
pub fn detect_negative(grid: &OccupancyVoxelGrid, reference: &PointCloud) -> PointCloud {
    let candidates = reference.filtered(|p| grid.state_at(p) == VoxelState::Free);
    if candidates.is_empty() {
        return candidates;
    }
    let Ok(index) = NnIndex::build(reference.points()) else {
        return PointCloud::empty();
    };
    let r = grid.resolution();
    let free = |p: Vector3<f64>| grid.state_at(&p) == VoxelState::Free;
    let keep: Vec<bool> = candidates
        .points()
        .par_iter()
        .map(|p| {
            let nb: Vec<Vector3<f64>> = index.radius(p, r).into_iter().map(|n| index.point(n.index)).collect();
            match plane_normal(&nb) {
                Some(n) => free(p + n * r) && free(p - n * r),
                None => {
                    let k = grid.key(p);
                    FACE_NEIGHBORS.iter().all(|d| grid.state(&[k[0] + d[0], k[1] + d[1], k[2] + d[2]]) == VoxelState::Free)
                }
            }
        })
        .collect();
    candidates.iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| *p).collect()
}

const FACE_NEIGHBORS: [[i64; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub eps: f64,
    pub min_points: usize,
    pub outlier_k: usize,
    pub outlier_std: f64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self { eps: 0.3, min_points: 10, outlier_k: 16, outlier_std: 2.0 }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.outlier_std > 0.0) || self.min_points == 0 || self.outlier_k == 0 {
            return Err(Error::InvalidParameter("cluster eps, min_points, outlier_k, outlier_std must be > 0".into()));
        }
        Ok(())
    }
}

/// Drops points whose mean distance to their `k` nearest neighbors exceeds
/// the population mean by more than `std_ratio` standard deviations.
pub fn remove_statistical_outliers(points: &PointCloud, k: usize, std_ratio: f64) -> PointCloud {
    let n = points.len();
    if n < 2 || k == 0 {
        return points.clone();
    }
    let Ok(index) = NnIndex::build(points.points()) else {
        return points.clone();
    };
    let k = k.min(n - 1);
    let mean_d: Vec<f64> = points
        .points()
        .par_iter()
        .map(|p| {
            // the query point itself comes back first
            let nb = index.knn(p, k + 1);
            nb.iter().skip(1).map(|x| x.distance()).sum::<f64>() / k as f64
        })
        .collect();
    let mu = mean_d.iter().sum::<f64>() / n as f64;
    let sigma = (mean_d.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / n as f64).sqrt();
    let limit = mu + std_ratio * sigma;
    points.points().iter().zip(&mean_d).filter(|(_, d)| **d <= limit).map(|(p, _)| *p).collect()
}

/// DBSCAN labels: `Some(cluster)` or `None` for noise. A point is core when
/// at least `min_points` points (itself included) lie within `eps`. Clusters
/// are numbered in order of their lowest-index core point; a border point
/// joins the first cluster that reaches it.
pub fn dbscan(points: &PointCloud, eps: f64, min_points: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let mut labels = vec![None; n];
    let Ok(index) = NnIndex::build(points.points()) else {
        return labels;
    };
    let neighbors: Vec<Vec<usize>> = points
        .points()
        .par_iter()
        .map(|p| {
            let mut v: Vec<usize> = index.radius(p, eps).into_iter().map(|x| x.index).collect();
            v.sort_unstable();
            v
        })
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|v| v.len() >= min_points).collect();
    let mut next = 0;
    for seed in 0..n {
        if !core[seed] || labels[seed].is_some() {
            continue;
        }
        labels[seed] = Some(next);
        let mut stack = vec![seed];
        while let Some(i) = stack.pop() {
            for &j in &neighbors[i] {
                if labels[j].is_none() {
                    labels[j] = Some(next);
                    if core[j] {
                        stack.push(j);
                    }
                }
            }
        }
        next += 1;
    }
    labels
}

/// Outlier removal, then DBSCAN; clusters below `min_points` are dropped.
pub fn cluster_and_filter(points: &PointCloud, params: &ClusterParams) -> Vec<PointCloud> {
    if points.is_empty() {
        return Vec::new();
    }
    let kept = remove_statistical_outliers(points, params.outlier_k, params.outlier_std);
    let labels = dbscan(&kept, params.eps, params.min_points);
    let count = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let mut clusters: Vec<Vec<Vector3<f64>>> = vec![Vec::new(); count];
    for (p, l) in kept.iter().zip(&labels) {
        if let Some(c) = l {
            clusters[*c].push(*p);
        }
    }
    clusters.into_iter().filter(|c| c.len() >= params.min_points).map(PointCloud::from_iter).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChangeColor {
    Blue,
    Red,
}

impl ChangeColor {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            ChangeColor::Blue => [0, 0, 255],
            ChangeColor::Red => [255, 0, 0],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ColoredMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
    pub colors: Vec<[u8; 3]>,
}

impl ColoredMesh {
    pub fn append(&mut self, other: &ColoredMesh) {
        let off = self.vertices.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.colors.extend_from_slice(&other.colors);
        self.triangles.extend(other.triangles.iter().map(|t| [t[0] + off, t[1] + off, t[2] + off]));
    }

    pub fn write_ply(&self, path: impl AsRef<Path>, format: PlyFormat) -> Result<()> {
        write_mesh(path, &self.vertices, &self.triangles, Some(&self.colors), format)
    }

    /// V - E + F.
    pub fn euler_characteristic(&self) -> i64 {
        let mut edges = HashSet::new();
        for t in &self.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                edges.insert((a.min(b), a.max(b)));
            }
        }
        self.vertices.len() as i64 - edges.len() as i64 + self.triangles.len() as i64
    }
}

// outward normal axis/sign, then the face's four corner offsets counter-clockwise seen from outside
const FACES: [([i64; 3], [[i64; 3]; 4]); 6] = [
    ([-1, 0, 0], [[0, 0, 0], [0, 0, 1], [0, 1, 1], [0, 1, 0]]),
    ([1, 0, 0], [[1, 0, 0], [1, 1, 0], [1, 1, 1], [1, 0, 1]]),
    ([0, -1, 0], [[0, 0, 0], [1, 0, 0], [1, 0, 1], [0, 0, 1]]),
    ([0, 1, 0], [[0, 1, 0], [0, 1, 1], [1, 1, 1], [1, 1, 0]]),
    ([0, 0, -1], [[0, 0, 0], [0, 1, 0], [1, 1, 0], [1, 0, 0]]),
    ([0, 0, 1], [[0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]]),
];

/// Cube per occupied voxel of a lattice anchored at the world origin, with
/// faces between two occupied voxels removed and corners shared.
pub fn voxel_mesh(cluster: &PointCloud, resolution: f64, color: ChangeColor) -> Result<ColoredMesh> {
    if cluster.is_empty() {
        return Err(Error::EmptyCluster);
    }
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(Error::InvalidParameter("resolution must be finite and > 0".into()));
    }
    let key = |p: &Vector3<f64>| [(p.x / resolution).floor() as i64, (p.y / resolution).floor() as i64, (p.z / resolution).floor() as i64];
    let mut voxels: Vec<VoxelKey> = cluster.iter().map(key).collect();
    voxels.sort_unstable();
    voxels.dedup();
    let set: HashSet<VoxelKey> = voxels.iter().copied().collect();
    let mut mesh = ColoredMesh::default();
    let mut corner_index: HashMap<VoxelKey, usize> = HashMap::new();
    for v in &voxels {
        for (n, corners) in &FACES {
            if set.contains(&[v[0] + n[0], v[1] + n[1], v[2] + n[2]]) {
                continue;
            }
            let ids: Vec<usize> = corners
                .iter()
                .map(|c| {
                    let k = [v[0] + c[0], v[1] + c[1], v[2] + c[2]];
                    *corner_index.entry(k).or_insert_with(|| {
                        mesh.vertices.push(Vector3::new(k[0] as f64, k[1] as f64, k[2] as f64) * resolution);
                        mesh.colors.push(color.rgb());
                        mesh.vertices.len() - 1
                    })
                })
                .collect();
            mesh.triangles.push([ids[0], ids[1], ids[2]]);
            mesh.triangles.push([ids[0], ids[2], ids[3]]);
        }
    }
    Ok(mesh)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChangeParams {
    pub resolution: f64,
    pub occupancy: OccupancyParams,
    /// Point-to-point distance separating positive differences from unaltered points.
    pub threshold: f64,
    pub cluster: ClusterParams,
}

impl Default for ChangeParams {
    fn default() -> Self {
        Self { resolution: 0.1, occupancy: OccupancyParams::default(), threshold: 0.3, cluster: ClusterParams::default() }
    }
}

impl ChangeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(Error::InvalidParameter("resolution must be finite and > 0".into()));
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::InvalidParameter("threshold must be >= 0".into()));
        }
        self.occupancy.validate()?;
        self.cluster.validate()
    }
}

#[derive(Debug, Clone)]
pub struct ChangeReport {
    pub positive_clusters: Vec<PointCloud>,
    pub negative_clusters: Vec<PointCloud>,
    pub unaltered_points: PointCloud,
    pub fused: PointCloud,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub points: usize,
    pub centroid: [f64; 3],
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl ClusterSummary {
    fn of(c: &PointCloud) -> Self {
        let (lo, hi) = c.bounds().unwrap_or_default();
        let m = c.centroid().unwrap_or_default();
        Self { points: c.len(), centroid: m.into(), min: lo.into(), max: hi.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeSummary {
    pub fused_points: usize,
    pub unaltered_points: usize,
    pub positive: Vec<ClusterSummary>,
    pub negative: Vec<ClusterSummary>,
}

impl ChangeReport {
    pub fn summary(&self) -> ChangeSummary {
        ChangeSummary {
            fused_points: self.fused.len(),
            unaltered_points: self.unaltered_points.len(),
            positive: self.positive_clusters.iter().map(ClusterSummary::of).collect(),
            negative: self.negative_clusters.iter().map(ClusterSummary::of).collect(),
        }
    }

    /// Blue cubes for positive clusters, red for negative ones.
    pub fn mesh(&self, resolution: f64) -> Result<ColoredMesh> {
        let mut out = ColoredMesh::default();
        for (clusters, color) in [(&self.positive_clusters, ChangeColor::Blue), (&self.negative_clusters, ChangeColor::Red)] {
            for c in clusters {
                out.append(&voxel_mesh(c, resolution, color)?);
            }
        }
        Ok(out)
    }

    /// `fused.ply`, `positive.ply`, `negative.ply`, `changes.ply` and `report.json`.
    pub fn write(&self, dir: impl AsRef<Path>, resolution: f64) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let format = PlyFormat::BinaryLittleEndian;
        let merge = |cs: &[PointCloud]| cs.iter().flat_map(|c| c.iter().copied()).collect::<PointCloud>();
        write_cloud(dir.join("fused.ply"), &self.fused, format)?;
        write_cloud(dir.join("positive.ply"), &merge(&self.positive_clusters), format)?;
        write_cloud(dir.join("negative.ply"), &merge(&self.negative_clusters), format)?;
        self.mesh(resolution)?.write_ply(dir.join("changes.ply"), format)?;
        let p = dir.join("report.json");
        let json = serde_json::to_string_pretty(&self.summary()).expect("summary serializes");
        std::fs::write(&p, json).map_err(|e| Error::io(&p, e))
    }
}

/// Fuses `scans` (sensor-frame clouds with world poses), then compares with
/// `reference` in both directions.
pub fn detect_changes(scans: &[(&PointCloud, Pose3)], reference: &PointCloud, params: &ChangeParams) -> Result<ChangeReport> {
    params.validate()?;
    if reference.is_empty() {
        return Err(Error::EmptyReferenceCloud);
    }
    let mut grid = OccupancyVoxelGrid::new(params.resolution, Vector3::zeros(), params.occupancy)?;
    for (scan, pose) in scans {
        grid.integrate_scan(scan, pose);
    }
    let fused = fused_cloud(&grid)?;
    let index = NnIndex::build(reference.points())?;
    let (pd, ue) = detect_positive(&fused, &index, params.threshold);
    let nd = detect_negative(&grid, reference);
    Ok(ChangeReport {
        positive_clusters: cluster_and_filter(&pd, &params.cluster),
        negative_clusters: cluster_and_filter(&nd, &params.cluster),
        unaltered_points: ue,
        fused,
    })
}
