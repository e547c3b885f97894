use std::io::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{ply, PointCloud, Pose3};

const LEAF_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Aabb {
    min: Vector3<f64>,
    max: Vector3<f64>,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            min: Vector3::repeat(f64::INFINITY),
            max: Vector3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vector3<f64>) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    fn merge(&mut self, o: &Aabb) {
        self.min = self.min.inf(&o.min);
        self.max = self.max.sup(&o.max);
    }

    /// Entry distance of the ray, if it hits within `[0, t_max]`.
    fn hit(&self, origin: &Vector3<f64>, inv_dir: &Vector3<f64>, t_max: f64) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for a in 0..3 {
            let ta = (self.min[a] - origin[a]) * inv_dir[a];
            let tb = (self.max[a] - origin[a]) * inv_dir[a];
            let (lo, hi) = if ta < tb { (ta, tb) } else { (tb, ta) };
            // NaN from 0 * inf leaves the bound unchanged
            if lo > t0 {
                t0 = lo;
            }
            if hi < t1 {
                t1 = hi;
            }
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

#[derive(Debug, Clone)]
struct Node {
    bounds: Aabb,
    /// Leaf: first triangle slot; inner: index of the left child (right = left + 1).
    start: u32,
    /// Leaf triangle count; 0 for inner nodes.
    count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub distance: f64,
    pub triangle: usize,
}

/// Indexed triangle mesh with a bounding-volume hierarchy for ray queries.
#[derive(Debug, Clone)]
pub struct TriangleMesh {
    vertices: Vec<Vector3<f64>>,
    triangles: Vec<[u32; 3]>,
    nodes: Vec<Node>,
    order: Vec<u32>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vector3<f64>>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if triangles.is_empty() {
            return Err(Error::EmptyMesh);
        }
        if let Some(i) = vertices.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite { index: i });
        }
        let n = vertices.len();
        if triangles.iter().flatten().any(|&i| i >= n) {
            return Err(Error::InvalidParameter("triangle index out of range".into()));
        }
        if n > u32::MAX as usize || triangles.len() > u32::MAX as usize {
            return Err(Error::InvalidParameter("mesh too large".into()));
        }
        let triangles = triangles
            .into_iter()
            .map(|t| [t[0] as u32, t[1] as u32, t[2] as u32])
            .collect();
        let mut mesh = Self {
            vertices,
            triangles,
            nodes: Vec::new(),
            order: Vec::new(),
        };
        mesh.build_bvh();
        Ok(mesh)
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        self.triangles
            .iter()
            .map(|t| [t[0] as usize, t[1] as usize, t[2] as usize])
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn corners(&self, t: usize) -> [Vector3<f64>; 3] {
        let [a, b, c] = self.triangles[t];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn transformed(&self, pose: &Pose3) -> TriangleMesh {
        let vertices = self.vertices.iter().map(|v| pose.transform_point(v)).collect();
        let mut m = Self {
            vertices,
            triangles: self.triangles.clone(),
            nodes: Vec::new(),
            order: Vec::new(),
        };
        m.build_bvh();
        m
    }

    /// Concatenation of two meshes.
    pub fn merged(&self, other: &TriangleMesh) -> TriangleMesh {
        let off = self.vertices.len() as u32;
        let mut vertices = self.vertices.clone();
        vertices.extend_from_slice(&other.vertices);
        let mut triangles = self.triangles.clone();
        triangles.extend(other.triangles.iter().map(|t| [t[0] + off, t[1] + off, t[2] + off]));
        let mut m = Self {
            vertices,
            triangles,
            nodes: Vec::new(),
            order: Vec::new(),
        };
        m.build_bvh();
        m
    }

    fn tri_bounds(&self, t: u32) -> Aabb {
        let mut b = Aabb::empty();
        for v in self.corners(t as usize) {
            b.grow(&v);
        }
        b
    }

    fn build_bvh(&mut self) {
        let n = self.triangles.len();
        let bounds: Vec<Aabb> = (0..n as u32).map(|t| self.tri_bounds(t)).collect();
        let centroids: Vec<Vector3<f64>> = bounds.iter().map(|b| (b.min + b.max) * 0.5).collect();
        self.order = (0..n as u32).collect();
        self.nodes = Vec::with_capacity(2 * n / LEAF_SIZE + 1);
        self.nodes.push(Node { bounds: Aabb::empty(), start: 0, count: 0 });
        let mut stack = vec![(0usize, 0usize, n)];
        while let Some((node, lo, hi)) = stack.pop() {
            let mut b = Aabb::empty();
            let mut cb = Aabb::empty();
            for &t in &self.order[lo..hi] {
                b.merge(&bounds[t as usize]);
                cb.grow(&centroids[t as usize]);
            }
            self.nodes[node].bounds = b;
            let extent = cb.max - cb.min;
            if hi - lo <= LEAF_SIZE || extent.max() <= 0.0 {
                self.nodes[node].start = lo as u32;
                self.nodes[node].count = (hi - lo) as u32;
                continue;
            }
            let axis = extent.imax();
            let mid = (lo + hi) / 2;
            self.order[lo..hi].select_nth_unstable_by(mid - lo, |a, b| {
                centroids[*a as usize][axis]
                    .total_cmp(&centroids[*b as usize][axis])
                    .then(a.cmp(b))
            });
            let left = self.nodes.len();
            self.nodes.push(Node { bounds: Aabb::empty(), start: 0, count: 0 });
            self.nodes.push(Node { bounds: Aabb::empty(), start: 0, count: 0 });
            self.nodes[node].start = left as u32;
            stack.push((left + 1, mid, hi));
            stack.push((left, lo, mid));
        }
    }

    /// Möller–Trumbore; returns the ray parameter of a hit in `(0, t_max]`.
    fn intersect_triangle(&self, t: u32, origin: &Vector3<f64>, dir: &Vector3<f64>, t_max: f64) -> Option<f64> {
        let [a, b, c] = self.corners(t as usize);
        let e1 = b - a;
        let e2 = c - a;
        let p = dir.cross(&e2);
        let det = e1.dot(&p);
        if det.abs() < 1e-14 {
            return None;
        }
        let inv = 1.0 / det;
        let s = origin - a;
        let u = s.dot(&p) * inv;
        if !(0.0..=1.0).contains(&u) {
            return None;
        }
        let q = s.cross(&e1);
        let v = dir.dot(&q) * inv;
        if v < 0.0 || u + v > 1.0 {
            return None;
        }
        let dist = e2.dot(&q) * inv;
        (dist > 1e-9 && dist <= t_max).then_some(dist)
    }

    /// Closest intersection along `origin + t·dir` with `t ≤ t_max`. `dir` need
    /// not be normalized; distances are in units of `dir`.
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t_max: f64) -> Option<RayHit> {
        let inv = Vector3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut best: Option<RayHit> = None;
        let mut limit = t_max;
        let mut stack: Vec<u32> = Vec::with_capacity(64);
        if self.nodes[0].bounds.hit(origin, &inv, limit).is_some() {
            stack.push(0);
        }
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n as usize];
            if node.count > 0 {
                let s = node.start as usize;
                for &t in &self.order[s..s + node.count as usize] {
                    if let Some(d) = self.intersect_triangle(t, origin, dir, limit) {
                        let better = match best {
                            None => true,
                            Some(h) => d < h.distance || (d == h.distance && (t as usize) < h.triangle),
                        };
                        if better {
                            best = Some(RayHit { distance: d, triangle: t as usize });
                            limit = d;
                        }
                    }
                }
                continue;
            }
            let l = node.start;
            let r = l + 1;
            let hl = self.nodes[l as usize].bounds.hit(origin, &inv, limit);
            let hr = self.nodes[r as usize].bounds.hit(origin, &inv, limit);
            match (hl, hr) {
                (Some(a), Some(b)) => {
                    // visit the nearer child first
                    if a <= b {
                        stack.push(r);
                        stack.push(l);
                    } else {
                        stack.push(l);
                        stack.push(r);
                    }
                }
                (Some(_), None) => stack.push(l),
                (None, Some(_)) => stack.push(r),
                (None, None) => {}
            }
        }
        best
    }

    /// Deterministic surface sampling: each triangle gets a square lattice of
    /// step `spacing` in its own plane, anchored at its first vertex and aligned
    /// with its longest edge from that vertex. Shared edges may be sampled twice.
    pub fn sample_surface(&self, spacing: f64) -> Result<PointCloud> {
        self.sample_surface_where(spacing, |_| true)
    }

    /// [`Self::sample_surface`] keeping only points accepted by `keep`.
    pub fn sample_surface_where(&self, spacing: f64, keep: impl Fn(&Vector3<f64>) -> bool) -> Result<PointCloud> {
        if !(spacing > 0.0) {
            return Err(Error::InvalidParameter("sampling spacing must be > 0".into()));
        }
        let mut pts = Vec::new();
        for t in 0..self.triangles.len() {
            let [a, b, c] = self.corners(t);
            let (e1, e2) = if (b - a).norm_squared() >= (c - a).norm_squared() { (b - a, c - a) } else { (c - a, b - a) };
            let Some(u) = e1.try_normalize(1e-12) else { continue };
            let Some(v) = (e2 - u * e2.dot(&u)).try_normalize(1e-12) else { continue };
            // triangle in the (u, v) frame: (0, 0), (p1, 0), (q1, q2) with q2 > 0
            let (p1, q1, q2) = (e1.norm(), e2.dot(&u), e2.dot(&v));
            let eps = 1e-9 * p1.max(1.0);
            let (xmin, xmax) = (q1.min(0.0), p1.max(q1));
            let i0 = (xmin / spacing).floor() as i64;
            let i1 = (xmax / spacing).ceil() as i64;
            let jn = (q2 / spacing).ceil() as i64;
            for j in 0..=jn {
                let y = j as f64 * spacing;
                if y > q2 + eps {
                    break;
                }
                // x range of the horizontal slice at height y
                let s = y / q2;
                let lo = (q1 * s).min(p1 + (q1 - p1) * s);
                let hi = (q1 * s).max(p1 + (q1 - p1) * s);
                for i in i0..=i1 {
                    let x = i as f64 * spacing;
                    if x < lo - eps || x > hi + eps {
                        continue;
                    }
                    let p = a + u * x + v * y;
                    if keep(&p) {
                        pts.push(p);
                    }
                }
            }
        }
        PointCloud::new(pts)
    }

    pub fn write_stl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(84 + 50 * self.triangles.len());
        buf.extend_from_slice(&[0u8; 80]);
        buf.extend_from_slice(&(self.triangles.len() as u32).to_le_bytes());
        for t in 0..self.triangles.len() {
            let [a, b, c] = self.corners(t);
            let n = (b - a).cross(&(c - a)).try_normalize(0.0).unwrap_or_else(Vector3::zeros);
            for v in [n, a, b, c] {
                for k in 0..3 {
                    buf.extend_from_slice(&(v[k] as f32).to_le_bytes());
                }
            }
            buf.extend_from_slice(&[0, 0]);
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }
}

fn parse_binary_stl(bytes: &[u8], source: &str) -> Result<(Vec<Vector3<f64>>, Vec<[usize; 3]>)> {
    let n = u32::from_le_bytes(bytes[80..84].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 84 + 50 * n {
        return Err(Error::parse(source, 0, "truncated binary STL"));
    }
    let mut verts = Vec::with_capacity(3 * n);
    let mut tris = Vec::with_capacity(n);
    for t in 0..n {
        let rec = &bytes[84 + 50 * t..84 + 50 * (t + 1)];
        for v in 0..3 {
            let off = 12 + 12 * v;
            let f = |k: usize| f32::from_le_bytes(rec[off + 4 * k..off + 4 * k + 4].try_into().expect("4 bytes")) as f64;
            verts.push(Vector3::new(f(0), f(1), f(2)));
        }
        tris.push([3 * t, 3 * t + 1, 3 * t + 2]);
    }
    Ok((verts, tris))
}

fn parse_ascii_stl(text: &str, source: &str) -> Result<(Vec<Vector3<f64>>, Vec<[usize; 3]>)> {
    let mut verts = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut toks = line.split_whitespace();
        if toks.next() != Some("vertex") {
            continue;
        }
        let v: Vec<f64> = toks
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(source, ln + 1, "bad vertex"))?;
        if v.len() != 3 {
            return Err(Error::parse(source, ln + 1, "vertex needs 3 coordinates"));
        }
        verts.push(Vector3::new(v[0], v[1], v[2]));
    }
    if verts.len() % 3 != 0 {
        return Err(Error::parse(source, 0, "vertex count is not a multiple of 3"));
    }
    let tris = (0..verts.len() / 3).map(|t| [3 * t, 3 * t + 1, 3 * t + 2]).collect();
    Ok((verts, tris))
}

/// Loads a binary or ASCII STL, or a PLY mesh, choosing by extension.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    let (verts, tris) = if ext.as_deref() == Some("ply") {
        ply::read_mesh(path)?
    } else {
        let source = path.display().to_string();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let binary_len = (bytes.len() >= 84)
            .then(|| 84 + 50 * u32::from_le_bytes(bytes[80..84].try_into().expect("4 bytes")) as usize);
        if binary_len == Some(bytes.len()) {
            parse_binary_stl(&bytes, &source)?
        } else if bytes.starts_with(b"solid") {
            let text = std::str::from_utf8(&bytes).map_err(|_| Error::parse(&source, 0, "not UTF-8"))?;
            parse_ascii_stl(text, &source)?
        } else if bytes.len() >= 84 {
            parse_binary_stl(&bytes, &source)?
        } else {
            return Err(Error::parse(&source, 0, "not an STL file"));
        }
    };
    TriangleMesh::new(verts, tris)
}

/// Accumulates axis-aligned boxes and quads into a mesh.
#[derive(Debug, Clone, Default)]
pub struct MeshBuilder {
    vertices: Vec<Vector3<f64>>,
    triangles: Vec<[usize; 3]>,
}

impl MeshBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Quad `a b c d` in counter-clockwise order seen from the front.
    pub fn quad(&mut self, a: Vector3<f64>, b: Vector3<f64>, c: Vector3<f64>, d: Vector3<f64>) -> &mut Self {
        let i = self.vertices.len();
        self.vertices.extend([a, b, c, d]);
        self.triangles.push([i, i + 1, i + 2]);
        self.triangles.push([i, i + 2, i + 3]);
        self
    }

    /// Closed box with outward-facing triangles.
    pub fn aabb(&mut self, min: Vector3<f64>, max: Vector3<f64>) -> &mut Self {
        self.aabb_faces(min, max, [true; 6])
    }

    /// Box faces selected by `faces`, ordered `-z, +z, -y, +y, -x, +x`.
    pub fn aabb_faces(&mut self, min: Vector3<f64>, max: Vector3<f64>, faces: [bool; 6]) -> &mut Self {
        let p = |x: bool, y: bool, z: bool| {
            Vector3::new(
                if x { max.x } else { min.x },
                if y { max.y } else { min.y },
                if z { max.z } else { min.z },
            )
        };
        let (f, t) = (false, true);
        let quads = [
            [p(f, f, f), p(f, t, f), p(t, t, f), p(t, f, f)],
            [p(f, f, t), p(t, f, t), p(t, t, t), p(f, t, t)],
            [p(f, f, f), p(t, f, f), p(t, f, t), p(f, f, t)],
            [p(f, t, f), p(f, t, t), p(t, t, t), p(t, t, f)],
            [p(f, f, f), p(f, f, t), p(f, t, t), p(f, t, f)],
            [p(t, f, f), p(t, t, f), p(t, t, t), p(t, f, t)],
        ];
        for (q, keep) in quads.into_iter().zip(faces) {
            if keep {
                self.quad(q[0], q[1], q[2], q[3]);
            }
        }
        self
    }

    pub fn append(&mut self, mesh: &TriangleMesh) -> &mut Self {
        let off = self.vertices.len();
        self.vertices.extend_from_slice(mesh.vertices());
        self.triangles
            .extend(mesh.triangles().map(|t| [t[0] + off, t[1] + off, t[2] + off]));
        self
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn build(&self) -> Result<TriangleMesh> {
        TriangleMesh::new(self.vertices.clone(), self.triangles.clone())
    }
}
