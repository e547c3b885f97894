//! 2-D occupancy grid from a reference cloud, skeleton thinning, and
//! scan-location sampling along the skeleton.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::sim::TriangleMesh;

pub const PGM_FREE: u8 = 254;
pub const PGM_OCCUPIED: u8 = 0;
pub const PGM_UNKNOWN: u8 = 205;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cell {
    Unknown,
    Free,
    Occupied,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    pub resolution: f64,
    /// Half-width of the floor band around `floor_z`.
    pub floor_band: f64,
    /// Height above the floor of the obstacle slice.
    pub obstacle_height: f64,
    /// Half-width of the obstacle slice.
    pub obstacle_band: f64,
}

impl Default for GridParams {
    fn default() -> Self {
        Self {
            resolution: 0.05,
            floor_band: 0.5,
            obstacle_height: 1.0,
            obstacle_band: 0.2,
        }
    }
}

impl GridParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0) || !self.resolution.is_finite() {
            return Err(Error::InvalidParameter("resolution must be > 0".into()));
        }
        if !(self.floor_band >= 0.0) || !(self.obstacle_band >= 0.0) {
            return Err(Error::InvalidParameter("band widths must be >= 0".into()));
        }
        Ok(())
    }
}

/// Row 0 is the top of the map (largest y); `origin` is the world position of
/// the lower-left corner of pixel `(0, height - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    width: usize,
    height: usize,
    resolution: f64,
    origin: Vector2<f64>,
    cells: Vec<Cell>,
}

impl OccupancyGrid {
    pub fn new(width: usize, height: usize, resolution: f64, origin: Vector2<f64>) -> Result<Self> {
        if !(resolution > 0.0) {
            return Err(Error::InvalidParameter("resolution must be > 0".into()));
        }
        Ok(Self {
            width,
            height,
            resolution,
            origin,
            cells: vec![Cell::Unknown; width * height],
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> Vector2<f64> {
        self.origin
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn get(&self, col: usize, row: usize) -> Cell {
        self.cells[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, cell: Cell) {
        self.cells[row * self.width + col] = cell;
    }

    /// World coordinates of a pixel center.
    pub fn pixel_to_world(&self, col: usize, row: usize) -> Vector2<f64> {
        self.subpixel_to_world(col as f64, row as f64)
    }

    pub fn subpixel_to_world(&self, col: f64, row: f64) -> Vector2<f64> {
        Vector2::new(
            self.origin.x + (col + 0.5) * self.resolution,
            self.origin.y + (self.height as f64 - 1.0 - row + 0.5) * self.resolution,
        )
    }

    /// `None` outside the grid.
    pub fn world_to_pixel(&self, p: Vector2<f64>) -> Option<(usize, usize)> {
        let cx = ((p.x - self.origin.x) / self.resolution).floor();
        let cy = ((p.y - self.origin.y) / self.resolution).floor();
        if cx < 0.0 || cy < 0.0 || cx >= self.width as f64 || cy >= self.height as f64 {
            return None;
        }
        Some((cx as usize, self.height - 1 - cy as usize))
    }

    pub fn count(&self, cell: Cell) -> usize {
        self.cells.iter().filter(|c| **c == cell).count()
    }

    pub fn free_mask(&self) -> BinaryImage {
        BinaryImage {
            width: self.width,
            height: self.height,
            data: self.cells.iter().map(|c| *c == Cell::Free).collect(),
        }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.cells.iter().map(|c| match c {
            Cell::Free => PGM_FREE,
            Cell::Occupied => PGM_OCCUPIED,
            Cell::Unknown => PGM_UNKNOWN,
        }));
        out
    }

    /// map_server style sidecar.
    pub fn to_yaml(&self, image: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "image: {image}");
        let _ = writeln!(s, "resolution: {:.6}", self.resolution);
        let _ = writeln!(s, "origin: [{:.6}, {:.6}, {:.6}]", self.origin.x, self.origin.y, 0.0);
        s.push_str("negate: 0\noccupied_thresh: 0.65\nfree_thresh: 0.196\n\n");
        s
    }

    /// Writes `<stem>.pgm` and `<stem>.yaml` into `dir`.
    pub fn write_map(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        let pgm = dir.join(format!("{stem}.pgm"));
        std::fs::write(&pgm, self.to_pgm()).map_err(|e| Error::io(&pgm, e))?;
        let yaml = dir.join(format!("{stem}.yaml"));
        std::fs::write(&yaml, self.to_yaml(&format!("{stem}.pgm"))).map_err(|e| Error::io(&yaml, e))
    }

    /// Parses a P5 image written by [`OccupancyGrid::to_pgm`]; values other than
    /// the three canonical ones are thresholded the way map_server does.
    pub fn from_pgm(bytes: &[u8], resolution: f64, origin: Vector2<f64>) -> Result<Self> {
        let bad = |msg: &str| Error::parse("pgm", 0, msg);
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("not a P5 image"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("header number"));
        let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("maxval must be 255"));
        }
        let data = &bytes[pos + 1..];
        if data.len() < w * h {
            return Err(bad("truncated pixel data"));
        }
        let mut g = Self::new(w, h, resolution, origin)?;
        for (c, &v) in g.cells.iter_mut().zip(data) {
            let occ = (255.0 - v as f64) / 255.0;
            *c = if occ > 0.65 {
                Cell::Occupied
            } else if occ < 0.196 {
                Cell::Free
            } else {
                Cell::Unknown
            };
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn get(&self, col: usize, row: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, v: bool) {
        self.data[row * self.width + col] = v;
    }

    /// Out-of-bounds reads are background.
    fn at(&self, col: isize, row: isize) -> bool {
        col >= 0
            && row >= 0
            && (col as usize) < self.width
            && (row as usize) < self.height
            && self.data[row as usize * self.width + col as usize]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, v)| **v)
            .map(|(i, _)| (i % self.width, i / self.width))
    }

    /// 8-connected components in raster order of their first pixel.
    pub fn components(&self) -> Vec<Vec<(usize, usize)>> {
        let mut label = vec![false; self.data.len()];
        let mut out = Vec::new();
        for start in 0..self.data.len() {
            if !self.data[start] || label[start] {
                continue;
            }
            label[start] = true;
            let mut stack = vec![start];
            let mut comp = Vec::new();
            while let Some(i) = stack.pop() {
                let (c, r) = ((i % self.width) as isize, (i / self.width) as isize);
                comp.push((c as usize, r as usize));
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        if self.at(c + dc, r + dr) {
                            let j = (r + dr) as usize * self.width + (c + dc) as usize;
                            if !label[j] {
                                label[j] = true;
                                stack.push(j);
                            }
                        }
                    }
                }
            }
            comp.sort_by_key(|&(c, r)| (r, c));
            out.push(comp);
        }
        out
    }
}

/// Bins `cloud` into a grid spanning its XY bounding box. Obstacle cells take
/// precedence over floor cells.
pub fn grid_from_cloud(cloud: &PointCloud, floor_z: f64, params: &GridParams) -> Result<OccupancyGrid> {
    params.validate()?;
    let (lo, hi) = cloud.bounds().ok_or(Error::EmptyCloud)?;
    let res = params.resolution;
    let width = ((hi.x - lo.x) / res).floor() as usize + 1;
    let height = ((hi.y - lo.y) / res).floor() as usize + 1;
    let mut grid = OccupancyGrid::new(width, height, res, Vector2::new(lo.x, lo.y))?;
    let obstacle_z = floor_z + params.obstacle_height;
    for p in cloud.iter() {
        let occupied = (p.z - obstacle_z).abs() <= params.obstacle_band;
        let free = (p.z - floor_z).abs() <= params.floor_band;
        if !occupied && !free {
            continue;
        }
        let cx = (((p.x - lo.x) / res).floor() as usize).min(width - 1);
        let cy = (((p.y - lo.y) / res).floor() as usize).min(height - 1);
        let i = (height - 1 - cy) * width + cx;
        if occupied {
            grid.cells[i] = Cell::Occupied;
        } else if grid.cells[i] == Cell::Unknown {
            grid.cells[i] = Cell::Free;
        }
    }
    Ok(grid)
}

/// Grid from a mesh sampled at half the grid resolution, so that every cell a
/// surface crosses receives a sample.
pub fn grid_from_mesh(mesh: &TriangleMesh, floor_z: f64, params: &GridParams) -> Result<OccupancyGrid> {
    params.validate()?;
    let obstacle_z = floor_z + params.obstacle_height;
    let cloud = mesh.sample_surface_where(params.resolution / 2.0, |p| {
        (p.z - obstacle_z).abs() <= params.obstacle_band || (p.z - floor_z).abs() <= params.floor_band
    })?;
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    grid_from_cloud(&cloud, floor_z, params)
}

/// Zhang–Suen thinning of the free mask.
pub fn skeletonize(grid: &OccupancyGrid) -> Result<BinaryImage> {
    let mut img = grid.free_mask();
    if img.count() == 0 {
        return Err(Error::NoFreeSpace);
    }
    thin(&mut img);
    Ok(img)
}

pub(crate) fn thin(img: &mut BinaryImage) {
    let mut to_clear = Vec::new();
    loop {
        let mut changed = false;
        for pass in 0..2 {
            to_clear.clear();
            for (c, r) in img.pixels() {
                let (c, r) = (c as isize, r as isize);
                // P2..P9 clockwise from north
                let n = [
                    img.at(c, r - 1),
                    img.at(c + 1, r - 1),
                    img.at(c + 1, r),
                    img.at(c + 1, r + 1),
                    img.at(c, r + 1),
                    img.at(c - 1, r + 1),
                    img.at(c - 1, r),
                    img.at(c - 1, r - 1),
                ];
                let b = n.iter().filter(|v| **v).count();
                if !(2..=6).contains(&b) {
                    continue;
                }
                let a = (0..8).filter(|&k| !n[k] && n[(k + 1) % 8]).count();
                if a != 1 {
                    continue;
                }
                let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
                let keep = if pass == 0 {
                    (p2 && p4 && p6) || (p4 && p6 && p8)
                } else {
                    (p2 && p4 && p8) || (p2 && p6 && p8)
                };
                if !keep {
                    to_clear.push((c as usize, r as usize));
                }
            }
            for &(c, r) in &to_clear {
                img.set(c, r, false);
            }
            changed |= !to_clear.is_empty();
        }
        if !changed {
            break;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    /// Spacing of the horizontal and vertical line masks.
    pub line_spacing: f64,
    /// Minimum distance between kept locations.
    pub min_spacing: f64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            line_spacing: 1.0,
            min_spacing: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanLocationList {
    pub points: Vec<Vector2<f64>>,
    /// World z of the sensor.
    pub height: f64,
}

impl ScanLocationList {
    pub fn positions(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        self.points.iter().map(|p| Vector3::new(p.x, p.y, self.height))
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Greedy nearest-neighbour ordering starting from the point nearest `start`.
/// Ties go to the lowest index.
pub fn nearest_neighbor_chain(points: &[Vector2<f64>], start: Vector2<f64>) -> Vec<usize> {
    let mut visited = vec![false; points.len()];
    let mut order = Vec::with_capacity(points.len());
    let mut cur = start;
    for _ in 0..points.len() {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if visited[i] {
                continue;
            }
            let d = (p - cur).norm_squared();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("unvisited point remains");
        visited[i] = true;
        order.push(i);
        cur = points[i];
    }
    order
}

pub fn sample_scan_locations(
    grid: &OccupancyGrid,
    skeleton: &BinaryImage,
    params: &SamplingParams,
    start: Vector2<f64>,
    sensor_height: f64,
) -> Result<ScanLocationList> {
    if params.line_spacing <= 0.0 || params.min_spacing < 0.0 {
        return Err(Error::InvalidParameter("line_spacing must be > 0 and min_spacing >= 0".into()));
    }
    if skeleton.count() == 0 {
        return Err(Error::NoFreeSpace);
    }
    let step = ((params.line_spacing / grid.resolution()).round() as usize).max(1);
    let mut masked = BinaryImage::new(skeleton.width, skeleton.height);
    for (c, r) in skeleton.pixels() {
        if c % step == 0 || r % step == 0 {
            masked.set(c, r, true);
        }
    }
    // skeleton pieces the line masks miss entirely still get one location
    let mut pieces = masked.components();
    for comp in skeleton.components() {
        if !comp.iter().any(|&(c, r)| masked.get(c, r)) {
            pieces.push(comp);
        }
    }
    let mut candidates = Vec::new();
    for comp in pieces {
        let n = comp.len() as f64;
        let (sc, sr) = comp
            .iter()
            .fold((0.0, 0.0), |(a, b), &(c, r)| (a + c as f64, b + r as f64));
        let (mc, mr) = (sc / n, sr / n);
        // snap to the member pixel nearest the centroid so the location stays on the skeleton
        let &(c, r) = comp
            .iter()
            .min_by(|a, b| {
                let da = (a.0 as f64 - mc).powi(2) + (a.1 as f64 - mr).powi(2);
                let db = (b.0 as f64 - mc).powi(2) + (b.1 as f64 - mr).powi(2);
                da.total_cmp(&db)
            })
            .expect("non-empty component");
        candidates.push(grid.pixel_to_world(c, r));
    }
    let mut kept: Vec<Vector2<f64>> = Vec::new();
    for p in candidates {
        if kept.iter().all(|k| (k - p).norm() >= params.min_spacing) {
            kept.push(p);
        }
    }
    let order = nearest_neighbor_chain(&kept, start);
    Ok(ScanLocationList {
        points: order.into_iter().map(|i| kept[i]).collect(),
        height: sensor_height,
    })
}
