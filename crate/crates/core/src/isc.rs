//! Indoor scan-context descriptors: binary polar occupancy of a scan, a
//! rotation-invariant ring key for fast retrieval, and column-shift cosine
//! matching that yields a coarse yaw between two scans.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{KdTree, PointCloud};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IscParams {
    pub num_sectors: usize,
    pub num_rings: usize,
    /// Meters.
    pub max_radius: f64,
    pub min_points_per_bin: usize,
    /// Fraction of `num_sectors` searched on each side of zero shift.
    pub max_shift_fraction: f64,
    /// A match is accepted iff its distance is at most this value.
    pub distance_threshold: f64,
    pub num_candidates: usize,
}

impl Default for IscParams {
    fn default() -> Self {
        Self {
            num_sectors: 60,
            num_rings: 20,
            max_radius: 10.0,
            min_points_per_bin: 40,
            max_shift_fraction: 0.1,
            distance_threshold: 0.3,
            num_candidates: 100,
        }
    }
}

impl IscParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_sectors == 0 || self.num_rings == 0 {
            return Err(Error::InvalidParameter(
                "isc sectors and rings must be >= 1".into(),
            ));
        }
        if !(self.max_radius > 0.0) {
            return Err(Error::InvalidParameter("isc max_radius must be > 0".into()));
        }
        if !(self.max_shift_fraction > 0.0 && self.max_shift_fraction <= 1.0) {
            return Err(Error::InvalidParameter(
                "isc max_shift_fraction must be in (0, 1]".into(),
            ));
        }
        if self.num_candidates == 0 {
            return Err(Error::InvalidParameter("isc num_candidates must be >= 1".into()));
        }
        Ok(())
    }

    /// Shift search half-width in columns.
    pub fn max_shift(&self) -> usize {
        (self.max_shift_fraction * self.num_sectors as f64).floor() as usize
    }

    pub fn sector_angle(&self) -> f64 {
        2.0 * PI / self.num_sectors as f64
    }
}

/// `rings × sectors` binary occupancy matrix with its ring key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IscDescriptor {
    rings: usize,
    sectors: usize,
    /// Row-major, ring 0 innermost.
    omega: Vec<u8>,
    ring_key: Vec<f64>,
}

impl IscDescriptor {
    /// Builds a descriptor from an explicit matrix; entries must be 0 or 1.
    pub fn from_matrix(rings: usize, sectors: usize, omega: Vec<u8>) -> Result<Self> {
        if omega.len() != rings * sectors {
            return Err(Error::LengthMismatch {
                left: omega.len(),
                right: rings * sectors,
            });
        }
        if omega.iter().any(|&v| v > 1) {
            return Err(Error::InvalidParameter("descriptor entries must be 0 or 1".into()));
        }
        let ring_key = (0..rings)
            .map(|i| {
                let count: usize = omega[i * sectors..(i + 1) * sectors]
                    .iter()
                    .map(|&v| v as usize)
                    .sum();
                count as f64 / sectors as f64
            })
            .collect();
        Ok(Self {
            rings,
            sectors,
            omega,
            ring_key,
        })
    }

    pub fn rings(&self) -> usize {
        self.rings
    }

    pub fn sectors(&self) -> usize {
        self.sectors
    }

    pub fn get(&self, ring: usize, sector: usize) -> u8 {
        self.omega[ring * self.sectors + sector]
    }

    pub fn matrix(&self) -> &[u8] {
        &self.omega
    }

    pub fn ring_key(&self) -> &[f64] {
        &self.ring_key
    }

    /// Cyclic column shift: column `j` moves to column `(j + k) mod sectors`.
    pub fn shifted(&self, k: i64) -> IscDescriptor {
        let n = self.sectors as i64;
        let mut omega = vec![0u8; self.omega.len()];
        for i in 0..self.rings {
            for j in 0..self.sectors {
                let dst = (j as i64 + k).rem_euclid(n) as usize;
                omega[i * self.sectors + dst] = self.omega[i * self.sectors + j];
            }
        }
        IscDescriptor {
            rings: self.rings,
            sectors: self.sectors,
            omega,
            ring_key: self.ring_key.clone(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.omega.len() * 2);
        for i in 0..self.rings {
            for j in 0..self.sectors {
                if j > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{}", self.get(i, j));
            }
            s.push('\n');
        }
        s
    }

    /// Grayscale P5 image, one pixel per bin, ring 0 on the top row, 1 → white.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.sectors, self.rings).into_bytes();
        out.extend(self.omega.iter().map(|&v| if v == 1 { 255 } else { 0 }));
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let pname = path.display().to_string();
        let mut omega = Vec::new();
        let mut rings = 0;
        let mut sectors = None;
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<u8> = line
                .split(',')
                .map(|t| t.trim().parse::<u8>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(&pname, ln + 1, "expected 0/1 values"))?;
            match sectors {
                None => sectors = Some(row.len()),
                Some(n) if n != row.len() => {
                    return Err(Error::parse(&pname, ln + 1, "ragged descriptor row"))
                }
                _ => {}
            }
            omega.extend(row);
            rings += 1;
        }
        Self::from_matrix(rings, sectors.unwrap_or(0), omega)
            .map_err(|e| Error::parse(&pname, 0, e))
    }
}

/// Polar binning of a scan in its sensor frame; `z` is ignored.
pub fn make_descriptor(scan: &PointCloud, params: &IscParams) -> IscDescriptor {
    let (nr, ns) = (params.num_rings, params.num_sectors);
    let mut counts = vec![0usize; nr * ns];
    let ring_scale = nr as f64 / params.max_radius;
    let sector_scale = ns as f64 / (2.0 * PI);
    for p in scan.points() {
        let r = p.x.hypot(p.y);
        if r >= params.max_radius {
            continue;
        }
        let ring = ((r * ring_scale).floor() as usize).min(nr - 1);
        let theta = p.y.atan2(p.x);
        // atan2 returns (-π, π]; π belongs to the first sector of [-π, π)
        let sector = ((theta + PI) * sector_scale).floor() as usize % ns;
        counts[ring * ns + sector] += 1;
    }
    let omega = counts
        .into_iter()
        .map(|c| u8::from(c >= params.min_points_per_bin))
        .collect();
    IscDescriptor::from_matrix(nr, ns, omega).expect("dimensions are consistent")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftMatch {
    pub shift: i64,
    pub distance: f64,
}

/// Mean column-wise cosine distance between `q` shifted by `k` columns and `r`.
fn distance_at_shift(q: &IscDescriptor, r: &IscDescriptor, k: i64) -> f64 {
    let n = q.sectors as i64;
    let mut sum = 0.0;
    let mut valid = 0usize;
    for c in 0..q.sectors {
        let qc = (c as i64 - k).rem_euclid(n) as usize;
        let (mut dot, mut nq, mut nr) = (0u32, 0u32, 0u32);
        for i in 0..q.rings {
            let a = q.omega[i * q.sectors + qc] as u32;
            let b = r.omega[i * r.sectors + c] as u32;
            dot += a * b;
            nq += a;
            nr += b;
        }
        if nq > 0 && nr > 0 {
            // binary columns: |v|² equals the count of ones; one square root
            // keeps identical columns at exactly 1
            sum += dot as f64 / ((nq as f64) * (nr as f64)).sqrt();
            valid += 1;
        }
    }
    if valid == 0 {
        1.0
    } else {
        1.0 - sum / valid as f64
    }
}

/// Best cyclic column shift `k ∈ [−max_shift, max_shift]` such that `q` shifted by
/// `k` matches `r`. Ties prefer the smaller `|k|`, then the positive shift.
pub fn shifted_distance(
    q: &IscDescriptor,
    r: &IscDescriptor,
    max_shift: usize,
) -> Result<ShiftMatch> {
    if q.rings != r.rings || q.sectors != r.sectors {
        return Err(Error::DimensionMismatch(q.rings, q.sectors, r.rings, r.sectors));
    }
    let max_shift = max_shift.min(q.sectors / 2) as i64;
    let mut best = ShiftMatch {
        shift: 0,
        distance: distance_at_shift(q, r, 0),
    };
    for m in 1..=max_shift {
        for k in [m, -m] {
            let d = distance_at_shift(q, r, k);
            if d < best.distance {
                best = ShiftMatch { shift: k, distance: d };
            }
        }
    }
    Ok(best)
}

/// KD-tree over reference ring keys.
#[derive(Debug, Clone)]
pub struct RingKeyIndex {
    tree: KdTree,
}

impl RingKeyIndex {
    pub fn build<'a>(keys: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut dim = None;
        let mut data = Vec::new();
        for k in keys {
            match dim {
                None => dim = Some(k.len()),
                Some(d) if d != k.len() => {
                    return Err(Error::LengthMismatch {
                        left: d,
                        right: k.len(),
                    })
                }
                _ => {}
            }
            data.extend_from_slice(k);
        }
        let Some(dim) = dim else {
            return Err(Error::EmptyReferenceSet);
        };
        let tree = KdTree::build(dim, data).map_err(|_| Error::EmptyReferenceSet)?;
        Ok(Self { tree })
    }

    /// Indices of the `n` nearest keys (all of them if fewer exist), nearest first.
    pub fn query(&self, key: &[f64], n: usize) -> Vec<(usize, f64)> {
        self.tree
            .knn(key, n)
            .into_iter()
            .map(|nb| (nb.index, nb.distance()))
            .collect()
    }
}

pub fn ring_key_knn(query_key: &[f64], reference_keys: &[&[f64]], n: usize) -> Result<Vec<usize>> {
    let index = RingKeyIndex::build(reference_keys.iter().copied())?;
    Ok(index.query(query_key, n).into_iter().map(|(i, _)| i).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopCandidate {
    pub query_index: usize,
    pub ref_index: usize,
    /// Columns; `query` shifted by this many columns matches `reference`.
    pub shift: i64,
    /// Yaw of the query sensor relative to the reference sensor, radians.
    pub yaw_estimate: f64,
    pub distance: f64,
}

/// Best reference match for every query descriptor whose distance passes the
/// threshold. Output is sorted by query index.
pub fn detect_loops(
    query: &[IscDescriptor],
    reference: &[IscDescriptor],
    params: &IscParams,
) -> Result<Vec<LoopCandidate>> {
    if reference.is_empty() || query.is_empty() {
        return Ok(Vec::new());
    }
    let index = RingKeyIndex::build(reference.iter().map(|d| d.ring_key()))?;
    let max_shift = params.max_shift();
    let out: Result<Vec<Option<LoopCandidate>>> = query
        .par_iter()
        .enumerate()
        .map(|(qi, qd)| {
            let mut best: Option<LoopCandidate> = None;
            for (ri, _) in index.query(qd.ring_key(), params.num_candidates) {
                let m = shifted_distance(qd, &reference[ri], max_shift)?;
                if best.is_none_or(|b| m.distance < b.distance) {
                    best = Some(LoopCandidate {
                        query_index: qi,
                        ref_index: ri,
                        shift: m.shift,
                        yaw_estimate: m.shift as f64 * params.sector_angle(),
                        distance: m.distance,
                    });
                }
            }
            Ok(best.filter(|b| b.distance <= params.distance_threshold))
        })
        .collect();
    Ok(out?.into_iter().flatten().collect())
}
