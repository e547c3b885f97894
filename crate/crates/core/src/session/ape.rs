//! Absolute pose error between an estimated and a ground-truth trajectory.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::Trajectory;
use crate::error::{Error, Result};
use crate::geometry::{umeyama_align, Pose3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApeOptions {
    /// Rigidly align the estimate to the ground truth before measuring.
    pub align: bool,
    /// Maximum timestamp difference for association, seconds.
    pub max_time_diff: f64,
}

impl Default for ApeOptions {
    fn default() -> Self {
        Self {
            align: false,
            max_time_diff: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorStats {
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
}

impl ErrorStats {
    fn from_errors(errors: &[f64]) -> Self {
        if errors.is_empty() {
            return Self::default();
        }
        let n = errors.len() as f64;
        let mut sorted = errors.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 0 {
            0.5 * (sorted[mid - 1] + sorted[mid])
        } else {
            sorted[mid]
        };
        Self {
            rmse: (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
            mean: errors.iter().sum::<f64>() / n,
            median,
            max: *sorted.last().expect("non-empty"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApeReport {
    /// Centimeters.
    pub translational_rmse: f64,
    /// Degrees.
    pub rotational_rmse: f64,
    pub translational: ErrorStats,
    pub rotational: ErrorStats,
    /// Per associated pair, centimeters.
    pub translational_errors: Vec<f64>,
    /// Per associated pair, degrees.
    pub rotational_errors: Vec<f64>,
    /// `(estimate timestamp, ground-truth timestamp)`.
    pub pairs: Vec<(f64, f64)>,
    pub aligned: bool,
}

/// Greedy nearest-timestamp association: candidate pairs within `max_dt` are
/// taken in order of increasing time difference, each pose used at most once.
/// Returns index pairs `(a, b)` sorted by `a`.
pub fn associate(a: &Trajectory, b: &Trajectory, max_dt: f64) -> Vec<(usize, usize)> {
    let ta: Vec<f64> = a.timestamps().collect();
    let tb: Vec<f64> = b.timestamps().collect();
    let mut candidates = Vec::new();
    let mut lo = 0;
    for (i, &t) in ta.iter().enumerate() {
        while lo < tb.len() && tb[lo] < t - max_dt {
            lo += 1;
        }
        let mut j = lo;
        while j < tb.len() && tb[j] <= t + max_dt {
            candidates.push(((t - tb[j]).abs(), t + tb[j], i, j));
            j += 1;
        }
    }
    // the tie-break key is symmetric in (a, b)
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    let mut used_a = vec![false; ta.len()];
    let mut used_b = vec![false; tb.len()];
    let mut out = Vec::new();
    for (_, _, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push((i, j));
        }
    }
    out.sort_unstable();
    out
}

pub fn evaluate_ape(
    estimate: &Trajectory,
    ground_truth: &Trajectory,
    options: &ApeOptions,
) -> Result<ApeReport> {
    let pairs = associate(estimate, ground_truth, options.max_time_diff);
    if pairs.len() < 2 {
        return Err(Error::NoAssociations);
    }
    let est: Vec<Pose3> = pairs.iter().map(|&(i, _)| estimate.entries()[i].1).collect();
    let gt: Vec<Pose3> = pairs
        .iter()
        .map(|&(_, j)| ground_truth.entries()[j].1)
        .collect();

    let correction = if options.align {
        let src: Vec<Vector3<f64>> = est.iter().map(|p| *p.translation()).collect();
        let dst: Vec<Vector3<f64>> = gt.iter().map(|p| *p.translation()).collect();
        match umeyama_align(&src, &dst, false) {
            Ok(a) => a.pose,
            // collinear trajectories leave rotation about the line unobservable;
            // fall back to removing the translational offset only
            Err(Error::DegenerateConfiguration(_)) => {
                let n = src.len() as f64;
                let ms: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / n;
                let md: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / n;
                Pose3::from_translation(md - ms)
            }
            Err(e) => return Err(e),
        }
    } else {
        Pose3::identity()
    };

    let mut terr = Vec::with_capacity(est.len());
    let mut rerr = Vec::with_capacity(est.len());
    for (e, g) in est.iter().zip(&gt) {
        let aligned = correction.compose(e);
        terr.push((aligned.translation() - g.translation()).norm() * 100.0);
        let rel = g.rotation().inverse() * aligned.rotation();
        rerr.push(rel.angle().to_degrees());
    }
    let translational = ErrorStats::from_errors(&terr);
    let rotational = ErrorStats::from_errors(&rerr);
    Ok(ApeReport {
        translational_rmse: translational.rmse,
        rotational_rmse: rotational.rmse,
        translational,
        rotational,
        translational_errors: terr,
        rotational_errors: rerr,
        pairs: pairs
            .iter()
            .map(|&(i, j)| (estimate.entries()[i].0, ground_truth.entries()[j].0))
            .collect(),
        aligned: options.align,
    })
}
