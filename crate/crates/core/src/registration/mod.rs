//! Scan registration: yaw-constrained plane-to-plane ICP, point-to-point ICP,
//! fitness scoring and alignment classes.

mod gicp;
mod icp;

use std::io::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use gicp::{yaw_gicp, yaw_gicp_from, yaw_gicp_prepared, yaw_point_jacobian, yaw_point_residual, yaw_transform, GicpCloud};
pub use icp::{p2p_icp, p2p_icp_indexed};

use crate::error::{Error, Result};
use crate::geometry::{NnIndex, PointCloud, Pose3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegistrationParams {
    /// Meters.
    pub max_correspondence_distance: f64,
    pub max_iterations: usize,
    /// Stop once the parameter update norm falls below this.
    pub convergence_epsilon: f64,
    /// Neighbourhood size for the local plane covariances.
    pub covariance_knn: usize,
    /// Smallest covariance eigenvalue after regularization.
    pub plane_regularization_epsilon: f64,
    /// Thresholds reported as `fitness_f1` / `fitness_f2` on every result.
    pub fitness_f1: f64,
    pub fitness_f2: f64,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self {
            max_correspondence_distance: 0.5,
            max_iterations: 30,
            convergence_epsilon: 1e-6,
            covariance_knn: 20,
            plane_regularization_epsilon: 1e-3,
            fitness_f1: 0.01,
            fitness_f2: 0.03,
        }
    }
}

impl RegistrationParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_correspondence_distance", self.max_correspondence_distance),
            ("convergence_epsilon", self.convergence_epsilon),
            ("plane_regularization_epsilon", self.plane_regularization_epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be > 0")));
            }
        }
        if self.max_iterations == 0 || self.covariance_knn < 3 {
            return Err(Error::InvalidParameter(
                "max_iterations must be >= 1 and covariance_knn >= 3".into(),
            ));
        }
        if !(self.fitness_f1 >= 0.0 && self.fitness_f1 <= self.fitness_f2) {
            return Err(Error::InvalidParameter("need 0 <= fitness_f1 <= fitness_f2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    /// Maps source points into the target frame.
    pub transform: Pose3,
    pub fitness_f1: f64,
    pub fitness_f2: f64,
    /// Meters, over correspondences within the search distance.
    pub inlier_rmse: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Objective after each accepted iteration, starting with the initial value.
    pub cost_history: Vec<f64>,
    /// Set when no source point lies within the exclusion distance of the map.
    pub outside_map: bool,
}

/// Fractions of `aligned` within `f1`/`f2` of the target, and RMSE over points
/// within the correspondence distance.
pub(crate) fn fitness_against(aligned: &[Vector3<f64>], target: &NnIndex, params: &RegistrationParams) -> (f64, f64, f64) {
    if aligned.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let reach = params.max_correspondence_distance.max(params.fitness_f2);
    let d2: Vec<Option<f64>> = aligned
        .par_iter()
        .with_min_len(512)
        .map(|p| target.nearest_within(p, reach).map(|n| n.distance_squared))
        .collect();
    let (f1, f2) = (params.fitness_f1.powi(2), params.fitness_f2.powi(2));
    let mut c1 = 0usize;
    let mut c2 = 0usize;
    let mut sum = 0.0;
    let mut inl = 0usize;
    for d in d2.into_iter().flatten() {
        c1 += (d <= f1) as usize;
        c2 += (d <= f2) as usize;
        if d <= params.max_correspondence_distance.powi(2) {
            sum += d;
            inl += 1;
        }
    }
    let n = aligned.len() as f64;
    let rmse = if inl > 0 { (sum / inl as f64).sqrt() } else { 0.0 };
    (c1 as f64 / n, c2 as f64 / n, rmse)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fitness {
    pub fitness_f1: f64,
    pub fitness_f2: f64,
    /// Meters, over the points inside the exclusion distance.
    pub rmse: f64,
    /// Number of points inside the exclusion distance.
    pub evaluated: usize,
}

/// Fitness restricted to source points within `exclusion` of the target.
pub fn compute_fitness(
    source_aligned: &PointCloud,
    target: &NnIndex,
    f1: f64,
    f2: f64,
    exclusion: f64,
) -> Result<Fitness> {
    if !(0.0 <= f1 && f1 <= f2 && f2 <= exclusion) {
        return Err(Error::InvalidParameter("need 0 <= f1 <= f2 <= exclusion".into()));
    }
    let d2: Vec<Option<f64>> = source_aligned
        .points()
        .par_iter()
        .with_min_len(512)
        .map(|p| target.nearest_within(p, exclusion).map(|n| n.distance_squared))
        .collect();
    let (t1, t2) = (f1 * f1, f2 * f2);
    let mut n = 0usize;
    let mut c1 = 0usize;
    let mut c2 = 0usize;
    let mut sum = 0.0;
    for d in d2.into_iter().flatten() {
        n += 1;
        c1 += (d <= t1) as usize;
        c2 += (d <= t2) as usize;
        sum += d;
    }
    if n == 0 {
        return Err(Error::NoPointsInExclusionZone);
    }
    Ok(Fitness {
        fitness_f1: c1 as f64 / n as f64,
        fitness_f2: c2 as f64 / n as f64,
        rmse: (sum / n as f64).sqrt(),
        evaluated: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AlignmentClass {
    Perfect,
    Good,
    Bad,
    OutsideMap,
}

impl AlignmentClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            AlignmentClass::Perfect => "Perfect",
            AlignmentClass::Good => "Good",
            AlignmentClass::Bad => "Bad",
            AlignmentClass::OutsideMap => "OutsideMap",
        }
    }

    pub fn is_acceptable(&self) -> bool {
        matches!(self, AlignmentClass::Perfect | AlignmentClass::Good)
    }
}

impl std::fmt::Display for AlignmentClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassThresholds {
    /// Minimum `fitness_f1` for Perfect.
    pub perfect: f64,
    /// Minimum `fitness_f2` for Good.
    pub good: f64,
}

impl Default for ClassThresholds {
    fn default() -> Self {
        Self { perfect: 0.6, good: 0.5 }
    }
}

pub fn classify_alignment(result: &RegistrationResult, thresholds: &ClassThresholds) -> AlignmentClass {
    classify_fitness(result.fitness_f1, result.fitness_f2, result.outside_map, thresholds)
}

pub fn classify_fitness(fitness_f1: f64, fitness_f2: f64, outside_map: bool, thresholds: &ClassThresholds) -> AlignmentClass {
    if fitness_f1 >= thresholds.perfect {
        AlignmentClass::Perfect
    } else if fitness_f2 >= thresholds.good {
        AlignmentClass::Good
    } else if outside_map {
        AlignmentClass::OutsideMap
    } else {
        AlignmentClass::Bad
    }
}

#[derive(Debug, Clone)]
pub struct CropGroup {
    /// Keyframe indices, consecutive.
    pub members: Vec<usize>,
    pub center: Vector3<f64>,
    pub cloud: PointCloud,
}

/// Groups consecutive poses lying within `radius / 2` of the group's first
/// pose. Returns `(members, seed position)` per group.
pub fn proximity_groups(centers: &[Pose3], radius: f64) -> Vec<(Vec<usize>, Vector3<f64>)> {
    let mut groups: Vec<(Vec<usize>, Vector3<f64>)> = Vec::new();
    for (i, c) in centers.iter().enumerate() {
        let p = *c.translation();
        match groups.last_mut() {
            Some((members, seed)) if (p - *seed).norm() <= radius / 2.0 => members.push(i),
            _ => groups.push((vec![i], p)),
        }
    }
    groups
}

pub fn crop_sphere(reference: &PointCloud, center: &Vector3<f64>, radius: f64) -> PointCloud {
    let r2 = radius * radius;
    reference.filtered(|p| (p - center).norm_squared() <= r2)
}

/// [`proximity_groups`] with `reference` cropped to a sphere of `radius`
/// around each group seed.
pub fn sphere_crop_targets(reference: &PointCloud, centers: &[Pose3], radius: f64) -> Vec<CropGroup> {
    proximity_groups(centers, radius)
        .into_par_iter()
        .map(|(members, center)| CropGroup {
            cloud: crop_sphere(reference, &center, radius),
            members,
            center,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationLogEntry {
    pub scan: usize,
    pub class: AlignmentClass,
    pub fitness_f1: f64,
    pub fitness_f2: f64,
    pub rmse: f64,
    pub iterations: usize,
}

/// One JSON object per line.
pub fn write_registration_log(path: impl AsRef<Path>, entries: &[RegistrationLogEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e).expect("log entry serializes");
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
pub(crate) mod test_support {
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::geometry::PointCloud;

    /// Room corner with a pillar: planes in three directions.
    pub(crate) fn structured_cloud(seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        for _ in 0..1500 {
            let a: f64 = rng.random_range(-6.0..6.0);
            let z: f64 = rng.random_range(-1.0..2.0);
            pts.push(Vector3::new(a, 5.0, z));
            pts.push(Vector3::new(-4.0, a, z));
            pts.push(Vector3::new(a, rng.random_range(-6.0..6.0), -1.0));
        }
        for _ in 0..500 {
            let z: f64 = rng.random_range(-1.0..2.0);
            let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            pts.push(Vector3::new(2.0 + 0.4 * t.cos(), -1.0 + 0.4 * t.sin(), z));
            pts.push(Vector3::new(rng.random_range(3.0..4.0), -3.0, z));
        }
        PointCloud::new(pts).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plane(step: f64, n: usize) -> Vec<Vector3<f64>> {
        (0..n * n)
            .map(|i| Vector3::new((i % n) as f64 * step, (i / n) as f64 * step, 0.0))
            .collect()
    }

    #[test]
    fn subset_has_full_fitness() {
        let t = plane(0.01, 50);
        let idx = NnIndex::build(&t).unwrap();
        let src = PointCloud::new(t[..100].to_vec()).unwrap();
        let f = compute_fitness(&src, &idx, 0.01, 0.03, 0.3).unwrap();
        assert_eq!((f.fitness_f1, f.fitness_f2, f.rmse), (1.0, 1.0, 0.0));
    }

    #[test]
    fn offset_two_centimeters() {
        let t = plane(0.005, 200);
        let idx = NnIndex::build(&t).unwrap();
        let src = PointCloud::new(
            t.iter().step_by(97).map(|p| p + Vector3::new(0.0, 0.0, 0.02)).collect(),
        )
        .unwrap();
        let f = compute_fitness(&src, &idx, 0.01, 0.03, 0.3).unwrap();
        assert_eq!((f.fitness_f1, f.fitness_f2), (0.0, 1.0));
        assert!((f.rmse - 0.02).abs() < 1e-12);
    }

    #[test]
    fn far_source_is_outside() {
        let t = plane(0.1, 10);
        let idx = NnIndex::build(&t).unwrap();
        let src = PointCloud::new(t.iter().map(|p| p + Vector3::new(0.0, 0.0, 1.0)).collect()).unwrap();
        assert!(matches!(
            compute_fitness(&src, &idx, 0.01, 0.03, 0.3),
            Err(Error::NoPointsInExclusionZone)
        ));
    }

    fn result(f1: f64, f2: f64, outside: bool) -> RegistrationResult {
        RegistrationResult {
            transform: Pose3::identity(),
            fitness_f1: f1,
            fitness_f2: f2,
            inlier_rmse: 0.0,
            converged: true,
            iterations: 0,
            cost_history: vec![],
            outside_map: outside,
        }
    }

    #[test]
    fn class_table() {
        let t = ClassThresholds::default();
        assert_eq!(classify_alignment(&result(1.0, 1.0, false), &t), AlignmentClass::Perfect);
        assert_eq!(classify_alignment(&result(0.0, 0.0, true), &t), AlignmentClass::OutsideMap);
        assert_eq!(classify_alignment(&result(0.1, 0.55, false), &t), AlignmentClass::Good);
        assert_eq!(classify_alignment(&result(0.1, 0.3, false), &t), AlignmentClass::Bad);
    }

    #[test]
    fn crop_membership() {
        let mut pts = Vec::new();
        for x in -4..=4 {
            for y in -4..=4 {
                for z in -4..=4 {
                    pts.push(Vector3::new(x as f64, y as f64, z as f64));
                }
            }
        }
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let g = sphere_crop_targets(&cloud, &[Pose3::identity()], 2.0);
        assert_eq!(g.len(), 1);
        let want: Vec<_> = pts.into_iter().filter(|p| p.norm() <= 2.0).collect();
        assert_eq!(g[0].cloud.points(), &want[..]);
        assert_eq!(g[0].members, vec![0]);
    }

    #[test]
    fn far_keyframes_split_groups() {
        let cloud = PointCloud::new(vec![Vector3::zeros()]).unwrap();
        let poses = [Pose3::identity(), Pose3::from_translation(Vector3::new(100.0, 0.0, 0.0))];
        let g = sphere_crop_targets(&cloud, &poses, 15.0);
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn log_is_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("reg.jsonl");
        let e = RegistrationLogEntry { scan: 3, class: AlignmentClass::Good, fitness_f1: 0.2, fitness_f2: 0.7, rmse: 0.02, iterations: 5 };
        write_registration_log(&p, &[e.clone(), e]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 2);
        let back: RegistrationLogEntry = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back.class, AlignmentClass::Good);
    }

    proptest! {
        #[test]
        fn fitness_monotone_in_threshold(seed in any::<u64>(), a in 0.0f64..0.05, b in 0.0f64..0.05) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = plane(0.02, 30);
            let idx = NnIndex::build(&t).unwrap();
            let src = PointCloud::new((0..200).map(|_| Vector3::new(rng.random_range(0.0..0.6), rng.random_range(0.0..0.6), rng.random_range(-0.1..0.1))).collect()).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let f = compute_fitness(&src, &idx, lo, hi, 0.3).unwrap();
            prop_assert!(f.fitness_f2 >= f.fitness_f1);
        }
    }
}
