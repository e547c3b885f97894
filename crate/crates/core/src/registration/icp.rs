use nalgebra::Vector3;
use rayon::prelude::*;

use super::{fitness_against, RegistrationParams, RegistrationResult};
use crate::error::{Error, Result};
use crate::geometry::{umeyama_align, NnIndex, PointCloud, Pose3};

struct Association {
    /// Truncated objective `Σ min(d², τ²)`.
    cost: f64,
    source: Vec<Vector3<f64>>,
    target: Vec<Vector3<f64>>,
}

fn associate(source: &[Vector3<f64>], target: &NnIndex, pose: &Pose3, max_dist: f64) -> Association {
    let matches: Vec<Option<(usize, f64)>> = source
        .par_iter()
        .with_min_len(512)
        .map(|p| {
            target
                .nearest_within(&pose.transform_point(p), max_dist)
                .map(|n| (n.index, n.distance_squared))
        })
        .collect();
    let tau2 = max_dist * max_dist;
    let mut a = Association {
        cost: 0.0,
        source: Vec::new(),
        target: Vec::new(),
    };
    for (p, m) in source.iter().zip(matches) {
        match m {
            Some((j, d2)) => {
                a.cost += d2;
                a.source.push(*p);
                a.target.push(target.point(j));
            }
            None => a.cost += tau2,
        }
    }
    a
}

/// Point-to-point ICP with a closed-form rigid update per iteration.
pub fn p2p_icp(
    source: &PointCloud,
    target: &PointCloud,
    initial: &Pose3,
    params: &RegistrationParams,
) -> Result<RegistrationResult> {
    if target.is_empty() {
        return Err(Error::TooFewPoints { have: 0, need: 1 });
    }
    let index = NnIndex::build(target.points())?;
    p2p_icp_indexed(source, &index, initial, params)
}

pub fn p2p_icp_indexed(
    source: &PointCloud,
    target: &NnIndex,
    initial: &Pose3,
    params: &RegistrationParams,
) -> Result<RegistrationResult> {
    params.validate()?;
    if source.len() < 3 {
        return Err(Error::TooFewPoints { have: source.len(), need: 3 });
    }
    let src = source.points();
    let mut pose = *initial;
    let mut assoc = associate(src, target, &pose, params.max_correspondence_distance);
    let mut history = vec![assoc.cost];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < params.max_iterations {
        let Ok(step) = umeyama_align(&assoc.source, &assoc.target, false) else {
            break;
        };
        iterations += 1;
        let next = step.pose;
        let next_assoc = associate(src, target, &next, params.max_correspondence_distance);
        if next_assoc.cost > assoc.cost {
            // only reachable through floating-point ties; keep the better pose
            converged = true;
            break;
        }
        let change = next.relative(&pose).log().map(|t| t.to_vector().norm()).unwrap_or(f64::INFINITY);
        pose = next;
        assoc = next_assoc;
        history.push(assoc.cost);
        if change < params.convergence_epsilon {
            converged = true;
            break;
        }
    }
    let aligned: Vec<Vector3<f64>> = src.iter().map(|p| pose.transform_point(p)).collect();
    let (f1, f2, rmse) = fitness_against(&aligned, target, params);
    Ok(RegistrationResult {
        transform: pose,
        fitness_f1: f1,
        fitness_f2: f2,
        inlier_rmse: rmse,
        converged,
        iterations,
        cost_history: history,
        outside_map: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Twist6;
    use crate::registration::test_support::structured_cloud;

    #[test]
    fn identical_clouds() {
        let c = structured_cloud(4);
        let r = p2p_icp(&c, &c, &Pose3::identity(), &RegistrationParams::default()).unwrap();
        assert!(r.transform.max_abs_diff(&Pose3::identity()) < 1e-12);
        assert!(r.converged);
    }

    #[test]
    fn recovers_small_perturbation() {
        let c = structured_cloud(5);
        let truth = Pose3::exp(&Twist6::new(
            Vector3::new(0.06, -0.05, 0.04),
            Vector3::new(0.02, -0.03, 0.07),
        ));
        let target = c.transformed(&truth);
        let r = p2p_icp(&c, &target, &Pose3::identity(), &RegistrationParams { max_iterations: 100, ..Default::default() }).unwrap();
        assert!((r.transform.translation() - truth.translation()).norm() < 1e-4);
        for w in r.cost_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn disjoint_clouds() {
        let c = structured_cloud(6);
        let far = c.transformed(&Pose3::from_translation(Vector3::new(100.0, 0.0, 0.0)));
        let r = p2p_icp(&c, &far, &Pose3::identity(), &RegistrationParams::default()).unwrap();
        assert!(!r.converged);
        assert_eq!((r.fitness_f1, r.fitness_f2), (0.0, 0.0));
    }

    #[test]
    fn conjugation_invariance() {
        let c = structured_cloud(7);
        let truth = Pose3::exp(&Twist6::new(Vector3::new(0.05, 0.02, -0.03), Vector3::new(0.0, 0.01, 0.04)));
        let target = c.transformed(&truth);
        let g = Pose3::exp(&Twist6::new(Vector3::new(3.0, -1.0, 2.0), Vector3::new(0.3, -0.2, 1.1)));
        let params = RegistrationParams::default();
        let a = p2p_icp(&c, &target, &Pose3::identity(), &params).unwrap();
        // move both clouds by g: the solution becomes g·T·g⁻¹
        let b = p2p_icp(&c.transformed(&g), &target.transformed(&g), &Pose3::identity(), &params).unwrap();
        let expected = g.compose(&a.transform).compose(&g.inverse());
        assert!(b.transform.max_abs_diff(&expected) < 1e-6);
    }
}
