use nalgebra::{Matrix3, Matrix3x4, Matrix4, SymmetricEigen, Vector3, Vector4};
use rayon::prelude::*;

use super::{fitness_against, RegistrationParams, RegistrationResult};
use crate::error::{Error, Result};
use crate::geometry::{NnIndex, PointCloud, Pose3};

/// Cloud with per-point plane covariances and a search index.
#[derive(Debug, Clone)]
pub struct GicpCloud {
    points: Vec<Vector3<f64>>,
    covariances: Vec<Matrix3<f64>>,
    index: NnIndex,
}

impl GicpCloud {
    /// Covariances come from the `k` nearest neighbours with eigenvalues
    /// replaced by `(epsilon, 1, 1)`, smallest first.
    pub fn new(cloud: &PointCloud, k: usize, epsilon: f64) -> Result<Self> {
        if cloud.len() < k.max(3) {
            return Err(Error::TooFewPoints {
                have: cloud.len(),
                need: k.max(3),
            });
        }
        let points = cloud.points().to_vec();
        let index = NnIndex::build(&points)?;
        let covariances = points
            .par_iter()
            .with_min_len(256)
            .map(|p| plane_covariance(&index, p, k, epsilon))
            .collect();
        Ok(Self {
            points,
            covariances,
            index,
        })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn covariances(&self) -> &[Matrix3<f64>] {
        &self.covariances
    }

    pub fn index(&self) -> &NnIndex {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn plane_covariance(index: &NnIndex, p: &Vector3<f64>, k: usize, epsilon: f64) -> Matrix3<f64> {
    let nb = index.knn(p, k);
    let n = nb.len() as f64;
    let mean: Vector3<f64> = nb.iter().map(|x| index.point(x.index)).sum::<Vector3<f64>>() / n;
    let mut c = Matrix3::zeros();
    for x in &nb {
        let d = index.point(x.index) - mean;
        c += d * d.transpose();
    }
    c /= n;
    let eig = SymmetricEigen::new(c);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut out = Matrix3::zeros();
    for (rank, &i) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        let lambda = if rank == 0 { epsilon } else { 1.0 };
        out += v * v.transpose() * lambda;
    }
    out
}

/// `(tx, ty, tz, yaw)` to a pose with rotation about z only.
pub fn yaw_transform(x: &Vector4<f64>) -> Pose3 {
    Pose3::from_yaw(x[3], Vector3::new(x[0], x[1], x[2]))
}

fn rz(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Correspondence residual `q − (Rz(θ)·p + t)`.
pub fn yaw_point_residual(x: &Vector4<f64>, p: &Vector3<f64>, q: &Vector3<f64>) -> Vector3<f64> {
    q - (rz(x[3]) * p + Vector3::new(x[0], x[1], x[2]))
}

/// Derivative of [`yaw_point_residual`] with respect to `(tx, ty, tz, yaw)`.
pub fn yaw_point_jacobian(x: &Vector4<f64>, p: &Vector3<f64>) -> Matrix3x4<f64> {
    let (s, c) = x[3].sin_cos();
    let dr = Vector3::new(-s * p.x - c * p.y, c * p.x - s * p.y, 0.0);
    let mut j = Matrix3x4::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&-Matrix3::identity());
    j.set_column(3, &-dr);
    j
}

struct Evaluation {
    cost: f64,
    hessian: Matrix4<f64>,
    gradient: Vector4<f64>,
    inliers: usize,
}

type Term = Option<(f64, Matrix4<f64>, Vector4<f64>)>;

fn evaluate(source: &GicpCloud, target: &GicpCloud, x: &Vector4<f64>, params: &RegistrationParams) -> Evaluation {
    let r = rz(x[3]);
    let t = Vector3::new(x[0], x[1], x[2]);
    let terms: Vec<Term> = source
        .points
        .par_iter()
        .zip(source.covariances.par_iter())
        .with_min_len(256)
        .map(|(p, cp)| {
            let s = r * p + t;
            let nb = target.index.nearest_within(&s, params.max_correspondence_distance)?;
            let q = target.points[nb.index];
            let m = (target.covariances[nb.index] + r * cp * r.transpose()).try_inverse()?;
            let d = yaw_point_residual(x, p, &q);
            let j = yaw_point_jacobian(x, p);
            let jtm = j.transpose() * m;
            // d(x + δ) ≈ d + J δ, so the normal equations are (JᵀMJ) δ = −JᵀM d
            Some(((d.transpose() * m * d)[0], jtm * j, -(jtm * d)))
        })
        .collect();
    // outliers pay a constant so that losing a correspondence never lowers the cost
    let outlier_cost = params.max_correspondence_distance.powi(2) / (2.0 * params.plane_regularization_epsilon);
    let mut e = Evaluation {
        cost: 0.0,
        hessian: Matrix4::zeros(),
        gradient: Vector4::zeros(),
        inliers: 0,
    };
    for term in terms {
        match term {
            Some((c, h, g)) => {
                e.cost += c.min(outlier_cost);
                e.hessian += h;
                e.gradient += g;
                e.inliers += 1;
            }
            None => e.cost += outlier_cost,
        }
    }
    e
}

/// Plane-to-plane registration over translation and yaw only. `target` must
/// already be expressed in the source frame; the result maps source points
/// into the target frame.
pub fn yaw_gicp(
    source: &PointCloud,
    target: &PointCloud,
    initial_yaw: f64,
    params: &RegistrationParams,
) -> Result<RegistrationResult> {
    params.validate()?;
    let k = params.covariance_knn;
    let eps = params.plane_regularization_epsilon;
    let src = GicpCloud::new(source, k, eps)?;
    let tgt = GicpCloud::new(target, k, eps)?;
    Ok(yaw_gicp_prepared(&src, &tgt, initial_yaw, params))
}

pub fn yaw_gicp_prepared(
    source: &GicpCloud,
    target: &GicpCloud,
    initial_yaw: f64,
    params: &RegistrationParams,
) -> RegistrationResult {
    yaw_gicp_from(source, target, &Vector4::new(0.0, 0.0, 0.0, initial_yaw), params)
}

/// Same as [`yaw_gicp_prepared`] but starting from a full `(tx, ty, tz, yaw)` guess.
pub fn yaw_gicp_from(
    source: &GicpCloud,
    target: &GicpCloud,
    initial: &Vector4<f64>,
    params: &RegistrationParams,
) -> RegistrationResult {
    let mut x = *initial;
    let mut e = evaluate(source, target, &x, params);
    let mut history = vec![e.cost];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < params.max_iterations {
        if e.inliers < 4 {
            break;
        }
        let Some(chol) = e.hessian.cholesky() else { break };
        let mut step = chol.solve(&e.gradient);
        let mut accepted = None;
        for _ in 0..12 {
            let xn = x + step;
            let en = evaluate(source, target, &xn, params);
            if en.cost <= e.cost {
                accepted = Some((xn, en));
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        let Some((xn, en)) = accepted else {
            // no descent direction left: stationary point of the truncated objective
            converged = true;
            break;
        };
        x = xn;
        e = en;
        history.push(e.cost);
        if step.norm() < params.convergence_epsilon {
            converged = true;
            break;
        }
    }
    let transform = yaw_transform(&x);
    let aligned: Vec<Vector3<f64>> = source.points.iter().map(|p| transform.transform_point(p)).collect();
    let (f1, f2, rmse) = fitness_against(&aligned, &target.index, params);
    RegistrationResult {
        transform,
        fitness_f1: f1,
        fitness_f2: f2,
        inlier_rmse: rmse,
        converged,
        iterations,
        cost_history: history,
        outside_map: false,
    }
}
