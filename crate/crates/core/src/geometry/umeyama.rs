use nalgebra::{Matrix3, Vector3};

use super::Pose3;
use crate::error::{Error, Result};

/// Least-squares similarity `target ≈ scale · R · source + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub pose: Pose3,
    pub scale: f64,
}

impl Alignment {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.pose.rotation_matrix() * p * self.scale + self.pose.translation()
    }
}

/// Closed-form rigid (or similarity, with `with_scale`) alignment of paired points
/// minimizing `Σ‖T·sᵢ − tᵢ‖²`.
pub fn umeyama_align(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    with_scale: bool,
) -> Result<Alignment> {
    if source.len() != target.len() {
        return Err(Error::LengthMismatch {
            left: source.len(),
            right: target.len(),
        });
    }
    if source.len() < 3 {
        return Err(Error::DegenerateConfiguration("fewer than 3 correspondences"));
    }
    let n = source.len() as f64;
    let mu_s: Vector3<f64> = source.iter().sum::<Vector3<f64>>() / n;
    let mu_t: Vector3<f64> = target.iter().sum::<Vector3<f64>>() / n;

    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let ds = s - mu_s;
        cov += (t - mu_t) * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov /= n;
    var_s /= n;

    let svd = cov.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let mut sv: Vec<(usize, f64)> = svd.singular_values.iter().copied().enumerate().collect();
    sv.sort_by(|a, b| b.1.total_cmp(&a.1));
    let scale_ref = sv[0].1.max(f64::MIN_POSITIVE);
    if sv[1].1 <= 1e-12 * scale_ref || var_s <= f64::EPSILON {
        return Err(Error::DegenerateConfiguration(
            "correspondences are collinear or coincident",
        ));
    }

    let mut s = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        // flip the axis of the smallest singular value
        s[(sv[2].0, sv[2].0)] = -1.0;
    }
    let r = u * s * v_t;
    let scale = if with_scale {
        let d = Matrix3::from_diagonal(&svd.singular_values);
        (d * s).trace() / var_s
    } else {
        1.0
    };
    let t = mu_t - r * mu_s * scale;
    Ok(Alignment {
        pose: Pose3::from_rotation_matrix(&r, t),
        scale,
    })
}
