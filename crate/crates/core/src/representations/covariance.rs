//! Kernel covariance parameterization and its reverse pass.
//!
//! Each kernel stores three log-scales s and a rotation quaternion q; the
//! covariance is assembled as Sigma = R(q) diag(exp(2s)) R(q)^T, which is
//! symmetric positive-definite for every finite parameter value, so
//! positive-definiteness is a structural invariant rather than a runtime
//! check. The inverse comes for free: Q = R diag(exp(-2s)) R^T.
//!
//! Gradients: for an upstream dL/dSigma (symmetric 3x3 G),
//!
//!   dL/ds_k = 2 exp(2 s_k) (R^T G R)_kk
//!   dL/dR   = 2 G R D
//!   dL/dq   = (I - qq^T) [ sum_ab (dL/dR)_ab (dR/dq_l)_ab ]_l
//!
//! The (I - qq^T) projection is the Jacobian of the normalization baked
//! into `rotation_from_quat`, evaluated at unit norm; quaternions are
//! renormalized after every optimizer step so the assumption holds.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Assembled per-kernel shape: rotation, covariance, and exact inverse.
#[derive(Debug, Clone, Copy)]
pub struct KernelShape {
    pub rot: Matrix3<f64>,
    pub sigma: Matrix3<f64>,
    pub inv_sigma: Matrix3<f64>,
    /// Eigenvalues of sigma along the rotated axes, exp(2 s_k).
    pub axis_vars: Vector3<f64>,
}

/// Rotation matrix of a quaternion (w, x, y, z); normalizes internally so
/// slightly drifted parameters still produce an orthonormal frame.
pub fn rotation_from_quat(q: [f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn build_shape(log_scales: [f64; 3], quat: [f64; 4], kernel_index: usize) -> Result<KernelShape> {
    let rot = rotation_from_quat(quat);
    let axis_vars = Vector3::new(
        (2.0 * log_scales[0]).exp(),
        (2.0 * log_scales[1]).exp(),
        (2.0 * log_scales[2]).exp(),
    );
    if !axis_vars.iter().all(|v| v.is_finite() && *v > 0.0) || !rot.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!(
            "kernel {kernel_index}: covariance degenerate (log_scales {log_scales:?}, quat {quat:?})"
        )));
    }
    let d = Matrix3::from_diagonal(&axis_vars);
    let d_inv = Matrix3::from_diagonal(&Vector3::new(
        1.0 / axis_vars[0],
        1.0 / axis_vars[1],
        1.0 / axis_vars[2],
    ));
    Ok(KernelShape {
        rot,
        sigma: rot * d * rot.transpose(),
        inv_sigma: rot * d_inv * rot.transpose(),
        axis_vars,
    })
}

/// dR/dq_l at unit quaternion (w, x, y, z), l in {w, x, y, z} order.
fn quat_jacobians(q: [f64; 4]) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0,
        Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0,
        Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0,
        Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0,
    ]
}

/// Pulls a covariance-space gradient back to the stored parameters.
/// `g_sigma` must be symmetric.
pub fn backprop_sigma(
    shape: &KernelShape,
    g_sigma: &Matrix3<f64>,
    quat: [f64; 4],
) -> ([f64; 3], [f64; 4]) {
    let rtgr = shape.rot.transpose() * g_sigma * shape.rot;
    let d_log_scales = [
        2.0 * shape.axis_vars[0] * rtgr[(0, 0)],
        2.0 * shape.axis_vars[1] * rtgr[(1, 1)],
        2.0 * shape.axis_vars[2] * rtgr[(2, 2)],
    ];
    let d = Matrix3::from_diagonal(&shape.axis_vars);
    let g_rot = 2.0 * g_sigma * shape.rot * d;
    let n = (quat[0] * quat[0] + quat[1] * quat[1] + quat[2] * quat[2] + quat[3] * quat[3]).sqrt();
    let qn = [quat[0] / n, quat[1] / n, quat[2] / n, quat[3] / n];
    let jac = quat_jacobians(qn);
    let mut g_qn = [0.0; 4];
    for l in 0..4 {
        g_qn[l] = g_rot.component_mul(&jac[l]).sum();
    }
    // chain through q / |q|
    let dot: f64 = (0..4).map(|l| g_qn[l] * qn[l]).sum();
    let mut d_quat = [0.0; 4];
    for l in 0..4 {
        d_quat[l] = (g_qn[l] - dot * qn[l]) / n;
    }
    (d_log_scales, d_quat)
}

/// Renormalizes a quaternion in place; identity fallback if it collapsed.
pub fn renormalize_quat(q: &mut [f64; 4]) {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n > 1e-12 && n.is_finite() {
        for v in q.iter_mut() {
            *v /= n;
        }
    } else {
        *q = [1.0, 0.0, 0.0, 0.0];
    }
}
