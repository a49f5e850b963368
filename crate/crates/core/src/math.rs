//! Small rotation helpers shared by the model, skinning and priors.
//!
//! Quaternions are plain `[w, x, y, z]` arrays using the Hamilton product.

use nalgebra::{Matrix3, Vector3};

pub type Quat = [f64; 4];

pub const QUAT_IDENTITY: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn quat_norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn quat_scale(q: &Quat, s: f64) -> Quat {
    [q[0] * s, q[1] * s, q[2] * s, q[3] * s]
}

pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub fn quat_conj(q: &Quat) -> Quat {
    [q[0], -q[1], -q[2], -q[3]]
}

/// Adjoint of `c = a ⊗ b`: returns `(dL/da, dL/db)` given `dL/dc`.
pub fn quat_mul_backward(a: &Quat, b: &Quat, grad_c: &Quat) -> (Quat, Quat) {
    (quat_mul(grad_c, &quat_conj(b)), quat_mul(&quat_conj(a), grad_c))
}

/// Backward of `n = q / |q|`.
pub fn normalize_backward(q: &Quat, grad_n: &Quat) -> Quat {
    let norm = quat_norm(q);
    let n = quat_scale(q, 1.0 / norm);
    let dot = n[0] * grad_n[0] + n[1] * grad_n[1] + n[2] * grad_n[2] + n[3] * grad_n[3];
    [
        (grad_n[0] - n[0] * dot) / norm,
        (grad_n[1] - n[1] * dot) / norm,
        (grad_n[2] - n[2] * dot) / norm,
        (grad_n[3] - n[3] * dot) / norm,
    ]
}

/// Rotation matrix of a unit quaternion. No normalization happens here.
pub fn unit_quat_to_rotmat(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
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

/// Gradient w.r.t. the quaternion components of [`unit_quat_to_rotmat`],
/// treating the components as independent (no normalization).
pub fn unit_quat_to_rotmat_backward(q: &Quat, g: &Matrix3<f64>) -> Quat {
    let [w, x, y, z] = *q;
    let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
        + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [gw, gx, gy, gz]
}

/// Quaternion (with `w >= 0`) of a rotation matrix, Shepperd's method.
pub fn rotmat_to_quat(m: &Matrix3<f64>) -> Quat {
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let q = if trace > m[(0, 0)].max(m[(1, 1)]).max(m[(2, 2)]) {
        let s = 2.0 * (1.0 + trace).sqrt();
        [
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        ]
    } else if m[(0, 0)] >= m[(1, 1)] && m[(0, 0)] >= m[(2, 2)] {
        let s = 2.0 * (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt();
        [
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        ]
    } else if m[(1, 1)] >= m[(2, 2)] {
        let s = 2.0 * (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt();
        [
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        ]
    } else {
        let s = 2.0 * (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt();
        [
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    let q = quat_scale(&q, 1.0 / quat_norm(&q));
    if q[0] < 0.0 {
        quat_scale(&q, -1.0)
    } else {
        q
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `<M, skew(w)>` as a vector in `w`.
pub fn skew_dual(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    )
}

// Coefficients of R = I + a K + b K² and their derivatives divided by θ.
fn rodrigues_coefficients(theta: f64) -> (f64, f64, f64, f64) {
    let t2 = theta * theta;
    if theta < 0.05 {
        let t4 = t2 * t2;
        (
            1.0 - t2 / 6.0 + t4 / 120.0,
            0.5 - t2 / 24.0 + t4 / 720.0,
            -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (
            s / theta,
            (1.0 - c) / t2,
            (theta * c - s) / (t2 * theta),
            (theta * s - 2.0 * (1.0 - c)) / (t2 * t2),
        )
    }
}

/// Rotation matrix of an axis-angle vector (Rodrigues).
pub fn axis_angle_to_rotmat(v: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b, _, _) = rodrigues_coefficients(v.norm());
    let k = skew(v);
    Matrix3::identity() + k * a + k * k * b
}

/// Partial derivatives `dR/dv_i` of [`axis_angle_to_rotmat`], valid at `v = 0`.
pub fn axis_angle_to_rotmat_jacobian(v: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let (a, b, c, d) = rodrigues_coefficients(v.norm());
    let k = skew(v);
    let k2 = k * k;
    std::array::from_fn(|i| {
        let e = skew(&Vector3::ith(i, 1.0));
        e * a + (e * k + k * e) * b + k * (c * v[i]) + k2 * (d * v[i])
    })
}
