//! Canonical → observation deformation of Gaussians by forward LBS.
//!
//! Positions are mapped by the blended transform `D`. Rotations are composed
//! with the closest rotation to `D`'s linear block (its polar factor).

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{GaussianSet, Space};
use crate::math::{self, Quat};
use crate::skinning::{self, PoseParams, ShapeParams, Skeleton, SkinWeightGrid};

const MIN_DETERMINANT: f64 = 1e-12;

/// Per-Gaussian quantities cached by the forward pass.
#[derive(Debug, Clone)]
pub struct DeformRecord {
    pub transforms: Vec<Matrix4<f64>>,
    /// Unit quaternion of the polar rotation of each transform.
    pub rotations: Vec<Quat>,
    pub weights: Vec<Vec<f64>>,
    stretch: Vec<Matrix3<f64>>,
    canonical_positions: Vec<[f64; 3]>,
    canonical_rotations: Vec<Quat>,
    bones: Vec<Matrix4<f64>>,
    skeleton: Skeleton,
    pose: PoseParams,
    shape: ShapeParams,
}

impl DeformRecord {
    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn bones(&self) -> &[Matrix4<f64>] {
        &self.bones
    }

    pub fn rotation_matrix(&self, i: usize) -> Matrix3<f64> {
        math::unit_quat_to_rotmat(&self.rotations[i])
    }
}

/// Gradients produced by [`deform_backward`].
#[derive(Debug, Clone)]
pub struct DeformGrads {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<Quat>,
    pub pose: PoseParams,
}

/// Polar decomposition `A = R S` with `R` a rotation, by scaled Newton
/// iteration. Requires `det A > 0`.
pub fn polar_rotation(a: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let mut x = *a;
    for iter in 0..100 {
        let inv = x.try_inverse()?;
        let gamma = if iter < 8 {
            (inv.norm() / x.norm()).sqrt()
        } else {
            1.0
        };
        let next = (x * gamma + inv.transpose() / gamma) * 0.5;
        let delta = (next - x).norm();
        x = next;
        if delta <= 1e-15 * x.norm() {
            break;
        }
    }
    Some(x)
}

fn linear_block(d: &Matrix4<f64>) -> Matrix3<f64> {
    d.fixed_view::<3, 3>(0, 0).into_owned()
}

/// Deforms `canonical` with per-Gaussian skinning weights held fixed.
pub fn deform_with_weights(
    canonical: &GaussianSet,
    weights: Vec<Vec<f64>>,
    skeleton: &Skeleton,
    pose: &PoseParams,
    shape: &ShapeParams,
) -> Result<(GaussianSet, DeformRecord)> {
    if canonical.space != Space::Canonical {
        return Err(Error::invalid("deformation expects a canonical-space set"));
    }
    canonical.validate()?;
    if weights.len() != canonical.len() {
        return Err(Error::invalid(format!(
            "{} weight vectors for {} gaussians",
            weights.len(),
            canonical.len()
        )));
    }
    let bones = skinning::bone_transforms(skeleton, pose, shape)?;
    let per: Vec<Result<(Matrix4<f64>, Matrix3<f64>, Quat)>> = weights
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let d = skinning::lbs_transform(w, &bones)?;
            let a = linear_block(&d);
            let det = a.determinant();
            if !(det > MIN_DETERMINANT) {
                return Err(Error::DegenerateDeformation { index: i, det });
            }
            let r = polar_rotation(&a).ok_or(Error::DegenerateDeformation { index: i, det })?;
            Ok((d, r.transpose() * a, math::rotmat_to_quat(&r)))
        })
        .collect();
    let n = canonical.len();
    let mut transforms = Vec::with_capacity(n);
    let mut stretch = Vec::with_capacity(n);
    let mut rotations = Vec::with_capacity(n);
    for r in per {
        let (d, s, q) = r?;
        transforms.push(d);
        stretch.push(s);
        rotations.push(q);
    }
    let mut observed = canonical.clone();
    observed.space = Space::Observation;
    for i in 0..n {
        let p = transforms[i] * Vector4::new(
            canonical.positions[i][0],
            canonical.positions[i][1],
            canonical.positions[i][2],
            1.0,
        );
        observed.positions[i] = [p.x, p.y, p.z];
        observed.rotations[i] = math::quat_mul(&rotations[i], &canonical.rotations[i]);
    }
    let record = DeformRecord {
        transforms,
        rotations,
        weights,
        stretch,
        canonical_positions: canonical.positions.clone(),
        canonical_rotations: canonical.rotations.clone(),
        bones,
        skeleton: skeleton.clone(),
        pose: pose.clone(),
        shape: shape.clone(),
    };
    Ok((observed, record))
}

/// Samples skinning weights at the canonical positions and deforms the set
/// into the observation space of `pose`.
pub fn deform_gaussians(
    canonical: &GaussianSet,
    pose: &PoseParams,
    shape: &ShapeParams,
    skeleton: &Skeleton,
    grid: &SkinWeightGrid,
) -> Result<(GaussianSet, DeformRecord)> {
    if grid.joint_count != skeleton.joint_count() {
        return Err(Error::invalid(format!(
            "weight grid has {} joints, skeleton has {}",
            grid.joint_count,
            skeleton.joint_count()
        )));
    }
    let weights = canonical.positions.par_iter().map(|p| grid.sample(p)).collect();
    deform_with_weights(canonical, weights, skeleton, pose, shape)
}

/// Chain rule through the deformation, with skinning weights held constant.
pub fn deform_backward(
    record: &DeformRecord,
    grad_positions: &[[f64; 3]],
    grad_rotations: &[Quat],
) -> Result<DeformGrads> {
    let n = record.len();
    if grad_positions.len() != n || grad_rotations.len() != n {
        return Err(Error::invalid(format!(
            "gradients for {} positions / {} rotations, record holds {n}",
            grad_positions.len(),
            grad_rotations.len()
        )));
    }
    let per: Vec<([f64; 3], Quat, Matrix4<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let d = &record.transforms[i];
            let a = linear_block(d);
            let gx = Vector3::from(grad_positions[i]);
            let xbar = Vector3::from(record.canonical_positions[i]);
            let grad_xbar = a.transpose() * gx;
            let mut grad_a = gx * xbar.transpose();

            let q = record.rotations[i];
            let (grad_q, grad_rbar) =
                math::quat_mul_backward(&q, &record.canonical_rotations[i], &grad_rotations[i]);
            let mut m = Vector3::zeros();
            for k in 0..3 {
                let mut e = [0.0; 4];
                e[k + 1] = 0.5;
                let dq = math::quat_mul(&q, &e);
                m[k] = (0..4).map(|c| dq[c] * grad_q[c]).sum();
            }
            if m != Vector3::zeros() {
                let s = record.stretch[i];
                let sym = (s + s.transpose()) * 0.5;
                let k = Matrix3::identity() * sym.trace() - sym;
                let y = k.try_inverse().unwrap_or_else(Matrix3::zeros) * m;
                grad_a += math::unit_quat_to_rotmat(&q) * math::skew(&y);
            }
            let mut grad_d = Matrix4::zeros();
            grad_d.fixed_view_mut::<3, 3>(0, 0).copy_from(&grad_a);
            grad_d.fixed_view_mut::<3, 1>(0, 3).copy_from(&gx);
            (grad_xbar.into(), grad_rbar, grad_d)
        })
        .collect();
    let mut positions = Vec::with_capacity(n);
    let mut rotations = Vec::with_capacity(n);
    let mut grad_bones = vec![Matrix4::zeros(); record.bones.len()];
    for (i, (gp, gr, gd)) in per.into_iter().enumerate() {
        positions.push(gp);
        rotations.push(gr);
        for (gb, w) in grad_bones.iter_mut().zip(&record.weights[i]) {
            if *w != 0.0 {
                *gb += gd * *w;
            }
        }
    }
    let pose = skinning::bone_transforms_backward(
        &record.skeleton,
        &record.pose,
        &record.shape,
        &grad_bones,
    )?;
    Ok(DeformGrads {
        positions,
        rotations,
        pose,
    })
}
