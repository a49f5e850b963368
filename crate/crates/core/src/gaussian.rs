//! Canonical Gaussian model: raw parameter storage, activations, covariance
//! construction and spherical-harmonics color.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::KdTree;
use crate::math::{self, Quat};

/// Degree-0 real SH basis constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
/// Degree-1 real SH basis constant.
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

pub const MAX_SH_DEGREE: usize = 1;

/// Opacity assigned to freshly initialized Gaussians.
pub const INIT_OPACITY: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Space {
    Canonical,
    Observation,
}

/// Number of scalars in one Gaussian's SH block.
pub fn sh_len(degree: usize) -> usize {
    3 * (degree + 1) * (degree + 1)
}

/// Per-Gaussian raw parameters, stored as parallel arrays.
///
/// Rotations are `(w, x, y, z)` quaternions normalized on activation, scales
/// are stored as logs and opacities as logits. SH coefficients are laid out
/// basis-major: coefficient `k` of channel `c` lives at `k * 3 + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<Quat>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub sh_coeffs: Vec<f64>,
    pub sh_degree: usize,
    pub space: Space,
}

/// Activated view of a [`GaussianSet`].
#[derive(Debug, Clone)]
pub struct Activated {
    pub rotations: Vec<Quat>,
    pub scales: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn sh_stride(&self) -> usize {
        sh_len(self.sh_degree)
    }

    pub fn sh(&self, i: usize) -> &[f64] {
        let stride = self.sh_stride();
        &self.sh_coeffs[i * stride..(i + 1) * stride]
    }

    /// An empty set with the given SH degree.
    pub fn empty(sh_degree: usize, space: Space) -> Self {
        GaussianSet {
            positions: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            sh_coeffs: Vec::new(),
            sh_degree,
            space,
        }
    }

    /// Checks array lengths, SH degree and finiteness.
    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(Error::UnsupportedDegree(self.sh_degree));
        }
        let n = self.len();
        if self.rotations.len() != n
            || self.log_scales.len() != n
            || self.opacity_logits.len() != n
            || self.sh_coeffs.len() != n * self.sh_stride()
        {
            return Err(Error::invalid(format!(
                "gaussian arrays disagree in length: positions {n}, rotations {}, log_scales {}, opacities {}, sh {}",
                self.rotations.len(),
                self.log_scales.len(),
                self.opacity_logits.len(),
                self.sh_coeffs.len()
            )));
        }
        let finite = self.positions.iter().flatten().all(|v| v.is_finite())
            && self.rotations.iter().flatten().all(|v| v.is_finite())
            && self.log_scales.iter().flatten().all(|v| v.is_finite())
            && self.opacity_logits.iter().all(|v| v.is_finite())
            && self.sh_coeffs.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("non-finite raw gaussian parameter"));
        }
        Ok(())
    }

    /// Appends a copy of Gaussian `i`.
    pub fn push_copy_of(&mut self, i: usize) {
        self.positions.push(self.positions[i]);
        self.rotations.push(self.rotations[i]);
        self.log_scales.push(self.log_scales[i]);
        self.opacity_logits.push(self.opacity_logits[i]);
        let stride = self.sh_stride();
        self.sh_coeffs.extend_from_within(i * stride..(i + 1) * stride);
    }

    /// Keeps only the Gaussians for which `keep` is true.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        let stride = self.sh_stride();
        let mut it = keep.iter();
        self.positions.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.rotations.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.log_scales.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.opacity_logits.retain(|_| *it.next().unwrap());
        let mut sh = Vec::with_capacity(self.sh_coeffs.len());
        for (i, &k) in keep.iter().enumerate() {
            if k {
                sh.extend_from_slice(&self.sh_coeffs[i * stride..(i + 1) * stride]);
            }
        }
        self.sh_coeffs = sh;
    }
}

/// Gradients w.r.t. every raw parameter of a [`GaussianSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<Quat>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub sh_coeffs: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros(n: usize, sh_degree: usize) -> Self {
        ParamGrads {
            positions: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![[0.0; 3]; n],
            opacity_logits: vec![0.0; n],
            sh_coeffs: vec![0.0; n * sh_len(sh_degree)],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Every gradient value, group after group.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.positions
            .iter()
            .flatten()
            .chain(self.rotations.iter().flatten())
            .chain(self.log_scales.iter().flatten())
            .chain(&self.opacity_logits)
            .chain(&self.sh_coeffs)
            .copied()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Normalized quaternion, rejecting zero-norm input.
pub fn normalize_quat(q: &Quat) -> Result<Quat> {
    let norm = math::quat_norm(q);
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::invalid(format!("quaternion {q:?} has no direction")));
    }
    Ok(math::quat_scale(q, 1.0 / norm))
}

/// Rotation matrix of `q / |q|`.
pub fn quat_to_rotmat(q: &Quat) -> Result<Matrix3<f64>> {
    Ok(math::unit_quat_to_rotmat(&normalize_quat(q)?))
}

/// `Σ = R · diag(exp(2·log_scale)) · Rᵀ`.
pub fn build_covariance(q: &Quat, log_scale: &[f64; 3]) -> Result<Matrix3<f64>> {
    let r = quat_to_rotmat(q)?;
    Ok(covariance_from(&r, &log_scale.map(f64::exp)))
}

pub(crate) fn covariance_from(r: &Matrix3<f64>, scale: &[f64; 3]) -> Matrix3<f64> {
    let s2 = Matrix3::from_diagonal(&Vector3::new(
        scale[0] * scale[0],
        scale[1] * scale[1],
        scale[2] * scale[2],
    ));
    r * s2 * r.transpose()
}

/// Gradients of [`build_covariance`] w.r.t. the raw quaternion and the
/// log-scales, given `dL/dΣ` (full-matrix convention).
pub fn build_covariance_backward(
    q: &Quat,
    log_scale: &[f64; 3],
    grad_cov: &Matrix3<f64>,
) -> Result<(Quat, [f64; 3])> {
    let n = normalize_quat(q)?;
    let r = math::unit_quat_to_rotmat(&n);
    let s = log_scale.map(f64::exp);
    let s2 = Matrix3::from_diagonal(&Vector3::new(s[0] * s[0], s[1] * s[1], s[2] * s[2]));
    let g = grad_cov + grad_cov.transpose();
    let grad_r = g * r * s2;
    let rgr = r.transpose() * grad_cov * r;
    let grad_ls = [
        2.0 * s2[(0, 0)] * rgr[(0, 0)],
        2.0 * s2[(1, 1)] * rgr[(1, 1)],
        2.0 * s2[(2, 2)] * rgr[(2, 2)],
    ];
    let grad_n = math::unit_quat_to_rotmat_backward(&n, &grad_r);
    Ok((math::normalize_backward(q, &grad_n), grad_ls))
}

/// Applies the parameter activations: normalize, exp, sigmoid.
pub fn activate(set: &GaussianSet) -> Result<Activated> {
    set.validate()?;
    let rotations = set
        .rotations
        .iter()
        .map(normalize_quat)
        .collect::<Result<Vec<_>>>()?;
    Ok(Activated {
        rotations,
        scales: set.log_scales.iter().map(|s| s.map(f64::exp)).collect(),
        opacities: set.opacity_logits.iter().map(|&o| sigmoid(o)).collect(),
    })
}

/// SH basis values at `dir` for the given degree.
pub fn sh_basis(dir: &Vector3<f64>, degree: usize) -> Result<Vec<f64>> {
    match degree {
        0 => Ok(vec![SH_C0]),
        1 => Ok(vec![SH_C0, -SH_C1 * dir.y, SH_C1 * dir.z, -SH_C1 * dir.x]),
        d => Err(Error::UnsupportedDegree(d)),
    }
}

/// RGB from SH coefficients, offset by 0.5 and clamped at zero.
pub fn evaluate_color(sh: &[f64], view_dir: &Vector3<f64>, degree: usize) -> Result<[f64; 3]> {
    let basis = sh_basis(view_dir, degree)?;
    if sh.len() != sh_len(degree) {
        return Err(Error::invalid(format!(
            "SH block has {} coefficients, degree {degree} needs {}",
            sh.len(),
            sh_len(degree)
        )));
    }
    Ok(color_from_basis(sh, &basis).map(|c| c.max(0.0)))
}

/// Unclamped `Σ basis_k · sh_k + 0.5` per channel.
pub(crate) fn color_from_basis(sh: &[f64], basis: &[f64]) -> [f64; 3] {
    let mut rgb = [0.5; 3];
    for (k, b) in basis.iter().enumerate() {
        for c in 0..3 {
            rgb[c] += b * sh[k * 3 + c];
        }
    }
    rgb
}

/// DC coefficients encoding a constant color.
pub fn dc_from_color(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|c| (c - 0.5) / SH_C0)
}

/// One canonical Gaussian per template vertex.
///
/// Scales are isotropic, set from the mean distance to the three nearest
/// other vertices; opacity starts at [`INIT_OPACITY`].
pub fn init_from_vertices(
    vertices: &[[f64; 3]],
    base_color: [f64; 3],
    sh_degree: usize,
) -> Result<GaussianSet> {
    if sh_degree > MAX_SH_DEGREE {
        return Err(Error::UnsupportedDegree(sh_degree));
    }
    if vertices.len() < 4 {
        return Err(Error::DegenerateInitialization(format!(
            "need at least 4 vertices, got {}",
            vertices.len()
        )));
    }
    if vertices.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite template vertex"));
    }
    if vertices.iter().all(|v| v == &vertices[0]) {
        return Err(Error::DegenerateInitialization(
            "all template vertices coincide".into(),
        ));
    }
    let tree = KdTree::new(vertices);
    let log_scales = vertices
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let nn = tree.nearest(v, 3, Some(i));
            let mean = nn.iter().map(|n| n.dist_sq.sqrt()).sum::<f64>() / nn.len() as f64;
            [mean.max(1e-7).ln(); 3]
        })
        .collect();
    let n = vertices.len();
    let stride = sh_len(sh_degree);
    let dc = dc_from_color(base_color);
    let mut sh_coeffs = vec![0.0; n * stride];
    for block in sh_coeffs.chunks_mut(stride) {
        block[..3].copy_from_slice(&dc);
    }
    Ok(GaussianSet {
        positions: vertices.to_vec(),
        rotations: vec![math::QUAT_IDENTITY; n],
        log_scales,
        opacity_logits: vec![logit(INIT_OPACITY); n],
        sh_coeffs,
        sh_degree,
        space: Space::Canonical,
    })
}
