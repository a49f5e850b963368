//! Articulated body: joint hierarchy, bone transforms, a baked skinning-weight
//! voxel grid, and the linear-blend-skinning transform.

use std::collections::VecDeque;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::KdTree;
use crate::math;

pub const SHAPE_DIM: usize = 10;

/// Joint hierarchy with rest transforms relative to the parent joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    #[serde(with = "parent_indices")]
    pub parents: Vec<Option<usize>>,
    #[serde(with = "matrix_rows")]
    pub rest_local_transforms: Vec<Matrix4<f64>>,
}

/// Per-frame pose: one axis-angle per joint plus the root translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub joint_rotations: Vec<[f64; 3]>,
    pub root_translation: [f64; 3],
}

/// Shape vector. Component `(i - 1) mod 10` scales the rest offset of joint
/// `i` by `exp(0.1 * beta)`; the root is never rescaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub beta: [f64; SHAPE_DIM],
}

impl Default for ShapeParams {
    fn default() -> Self {
        ShapeParams {
            beta: [0.0; SHAPE_DIM],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkinnedTemplate {
    pub vertices: Vec<[f64; 3]>,
    pub weights: Vec<Vec<f64>>,
}

/// Bone weights diffused into a regular grid. Samples sit on grid nodes:
/// node `i` along an axis is at `bbox_min + i * (bbox_max - bbox_min) / (res - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinWeightGrid {
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    pub resolution: [usize; 3],
    pub joint_count: usize,
    /// Voxel-major weights, `joint_count` per voxel, x fastest.
    pub weights: Vec<f64>,
    /// For each voxel, the closest voxel holding nonzero weights.
    fallback: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSettings {
    pub resolution: [usize; 3],
    pub dilation_steps: usize,
}

impl Default for GridSettings {
    fn default() -> Self {
        GridSettings {
            resolution: [64; 3],
            dilation_steps: 4,
        }
    }
}

const GRID_NEIGHBORS: usize = 8;
const IDW_EPS: f64 = 1e-8;
const BBOX_PADDING: f64 = 0.1;
/// Voxels farther than this many cell edges from every template vertex start
/// out empty and are only filled by dilation.
const SPLAT_RADIUS_CELLS: f64 = 3.0;

impl Skeleton {
    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.parents.len();
        if n == 0 {
            return Err(Error::invalid("skeleton has no joints"));
        }
        if self.rest_local_transforms.len() != n {
            return Err(Error::invalid(format!(
                "skeleton has {n} parents but {} rest transforms",
                self.rest_local_transforms.len()
            )));
        }
        if self.parents[0].is_some() || self.parents[1..].iter().any(Option::is_none) {
            return Err(Error::invalid("skeleton must have exactly one root at index 0"));
        }
        for (i, p) in self.parents.iter().enumerate().skip(1) {
            if p.is_some_and(|p| p >= i) {
                return Err(Error::invalid(format!(
                    "joint {i} has parent {p:?}; parents must precede children"
                )));
            }
        }
        for (i, t) in self.rest_local_transforms.iter().enumerate() {
            check_rigid(t, 1e-9).map_err(|e| Error::invalid(format!("rest transform {i}: {e}")))?;
        }
        Ok(())
    }

    fn local_rest(&self, i: usize, shape: &ShapeParams) -> Matrix4<f64> {
        let mut t = self.rest_local_transforms[i];
        if i > 0 {
            let f = (0.1 * shape.beta[(i - 1) % SHAPE_DIM]).exp();
            for r in 0..3 {
                t[(r, 3)] *= f;
            }
        }
        t
    }

    /// Global joint frames at the rest pose.
    pub fn rest_globals(&self, shape: &ShapeParams) -> Vec<Matrix4<f64>> {
        let mut globals: Vec<Matrix4<f64>> = Vec::with_capacity(self.joint_count());
        for i in 0..self.joint_count() {
            let local = self.local_rest(i, shape);
            let g = match self.parents[i] {
                Some(p) => globals[p] * local,
                None => local,
            };
            globals.push(g);
        }
        globals
    }
}

impl PoseParams {
    pub fn rest(joint_count: usize) -> Self {
        PoseParams {
            joint_rotations: vec![[0.0; 3]; joint_count],
            root_translation: [0.0; 3],
        }
    }

    /// Flattened `[θ_0, …, θ_{n-1}, t]`, length `3 n + 3`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.joint_rotations.iter().flatten().copied().collect();
        v.extend_from_slice(&self.root_translation);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() < 6 || v.len() % 3 != 0 {
            return Err(Error::invalid(format!("pose vector of length {}", v.len())));
        }
        let n = v.len() / 3 - 1;
        Ok(PoseParams {
            joint_rotations: v[..3 * n]
                .chunks(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect(),
            root_translation: [v[3 * n], v[3 * n + 1], v[3 * n + 2]],
        })
    }

    pub fn validate(&self, joint_count: usize) -> Result<()> {
        if self.joint_rotations.len() != joint_count {
            return Err(Error::invalid(format!(
                "pose has {} joint rotations, skeleton has {joint_count} joints",
                self.joint_rotations.len()
            )));
        }
        if self.to_vec().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite pose parameter"));
        }
        Ok(())
    }
}

impl SkinnedTemplate {
    pub fn joint_count(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vertices.is_empty() {
            return Err(Error::invalid("template has no vertices"));
        }
        if self.weights.len() != self.vertices.len() {
            return Err(Error::invalid("template weight count differs from vertex count"));
        }
        let nk = self.joint_count();
        for (i, w) in self.weights.iter().enumerate() {
            if w.len() != nk || nk == 0 {
                return Err(Error::invalid(format!("vertex {i} has {} weights", w.len())));
            }
            if w.iter().any(|&x| !(x >= 0.0)) {
                return Err(Error::invalid(format!("vertex {i} has a negative weight")));
            }
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("vertex {i} weights sum to {s}")));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_rigid(t: &Matrix4<f64>, tol: f64) -> std::result::Result<(), String> {
    let r = t.fixed_view::<3, 3>(0, 0).into_owned();
    let err = (r * r.transpose() - Matrix3::identity()).abs().max();
    if err > tol || (r.determinant() - 1.0).abs() > tol {
        return Err(format!("rotation block is not orthonormal (error {err:e})"));
    }
    let bottom = [t[(3, 0)], t[(3, 1)], t[(3, 2)], t[(3, 3)]];
    if bottom != [0.0, 0.0, 0.0, 1.0] {
        return Err(format!("bottom row is {bottom:?}"));
    }
    Ok(())
}

pub(crate) fn rigid_inverse(t: &Matrix4<f64>) -> Matrix4<f64> {
    let r = t.fixed_view::<3, 3>(0, 0).transpose();
    let p = -(r * t.fixed_view::<3, 1>(0, 3));
    let mut inv = Matrix4::identity();
    inv.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    inv.fixed_view_mut::<3, 1>(0, 3).copy_from(&p);
    inv
}

fn rotation4(r: &Matrix3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m
}

pub fn translation4(t: &[f64; 3]) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m[(0, 3)] = t[0];
    m[(1, 3)] = t[1];
    m[(2, 3)] = t[2];
    m
}

struct Kinematics {
    /// Parent global (or root translation) times the local rest transform.
    pre: Vec<Matrix4<f64>>,
    rotations: Vec<Matrix4<f64>>,
    rest_inv: Vec<Matrix4<f64>>,
    bones: Vec<Matrix4<f64>>,
}

fn kinematics(skeleton: &Skeleton, pose: &PoseParams, shape: &ShapeParams) -> Result<Kinematics> {
    pose.validate(skeleton.joint_count())?;
    let n = skeleton.joint_count();
    let rest_inv: Vec<_> = skeleton.rest_globals(shape).iter().map(rigid_inverse).collect();
    let mut globals: Vec<Matrix4<f64>> = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n);
    let mut rotations = Vec::with_capacity(n);
    for i in 0..n {
        let local = skeleton.local_rest(i, shape);
        let a = match skeleton.parents[i] {
            Some(p) => globals[p] * local,
            None => translation4(&pose.root_translation) * local,
        };
        let rot = rotation4(&math::axis_angle_to_rotmat(&Vector3::from(
            pose.joint_rotations[i],
        )));
        globals.push(a * rot);
        pre.push(a);
        rotations.push(rot);
    }
    let bones = globals.iter().zip(&rest_inv).map(|(g, r)| g * r).collect();
    Ok(Kinematics {
        pre,
        rotations,
        rest_inv,
        bones,
    })
}

/// `B_i = G_i(θ) · G_i(rest)⁻¹` for every joint.
pub fn bone_transforms(
    skeleton: &Skeleton,
    pose: &PoseParams,
    shape: &ShapeParams,
) -> Result<Vec<Matrix4<f64>>> {
    Ok(kinematics(skeleton, pose, shape)?.bones)
}

/// Pose gradient given `dL/dB_i` for every bone.
pub fn bone_transforms_backward(
    skeleton: &Skeleton,
    pose: &PoseParams,
    shape: &ShapeParams,
    grad_bones: &[Matrix4<f64>],
) -> Result<PoseParams> {
    let n = skeleton.joint_count();
    if grad_bones.len() != n {
        return Err(Error::invalid(format!(
            "{} bone gradients for {n} joints",
            grad_bones.len()
        )));
    }
    let kin = kinematics(skeleton, pose, shape)?;
    let mut grad_global: Vec<Matrix4<f64>> = grad_bones
        .iter()
        .zip(&kin.rest_inv)
        .map(|(g, r)| g * r.transpose())
        .collect();
    let mut out = PoseParams::rest(n);
    for i in (0..n).rev() {
        let g = grad_global[i];
        let grad_pre = g * kin.rotations[i].transpose();
        let grad_rot = (kin.pre[i].transpose() * g).fixed_view::<3, 3>(0, 0).into_owned();
        let jac = math::axis_angle_to_rotmat_jacobian(&Vector3::from(pose.joint_rotations[i]));
        for k in 0..3 {
            out.joint_rotations[i][k] = grad_rot.component_mul(&jac[k]).sum();
        }
        match skeleton.parents[i] {
            Some(p) => {
                let local = skeleton.local_rest(i, shape);
                grad_global[p] += grad_pre * local.transpose();
            }
            None => {
                for r in 0..3 {
                    out.root_translation[r] += grad_pre[(r, 3)];
                }
            }
        }
    }
    Ok(out)
}

/// `D = Σ w_i B_i`.
pub fn lbs_transform(weights: &[f64], bones: &[Matrix4<f64>]) -> Result<Matrix4<f64>> {
    if weights.len() != bones.len() {
        return Err(Error::invalid(format!(
            "{} weights for {} bones",
            weights.len(),
            bones.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("skinning weights sum to {sum}")));
    }
    Ok(blend(weights, bones))
}

pub(crate) fn blend(weights: &[f64], bones: &[Matrix4<f64>]) -> Matrix4<f64> {
    let mut d = Matrix4::zeros();
    for (w, b) in weights.iter().zip(bones) {
        if *w != 0.0 {
            d += b * *w;
        }
    }
    d
}

impl SkinWeightGrid {
    fn cell(&self) -> [f64; 3] {
        std::array::from_fn(|a| {
            (self.bbox_max[a] - self.bbox_min[a]) / (self.resolution[a] - 1) as f64
        })
    }

    pub fn voxel_count(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn voxel_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.resolution[1] + j) * self.resolution[0] + i
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let c = self.cell();
        [
            self.bbox_min[0] + i as f64 * c[0],
            self.bbox_min[1] + j as f64 * c[1],
            self.bbox_min[2] + k as f64 * c[2],
        ]
    }

    pub fn voxel_weights(&self, index: usize) -> &[f64] {
        &self.weights[index * self.joint_count..(index + 1) * self.joint_count]
    }

    fn is_filled(&self, index: usize) -> bool {
        self.voxel_weights(index).iter().any(|&w| w > 0.0)
    }

    /// Trilinear sample, renormalized to sum to one. Points outside the box
    /// are clamped onto it.
    pub fn sample(&self, point: &[f64; 3]) -> Vec<f64> {
        let cell = self.cell();
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        let mut nearest = [0usize; 3];
        for a in 0..3 {
            let p = point[a].clamp(self.bbox_min[a], self.bbox_max[a]);
            let f = (p - self.bbox_min[a]) / cell[a];
            let last = self.resolution[a] - 1;
            let i0 = (f.floor().max(0.0) as usize).min(last - 1);
            base[a] = i0;
            frac[a] = (f - i0 as f64).clamp(0.0, 1.0);
            nearest[a] = (f.round().max(0.0) as usize).min(last);
        }
        let mut out = vec![0.0; self.joint_count];
        for corner in 0..8 {
            let offs = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let mut t = 1.0;
            for a in 0..3 {
                t *= if offs[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if t == 0.0 {
                continue;
            }
            let idx = self.voxel_index(base[0] + offs[0], base[1] + offs[1], base[2] + offs[2]);
            for (o, w) in out.iter_mut().zip(self.voxel_weights(idx)) {
                *o += t * w;
            }
        }
        let mut sum: f64 = out.iter().sum();
        if !(sum > 1e-12) {
            let idx = self.fallback[self.voxel_index(nearest[0], nearest[1], nearest[2])];
            out.copy_from_slice(self.voxel_weights(idx));
            sum = out.iter().sum();
        }
        for o in &mut out {
            *o /= sum;
        }
        out
    }
}

/// Diffuses template skinning weights into a voxel grid.
///
/// Voxels near the template take the inverse-square-distance average of the
/// eight nearest vertices; `dilation_steps` rounds of 6-neighborhood averaging
/// then grow the field into the remaining empty voxels.
pub fn bake_weight_grid(template: &SkinnedTemplate, settings: &GridSettings) -> Result<SkinWeightGrid> {
    template.validate()?;
    let res = settings.resolution;
    if res.iter().any(|&r| r < 2) {
        return Err(Error::invalid(format!("grid resolution {res:?} below 2")));
    }
    let nk = template.joint_count();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in &template.vertices {
        for a in 0..3 {
            lo[a] = lo[a].min(v[a]);
            hi[a] = hi[a].max(v[a]);
        }
    }
    let max_extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max).max(1e-3);
    let mut bbox_min = [0.0; 3];
    let mut bbox_max = [0.0; 3];
    for a in 0..3 {
        let pad = (BBOX_PADDING * (hi[a] - lo[a])).max(1e-3 * max_extent);
        bbox_min[a] = lo[a] - pad;
        bbox_max[a] = hi[a] + pad;
    }
    let mut grid = SkinWeightGrid {
        bbox_min,
        bbox_max,
        resolution: res,
        joint_count: nk,
        weights: vec![0.0; res.iter().product::<usize>() * nk],
        fallback: Vec::new(),
    };
    let cell = grid.cell();
    let radius = SPLAT_RADIUS_CELLS * cell.iter().copied().fold(0.0, f64::max);
    let tree = KdTree::new(&template.vertices);
    let k = GRID_NEIGHBORS.min(template.vertices.len());
    for kz in 0..res[2] {
        for jy in 0..res[1] {
            for ix in 0..res[0] {
                let p = grid.node_position(ix, jy, kz);
                let nn = tree.nearest(&p, k, None);
                if nn[0].dist_sq.sqrt() > radius {
                    continue;
                }
                let idx = grid.voxel_index(ix, jy, kz);
                let out = &mut grid.weights[idx * nk..(idx + 1) * nk];
                let mut total = 0.0;
                for n in &nn {
                    let d = n.dist_sq.sqrt() + IDW_EPS;
                    let w = 1.0 / (d * d);
                    total += w;
                    for (o, tw) in out.iter_mut().zip(&template.weights[n.index]) {
                        *o += w * tw;
                    }
                }
                for o in out.iter_mut() {
                    *o /= total;
                }
            }
        }
    }
    for _ in 0..settings.dilation_steps {
        dilate(&mut grid);
    }
    grid.fallback = nearest_filled(&grid);
    Ok(grid)
}

fn neighbors6(grid: &SkinWeightGrid, idx: usize) -> impl Iterator<Item = usize> + '_ {
    let [rx, ry, rz] = grid.resolution;
    let i = idx % rx;
    let j = (idx / rx) % ry;
    let k = idx / (rx * ry);
    let cand = [
        (i > 0).then(|| idx - 1),
        (i + 1 < rx).then(|| idx + 1),
        (j > 0).then(|| idx - rx),
        (j + 1 < ry).then(|| idx + rx),
        (k > 0).then(|| idx - rx * ry),
        (k + 1 < rz).then(|| idx + rx * ry),
    ];
    cand.into_iter().flatten()
}

fn dilate(grid: &mut SkinWeightGrid) {
    let nk = grid.joint_count;
    let filled: Vec<bool> = (0..grid.voxel_count()).map(|i| grid.is_filled(i)).collect();
    let mut updates = Vec::new();
    for idx in 0..grid.voxel_count() {
        if filled[idx] {
            continue;
        }
        let mut acc = vec![0.0; nk];
        let mut count = 0;
        for n in neighbors6(grid, idx) {
            if filled[n] {
                count += 1;
                for (a, w) in acc.iter_mut().zip(grid.voxel_weights(n)) {
                    *a += w;
                }
            }
        }
        if count > 0 {
            acc.iter_mut().for_each(|a| *a /= count as f64);
            updates.push((idx, acc));
        }
    }
    for (idx, w) in updates {
        grid.weights[idx * nk..(idx + 1) * nk].copy_from_slice(&w);
    }
}

fn nearest_filled(grid: &SkinWeightGrid) -> Vec<usize> {
    let n = grid.voxel_count();
    let mut out = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for idx in 0..n {
        if grid.is_filled(idx) {
            out[idx] = idx;
            queue.push_back(idx);
        }
    }
    while let Some(idx) = queue.pop_front() {
        let src = out[idx];
        for nb in neighbors6(grid, idx) {
            if out[nb] == usize::MAX {
                out[nb] = src;
                queue.push_back(nb);
            }
        }
    }
    out
}

mod parent_indices {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[Option<usize>], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|p| p.map_or(-1, |p| p as i64)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Option<usize>>, D::Error> {
        let raw = Vec::<i64>::deserialize(d)?;
        Ok(raw.into_iter().map(|p| usize::try_from(p).ok()).collect())
    }
}

pub(crate) mod matrix_rows {
    use nalgebra::Matrix4;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn to_rows(m: &Matrix4<f64>) -> [[f64; 4]; 4] {
        std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
    }

    pub fn from_rows(rows: &[[f64; 4]; 4]) -> Matrix4<f64> {
        Matrix4::from_fn(|r, c| rows[r][c])
    }

    pub fn serialize<S: Serializer>(v: &[Matrix4<f64>], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(to_rows))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Matrix4<f64>>, D::Error> {
        let raw = Vec::<[[f64; 4]; 4]>::deserialize(d)?;
        Ok(raw.iter().map(from_rows).collect())
    }
}
