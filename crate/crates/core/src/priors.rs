//! Local rigidity, rotation and isometry regularizers between the canonical
//! and observation spaces, over a canonical-space k-NN graph with isotropic
//! weights `w_ij = exp(-λ_w ‖x_j - x_i‖²)`.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{normalize_quat, GaussianSet};
use crate::knn::KdTree;
use crate::math::{self, Quat};

/// Canonical positions may drift this far from the graph snapshot before the
/// graph counts as stale.
pub const DEFAULT_STALE_TOLERANCE: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    pub k: usize,
    pub lambda_w: f64,
    /// `N × k` neighbor indices, nearest first.
    pub neighbors: Vec<usize>,
    pub weights: Vec<f64>,
    pub snapshot: Vec<[f64; 3]>,
    pub stale_tolerance: f64,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.snapshot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshot.is_empty()
    }

    pub fn neighbors_of(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    pub fn weights_of(&self, i: usize) -> &[f64] {
        &self.weights[i * self.k..(i + 1) * self.k]
    }

    /// Errors if the set no longer matches the positions the graph was built on.
    pub fn check_fresh(&self, canonical: &GaussianSet) -> Result<()> {
        if canonical.len() != self.len() {
            return Err(Error::StaleGraph(format!(
                "graph built on {} gaussians, set has {}",
                self.len(),
                canonical.len()
            )));
        }
        let drift = canonical
            .positions
            .iter()
            .zip(&self.snapshot)
            .map(|(a, b)| crate::knn::dist_sq(a, b))
            .fold(0.0, f64::max)
            .sqrt();
        if drift > self.stale_tolerance {
            return Err(Error::StaleGraph(format!(
                "canonical positions drifted {drift:.3e} m since the graph was built"
            )));
        }
        Ok(())
    }
}

pub fn knn_weight(dist_sq: f64, lambda_w: f64) -> f64 {
    (-lambda_w * dist_sq).exp()
}

/// Exact k-NN graph in canonical space, self excluded, ties by index.
pub fn build_knn(positions: &[[f64; 3]], k: usize, lambda_w: f64) -> Result<NeighborGraph> {
    if positions.len() <= k {
        return Err(Error::InsufficientPoints {
            n: positions.len(),
            k,
        });
    }
    let tree = KdTree::new(positions);
    let rows: Vec<Vec<crate::knn::Neighbor>> = positions
        .par_iter()
        .enumerate()
        .map(|(i, p)| tree.nearest(p, k, Some(i)))
        .collect();
    let mut neighbors = Vec::with_capacity(positions.len() * k);
    let mut weights = Vec::with_capacity(positions.len() * k);
    for row in rows {
        for n in row {
            neighbors.push(n.index);
            weights.push(knn_weight(n.dist_sq, lambda_w));
        }
    }
    Ok(NeighborGraph {
        k,
        lambda_w,
        neighbors,
        weights,
        snapshot: positions.to_vec(),
        stale_tolerance: DEFAULT_STALE_TOLERANCE,
    })
}

/// Gradients of a prior term w.r.t. raw positions and quaternions in both
/// spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorGrads {
    pub canonical_positions: Vec<[f64; 3]>,
    pub canonical_rotations: Vec<Quat>,
    pub observed_positions: Vec<[f64; 3]>,
    pub observed_rotations: Vec<Quat>,
}

impl PriorGrads {
    pub fn zeros(n: usize) -> Self {
        PriorGrads {
            canonical_positions: vec![[0.0; 3]; n],
            canonical_rotations: vec![[0.0; 4]; n],
            observed_positions: vec![[0.0; 3]; n],
            observed_rotations: vec![[0.0; 4]; n],
        }
    }

    fn add_scaled(&mut self, other: &PriorGrads, s: f64) {
        fn axpy<const D: usize>(dst: &mut [[f64; D]], src: &[[f64; D]], s: f64) {
            for (d, v) in dst.iter_mut().zip(src) {
                for k in 0..D {
                    d[k] += s * v[k];
                }
            }
        }
        axpy(&mut self.canonical_positions, &other.canonical_positions, s);
        axpy(&mut self.canonical_rotations, &other.canonical_rotations, s);
        axpy(&mut self.observed_positions, &other.observed_positions, s);
        axpy(&mut self.observed_rotations, &other.observed_rotations, s);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorTerm {
    pub loss: f64,
    pub grads: PriorGrads,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IsoMode {
    /// `‖x_o‖ - ‖x_c‖` summed with its sign.
    #[default]
    Signed,
    /// `|‖x_o‖ - ‖x_c‖|`.
    Absolute,
}

fn check_inputs(graph: &NeighborGraph, canonical: &GaussianSet, observed: &GaussianSet) -> Result<()> {
    graph.check_fresh(canonical)?;
    if observed.len() != canonical.len() {
        return Err(Error::invalid(format!(
            "observation set has {} gaussians, canonical has {}",
            observed.len(),
            canonical.len()
        )));
    }
    Ok(())
}

/// Contribution of the edges leaving one Gaussian.
struct RowGrads {
    loss: f64,
    own: [f64; 8],
    others: Vec<[f64; 8]>,
}

fn scatter(graph: &NeighborGraph, rows: Vec<RowGrads>) -> (f64, Vec<[f64; 8]>) {
    let mut acc = vec![[0.0; 8]; graph.len()];
    let mut loss = 0.0;
    for (i, row) in rows.into_iter().enumerate() {
        loss += row.loss;
        for k in 0..8 {
            acc[i][k] += row.own[k];
        }
        for (&j, g) in graph.neighbors_of(i).iter().zip(&row.others) {
            for k in 0..8 {
                acc[j][k] += g[k];
            }
        }
    }
    (loss, acc)
}

fn unit_rotations(set: &GaussianSet) -> Result<Vec<Quat>> {
    set.rotations.iter().map(normalize_quat).collect()
}

fn rotmat_grad_to_raw(raw: &Quat, unit: &Quat, g: &Matrix3<f64>) -> Quat {
    let gn = math::unit_quat_to_rotmat_backward(unit, g);
    math::normalize_backward(raw, &gn)
}

/// Mean weighted deviation of each neighbor from the rigid motion of the
/// Gaussian's local frame, `R_o R_c⁻¹`.
pub fn rigid_loss(graph: &NeighborGraph, canonical: &GaussianSet, observed: &GaussianSet) -> Result<PriorTerm> {
    check_inputs(graph, canonical, observed)?;
    let n = canonical.len();
    let scale = 1.0 / (graph.k * n) as f64;
    let qc = unit_rotations(canonical)?;
    let qo = unit_rotations(observed)?;
    let rc: Vec<Matrix3<f64>> = qc.iter().map(math::unit_quat_to_rotmat).collect();
    let ro: Vec<Matrix3<f64>> = qo.iter().map(math::unit_quat_to_rotmat).collect();
    let xc = &canonical.positions;
    let xo = &observed.positions;

    // Slots: [0..3] canonical position, [3..6] observed position. Rotation
    // gradients are kept per row.
    let rows: Vec<(RowGrads, Matrix3<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let q = ro[i] * rc[i].transpose();
            let mut row = RowGrads {
                loss: 0.0,
                own: [0.0; 8],
                others: vec![[0.0; 8]; graph.k],
            };
            let mut grad_q = Matrix3::zeros();
            for (slot, (&j, &w)) in graph.neighbors_of(i).iter().zip(graph.weights_of(i)).enumerate() {
                let dc = Vector3::from(xc[j]) - Vector3::from(xc[i]);
                let e = (Vector3::from(xo[j]) - Vector3::from(xo[i])) - q * dc;
                let norm = e.norm();
                row.loss += scale * w * norm;
                if norm == 0.0 {
                    continue;
                }
                let g = e * (scale * w / norm);
                let gc = q.transpose() * g;
                for a in 0..3 {
                    row.others[slot][3 + a] += g[a];
                    row.own[3 + a] -= g[a];
                    row.others[slot][a] -= gc[a];
                    row.own[a] += gc[a];
                }
                grad_q -= g * dc.transpose();
            }
            (row, grad_q)
        })
        .collect();
    let mut grad_q = Vec::with_capacity(n);
    let rows: Vec<RowGrads> = rows
        .into_iter()
        .map(|(r, g)| {
            grad_q.push(g);
            r
        })
        .collect();
    let (loss, acc) = scatter(graph, rows);
    let mut grads = PriorGrads::zeros(n);
    for i in 0..n {
        grads.canonical_positions[i] = [acc[i][0], acc[i][1], acc[i][2]];
        grads.observed_positions[i] = [acc[i][3], acc[i][4], acc[i][5]];
        let g_ro = grad_q[i] * rc[i];
        let g_rc = grad_q[i].transpose() * ro[i];
        grads.observed_rotations[i] = rotmat_grad_to_raw(&observed.rotations[i], &qo[i], &g_ro);
        grads.canonical_rotations[i] = rotmat_grad_to_raw(&canonical.rotations[i], &qc[i], &g_rc);
    }
    Ok(PriorTerm { loss, grads })
}

/// Mean weighted difference between neighboring relative rotations
/// `q_o ⊗ q_c⁻¹`, each flipped onto the `w ≥ 0` hemisphere first.
pub fn rot_loss(graph: &NeighborGraph, canonical: &GaussianSet, observed: &GaussianSet) -> Result<PriorTerm> {
    check_inputs(graph, canonical, observed)?;
    let n = canonical.len();
    let scale = 1.0 / (graph.k * n) as f64;
    let qc = unit_rotations(canonical)?;
    let qo = unit_rotations(observed)?;
    let (rel, sign): (Vec<Quat>, Vec<f64>) = (0..n)
        .map(|i| {
            let p = math::quat_mul(&qo[i], &math::quat_conj(&qc[i]));
            let s = if p[0] < 0.0 { -1.0 } else { 1.0 };
            (math::quat_scale(&p, s), s)
        })
        .unzip();
    let rows: Vec<RowGrads> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = RowGrads {
                loss: 0.0,
                own: [0.0; 8],
                others: vec![[0.0; 8]; graph.k],
            };
            for (slot, (&j, &w)) in graph.neighbors_of(i).iter().zip(graph.weights_of(i)).enumerate() {
                let d: [f64; 4] = std::array::from_fn(|a| rel[j][a] - rel[i][a]);
                let norm = math::quat_norm(&d);
                row.loss += scale * w * norm;
                if norm == 0.0 {
                    continue;
                }
                for a in 0..4 {
                    let g = scale * w * d[a] / norm;
                    row.others[slot][a] += g;
                    row.own[a] -= g;
                }
            }
            row
        })
        .collect();
    let (loss, acc) = scatter(graph, rows);
    let mut grads = PriorGrads::zeros(n);
    for i in 0..n {
        let g_rel = [acc[i][0], acc[i][1], acc[i][2], acc[i][3]];
        let g_p = math::quat_scale(&g_rel, sign[i]);
        let conj_c = math::quat_conj(&qc[i]);
        let (g_qo, g_conj) = math::quat_mul_backward(&qo[i], &conj_c, &g_p);
        grads.observed_rotations[i] = math::normalize_backward(&observed.rotations[i], &g_qo);
        grads.canonical_rotations[i] =
            math::normalize_backward(&canonical.rotations[i], &math::quat_conj(&g_conj));
    }
    Ok(PriorTerm { loss, grads })
}

/// Mean weighted change of neighbor distances between the two spaces.
pub fn iso_loss(
    graph: &NeighborGraph,
    canonical: &GaussianSet,
    observed: &GaussianSet,
    mode: IsoMode,
) -> Result<PriorTerm> {
    check_inputs(graph, canonical, observed)?;
    let n = canonical.len();
    let scale = 1.0 / (graph.k * n) as f64;
    let xc = &canonical.positions;
    let xo = &observed.positions;
    let rows: Vec<RowGrads> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = RowGrads {
                loss: 0.0,
                own: [0.0; 8],
                others: vec![[0.0; 8]; graph.k],
            };
            for (slot, (&j, &w)) in graph.neighbors_of(i).iter().zip(graph.weights_of(i)).enumerate() {
                let vo = Vector3::from(xo[j]) - Vector3::from(xo[i]);
                let vc = Vector3::from(xc[j]) - Vector3::from(xc[i]);
                let (no, nc) = (vo.norm(), vc.norm());
                let diff = no - nc;
                let g = match mode {
                    IsoMode::Signed => {
                        row.loss += scale * w * diff;
                        scale * w
                    }
                    IsoMode::Absolute => {
                        row.loss += scale * w * diff.abs();
                        if diff == 0.0 {
                            0.0
                        } else {
                            scale * w * diff.signum()
                        }
                    }
                };
                if no > 0.0 {
                    let u = vo * (g / no);
                    for a in 0..3 {
                        row.others[slot][3 + a] += u[a];
                        row.own[3 + a] -= u[a];
                    }
                }
                if nc > 0.0 {
                    let u = vc * (g / nc);
                    for a in 0..3 {
                        row.others[slot][a] -= u[a];
                        row.own[a] += u[a];
                    }
                }
            }
            row
        })
        .collect();
    let (loss, acc) = scatter(graph, rows);
    let mut grads = PriorGrads::zeros(n);
    for i in 0..n {
        grads.canonical_positions[i] = [acc[i][0], acc[i][1], acc[i][2]];
        grads.observed_positions[i] = [acc[i][3], acc[i][4], acc[i][5]];
    }
    Ok(PriorTerm { loss, grads })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorWeights {
    pub rigid: f64,
    pub rot: f64,
    pub iso: f64,
    pub iso_mode: IsoMode,
}

impl Default for PriorWeights {
    fn default() -> Self {
        PriorWeights {
            rigid: 4e-2,
            rot: 4e-2,
            iso: 4e-2,
            iso_mode: IsoMode::Signed,
        }
    }
}

/// Unweighted term values plus the gradient of the weighted sum.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorTotal {
    pub rigid: f64,
    pub rot: f64,
    pub iso: f64,
    pub total: f64,
    pub grads: PriorGrads,
}

/// `λ_rigid L_rigid + λ_rot L_rot + λ_iso L_iso`. Terms with zero weight are
/// not evaluated and report zero.
pub fn prior_total(
    graph: &NeighborGraph,
    canonical: &GaussianSet,
    observed: &GaussianSet,
    weights: &PriorWeights,
) -> Result<PriorTotal> {
    check_inputs(graph, canonical, observed)?;
    let mut out = PriorTotal {
        rigid: 0.0,
        rot: 0.0,
        iso: 0.0,
        total: 0.0,
        grads: PriorGrads::zeros(canonical.len()),
    };
    if weights.rigid != 0.0 {
        let t = rigid_loss(graph, canonical, observed)?;
        out.rigid = t.loss;
        out.grads.add_scaled(&t.grads, weights.rigid);
    }
    if weights.rot != 0.0 {
        let t = rot_loss(graph, canonical, observed)?;
        out.rot = t.loss;
        out.grads.add_scaled(&t.grads, weights.rot);
    }
    if weights.iso != 0.0 {
        let t = iso_loss(graph, canonical, observed, weights.iso_mode)?;
        out.iso = t.loss;
        out.grads.add_scaled(&t.grads, weights.iso);
    }
    out.total = weights.rigid * out.rigid + weights.rot * out.rot + weights.iso * out.iso;
    Ok(out)
}
