//! Adam with per-group moments that follow the Gaussian set through splits.

use serde::{Deserialize, Serialize};

use crate::gaussian::{sh_len, GaussianSet, ParamGrads};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments of one flat parameter array.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Moments {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected Adam step at iteration `t` (1-based).
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, t: u64) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grads.len(), self.m.len());
        if lr == 0.0 {
            return;
        }
        let c1 = 1.0 - BETA1.powi(t as i32);
        let c2 = 1.0 - BETA2.powi(t as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
        }
    }

    fn zero_row(&mut self, row: usize, stride: usize) {
        self.m[row * stride..(row + 1) * stride].fill(0.0);
        self.v[row * stride..(row + 1) * stride].fill(0.0);
    }

    fn push_zero_row(&mut self, stride: usize) {
        self.m.extend(std::iter::repeat_n(0.0, stride));
        self.v.extend(std::iter::repeat_n(0.0, stride));
    }

    fn retain_rows(&mut self, keep: &[bool], stride: usize) {
        let filter = |src: &[f64]| -> Vec<f64> {
            keep.iter()
                .enumerate()
                .filter(|(_, &k)| k)
                .flat_map(|(i, _)| src[i * stride..(i + 1) * stride].iter().copied())
                .collect()
        };
        self.m = filter(&self.m);
        self.v = filter(&self.v);
    }
}

/// Adam state for every parameter group of a canonical set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMoments {
    pub positions: Moments,
    pub rotations: Moments,
    pub log_scales: Moments,
    pub opacity_logits: Moments,
    pub sh_coeffs: Moments,
    pub sh_stride: usize,
}

impl GaussianMoments {
    pub fn zeros(n: usize, sh_degree: usize) -> Self {
        let s = sh_len(sh_degree);
        GaussianMoments {
            positions: Moments::zeros(3 * n),
            rotations: Moments::zeros(4 * n),
            log_scales: Moments::zeros(3 * n),
            opacity_logits: Moments::zeros(n),
            sh_coeffs: Moments::zeros(s * n),
            sh_stride: s,
        }
    }

    pub fn rows(&self) -> usize {
        self.opacity_logits.len()
    }

    fn groups(&mut self) -> [(&mut Moments, usize); 5] {
        let s = self.sh_stride;
        [
            (&mut self.positions, 3),
            (&mut self.rotations, 4),
            (&mut self.log_scales, 3),
            (&mut self.opacity_logits, 1),
            (&mut self.sh_coeffs, s),
        ]
    }

    pub fn zero_row(&mut self, row: usize) {
        for (g, stride) in self.groups() {
            g.zero_row(row, stride);
        }
    }

    pub fn push_zero_row(&mut self) {
        for (g, stride) in self.groups() {
            g.push_zero_row(stride);
        }
    }

    pub fn retain_mask(&mut self, keep: &[bool]) {
        for (g, stride) in self.groups() {
            g.retain_rows(keep, stride);
        }
    }
}

/// Learning rate per parameter group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub sh: f64,
}

/// Optimizer state for the canonical set and the per-frame pose bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub gaussians: GaussianMoments,
    pub poses: Vec<Moments>,
    pub pose_steps: Vec<u64>,
}

impl OptimizerState {
    pub fn new(n: usize, sh_degree: usize, frames: usize, pose_len: usize) -> Self {
        OptimizerState {
            step: 0,
            gaussians: GaussianMoments::zeros(n, sh_degree),
            poses: vec![Moments::zeros(pose_len); frames],
            pose_steps: vec![0; frames],
        }
    }

    /// Advances the step counter and applies one Adam update to `set`.
    pub fn update_gaussians(&mut self, set: &mut GaussianSet, grads: &ParamGrads, rates: &GroupRates) {
        self.step += 1;
        let t = self.step;
        let g = &mut self.gaussians;
        g.positions.step(set.positions.as_flattened_mut(), grads.positions.as_flattened(), rates.position, t);
        g.rotations.step(set.rotations.as_flattened_mut(), grads.rotations.as_flattened(), rates.rotation, t);
        g.log_scales.step(set.log_scales.as_flattened_mut(), grads.log_scales.as_flattened(), rates.scale, t);
        g.opacity_logits.step(&mut set.opacity_logits, &grads.opacity_logits, rates.opacity, t);
        g.sh_coeffs.step(&mut set.sh_coeffs, &grads.sh_coeffs, rates.sh, t);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut m = Moments::zeros(3);
        let mut p = vec![1.0, 2.0, 3.0];
        m.step(&mut p, &[0.5, -2.0, 0.0], 0.1, 1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] - 2.1).abs() < 1e-6);
        assert_eq!(p[2], 3.0);
    }

    #[test]
    fn matches_reference_sequence() {
        // Plain scalar Adam written out longhand.
        let grads = [0.3, -0.1, 0.7, 0.2, -0.4];
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.5f64);
        let mut state = Moments::zeros(1);
        let mut p = [0.5];
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            x -= 0.01 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            state.step(&mut p, &[g], 0.01, t as u64);
        }
        assert!((p[0] - x).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_leaves_state() {
        let mut m = Moments::zeros(2);
        let mut p = vec![1.0, 2.0];
        m.step(&mut p, &[1.0, 1.0], 0.0, 1);
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(m, Moments::zeros(2));
    }

    #[test]
    fn rows_follow_shape_changes() {
        let mut g = GaussianMoments::zeros(3, 1);
        g.positions.m.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64);
        g.push_zero_row();
        assert_eq!(g.rows(), 4);
        assert_eq!(g.sh_coeffs.len(), 48);
        g.zero_row(1);
        assert_eq!(&g.positions.m[3..6], &[0.0; 3]);
        g.retain_mask(&[true, false, true, true]);
        assert_eq!(g.rows(), 3);
        assert_eq!(&g.positions.m[..6], &[0.0, 1.0, 2.0, 6.0, 7.0, 8.0]);
        assert_eq!(g.rotations.len(), 12);
    }
}
