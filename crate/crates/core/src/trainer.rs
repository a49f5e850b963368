//! Optimization loop: deform, render, photometric and prior losses, backward,
//! Adam, split-with-scale densification and per-frame pose refinement.

use std::hash::{DefaultHasher, Hasher};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deform::deform_gaussians;
use crate::error::{Error, Result};
use crate::gaussian::{init_from_vertices, logit, quat_to_rotmat, sigmoid, GaussianSet, ParamGrads};
use crate::io::dataset::{Dataset, Frame};
use crate::metrics::image_loss;
use crate::optim::{GroupRates, OptimizerState};
use crate::priors::{build_knn, prior_total, IsoMode, NeighborGraph, PriorWeights};
use crate::raster::{backward_with_context, render_with_context, RenderSettings};
use crate::skinning::{bake_weight_grid, GridSettings, PoseParams, ShapeParams, SkinWeightGrid, Skeleton};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub lr_position: f64,
    /// Exponential decay target for the position rate; constant when unset.
    pub lr_position_final: Option<f64>,
    pub lr_pose: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub lr_sh: f64,
    pub lambda_rigid: f64,
    pub lambda_rot: f64,
    pub lambda_iso: f64,
    pub iso_mode: IsoMode,
    pub lambda_w: f64,
    pub k: usize,
    pub knn_interval: usize,
    pub eps_scale: f64,
    pub densify: bool,
    pub densify_interval: usize,
    pub densify_from: usize,
    pub densify_until: usize,
    /// Drop Gaussians below this opacity at each densification event.
    pub prune_opacity: Option<f64>,
    pub opacity_reset_interval: Option<usize>,
    pub lambda_dssim: f64,
    pub pose_refine: bool,
    pub seed: u64,
    pub background: [f64; 3],
    pub sh_degree: usize,
    /// Fraction of template vertices used to seed Gaussians.
    pub init_fraction: f64,
    pub init_color: [f64; 3],
    pub grid_resolution: usize,
    pub grid_dilation: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 30_000,
            lr_position: 6e-6,
            lr_position_final: None,
            lr_pose: 1e-3,
            lr_rotation: 1e-3,
            lr_scale: 5e-3,
            lr_opacity: 5e-2,
            lr_sh: 2.5e-3,
            lambda_rigid: 4e-2,
            lambda_rot: 4e-2,
            lambda_iso: 4e-2,
            iso_mode: IsoMode::Signed,
            lambda_w: 2000.0,
            k: 20,
            knn_interval: 100,
            eps_scale: 0.05,
            densify: true,
            densify_interval: 500,
            densify_from: 500,
            densify_until: 15_000,
            prune_opacity: None,
            opacity_reset_interval: None,
            lambda_dssim: 0.2,
            pose_refine: true,
            seed: 0,
            background: [1.0; 3],
            sh_degree: 1,
            init_fraction: 1.0,
            init_color: [0.5; 3],
            grid_resolution: 64,
            grid_dilation: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("lr_position", self.lr_position),
            ("lr_pose", self.lr_pose),
            ("lr_rotation", self.lr_rotation),
            ("lr_scale", self.lr_scale),
            ("lr_opacity", self.lr_opacity),
            ("lr_sh", self.lr_sh),
            ("lambda_rigid", self.lambda_rigid),
            ("lambda_rot", self.lambda_rot),
            ("lambda_iso", self.lambda_iso),
            ("lambda_w", self.lambda_w),
            ("lambda_dssim", self.lambda_dssim),
        ];
        for (name, v) in rates {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if let Some(f) = self.lr_position_final {
            if !(f.is_finite() && f > 0.0 && self.lr_position > 0.0) {
                return Err(Error::invalid("lr_position_final needs positive start and end rates"));
            }
        }
        if self.lambda_dssim > 1.0 {
            return Err(Error::invalid("lambda_dssim must lie in [0, 1]"));
        }
        if self.densify_interval == 0 || self.knn_interval == 0 || self.k == 0 {
            return Err(Error::invalid("densify_interval, knn_interval and k must be at least 1"));
        }
        if self.opacity_reset_interval == Some(0) {
            return Err(Error::invalid("opacity_reset_interval must be at least 1"));
        }
        if !(self.eps_scale > 0.0) {
            return Err(Error::invalid("eps_scale must be positive"));
        }
        if !(self.init_fraction > 0.0 && self.init_fraction <= 1.0) {
            return Err(Error::invalid("init_fraction must lie in (0, 1]"));
        }
        if self.grid_resolution < 2 {
            return Err(Error::invalid("grid_resolution must be at least 2"));
        }
        Ok(())
    }

    pub fn prior_weights(&self) -> PriorWeights {
        PriorWeights {
            rigid: self.lambda_rigid,
            rot: self.lambda_rot,
            iso: self.lambda_iso,
            iso_mode: self.iso_mode,
        }
    }

    pub fn priors_enabled(&self) -> bool {
        self.lambda_rigid != 0.0 || self.lambda_rot != 0.0 || self.lambda_iso != 0.0
    }

    pub fn position_rate(&self, step: usize) -> f64 {
        match self.lr_position_final {
            Some(end) if self.total_steps > 0 => {
                let t = (step as f64 / self.total_steps as f64).min(1.0);
                self.lr_position * (end / self.lr_position).powf(t)
            }
            _ => self.lr_position,
        }
    }
}

/// Unweighted term values; `total` carries the weights.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub image: f64,
    pub rigid: f64,
    pub rot: f64,
    pub iso: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: LossBreakdown,
    pub num_gaussians: usize,
    pub ms_per_step: f64,
}

pub const METRICS_HEADER: &str = "step,image_loss,rigid,rot,iso,total,num_gaussians,ms_per_step";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e},{},{:.3}\n",
            r.step, r.loss.image, r.loss.rigid, r.loss.rot, r.loss.iso, r.loss.total, r.num_gaussians, r.ms_per_step
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitReport {
    pub split: usize,
    pub count_before: usize,
    pub count_after: usize,
    pub max_scale_before: f64,
    pub max_scale_after: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensifyEvent {
    pub step: usize,
    pub split: SplitReport,
    pub pruned: usize,
}

pub fn max_activated_scale(set: &GaussianSet) -> f64 {
    set.log_scales
        .iter()
        .flatten()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v))
        .exp()
}

/// Replaces every Gaussian whose largest scale exceeds `eps_scale` by two
/// half-size children offset by a quarter of the major axis either way. The
/// first child keeps the parent's slot, the second is appended; both start
/// with zero optimizer moments.
pub fn split_with_scale(set: &mut GaussianSet, eps_scale: f64, optimizer: &mut OptimizerState) -> Result<SplitReport> {
    if !(eps_scale > 0.0) {
        return Err(Error::invalid("eps_scale must be positive"));
    }
    let count_before = set.len();
    let max_scale_before = max_activated_scale(set);
    let mut split = 0;
    for i in 0..count_before {
        let ls = set.log_scales[i];
        let major = (0..3).max_by(|&a, &b| ls[a].total_cmp(&ls[b]).then(b.cmp(&a))).unwrap();
        let s = ls[major].exp();
        if s <= eps_scale {
            continue;
        }
        let r = quat_to_rotmat(&set.rotations[i])?;
        let offset = r.column(major) * (0.25 * s);
        set.push_copy_of(i);
        let j = set.len() - 1;
        let half = ls.map(|v| v - std::f64::consts::LN_2);
        set.log_scales[i] = half;
        set.log_scales[j] = half;
        for a in 0..3 {
            set.positions[i][a] += offset[a];
            set.positions[j][a] -= offset[a];
        }
        optimizer.gaussians.zero_row(i);
        optimizer.gaussians.push_zero_row();
        split += 1;
    }
    Ok(SplitReport {
        split,
        count_before,
        count_after: set.len(),
        max_scale_before,
        max_scale_after: max_activated_scale(set),
    })
}

/// Adam step on one frame's pose and root translation.
pub fn pose_refine_update(
    poses: &mut [PoseParams],
    optimizer: &mut OptimizerState,
    frame: usize,
    grad: &PoseParams,
    lr: f64,
    enabled: bool,
) -> Result<()> {
    if frame >= poses.len() || frame >= optimizer.poses.len() {
        return Err(Error::invalid(format!(
            "frame {frame} out of range for {} poses",
            poses.len()
        )));
    }
    if !enabled {
        return Ok(());
    }
    let mut v = poses[frame].to_vec();
    let g = grad.to_vec();
    if g.len() != v.len() || optimizer.poses[frame].len() != v.len() {
        return Err(Error::invalid("pose gradient has the wrong length"));
    }
    optimizer.pose_steps[frame] += 1;
    optimizer.poses[frame].step(&mut v, &g, lr, optimizer.pose_steps[frame]);
    poses[frame] = PoseParams::from_slice(&v)?;
    Ok(())
}

fn add_into<const D: usize>(dst: &mut [[f64; D]], src: &[[f64; D]]) {
    for (d, s) in dst.iter_mut().zip(src) {
        for k in 0..D {
            d[k] += s[k];
        }
    }
}

/// Hash over the bit patterns of every canonical parameter and pose.
pub fn parameter_checksum(set: &GaussianSet, poses: &[PoseParams]) -> u64 {
    let mut h = DefaultHasher::new();
    h.write_usize(set.len());
    let values = set
        .positions
        .iter()
        .flatten()
        .chain(set.rotations.iter().flatten())
        .chain(set.log_scales.iter().flatten())
        .chain(&set.opacity_logits)
        .chain(&set.sh_coeffs);
    for v in values {
        h.write_u64(v.to_bits());
    }
    for p in poses {
        for v in p.to_vec() {
            h.write_u64(v.to_bits());
        }
    }
    h.finish()
}

/// Canonical Gaussians seeded on a seeded subset of the template vertices.
pub fn initialize(config: &TrainConfig, dataset: &Dataset) -> Result<GaussianSet> {
    let verts = &dataset.template.vertices;
    let chosen: Vec<[f64; 3]> = if config.init_fraction < 1.0 {
        let count = ((verts.len() as f64 * config.init_fraction).round() as usize).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut idx = rand::seq::index::sample(&mut rng, verts.len(), count).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| verts[i]).collect()
    } else {
        verts.clone()
    };
    init_from_vertices(&chosen, config.init_color, config.sh_degree)
}

pub struct Trainer {
    pub config: TrainConfig,
    pub canonical: GaussianSet,
    pub poses: Vec<PoseParams>,
    pub optimizer: OptimizerState,
    pub step: usize,
    pub metrics: Vec<MetricsRow>,
    pub events: Vec<DensifyEvent>,
    grid: SkinWeightGrid,
    skeleton: Skeleton,
    shape: ShapeParams,
    graph: Option<NeighborGraph>,
    graph_dirty: bool,
    settings: RenderSettings,
    order: Vec<usize>,
    order_epoch: Option<usize>,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        let canonical = initialize(&config, dataset)?;
        let poses = dataset.train_poses();
        Self::resume(config, dataset, canonical, poses, None, 0)
    }

    /// Continues from saved state. Moments default to zero when absent.
    pub fn resume(
        config: TrainConfig,
        dataset: &Dataset,
        canonical: GaussianSet,
        poses: Vec<PoseParams>,
        optimizer: Option<OptimizerState>,
        step: usize,
    ) -> Result<Self> {
        config.validate()?;
        canonical.validate()?;
        if dataset.train.is_empty() {
            return Err(Error::invalid("dataset has no training frames"));
        }
        if poses.len() != dataset.train.len() {
            return Err(Error::invalid(format!(
                "{} poses for {} training frames",
                poses.len(),
                dataset.train.len()
            )));
        }
        let pose_len = 3 * (dataset.joint_count() + 1);
        let optimizer = optimizer.unwrap_or_else(|| {
            OptimizerState::new(canonical.len(), canonical.sh_degree, poses.len(), pose_len)
        });
        if optimizer.gaussians.rows() != canonical.len() || optimizer.poses.len() != poses.len() {
            return Err(Error::invalid("optimizer state does not match the model"));
        }
        let grid = bake_weight_grid(
            &dataset.template,
            &GridSettings {
                resolution: [config.grid_resolution; 3],
                dilation_steps: config.grid_dilation,
            },
        )?;
        Ok(Trainer {
            config,
            canonical,
            poses,
            optimizer,
            step,
            metrics: Vec::new(),
            events: Vec::new(),
            grid,
            skeleton: dataset.skeleton.clone(),
            shape: dataset.shape.clone(),
            graph: None,
            graph_dirty: true,
            settings: RenderSettings::default(),
            order: Vec::new(),
            order_epoch: None,
        })
    }

    pub fn grid(&self) -> &SkinWeightGrid {
        &self.grid
    }

    /// Training frame visited at `step`: a fresh seeded permutation per epoch.
    pub fn frame_for_step(&mut self, step: usize, frames: usize) -> usize {
        let epoch = step / frames;
        if self.order_epoch != Some(epoch) || self.order.len() != frames {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(epoch as u64);
            self.order = (0..frames).collect();
            self.order.shuffle(&mut rng);
            self.order_epoch = Some(epoch);
        }
        self.order[step % frames]
    }

    fn refresh_graph(&mut self) -> Result<()> {
        if !self.config.priors_enabled() {
            self.graph = None;
            return Ok(());
        }
        if self.graph_dirty || self.graph.is_none() || self.step % self.config.knn_interval == 0 {
            self.graph = Some(build_knn(&self.canonical.positions, self.config.k, self.config.lambda_w)?);
            self.graph_dirty = false;
        }
        Ok(())
    }

    /// One optimization step on training frame `frame_index`.
    pub fn train_step(&mut self, frame_index: usize, frame: &Frame) -> Result<LossBreakdown> {
        let cfg = &self.config;
        let pose = self
            .poses
            .get(frame_index)
            .ok_or_else(|| Error::invalid(format!("frame {frame_index} out of range")))?;
        let (observed, record) = deform_gaussians(
            &self.canonical,
            pose,
            &self.shape,
            &self.skeleton,
            &self.grid,
        )?;
        let (image, ctx) = render_with_context(&observed, &frame.camera, cfg.background, &self.settings)?;
        let (image_value, grad_image) = image_loss(&image, &frame.image, cfg.lambda_dssim)?;
        let mut grads = backward_with_context(&ctx, &observed, &frame.camera, cfg.background, &self.settings, &grad_image)?;

        let mut loss = LossBreakdown {
            image: image_value,
            total: image_value,
            ..Default::default()
        };
        let mut prior_canonical = None;
        if let Some(graph) = &self.graph {
            let p = prior_total(graph, &self.canonical, &observed, &cfg.prior_weights())?;
            loss.rigid = p.rigid;
            loss.rot = p.rot;
            loss.iso = p.iso;
            loss.total += p.total;
            add_into(&mut grads.positions, &p.grads.observed_positions);
            add_into(&mut grads.rotations, &p.grads.observed_rotations);
            prior_canonical = Some((p.grads.canonical_positions, p.grads.canonical_rotations));
        }

        let back = crate::deform::deform_backward(&record, &grads.positions, &grads.rotations)?;
        let mut canonical_grads = ParamGrads {
            positions: back.positions,
            rotations: back.rotations,
            log_scales: grads.log_scales,
            opacity_logits: grads.opacity_logits,
            sh_coeffs: grads.sh_coeffs,
        };
        if let Some((gp, gr)) = prior_canonical {
            add_into(&mut canonical_grads.positions, &gp);
            add_into(&mut canonical_grads.rotations, &gr);
        }

        let rates = GroupRates {
            position: cfg.position_rate(self.step),
            rotation: cfg.lr_rotation,
            scale: cfg.lr_scale,
            opacity: cfg.lr_opacity,
            sh: cfg.lr_sh,
        };
        self.optimizer.update_gaussians(&mut self.canonical, &canonical_grads, &rates);
        let (lr_pose, refine) = (cfg.lr_pose, cfg.pose_refine);
        pose_refine_update(&mut self.poses, &mut self.optimizer, frame_index, &back.pose, lr_pose, refine)?;
        Ok(loss)
    }

    /// Runs the next scheduled step, then any densification it triggers.
    pub fn advance(&mut self, dataset: &Dataset) -> Result<LossBreakdown> {
        let step = self.step;
        let start = Instant::now();
        let result = (|| {
            self.refresh_graph()?;
            let f = self.frame_for_step(step, dataset.train.len());
            let loss = self.train_step(f, &dataset.train[f])?;
            self.step += 1;
            self.after_step()?;
            Ok(loss)
        })();
        let loss = result.map_err(|e| Error::Step {
            step,
            source: Box::new(e),
        })?;
        self.metrics.push(MetricsRow {
            step,
            loss,
            num_gaussians: self.canonical.len(),
            ms_per_step: start.elapsed().as_secs_f64() * 1e3,
        });
        Ok(loss)
    }

    fn after_step(&mut self) -> Result<()> {
        let cfg = &self.config;
        let s = self.step;
        if cfg.densify && s % cfg.densify_interval == 0 && s >= cfg.densify_from && s <= cfg.densify_until {
            let split = split_with_scale(&mut self.canonical, cfg.eps_scale, &mut self.optimizer)?;
            let mut pruned = 0;
            if let Some(min_opacity) = cfg.prune_opacity {
                let keep: Vec<bool> = self.canonical.opacity_logits.iter().map(|&o| sigmoid(o) >= min_opacity).collect();
                pruned = keep.iter().filter(|k| !**k).count();
                if pruned > 0 && pruned < keep.len() {
                    self.canonical.retain_mask(&keep);
                    self.optimizer.gaussians.retain_mask(&keep);
                } else {
                    pruned = 0;
                }
            }
            self.events.push(DensifyEvent { step: s, split, pruned });
            self.graph_dirty = true;
        }
        if let Some(every) = cfg.opacity_reset_interval {
            if s % every == 0 {
                let cap = logit(0.01);
                self.canonical.opacity_logits.iter_mut().for_each(|o| *o = o.min(cap));
                self.optimizer.gaussians.opacity_logits = crate::optim::Moments::zeros(self.canonical.len());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub canonical: GaussianSet,
    pub poses: Vec<PoseParams>,
    pub optimizer: OptimizerState,
    pub metrics: Vec<MetricsRow>,
    pub events: Vec<DensifyEvent>,
}

pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutput> {
    let mut t = Trainer::new(config.clone(), dataset)?;
    while t.step < config.total_steps {
        t.advance(dataset)?;
    }
    Ok(TrainOutput {
        canonical: t.canonical,
        poses: t.poses,
        optimizer: t.optimizer,
        metrics: t.metrics,
        events: t.events,
    })
}
