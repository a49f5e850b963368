//! Rendering a trained model at dataset frames and scoring it.

use rayon::prelude::*;

use crate::deform::deform_gaussians;
use crate::error::{Error, Result};
use crate::gaussian::GaussianSet;
use crate::io::dataset::{Dataset, Frame, Split};
use crate::io::image::quantize;
use crate::metrics::{psnr, ssim};
use crate::priors::{build_knn, rigid_loss};
use crate::raster::{render, Camera, RenderSettings, RenderedImage};
use crate::skinning::{bake_weight_grid, GridSettings, PoseParams, SkinWeightGrid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub split: Split,
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Everything needed to pose and render a canonical model.
pub struct Renderer<'a> {
    pub dataset: &'a Dataset,
    pub grid: SkinWeightGrid,
    pub background: [f64; 3],
    pub settings: RenderSettings,
}

impl<'a> Renderer<'a> {
    pub fn new(dataset: &'a Dataset, grid: &GridSettings, background: [f64; 3]) -> Result<Self> {
        Ok(Renderer {
            dataset,
            grid: bake_weight_grid(&dataset.template, grid)?,
            background,
            settings: RenderSettings::default(),
        })
    }

    pub fn render(&self, canonical: &GaussianSet, pose: &PoseParams, camera: &Camera) -> Result<RenderedImage> {
        let (observed, _) = deform_gaussians(canonical, pose, &self.dataset.shape, &self.dataset.skeleton, &self.grid)?;
        render(&observed, camera, self.background, &self.settings)
    }

    /// Scores one split. Training frames use `train_poses` (the refined pose
    /// bank); held-out frames use the dataset poses. Renders are rounded
    /// through 8-bit sRGB like the stored targets.
    pub fn evaluate(&self, canonical: &GaussianSet, train_poses: &[PoseParams], split: Split) -> Result<Vec<EvalRow>> {
        let frames: &[Frame] = match split {
            Split::Train => &self.dataset.train,
            Split::Test => &self.dataset.test,
        };
        if split == Split::Train && train_poses.len() != frames.len() {
            return Err(Error::invalid(format!(
                "{} poses for {} training frames",
                train_poses.len(),
                frames.len()
            )));
        }
        frames
            .par_iter()
            .enumerate()
            .map(|(i, f)| {
                let pose = if split == Split::Train { &train_poses[i] } else { &f.pose };
                let img = quantize(&self.render(canonical, pose, &f.camera)?);
                Ok(EvalRow {
                    split,
                    frame: i,
                    psnr: psnr(&img, &f.image)?,
                    ssim: ssim(&img, &f.image)?,
                })
            })
            .collect()
    }
}

pub fn mean_psnr(rows: &[EvalRow]) -> f64 {
    rows.iter().map(|r| r.psnr).sum::<f64>() / rows.len().max(1) as f64
}

pub fn mean_ssim(rows: &[EvalRow]) -> f64 {
    rows.iter().map(|r| r.ssim).sum::<f64>() / rows.len().max(1) as f64
}

/// Mean absolute difference of joint axis-angle components.
pub fn mean_pose_error(a: &[PoseParams], b: &[PoseParams]) -> f64 {
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .flat_map(|(p, q)| {
            p.joint_rotations
                .iter()
                .flatten()
                .zip(q.joint_rotations.iter().flatten())
                .map(|(x, y)| (x - y).abs())
        })
        .collect();
    diffs.iter().sum::<f64>() / diffs.len().max(1) as f64
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from("split,frame,psnr,ssim\n");
    for r in rows {
        let split = match r.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        out.push_str(&format!("{split},{},{},{:.6}\n", r.frame, fmt_psnr(r.psnr), r.ssim));
    }
    out
}

pub fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

/// Local-rigidity loss of a trained model, averaged over the training frames
/// posed with `train_poses`, on a freshly built neighbor graph.
pub fn posthoc_rigid(
    renderer: &Renderer<'_>,
    canonical: &GaussianSet,
    train_poses: &[PoseParams],
    k: usize,
    lambda_w: f64,
) -> Result<f64> {
    let graph = build_knn(&canonical.positions, k, lambda_w)?;
    let ds = renderer.dataset;
    let mut total = 0.0;
    for pose in train_poses {
        let (observed, _) = deform_gaussians(canonical, pose, &ds.shape, &ds.skeleton, &renderer.grid)?;
        total += rigid_loss(&graph, canonical, &observed)?.loss;
    }
    Ok(total / train_poses.len().max(1) as f64)
}
