//! Differentiable tile-based splatting of observation-space Gaussians.
//!
//! Gaussians are projected with the affine (EWA) approximation of the
//! perspective map, sorted by camera depth and alpha-composited front to back
//! per pixel. Pixel `(u, v)` samples the image plane at integer coordinates.
//!
//! The backward pass recomputes each pixel's contribution list and walks it
//! back to front. Per-tile gradient buffers are reduced in tile order, so
//! results do not depend on the thread count.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix4, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{
    self, covariance_from, sh_basis, GaussianSet, ParamGrads, Space, SH_C1,
};
use crate::skinning::{check_rigid, matrix_rows};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(with = "single_matrix")]
    pub world_to_camera: Matrix4<f64>,
    #[serde(default = "default_near")]
    pub z_near: f64,
}

fn default_near() -> f64 {
    0.01
}

mod single_matrix {
    use super::matrix_rows::{from_rows, to_rows};
    use nalgebra::Matrix4;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix4<f64>, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix4<f64>, D::Error> {
        Ok(from_rows(&<[[f64; 4]; 4]>::deserialize(d)?))
    }
}

impl Camera {
    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera position in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid(format!(
                "image size {}x{} is empty",
                self.width, self.height
            )));
        }
        check_rigid(&self.world_to_camera, 1e-9)
            .map_err(|e| Error::invalid(format!("world-to-camera: {e}")))
    }

    /// Camera at `eye` looking at `target`, with `up` roughly upward in the
    /// image. Camera axes: x right, y down, z forward.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * eye);
        let mut w = Matrix4::identity();
        w.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        w.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Camera {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            world_to_camera: w,
            z_near: default_near(),
        }
    }
}

/// Compositing constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub alpha_max: f64,
    pub alpha_min: f64,
    pub transmittance_min: f64,
    pub low_pass: f64,
    /// Tile overlap radius in standard deviations.
    pub cull_sigma: f64,
    pub tile_size: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            alpha_max: 0.99,
            alpha_min: 1.0 / 255.0,
            transmittance_min: 1e-4,
            low_pass: 0.3,
            cull_sigma: 3.0,
            tile_size: 16,
        }
    }
}

impl RenderSettings {
    /// Disables the skip threshold, early termination and tile culling, so
    /// the image is a smooth function of the parameters.
    pub fn smooth() -> Self {
        RenderSettings {
            alpha_min: 0.0,
            transmittance_min: 0.0,
            cull_sigma: f64::INFINITY,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGaussian {
    pub mean: [f64; 2],
    pub cov: Matrix2<f64>,
    /// `cov⁻¹`, or `None` when the covariance is numerically singular.
    pub conic: Option<Matrix2<f64>>,
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    pub index: usize,
    /// Exponents below this give an alpha under the skip threshold.
    power_cut: f64,
}

impl ProjectedGaussian {
    pub fn new(
        mean: [f64; 2],
        cov: Matrix2<f64>,
        depth: f64,
        color: [f64; 3],
        opacity: f64,
        index: usize,
    ) -> Self {
        let conic = if cov.determinant() > 1e-12 {
            cov.try_inverse()
        } else {
            None
        };
        ProjectedGaussian {
            mean,
            cov,
            conic,
            depth,
            color,
            opacity,
            index,
            power_cut: f64::NEG_INFINITY,
        }
    }

    fn radius(&self, settings: &RenderSettings) -> f64 {
        let a = self.cov[(0, 0)];
        let c = self.cov[(1, 1)];
        let b = 0.5 * (self.cov[(0, 1)] + self.cov[(1, 0)]);
        let mid = 0.5 * (a + c);
        let lambda = mid + (mid * mid - (a * c - b * b)).max(0.0).sqrt();
        (settings.cull_sigma * lambda.sqrt()).ceil()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB.
    pub pixels: Vec<f64>,
    /// Accumulated opacity `1 - T` per pixel.
    pub alpha: Option<Vec<f64>>,
}

impl RenderedImage {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        RenderedImage {
            width,
            height,
            pixels: rgb.repeat(width * height),
            alpha: None,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn same_shape(&self, other: &RenderedImage) -> bool {
        self.width == other.width && self.height == other.height
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub visible: usize,
    pub culled: usize,
    pub singular: usize,
}

/// Projects Gaussian `i` of an observation-space set. Returns `None` when the
/// mean lies behind the near plane.
pub fn project(set: &GaussianSet, i: usize, camera: &Camera) -> Result<Option<ProjectedGaussian>> {
    project_with(set, i, camera, RenderSettings::default().low_pass)
}

fn project_with(
    set: &GaussianSet,
    i: usize,
    camera: &Camera,
    low_pass: f64,
) -> Result<Option<ProjectedGaussian>> {
    let x = Vector3::from(set.positions[i]);
    let w_r = camera.rotation();
    let t = w_r * x + camera.translation();
    if t.z <= camera.z_near {
        return Ok(None);
    }
    let r = gaussian::quat_to_rotmat(&set.rotations[i])?;
    let sigma = covariance_from(&r, &set.log_scales[i].map(f64::exp));
    let j = projection_jacobian(camera, &t);
    let cov = j * w_r * sigma * w_r.transpose() * j.transpose() + Matrix2::identity() * low_pass;
    let dir = (x - camera.center()).normalize();
    let color = gaussian::evaluate_color(set.sh(i), &dir, set.sh_degree)?;
    Ok(Some(ProjectedGaussian::new(
        [
            camera.fx * t.x / t.z + camera.cx,
            camera.fy * t.y / t.z + camera.cy,
        ],
        cov,
        t.z,
        color,
        gaussian::sigmoid(set.opacity_logits[i]),
        i,
    )))
}

fn projection_jacobian(camera: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    Matrix2x3::new(
        camera.fx * iz,
        0.0,
        -camera.fx * t.x * iz * iz,
        0.0,
        camera.fy * iz,
        -camera.fy * t.y * iz * iz,
    )
}

/// Evaluated splat weight at a pixel; `None` when the Gaussian is skipped.
#[inline]
fn splat_alpha(g: &ProjectedGaussian, conic: &Matrix2<f64>, px: f64, py: f64, settings: &RenderSettings) -> Option<(f64, f64, bool)> {
    let dx = px - g.mean[0];
    let dy = py - g.mean[1];
    let power = -0.5
        * (conic[(0, 0)] * dx * dx
            + (conic[(0, 1)] + conic[(1, 0)]) * dx * dy
            + conic[(1, 1)] * dy * dy);
    if power > 0.0 || power < g.power_cut {
        return None;
    }
    let falloff = power.exp();
    let raw = g.opacity * falloff;
    let clamped = raw >= settings.alpha_max;
    let alpha = if clamped { settings.alpha_max } else { raw };
    if alpha < settings.alpha_min {
        return None;
    }
    Some((alpha, falloff, clamped))
}

/// Front-to-back compositing of depth-sorted splats at one pixel.
pub fn composite<'a>(
    sorted: impl IntoIterator<Item = &'a ProjectedGaussian>,
    pixel: [f64; 2],
    background: [f64; 3],
    settings: &RenderSettings,
) -> [f64; 3] {
    composite_pixel(sorted, pixel, background, settings).0
}

fn composite_pixel<'a>(
    sorted: impl IntoIterator<Item = &'a ProjectedGaussian>,
    pixel: [f64; 2],
    background: [f64; 3],
    settings: &RenderSettings,
) -> ([f64; 3], f64) {
    let mut c = [0.0; 3];
    let mut t = 1.0;
    for g in sorted {
        let Some(conic) = g.conic.as_ref() else {
            continue;
        };
        let Some((alpha, _, _)) = splat_alpha(g, conic, pixel[0], pixel[1], settings) else {
            continue;
        };
        let next = t * (1.0 - alpha);
        if next < settings.transmittance_min {
            break;
        }
        for ch in 0..3 {
            c[ch] += g.color[ch] * alpha * t;
        }
        t = next;
    }
    for ch in 0..3 {
        c[ch] += t * background[ch];
    }
    (c, t)
}

/// Projection, sorting and tile binning shared by forward and backward.
pub struct RenderContext {
    projected: Vec<ProjectedGaussian>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    pub stats: RenderStats,
}

fn prepare(set: &GaussianSet, camera: &Camera, settings: &RenderSettings) -> Result<RenderContext> {
    if set.space != Space::Observation {
        return Err(Error::invalid("rendering expects an observation-space set"));
    }
    set.validate()?;
    camera.validate()?;
    let projected: Vec<Result<Option<ProjectedGaussian>>> = (0..set.len())
        .into_par_iter()
        .map(|i| project_with(set, i, camera, settings.low_pass))
        .collect();
    let mut stats = RenderStats::default();
    let mut visible = Vec::new();
    for p in projected {
        match p? {
            Some(mut g) if g.conic.is_some() => {
                if settings.alpha_min > 0.0 {
                    g.power_cut = (settings.alpha_min / g.opacity).ln();
                }
                visible.push(g)
            }
            Some(_) => stats.singular += 1,
            None => stats.culled += 1,
        }
    }
    // Stable: equal depths keep ascending source index.
    visible.sort_by(|a, b| a.depth.total_cmp(&b.depth));

    let ts = settings.tile_size;
    let tiles_x = camera.width.div_ceil(ts);
    let tiles_y = camera.height.div_ceil(ts);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (slot, g) in visible.iter().enumerate() {
        let r = g.radius(settings);
        let lo_x = ((g.mean[0] - r) / ts as f64).floor().max(0.0);
        let hi_x = ((g.mean[0] + r) / ts as f64).floor().min(tiles_x as f64 - 1.0);
        let lo_y = ((g.mean[1] - r) / ts as f64).floor().max(0.0);
        let hi_y = ((g.mean[1] + r) / ts as f64).floor().min(tiles_y as f64 - 1.0);
        if !(lo_x <= hi_x && lo_y <= hi_y) {
            stats.culled += 1;
            continue;
        }
        stats.visible += 1;
        for ty in lo_y as usize..=hi_y as usize {
            for tx in lo_x as usize..=hi_x as usize {
                tiles[ty * tiles_x + tx].push(slot as u32);
            }
        }
    }
    Ok(RenderContext {
        projected: visible,
        tiles,
        tiles_x,
        stats,
    })
}

fn tile_pixels(
    tile: usize,
    tiles_x: usize,
    ts: usize,
    camera: &Camera,
) -> impl Iterator<Item = (usize, usize)> {
    let x0 = (tile % tiles_x) * ts;
    let y0 = (tile / tiles_x) * ts;
    let x1 = (x0 + ts).min(camera.width);
    let y1 = (y0 + ts).min(camera.height);
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

pub fn render(
    set: &GaussianSet,
    camera: &Camera,
    background: [f64; 3],
    settings: &RenderSettings,
) -> Result<RenderedImage> {
    Ok(render_with_context(set, camera, background, settings)?.0)
}

pub fn render_with_context(
    set: &GaussianSet,
    camera: &Camera,
    background: [f64; 3],
    settings: &RenderSettings,
) -> Result<(RenderedImage, RenderContext)> {
    let ctx = prepare(set, camera, settings)?;
    let ts = settings.tile_size;
    let tile_out: Vec<Vec<(usize, [f64; 3], f64)>> = ctx
        .tiles
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            tile_pixels(tile, ctx.tiles_x, ts, camera)
                .map(|(x, y)| {
                    let (c, t) = composite_pixel(
                        list.iter().map(|&s| &ctx.projected[s as usize]),
                        [x as f64, y as f64],
                        background,
                        settings,
                    );
                    (y * camera.width + x, c, 1.0 - t)
                })
                .collect()
        })
        .collect();
    let mut image = RenderedImage::filled(camera.width, camera.height, [0.0; 3]);
    let mut alpha = vec![0.0; camera.width * camera.height];
    for (p, c, a) in tile_out.into_iter().flatten() {
        image.pixels[p * 3..p * 3 + 3].copy_from_slice(&c);
        alpha[p] = a;
    }
    image.alpha = Some(alpha);
    Ok((image, ctx))
}

/// Gradients of `<grad_image, render(set)>` w.r.t. every raw parameter.
pub fn render_backward(
    set: &GaussianSet,
    camera: &Camera,
    background: [f64; 3],
    settings: &RenderSettings,
    grad_image: &RenderedImage,
) -> Result<ParamGrads> {
    let ctx = prepare(set, camera, settings)?;
    backward_with_context(&ctx, set, camera, background, settings, grad_image)
}

// Per splat: mean (2), conic (4, row-major), color (3), opacity (1).
const SPLAT_GRAD_LEN: usize = 10;

struct Contribution {
    slot: usize,
    alpha: f64,
    falloff: f64,
    clamped: bool,
    transmittance: f64,
}

pub fn backward_with_context(
    ctx: &RenderContext,
    set: &GaussianSet,
    camera: &Camera,
    background: [f64; 3],
    settings: &RenderSettings,
    grad_image: &RenderedImage,
) -> Result<ParamGrads> {
    if grad_image.width != camera.width || grad_image.height != camera.height {
        return Err(Error::invalid("gradient image size differs from the camera"));
    }
    let ts = settings.tile_size;
    let tile_grads: Vec<Vec<f64>> = ctx
        .tiles
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let mut acc = vec![0.0; list.len() * SPLAT_GRAD_LEN];
            if list.is_empty() {
                return acc;
            }
            let mut contribs: Vec<Contribution> = Vec::with_capacity(list.len());
            for (x, y) in tile_pixels(tile, ctx.tiles_x, ts, camera) {
                let p = y * camera.width + x;
                let g_pix = [
                    grad_image.pixels[p * 3],
                    grad_image.pixels[p * 3 + 1],
                    grad_image.pixels[p * 3 + 2],
                ];
                if g_pix == [0.0; 3] {
                    continue;
                }
                let (px, py) = (x as f64, y as f64);
                contribs.clear();
                let mut t = 1.0;
                for (local, &s) in list.iter().enumerate() {
                    let g = &ctx.projected[s as usize];
                    let conic = g.conic.as_ref().expect("binned splats are invertible");
                    let Some((alpha, falloff, clamped)) = splat_alpha(g, conic, px, py, settings) else {
                        continue;
                    };
                    let next = t * (1.0 - alpha);
                    if next < settings.transmittance_min {
                        break;
                    }
                    contribs.push(Contribution {
                        slot: local,
                        alpha,
                        falloff,
                        clamped,
                        transmittance: t,
                    });
                    t = next;
                }
                let mut behind = [t * background[0], t * background[1], t * background[2]];
                for c in contribs.iter().rev() {
                    let g = &ctx.projected[list[c.slot] as usize];
                    let out = &mut acc[c.slot * SPLAT_GRAD_LEN..(c.slot + 1) * SPLAT_GRAD_LEN];
                    let mut g_alpha = 0.0;
                    for ch in 0..3 {
                        out[6 + ch] += g_pix[ch] * c.alpha * c.transmittance;
                        g_alpha += g_pix[ch]
                            * (g.color[ch] * c.transmittance - behind[ch] / (1.0 - c.alpha));
                        behind[ch] += g.color[ch] * c.alpha * c.transmittance;
                    }
                    if c.clamped {
                        continue;
                    }
                    out[9] += g_alpha * c.falloff;
                    let g_power = g_alpha * g.opacity * c.falloff;
                    let conic = g.conic.as_ref().expect("binned splats are invertible");
                    let dx = px - g.mean[0];
                    let dy = py - g.mean[1];
                    let sym = (conic + conic.transpose()) * 0.5;
                    out[0] += g_power * (sym[(0, 0)] * dx + sym[(0, 1)] * dy);
                    out[1] += g_power * (sym[(1, 0)] * dx + sym[(1, 1)] * dy);
                    out[2] += -0.5 * g_power * dx * dx;
                    out[3] += -0.5 * g_power * dx * dy;
                    out[4] += -0.5 * g_power * dy * dx;
                    out[5] += -0.5 * g_power * dy * dy;
                }
            }
            acc
        })
        .collect();

    let mut splat_grads = vec![[0.0; SPLAT_GRAD_LEN]; ctx.projected.len()];
    for (list, acc) in ctx.tiles.iter().zip(&tile_grads) {
        for (local, &s) in list.iter().enumerate() {
            let dst = &mut splat_grads[s as usize];
            for (d, v) in dst.iter_mut().zip(&acc[local * SPLAT_GRAD_LEN..]) {
                *d += v;
            }
        }
    }

    let per_gaussian: Vec<Result<(usize, SplatParamGrad)>> = ctx
        .projected
        .par_iter()
        .zip(&splat_grads)
        .map(|(g, sg)| Ok((g.index, splat_to_params(set, g.index, camera, g, sg)?)))
        .collect();
    let mut grads = ParamGrads::zeros(set.len(), set.sh_degree);
    let stride = set.sh_stride();
    for r in per_gaussian {
        let (i, pg) = r?;
        grads.positions[i] = pg.position;
        grads.rotations[i] = pg.rotation;
        grads.log_scales[i] = pg.log_scale;
        grads.opacity_logits[i] = pg.opacity_logit;
        grads.sh_coeffs[i * stride..(i + 1) * stride].copy_from_slice(&pg.sh[..stride]);
    }
    Ok(grads)
}

struct SplatParamGrad {
    position: [f64; 3],
    rotation: [f64; 4],
    log_scale: [f64; 3],
    opacity_logit: f64,
    sh: [f64; 12],
}

fn splat_to_params(
    set: &GaussianSet,
    i: usize,
    camera: &Camera,
    g: &ProjectedGaussian,
    sg: &[f64; SPLAT_GRAD_LEN],
) -> Result<SplatParamGrad> {
    let x = Vector3::from(set.positions[i]);
    let w_r = camera.rotation();
    let t = w_r * x + camera.translation();
    let iz = 1.0 / t.z;
    let (fx, fy) = (camera.fx, camera.fy);

    // conic = cov⁻¹
    let conic = g.conic.expect("binned splats are invertible");
    let g_conic = Matrix2::new(sg[2], sg[3], sg[4], sg[5]);
    let g_cov = -(conic.transpose() * g_conic * conic.transpose());

    let r = gaussian::quat_to_rotmat(&set.rotations[i])?;
    let sigma = covariance_from(&r, &set.log_scales[i].map(f64::exp));
    let m = w_r * sigma * w_r.transpose();
    let j = projection_jacobian(camera, &t);
    let g_m = j.transpose() * g_cov * j;
    let g_j = g_cov * j * m.transpose() + g_cov.transpose() * j * m;
    let g_sigma = w_r.transpose() * g_m * w_r;
    let (g_rot, g_ls) =
        gaussian::build_covariance_backward(&set.rotations[i], &set.log_scales[i], &g_sigma)?;

    let mut g_t = Vector3::zeros();
    // Mean.
    g_t.x += sg[0] * fx * iz;
    g_t.y += sg[1] * fy * iz;
    g_t.z += -(sg[0] * fx * t.x + sg[1] * fy * t.y) * iz * iz;
    // Jacobian entries.
    g_t.x += -g_j[(0, 2)] * fx * iz * iz;
    g_t.y += -g_j[(1, 2)] * fy * iz * iz;
    g_t.z += -g_j[(0, 0)] * fx * iz * iz - g_j[(1, 1)] * fy * iz * iz
        + 2.0 * g_j[(0, 2)] * fx * t.x * iz * iz * iz
        + 2.0 * g_j[(1, 2)] * fy * t.y * iz * iz * iz;
    let mut g_x = w_r.transpose() * g_t;

    // Color.
    let view = x - camera.center();
    let dir = view.normalize();
    let basis = sh_basis(&dir, set.sh_degree)?;
    let sh = set.sh(i);
    let raw = gaussian::color_from_basis(sh, &basis);
    let g_color: [f64; 3] = std::array::from_fn(|c| if raw[c] < 0.0 { 0.0 } else { sg[6 + c] });
    let mut g_sh = [0.0; 12];
    for (k, b) in basis.iter().enumerate() {
        for c in 0..3 {
            g_sh[k * 3 + c] = g_color[c] * b;
        }
    }
    if set.sh_degree >= 1 {
        let dot = |k: usize| (0..3).map(|c| g_color[c] * sh[k * 3 + c]).sum::<f64>();
        let g_dir = Vector3::new(-SH_C1 * dot(3), -SH_C1 * dot(1), SH_C1 * dot(2));
        g_x += (g_dir - dir * dir.dot(&g_dir)) / view.norm();
    }

    let alpha = g.opacity;
    Ok(SplatParamGrad {
        position: g_x.into(),
        rotation: g_rot,
        log_scale: g_ls,
        opacity_logit: sg[9] * alpha * (1.0 - alpha),
        sh: g_sh,
    })
}
