//! Procedural capsule body: skeleton, skinned template, painted ground-truth
//! Gaussians and a rotate-in-place sequence rendered with this crate's own
//! rasterizer.

use std::f64::consts::{FRAC_1_SQRT_2, TAU};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::deform::deform_gaussians;
use crate::error::{Error, Result};
use crate::gaussian::{dc_from_color, logit, sh_len, GaussianSet, Space, MAX_SH_DEGREE};
use crate::io::checkpoint::Checkpoint;
use crate::io::dataset::{save_dataset, Dataset, Frame, Intrinsics};
use crate::io::image::quantize;
use crate::math;
use crate::optim::OptimizerState;
use crate::raster::{render, Camera, RenderSettings};
use crate::skinning::{
    bake_weight_grid, translation4, GridSettings, PoseParams, ShapeParams, Skeleton, SkinnedTemplate,
};
use crate::trainer::TrainConfig;

pub const GROUND_TRUTH_FILE: &str = "ground_truth.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// 2 to 8: torso, head, arms, legs, then forearms.
    pub bones: usize,
    pub vertices: usize,
    pub train_frames: usize,
    pub test_frames: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Amplitude in radians of the limb swing layered on the turn.
    pub swing: f64,
    /// Standard deviation in radians added to training poses in the manifest.
    pub pose_noise: f64,
    /// Standard deviation of ground-truth offsets from the template, meters.
    pub jitter: f64,
    pub opacity: f64,
    pub sh_degree: usize,
    pub background: [f64; 3],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            bones: 4,
            vertices: 800,
            train_frames: 36,
            test_frames: 12,
            width: 128,
            height: 128,
            focal: 150.0,
            swing: 0.25,
            pose_noise: 0.0,
            jitter: 0.004,
            opacity: 0.9,
            sh_degree: 0,
            background: [1.0; 3],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bones) {
            return Err(Error::invalid(format!("bones must be in 2..=8, got {}", self.bones)));
        }
        if self.vertices < 50 {
            return Err(Error::invalid("need at least 50 vertices"));
        }
        if self.train_frames == 0 || self.width < 11 || self.height < 11 || !(self.focal > 0.0) {
            return Err(Error::invalid("need training frames, images of at least 11x11 and a positive focal length"));
        }
        if !(self.opacity > 0.0 && self.opacity < 1.0) || self.sh_degree > MAX_SH_DEGREE {
            return Err(Error::invalid("opacity must lie in (0, 1) and the SH degree in 0..=1"));
        }
        if !(self.pose_noise >= 0.0 && self.jitter >= 0.0) {
            return Err(Error::invalid("noise levels must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Region {
    Torso,
    Head,
    Arm,
    Forearm,
    Leg,
}

#[derive(Debug, Clone, Copy)]
struct Capsule {
    a: Vector3<f64>,
    b: Vector3<f64>,
    radius: f64,
    bone: usize,
    region: Region,
}

impl Capsule {
    fn closest(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let ab = self.b - self.a;
        let t = ((p - self.a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
        self.a + ab * t
    }

    fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        (p - self.closest(p)).norm() - self.radius
    }

    fn area(&self) -> f64 {
        TAU * self.radius * (self.b - self.a).norm() + 2.0 * TAU * self.radius * self.radius
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vector3<f64> {
        let axis = self.b - self.a;
        let len = axis.norm();
        let u = axis / len;
        let helper = if u.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let e1 = u.cross(&helper).normalize();
        let e2 = u.cross(&e1);
        let side = TAU * self.radius * len;
        let pick = rng.random_range(0.0..self.area());
        if pick < side {
            let phi = rng.random_range(0.0..TAU);
            self.a + u * rng.random_range(0.0..len) + (e1 * phi.cos() + e2 * phi.sin()) * self.radius
        } else {
            // Uniform direction, folded onto the hemisphere of the nearer cap.
            let z: f64 = rng.random_range(-1.0..1.0);
            let phi = rng.random_range(0.0..TAU);
            let r = (1.0 - z * z).sqrt();
            let d = e1 * (r * phi.cos()) + e2 * (r * phi.sin()) + u * z;
            if z >= 0.0 {
                self.b + d * self.radius
            } else {
                self.a + d * self.radius
            }
        }
    }
}

/// Joint positions in the rest pose, world frame.
struct Rig {
    parents: Vec<Option<usize>>,
    joints: Vec<Vector3<f64>>,
    capsules: Vec<Capsule>,
}

fn build_rig(bones: usize) -> Rig {
    let pelvis = Vector3::new(0.0, 0.95, 0.0);
    let neck = Vector3::new(0.0, 1.45, 0.0);
    let shoulder = |s: f64| Vector3::new(0.2 * s, 1.38, 0.0);
    let hip = |s: f64| Vector3::new(0.1 * s, 0.9, 0.0);
    // A-pose: arms hang 45 degrees from horizontal.
    let arm_dir = |s: f64| Vector3::new(FRAC_1_SQRT_2 * s, -FRAC_1_SQRT_2, 0.0);
    let (upper_len, arm_len) = (0.3, 0.62);

    let mut parents = vec![None, Some(0)];
    let mut joints = vec![pelvis, neck];
    let mut capsules = vec![
        Capsule {
            a: Vector3::new(0.0, 0.9, 0.0),
            b: Vector3::new(0.0, 1.3, 0.0),
            radius: 0.15,
            bone: 0,
            region: Region::Torso,
        },
        Capsule {
            a: Vector3::new(0.0, 1.6, 0.0),
            b: Vector3::new(0.0, 1.68, 0.0),
            radius: 0.11,
            bone: 1,
            region: Region::Head,
        },
    ];
    let sides = [1.0, -1.0];
    for (k, &s) in sides.iter().enumerate() {
        if bones <= 2 + k {
            break;
        }
        parents.push(Some(0));
        joints.push(shoulder(s));
        let start = shoulder(s) + arm_dir(s) * 0.03;
        capsules.push(Capsule {
            a: start,
            b: shoulder(s) + arm_dir(s) * arm_len,
            radius: 0.05,
            bone: 2 + k,
            region: Region::Arm,
        });
    }
    for (k, &s) in sides.iter().enumerate() {
        if bones <= 4 + k {
            break;
        }
        parents.push(Some(0));
        joints.push(hip(s));
        capsules.push(Capsule {
            a: hip(s) + Vector3::new(0.0, -0.05, 0.0),
            b: Vector3::new(0.11 * s, 0.08, 0.0),
            radius: 0.07,
            bone: 4 + k,
            region: Region::Leg,
        });
    }
    for (k, &s) in sides.iter().enumerate() {
        if bones <= 6 + k {
            break;
        }
        let arm = capsules.iter().position(|c| c.bone == 2 + k).unwrap();
        let elbow = shoulder(s) + arm_dir(s) * upper_len;
        capsules[arm].b = elbow;
        parents.push(Some(2 + k));
        joints.push(elbow);
        capsules.push(Capsule {
            a: elbow,
            b: shoulder(s) + arm_dir(s) * arm_len,
            radius: 0.045,
            bone: 6 + k,
            region: Region::Forearm,
        });
    }
    Rig {
        parents,
        joints,
        capsules,
    }
}

impl Rig {
    fn skeleton(&self) -> Skeleton {
        let rest = self
            .parents
            .iter()
            .zip(&self.joints)
            .map(|(p, j)| {
                let offset = match p {
                    Some(p) => j - self.joints[*p],
                    None => *j,
                };
                translation4(&[offset.x, offset.y, offset.z])
            })
            .collect::<Vec<Matrix4<f64>>>();
        Skeleton {
            parents: self.parents.clone(),
            rest_local_transforms: rest,
        }
    }

    fn inside_other(&self, p: &Vector3<f64>, own: usize) -> bool {
        self.capsules
            .iter()
            .enumerate()
            .any(|(c, cap)| c != own && cap.surface_distance(p) < -0.005)
    }

    fn weights(&self, p: &Vector3<f64>) -> Vec<f64> {
        let mut w = vec![0.0; self.joints.len()];
        let dists: Vec<f64> = self.capsules.iter().map(|c| c.surface_distance(p)).collect();
        let dmin = dists.iter().copied().fold(f64::INFINITY, f64::min);
        for (c, d) in self.capsules.iter().zip(dists) {
            let v = (-(d - dmin) / 0.02).exp();
            if v > 1e-3 {
                w[c.bone] += v;
            }
        }
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        w
    }
}

/// Procedural albedo per body region, in linear RGB.
fn paint(region: Region, p: &Vector3<f64>, n: &Vector3<f64>) -> [f64; 3] {
    let mix = |a: [f64; 3], b: [f64; 3], t: f64| -> [f64; 3] { std::array::from_fn(|c| a[c] * (1.0 - t) + b[c] * t) };
    match region {
        Region::Torso => {
            let stripes = 0.5 + 0.5 * (p.y * 45.0).sin();
            let shirt = mix([0.05, 0.12, 0.5], [0.8, 0.7, 0.08], stripes);
            // A red emblem on the chest breaks the turn symmetry.
            let chest = ((n.z - 0.6) * 5.0).clamp(0.0, 1.0) * ((p.y - 1.05) * 8.0).clamp(0.0, 1.0);
            mix(shirt, [0.75, 0.05, 0.05], chest)
        }
        Region::Head => {
            let hair = ((p.y - 1.68) * 20.0 + (-n.z) * 2.0).clamp(0.0, 1.0);
            mix([0.8, 0.5, 0.35], [0.12, 0.06, 0.03], hair)
        }
        Region::Arm | Region::Forearm => {
            let bands = 0.5 + 0.5 * ((p.x.abs() + p.y) * 30.0).sin();
            mix([0.7, 0.15, 0.1], [0.9, 0.85, 0.8], bands * 0.8)
        }
        Region::Leg => {
            let seam = 0.5 + 0.5 * (n.x * 6.0).sin();
            mix([0.05, 0.06, 0.15], [0.2, 0.25, 0.45], seam)
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SyntheticSpec,
    pub dataset: Dataset,
    pub ground_truth: GaussianSet,
    /// Noise-free poses of the training frames.
    pub gt_poses: Vec<PoseParams>,
}

/// Pose at fractional frame `t` of a turn lasting `period` frames.
pub fn motion_pose(joints: usize, t: f64, period: f64, swing: f64) -> PoseParams {
    let mut pose = PoseParams::rest(joints);
    let yaw = TAU * t / period;
    pose.joint_rotations[0] = [0.0, yaw.sin().atan2(yaw.cos()), 0.0];
    let w = TAU * t / 12.0;
    let s = w.sin();
    for j in 1..joints {
        pose.joint_rotations[j] = match j {
            1 => [0.4 * swing * (w + 1.0).sin(), 0.3 * swing * (0.5 * w).sin(), 0.0],
            2 => [0.0, 0.0, swing * s],
            3 => [0.0, 0.0, -swing * s],
            4 => [0.6 * swing * s, 0.0, 0.0],
            5 => [-0.6 * swing * s, 0.0, 0.0],
            6 => [0.0, 0.0, 0.8 * swing * (1.0 + s)],
            _ => [0.0, 0.0, -0.8 * swing * (1.0 + s)],
        };
    }
    pose
}

/// Adds independent normal noise to every joint rotation component.
pub fn perturb_poses(poses: &[PoseParams], sigma: f64, seed: u64) -> Vec<PoseParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let normal = Normal::new(0.0, sigma.max(0.0)).expect("valid sigma");
    poses
        .iter()
        .map(|p| {
            let mut q = p.clone();
            for r in &mut q.joint_rotations {
                for v in r.iter_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
            q
        })
        .collect()
}

fn sample_surface(rig: &Rig, count: usize, rng: &mut ChaCha8Rng) -> Vec<(Vector3<f64>, usize)> {
    let areas: Vec<f64> = rig.capsules.iter().map(Capsule::area).collect();
    let total: f64 = areas.iter().sum();
    // Dart throwing with a shrinking exclusion radius keeps spacing even.
    let mut min_dist = 0.75 * (total / count as f64).sqrt();
    let mut points: Vec<(Vector3<f64>, usize)> = Vec::with_capacity(count);
    let mut failures = 0;
    while points.len() < count {
        let mut pick = rng.random_range(0.0..total);
        let mut c = 0;
        while pick >= areas[c] && c + 1 < areas.len() {
            pick -= areas[c];
            c += 1;
        }
        let p = rig.capsules[c].sample(rng);
        let ok = !rig.inside_other(&p, c) && points.iter().all(|(q, _)| (q - p).norm() >= min_dist);
        if ok {
            points.push((p, c));
            failures = 0;
        } else {
            failures += 1;
            if failures > 2000 {
                min_dist *= 0.95;
                failures = 0;
            }
        }
    }
    points
}

fn frame_rotation(n: &Vector3<f64>) -> Matrix3<f64> {
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let t1 = n.cross(&helper).normalize();
    let t2 = n.cross(&t1);
    Matrix3::from_columns(&[t1, t2, *n])
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rig = build_rig(spec.bones);
    let skeleton = rig.skeleton();
    let joints = skeleton.joint_count();

    let surface = sample_surface(&rig, spec.vertices, &mut rng);
    let template = SkinnedTemplate {
        vertices: surface.iter().map(|(p, _)| [p.x, p.y, p.z]).collect(),
        weights: surface.iter().map(|(p, _)| rig.weights(p)).collect(),
    };

    let total_area: f64 = rig.capsules.iter().map(Capsule::area).sum();
    let spacing = (total_area / spec.vertices as f64).sqrt();
    let jitter = Normal::new(0.0, spec.jitter).expect("valid jitter");
    let stride = sh_len(spec.sh_degree);
    let mut gt = GaussianSet::empty(spec.sh_degree, Space::Canonical);
    for (p, c) in &surface {
        let cap = &rig.capsules[*c];
        let n = (p - cap.closest(p)).normalize();
        let pos = p + Vector3::from_fn(|_, _| jitter.sample(&mut rng));
        gt.positions.push([pos.x, pos.y, pos.z]);
        gt.rotations.push(math::rotmat_to_quat(&frame_rotation(&n)));
        let s = 0.55 * spacing * rng.random_range(0.9..1.1);
        gt.log_scales.push([s.ln(), s.ln(), (0.3 * s).ln()]);
        gt.opacity_logits.push(logit(spec.opacity));
        let base = paint(cap.region, p, &n);
        let color = base.map(|v| (v + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0));
        let mut sh = vec![0.0; stride];
        sh[..3].copy_from_slice(&dc_from_color(color));
        gt.sh_coeffs.extend(sh);
    }

    // Frame the turning body: bound the rest-pose template in height and in
    // distance from the vertical turn axis through the pelvis.
    let (mut ymin, mut ymax, mut radial) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for v in &template.vertices {
        ymin = ymin.min(v[1]);
        ymax = ymax.max(v[1]);
        radial = radial.max(v[0].hypot(v[2]));
    }
    let half_fov = 0.5 * spec.width.min(spec.height) as f64 / spec.focal;
    let extent = (0.5 * (ymax - ymin)).max(radial) * 1.12;
    let distance = extent / half_fov + radial;
    let center = Vector3::new(0.0, 0.5 * (ymin + ymax), 0.0);
    let camera = Camera::look_at(
        center + Vector3::new(0.0, 0.0, distance),
        center,
        Vector3::y(),
        spec.focal,
        spec.width,
        spec.height,
    );

    let grid = bake_weight_grid(&template, &GridSettings::default())?;
    let shape = ShapeParams::default();
    let period = spec.train_frames as f64;
    let render_at = |pose: &PoseParams| -> Result<_> {
        let (observed, _) = deform_gaussians(&gt, pose, &shape, &skeleton, &grid)?;
        Ok(quantize(&render(&observed, &camera, spec.background, &RenderSettings::default())?))
    };

    let gt_poses: Vec<PoseParams> = (0..spec.train_frames)
        .map(|t| motion_pose(joints, t as f64, period, spec.swing))
        .collect();
    let manifest_poses = if spec.pose_noise > 0.0 {
        perturb_poses(&gt_poses, spec.pose_noise, seed)
    } else {
        gt_poses.clone()
    };
    let mut train = Vec::with_capacity(spec.train_frames);
    for (t, (gt_pose, pose)) in gt_poses.iter().zip(manifest_poses).enumerate() {
        train.push(Frame {
            image_path: PathBuf::from(format!("train/{t:03}.png")),
            image: render_at(gt_pose)?,
            camera: camera.clone(),
            pose,
        });
    }
    // Held-out frames fall halfway between training yaws.
    let mut test = Vec::with_capacity(spec.test_frames);
    for k in 0..spec.test_frames {
        let t = (k as f64 + 0.5) * period / spec.test_frames as f64;
        let t = t.floor() + 0.5;
        let pose = motion_pose(joints, t, period, spec.swing);
        test.push(Frame {
            image_path: PathBuf::from(format!("test/{k:03}.png")),
            image: render_at(&pose)?,
            camera: camera.clone(),
            pose,
        });
    }

    Ok(SyntheticScene {
        spec: spec.clone(),
        dataset: Dataset {
            intrinsics: Intrinsics {
                fx: camera.fx,
                fy: camera.fy,
                cx: camera.cx,
                cy: camera.cy,
                width: camera.width,
                height: camera.height,
            },
            skeleton,
            template,
            shape,
            train,
            test,
        },
        ground_truth: gt,
        gt_poses,
    })
}

/// Checkpoint holding the ground-truth Gaussians and noise-free poses.
pub fn ground_truth_checkpoint(scene: &SyntheticScene) -> Checkpoint {
    let pose_len = 3 * (scene.dataset.joint_count() + 1);
    Checkpoint {
        config: TrainConfig {
            sh_degree: scene.spec.sh_degree,
            background: scene.spec.background,
            ..TrainConfig::default()
        },
        step: 0,
        gaussians: scene.ground_truth.clone(),
        poses: scene.gt_poses.clone(),
        optimizer: OptimizerState::new(
            scene.ground_truth.len(),
            scene.ground_truth.sh_degree,
            scene.gt_poses.len(),
            pose_len,
        ),
    }
}

/// Writes the dataset plus the ground-truth checkpoint and spec beside it.
pub fn write_synthetic(scene: &SyntheticScene, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_dataset(&scene.dataset, dir)?;
    ground_truth_checkpoint(scene).save(&dir.join(GROUND_TRUTH_FILE))?;
    crate::io::dataset::write_file(&dir.join("synthetic.json"), &crate::io::dataset::to_json(&scene.spec))
}
