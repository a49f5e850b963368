//! Dataset manifest: intrinsics, per-frame extrinsics and poses, and the
//! skeleton/template asset file. Paths inside a manifest are relative to it.

use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Camera, RenderedImage};
use crate::skinning::{check_rigid, matrix_rows, PoseParams, ShapeParams, Skeleton, SkinnedTemplate, SHAPE_DIM};

use super::image::{load_png, save_png};

pub const MANIFEST_VERSION: &str = "splatbody-dataset/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ASSETS_FILE: &str = "assets.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub image: String,
    pub world_to_camera: [[f64; 4]; 4],
    /// Axis-angle per joint, flattened.
    pub pose: Vec<f64>,
    pub root_translation: [f64; 3],
    #[serde(default)]
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub camera: Intrinsics,
    pub assets: String,
    #[serde(default)]
    pub shape: [f64; SHAPE_DIM],
    pub frames: Vec<FrameEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assets {
    pub skeleton: Skeleton,
    pub template: SkinnedTemplate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image_path: PathBuf,
    pub image: RenderedImage,
    pub camera: Camera,
    pub pose: PoseParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub intrinsics: Intrinsics,
    pub skeleton: Skeleton,
    pub template: SkinnedTemplate,
    pub shape: ShapeParams,
    pub train: Vec<Frame>,
    pub test: Vec<Frame>,
}

impl Dataset {
    pub fn joint_count(&self) -> usize {
        self.skeleton.joint_count()
    }

    pub fn train_poses(&self) -> Vec<PoseParams> {
        self.train.iter().map(|f| f.pose.clone()).collect()
    }
}

pub fn camera_for(intr: &Intrinsics, world_to_camera: Matrix4<f64>) -> Camera {
    Camera {
        fx: intr.fx,
        fy: intr.fy,
        cx: intr.cx,
        cy: intr.cy,
        width: intr.width,
        height: intr.height,
        world_to_camera,
        z_near: 0.01,
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Reads and validates a manifest, its assets and every frame image.
/// `path` may name the manifest or the directory holding it.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let manifest: Manifest = parse_json(&manifest_path)?;
    let invalid = |msg: String| Error::Validation {
        path: manifest_path.clone(),
        msg,
    };
    if manifest.version != MANIFEST_VERSION {
        return Err(invalid(format!(
            "unsupported version {:?}, expected {MANIFEST_VERSION:?}",
            manifest.version
        )));
    }
    let assets_path = root.join(&manifest.assets);
    let assets: Assets = parse_json(&assets_path)?;
    let asset_err = |e: Error| Error::Validation {
        path: assets_path.clone(),
        msg: e.to_string(),
    };
    assets.skeleton.validate().map_err(asset_err)?;
    assets.template.validate().map_err(asset_err)?;
    let joints = assets.skeleton.joint_count();
    if assets.template.joint_count() != joints {
        return Err(asset_err(Error::invalid(format!(
            "template weights cover {} joints, skeleton has {joints}",
            assets.template.joint_count()
        ))));
    }

    let intr = manifest.camera.clone();
    if !(intr.fx > 0.0 && intr.fy > 0.0) || intr.width == 0 || intr.height == 0 {
        return Err(invalid("camera needs positive focal lengths and a nonempty image size".into()));
    }
    let mut parsed = Vec::with_capacity(manifest.frames.len());
    for (i, f) in manifest.frames.iter().enumerate() {
        let w = matrix_rows::from_rows(&f.world_to_camera);
        check_rigid(&w, 1e-6).map_err(|e| invalid(format!("frame {i}: world_to_camera: {e}")))?;
        if f.pose.len() != 3 * joints {
            return Err(invalid(format!(
                "frame {i}: pose has {} values, expected {} for {joints} joints",
                f.pose.len(),
                3 * joints
            )));
        }
        let pose = PoseParams {
            joint_rotations: f.pose.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
            root_translation: f.root_translation,
        };
        let camera = camera_for(&intr, w);
        parsed.push((root.join(&f.image), camera, pose, f.split));
    }
    let images: Vec<Result<RenderedImage>> = parsed.par_iter().map(|(p, ..)| load_png(p)).collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for ((image_path, camera, pose, split), image) in parsed.into_iter().zip(images) {
        let image = image?;
        if image.width != intr.width || image.height != intr.height {
            return Err(Error::Validation {
                path: image_path,
                msg: format!(
                    "image is {}x{}, manifest says {}x{}",
                    image.width, image.height, intr.width, intr.height
                ),
            });
        }
        let frame = Frame {
            image_path,
            image,
            camera,
            pose,
        };
        match split {
            Split::Train => train.push(frame),
            Split::Test => test.push(frame),
        }
    }
    if train.is_empty() {
        return Err(invalid("dataset has no training frames".into()));
    }
    Ok(Dataset {
        intrinsics: intr,
        skeleton: assets.skeleton,
        template: assets.template,
        shape: ShapeParams { beta: manifest.shape },
        train,
        test,
    })
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(value).expect("serializable value");
    s.push(b'\n');
    s
}

/// Writes manifest, assets and PNG images into `dir`. Images are named
/// `train/NNN.png` and `test/NNN.png`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    for sub in ["train", "test"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut frames = Vec::new();
    for (split, list) in [(Split::Train, &dataset.train), (Split::Test, &dataset.test)] {
        let sub = if split == Split::Train { "train" } else { "test" };
        let written: Vec<Result<String>> = list
            .par_iter()
            .enumerate()
            .map(|(i, f)| {
                let rel = format!("{sub}/{i:03}.png");
                save_png(&f.image, &dir.join(&rel))?;
                Ok(rel)
            })
            .collect();
        for (f, rel) in list.iter().zip(written) {
            frames.push(FrameEntry {
                image: rel?,
                world_to_camera: matrix_rows::to_rows(&f.camera.world_to_camera),
                pose: f.pose.joint_rotations.iter().flatten().copied().collect(),
                root_translation: f.pose.root_translation,
                split,
            });
        }
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION.into(),
        camera: dataset.intrinsics.clone(),
        assets: ASSETS_FILE.into(),
        shape: dataset.shape.beta,
        frames,
    };
    let assets = Assets {
        skeleton: dataset.skeleton.clone(),
        template: dataset.template.clone(),
    };
    write_file(&dir.join(ASSETS_FILE), &to_json(&assets))?;
    write_file(&dir.join(MANIFEST_FILE), &to_json(&manifest))
}
