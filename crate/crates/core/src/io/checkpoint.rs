//! Binary checkpoint container, little-endian throughout:
//!
//! ```text
//! magic "SPBDCKPT" | u32 version | u64 len + config JSON
//! u64 step | u32 sh_degree | u8 space | u64 n
//! f64 positions[3n] rotations[4n] log_scales[3n] opacity_logits[n] sh[n * stride]
//! u64 frames | u64 pose_len | f64 poses[frames * pose_len]
//! u64 adam step | per group (positions, rotations, log_scales, opacity, sh): f64 m[], f64 v[]
//! per frame: u64 adam step, f64 m[pose_len], f64 v[pose_len]
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::gaussian::{sh_len, GaussianSet, Space, MAX_SH_DEGREE};
use crate::optim::{GaussianMoments, Moments, OptimizerState};
use crate::skinning::PoseParams;
use crate::trainer::TrainConfig;

use super::dataset::{read_file, write_file};

pub const MAGIC: &[u8; 8] = b"SPBDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub gaussians: GaussianSet,
    pub poses: Vec<PoseParams>,
    pub optimizer: OptimizerState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> std::result::Result<usize, String> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| format!("implausible length {v} at byte {}", self.pos - 8))
    }
    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let bytes = self.take(n.checked_mul(8).ok_or("length overflow")?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn arrays<const D: usize>(&mut self, n: usize) -> std::result::Result<Vec<[f64; D]>, String> {
        Ok(self.f64s(n * D)?.chunks_exact(D).map(|c| c.try_into().unwrap()).collect())
    }
    fn moments(&mut self, n: usize) -> std::result::Result<Moments, String> {
        Ok(Moments {
            m: self.f64s(n)?,
            v: self.f64s(n)?,
        })
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let g = &self.gaussians;
        g.validate()?;
        let n = g.len();
        let pose_len = self.poses.first().map_or(0, |p| p.to_vec().len());
        if self.poses.iter().any(|p| p.to_vec().len() != pose_len) {
            return Err(Error::invalid("poses differ in joint count"));
        }
        let opt = &self.optimizer;
        if opt.gaussians.rows() != n || opt.poses.len() != self.poses.len() || opt.pose_steps.len() != self.poses.len() {
            return Err(Error::invalid("optimizer state does not match the model"));
        }
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        w.u64(config.len() as u64);
        w.0.extend_from_slice(&config);
        w.u64(self.step);
        w.u32(g.sh_degree as u32);
        w.u8(match g.space {
            Space::Canonical => 0,
            Space::Observation => 1,
        });
        w.u64(n as u64);
        w.f64s(g.positions.as_flattened());
        w.f64s(g.rotations.as_flattened());
        w.f64s(g.log_scales.as_flattened());
        w.f64s(&g.opacity_logits);
        w.f64s(&g.sh_coeffs);
        w.u64(self.poses.len() as u64);
        w.u64(pose_len as u64);
        for p in &self.poses {
            w.f64s(&p.to_vec());
        }
        w.u64(opt.step);
        let gm = &opt.gaussians;
        for m in [&gm.positions, &gm.rotations, &gm.log_scales, &gm.opacity_logits, &gm.sh_coeffs] {
            w.f64s(&m.m);
            w.f64s(&m.v);
        }
        for (m, &t) in opt.poses.iter().zip(&opt.pose_steps) {
            if m.len() != pose_len {
                return Err(Error::invalid("pose moments have the wrong length"));
            }
            w.u64(t);
            w.f64s(&m.m);
            w.f64s(&m.v);
        }
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a splatbody checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let clen = r.len()?;
        let config: TrainConfig =
            serde_json::from_slice(r.take(clen)?).map_err(|e| format!("config block: {e}"))?;
        let step = r.u64()?;
        let sh_degree = r.u32()? as usize;
        if sh_degree > MAX_SH_DEGREE {
            return Err(format!("unsupported SH degree {sh_degree}"));
        }
        let space = match r.u8()? {
            0 => Space::Canonical,
            1 => Space::Observation,
            s => return Err(format!("unknown space tag {s}")),
        };
        let n = r.len()?;
        let stride = sh_len(sh_degree);
        let gaussians = GaussianSet {
            positions: r.arrays::<3>(n)?,
            rotations: r.arrays::<4>(n)?,
            log_scales: r.arrays::<3>(n)?,
            opacity_logits: r.f64s(n)?,
            sh_coeffs: r.f64s(n * stride)?,
            sh_degree,
            space,
        };
        let frames = r.len()?;
        let pose_len = r.len()?;
        let mut poses = Vec::with_capacity(frames);
        for _ in 0..frames {
            poses.push(PoseParams::from_slice(&r.f64s(pose_len)?).map_err(|e| e.to_string())?);
        }
        let adam_step = r.u64()?;
        let gaussian_moments = GaussianMoments {
            positions: r.moments(3 * n)?,
            rotations: r.moments(4 * n)?,
            log_scales: r.moments(3 * n)?,
            opacity_logits: r.moments(n)?,
            sh_coeffs: r.moments(stride * n)?,
            sh_stride: stride,
        };
        let mut pose_moments = Vec::with_capacity(frames);
        let mut pose_steps = Vec::with_capacity(frames);
        for _ in 0..frames {
            pose_steps.push(r.u64()?);
            pose_moments.push(r.moments(pose_len)?);
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Checkpoint {
            config,
            step,
            gaussians,
            poses,
            optimizer: OptimizerState {
                step: adam_step,
                gaussians: gaussian_moments,
                poses: pose_moments,
                pose_steps,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::from_bytes(&bytes).map_err(|msg| Error::Malformed {
            path: path.to_path_buf(),
            msg,
        })
    }
}
