//! Binary little-endian PLY export of activated Gaussian attributes.
//!
//! Vertex properties, in order: `x y z` (float), `red green blue` (uchar,
//! DC color times 255), `opacity` (float), `scale_0..2` (float),
//! `rot_0..3` (float, unit quaternion `w x y z`).

use std::path::Path;

use crate::error::{Error, Result};
use crate::gaussian::{activate, color_from_basis, GaussianSet, SH_C0};

use super::dataset::{read_file, write_file};

const PROPERTIES: [(&str, &str); 14] = [
    ("float", "x"),
    ("float", "y"),
    ("float", "z"),
    ("uchar", "red"),
    ("uchar", "green"),
    ("uchar", "blue"),
    ("float", "opacity"),
    ("float", "scale_0"),
    ("float", "scale_1"),
    ("float", "scale_2"),
    ("float", "rot_0"),
    ("float", "rot_1"),
    ("float", "rot_2"),
    ("float", "rot_3"),
];
const RECORD_BYTES: usize = 11 * 4 + 3;

#[derive(Debug, Clone, PartialEq)]
pub struct PlyCloud {
    pub positions: Vec<[f32; 3]>,
    pub colors: Vec<[u8; 3]>,
    pub opacities: Vec<f32>,
    pub scales: Vec<[f32; 3]>,
    pub rotations: Vec<[f32; 4]>,
}

impl PlyCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn from_set(set: &GaussianSet) -> Result<Self> {
        let act = activate(set)?;
        let colors = (0..set.len())
            .map(|i| {
                let sh = set.sh(i);
                let c = color_from_basis(&sh[..3], &[SH_C0]);
                c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            })
            .collect();
        Ok(PlyCloud {
            positions: set.positions.iter().map(|p| p.map(|v| v as f32)).collect(),
            colors,
            opacities: act.opacities.iter().map(|&o| o as f32).collect(),
            scales: act.scales.iter().map(|s| s.map(|v| v as f32)).collect(),
            rotations: act.rotations.iter().map(|q| q.map(|v| v as f32)).collect(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!(
            "ply\nformat binary_little_endian 1.0\ncomment splatbody gaussians\nelement vertex {}\n",
            self.len()
        );
        for (ty, name) in PROPERTIES {
            out.push_str(&format!("property {ty} {name}\n"));
        }
        out.push_str("end_header\n");
        let mut bytes = out.into_bytes();
        bytes.reserve(self.len() * RECORD_BYTES);
        for i in 0..self.len() {
            let floats = |b: &mut Vec<u8>, vs: &[f32]| vs.iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
            floats(&mut bytes, &self.positions[i]);
            bytes.extend_from_slice(&self.colors[i]);
            floats(&mut bytes, &[self.opacities[i]]);
            floats(&mut bytes, &self.scales[i]);
            floats(&mut bytes, &self.rotations[i]);
        }
        bytes
    }

    /// Parses files written by [`PlyCloud::to_bytes`].
    pub fn parse(bytes: &[u8]) -> std::result::Result<Self, String> {
        let marker = b"end_header\n";
        let end = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or("missing end_header")?
            + marker.len();
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| "header is not utf-8")?;
        let mut lines = header.lines().filter(|l| !l.starts_with("comment"));
        if lines.next() != Some("ply") {
            return Err("missing ply magic".into());
        }
        if lines.next() != Some("format binary_little_endian 1.0") {
            return Err("only binary_little_endian 1.0 is supported".into());
        }
        let count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("element vertex "))
            .and_then(|n| n.trim().parse().ok())
            .ok_or("expected `element vertex <count>`")?;
        for (ty, name) in PROPERTIES {
            let expect = format!("property {ty} {name}");
            match lines.next() {
                Some(l) if l == expect => {}
                other => return Err(format!("expected `{expect}`, found {other:?}")),
            }
        }
        if lines.next() != Some("end_header") {
            return Err("unexpected header line before end_header".into());
        }
        let body = &bytes[end..];
        if body.len() != count * RECORD_BYTES {
            return Err(format!(
                "body holds {} bytes, {count} vertices need {}",
                body.len(),
                count * RECORD_BYTES
            ));
        }
        let mut cloud = PlyCloud {
            positions: Vec::with_capacity(count),
            colors: Vec::with_capacity(count),
            opacities: Vec::with_capacity(count),
            scales: Vec::with_capacity(count),
            rotations: Vec::with_capacity(count),
        };
        let f = |r: &[u8], k: usize| f32::from_le_bytes(r[k..k + 4].try_into().unwrap());
        for r in body.chunks_exact(RECORD_BYTES) {
            cloud.positions.push([f(r, 0), f(r, 4), f(r, 8)]);
            cloud.colors.push([r[12], r[13], r[14]]);
            cloud.opacities.push(f(r, 15));
            cloud.scales.push([f(r, 19), f(r, 23), f(r, 27)]);
            cloud.rotations.push([f(r, 31), f(r, 35), f(r, 39), f(r, 43)]);
        }
        Ok(cloud)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_file(path)?).map_err(|msg| Error::Malformed {
            path: path.to_path_buf(),
            msg,
        })
    }
}

pub fn export_ply(set: &GaussianSet, path: &Path) -> Result<()> {
    write_file(path, &PlyCloud::from_set(set)?.to_bytes())
}
