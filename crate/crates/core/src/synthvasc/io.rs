//! On-disk case layout: `case.json` sidecar plus raw little-endian payloads
//! (`volume.raw` as f32, `artery.raw` as u8 0/1), z-major order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Case, LesionGT};
use crate::error::{io_err, Error, Result};
use crate::geometry::DistanceMap;
use crate::grid::{Dims, Grid3, Spacing};

pub const CASE_SIDECAR: &str = "case.json";
pub const VOLUME_PAYLOAD: &str = "volume.raw";
pub const ARTERY_PAYLOAD: &str = "artery.raw";
pub const DISTANCE_SIDECAR: &str = "distance.json";
pub const DISTANCE_PAYLOAD: &str = "distance.raw";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseSidecar {
    pub case_id: String,
    pub dims: Dims,
    pub spacing_mm: Spacing,
    pub lesions: Vec<LesionGT>,
    pub is_healthy: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DistanceSidecar {
    dims: Dims,
    spacing_mm: Spacing,
    has_artery: bool,
}

fn write_f32(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_payload(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != expected {
        return Err(Error::PayloadSize {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes)
}

fn read_f32(path: &Path, dims: Dims) -> Result<Vec<f32>> {
    let n = dims[0] * dims[1] * dims[2];
    let bytes = read_payload(path, n * 4)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_sidecar<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Sidecar {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn write_case(case: &Case, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let sidecar = CaseSidecar {
        case_id: case.case_id.clone(),
        dims: case.dims(),
        spacing_mm: case.spacing_mm,
        lesions: case.lesions.clone(),
        is_healthy: case.is_healthy,
    };
    write_json(&dir.join(CASE_SIDECAR), &sidecar)?;
    write_f32(&dir.join(VOLUME_PAYLOAD), case.volume.as_slice().iter().copied())?;
    let mask: Vec<u8> = case.artery_mask.as_slice().iter().map(|&m| m as u8).collect();
    let p = dir.join(ARTERY_PAYLOAD);
    fs::write(&p, mask).map_err(io_err(&p))
}

pub fn read_case(dir: &Path) -> Result<Case> {
    let side_path = dir.join(CASE_SIDECAR);
    let side: CaseSidecar = read_sidecar(&side_path)?;
    if side.dims.contains(&0) {
        return Err(Error::Sidecar {
            path: side_path,
            msg: format!("dims {:?} must be positive", side.dims),
        });
    }
    if side.is_healthy != side.lesions.is_empty() {
        return Err(Error::Sidecar {
            path: side_path,
            msg: "is_healthy disagrees with the lesion list".into(),
        });
    }
    let volume = read_f32(&dir.join(VOLUME_PAYLOAD), side.dims)?;
    let mpath = dir.join(ARTERY_PAYLOAD);
    let raw = read_payload(&mpath, side.dims.iter().product())?;
    if let Some(bad) = raw.iter().find(|&&b| b > 1) {
        return Err(Error::Sidecar {
            path: mpath,
            msg: format!("artery payload must be 0/1, found byte {bad}"),
        });
    }
    let mask = raw.into_iter().map(|b| b == 1).collect();
    Ok(Case {
        case_id: side.case_id,
        volume: Grid3::from_vec(side.dims, volume).expect("length checked"),
        artery_mask: Grid3::from_vec(side.dims, mask).expect("length checked"),
        spacing_mm: side.spacing_mm,
        lesions: side.lesions,
        is_healthy: side.is_healthy,
    })
}

/// Distance maps use the same raw+sidecar convention (f32 payload).
pub fn write_distance_map(dmap: &DistanceMap, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let side = DistanceSidecar {
        dims: dmap.values.dims(),
        spacing_mm: dmap.spacing_mm,
        has_artery: dmap.has_artery,
    };
    write_json(&dir.join(DISTANCE_SIDECAR), &side)?;
    write_f32(
        &dir.join(DISTANCE_PAYLOAD),
        dmap.values.as_slice().iter().map(|&v| v as f32),
    )
}

pub fn read_distance_map(dir: &Path) -> Result<DistanceMap> {
    let side: DistanceSidecar = read_sidecar(&dir.join(DISTANCE_SIDECAR))?;
    let values = read_f32(&dir.join(DISTANCE_PAYLOAD), side.dims)?;
    Ok(DistanceMap {
        values: Grid3::from_vec(side.dims, values.into_iter().map(f64::from).collect())
            .expect("length checked"),
        spacing_mm: side.spacing_mm,
        has_artery: side.has_artery,
    })
}

/// Writes newline-delimited case directories relative to the manifest's folder.
pub fn write_manifest(path: &Path, entries: &[PathBuf]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&e.to_string_lossy());
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Reads a manifest and resolves each entry against the manifest's folder.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| base.join(l))
        .collect())
}
