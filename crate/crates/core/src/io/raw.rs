//! Little-endian float32 payload plus a JSON sidecar describing it.
//!
//! `fixed.f32raw` holds the samples (x fastest, z slowest) and `fixed.json`
//! holds `{dims, spacing, kind, num_classes?, units?}`. Displacement fields
//! store their three components as consecutive planes: all x components,
//! then all y, then all z.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, Spacing};
use crate::volume::{LabelVolume, Volume};
use crate::warp::DisplacementField;

pub const PAYLOAD_EXT: &str = "f32raw";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Volume,
    Labels,
    Field,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dims: Dims,
    pub spacing: Spacing,
    pub kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<String>,
}

impl Sidecar {
    fn channels(&self) -> usize {
        match self.kind {
            Kind::Field => 3,
            _ => 1,
        }
    }
}

/// Payload and sidecar paths for a raw-format base path.
pub fn raw_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension(PAYLOAD_EXT), path.with_extension("json"))
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let (_, json) = raw_paths(path);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let sc: Sidecar = serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        path: json.clone(),
        reason: e.to_string(),
    })?;
    if sc.dims.0.iter().any(|&n| n == 0) || !sc.spacing.is_valid() {
        return Err(Error::MalformedHeader {
            path: json,
            reason: format!("invalid lattice {:?} / {:?}", sc.dims.0, sc.spacing.0),
        });
    }
    Ok(sc)
}

/// Reads the sidecar and payload, returning samples widened to f64.
pub fn read_raw(path: &Path) -> Result<(Sidecar, Vec<f64>)> {
    let sc = read_sidecar(path)?;
    let (payload, _) = raw_paths(path);
    let bytes = fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
    let expected = sc.dims.len() * sc.channels() * 4;
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload {
            path: payload,
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::MalformedHeader {
            path: payload,
            reason: format!("payload has {} bytes, sidecar implies {expected}", bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok((sc, data))
}

pub fn write_raw(path: &Path, sidecar: &Sidecar, data: impl Iterator<Item = f64>) -> Result<()> {
    let (payload, json) = raw_paths(path);
    let mut bytes = Vec::with_capacity(sidecar.dims.len() * sidecar.channels() * 4);
    for v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(&payload, bytes).map_err(|e| Error::io(&payload, e))?;
    let text = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))
}

pub fn write_volume_raw(vol: &Volume, path: &Path) -> Result<()> {
    let sc = Sidecar {
        dims: vol.dims(),
        spacing: vol.spacing(),
        kind: Kind::Volume,
        num_classes: None,
        units: None,
    };
    write_raw(path, &sc, vol.data().iter().copied())
}

pub fn write_labels_raw(labels: &LabelVolume, path: &Path) -> Result<()> {
    let sc = Sidecar {
        dims: labels.dims(),
        spacing: labels.spacing(),
        kind: Kind::Labels,
        num_classes: Some(labels.num_classes()),
        units: None,
    };
    write_raw(path, &sc, labels.labels().iter().map(|&l| l as f64))
}

pub fn write_field_raw(field: &DisplacementField, path: &Path) -> Result<()> {
    let sc = Sidecar {
        dims: field.dims(),
        spacing: field.spacing(),
        kind: Kind::Field,
        num_classes: None,
        units: Some("voxels".into()),
    };
    let u = field.vectors();
    write_raw(path, &sc, (0..3).flat_map(|c| u.iter().map(move |v| v[c])))
}

pub(crate) fn field_from_planes(sc: &Sidecar, data: &[f64]) -> Result<DisplacementField> {
    let n = sc.dims.len();
    let u = (0..n).map(|i| [data[i], data[n + i], data[2 * n + i]]).collect();
    DisplacementField::new(sc.dims, sc.spacing, u)
}
