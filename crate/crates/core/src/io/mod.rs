//! Volume, label and field files.
//!
//! Paths ending in `.nii`, `.nii.gz`, `.hdr` or `.hdr.gz` go through the
//! NIfTI-1 reader; anything else is the raw float32 + JSON sidecar format.

pub mod nifti;
pub mod raw;

use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume};
use crate::warp::DisplacementField;

pub use raw::{Kind, Sidecar};

pub fn is_nifti(path: &Path) -> bool {
    let name = path.file_name().map(|n| n.to_string_lossy().to_lowercase()).unwrap_or_default();
    [".nii", ".nii.gz", ".hdr", ".hdr.gz"].iter().any(|s| name.ends_with(s))
}

/// Any of the three file kinds.
#[derive(Debug, Clone)]
pub enum VolumeFile {
    Volume(Volume),
    Labels(LabelVolume),
    Field(DisplacementField),
}

pub fn read_any(path: &Path) -> Result<VolumeFile> {
    if is_nifti(path) {
        return nifti::read_nifti(path).map(VolumeFile::Volume);
    }
    let (sc, data) = raw::read_raw(path)?;
    let vol = |data| {
        Volume::new(sc.dims, sc.spacing, data).map_err(|e| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    };
    match sc.kind {
        Kind::Volume => vol(data).map(VolumeFile::Volume),
        Kind::Labels => {
            let v = vol(data)?;
            LabelVolume::from_volume(&v, sc.num_classes)
                .map(VolumeFile::Labels)
                .map_err(|e| Error::MalformedHeader {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })
        }
        Kind::Field => raw::field_from_planes(&sc, &data)
            .map(VolumeFile::Field)
            .map_err(|e| Error::MalformedHeader {
                path: path.to_path_buf(),
                reason: e.to_string(),
            }),
    }
}

/// Reads intensities; label files are accepted and widened to scalars.
pub fn read_volume(path: &Path) -> Result<Volume> {
    match read_any(path)? {
        VolumeFile::Volume(v) => Ok(v),
        VolumeFile::Labels(l) => Ok(l.to_volume()),
        VolumeFile::Field(_) => Err(wrong_kind(path, "volume", "field")),
    }
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    match read_any(path)? {
        VolumeFile::Labels(l) => Ok(l),
        VolumeFile::Volume(v) => LabelVolume::from_volume(&v, None).map_err(|e| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }),
        VolumeFile::Field(_) => Err(wrong_kind(path, "labels", "field")),
    }
}

pub fn read_field(path: &Path) -> Result<DisplacementField> {
    match read_any(path)? {
        VolumeFile::Field(f) => Ok(f),
        _ => Err(wrong_kind(path, "field", "scalar volume")),
    }
}

fn wrong_kind(path: &Path, want: &str, got: &str) -> Error {
    Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: format!("expected a {want} file, found a {got}"),
    }
}

pub fn write_volume(vol: &Volume, path: &Path) -> Result<()> {
    if is_nifti(path) {
        nifti::write_nifti(vol, path)
    } else {
        raw::write_volume_raw(vol, path)
    }
}

pub fn write_labels(labels: &LabelVolume, path: &Path) -> Result<()> {
    if is_nifti(path) {
        nifti::write_nifti(&labels.to_volume(), path)
    } else {
        raw::write_labels_raw(labels, path)
    }
}

pub fn write_field(field: &DisplacementField, path: &Path) -> Result<()> {
    if is_nifti(path) {
        return Err(Error::InvalidArgument(
            "displacement fields are only written in the raw format".into(),
        ));
    }
    raw::write_field_raw(field, path)
}
