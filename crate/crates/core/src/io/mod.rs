//! Volume and field I/O.
//!
//! Two on-disk formats:
//! - NIfTI-1 (`.nii`) for 3D volumes, spacing encoded on the affine diagonal;
//! - a raw dense array container (`.rvol`) with a structured-text header
//!   (shape, dtype, spacing, role) plus a contiguous little-endian payload,
//!   used for 2D desk-scale work and for vector fields.
//!
//! Label maps and foreground masks are stored as companion files next to the
//! primary volume (`<stem>.labels.<ext>`, `<stem>.fg.<ext>`), so a volume
//! path round-trips all of its fields.

pub mod manifest;
pub mod nifti;
pub mod raw;

use crate::error::{Error, Result};
use crate::geometry::{DisplacementField, VelocityField};
use crate::real::Real;
use crate::volume::ImageVolume;
use std::path::{Path, PathBuf};

pub use manifest::{DatasetManifest, Split, SubjectEntry};

/// Role tag stored in container headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Image,
    Labels,
    Mask,
    Svf,
    Disp,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Image => "image",
            Role::Labels => "labels",
            Role::Mask => "mask",
            Role::Svf => "svf",
            Role::Disp => "disp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "image" => Role::Image,
            "labels" => Role::Labels,
            "mask" => Role::Mask,
            "svf" => Role::Svf,
            "disp" => Role::Disp,
            other => {
                return Err(Error::format("role", format!("unknown role `{other}`")));
            }
        })
    }
}

fn companion(path: &Path, tag: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ext = path
        .extension()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{tag}.{ext}"))
}

/// Save a volume; format chosen by extension (`.nii` for 3D, `.rvol` for 2D).
/// Labels and foreground masks go to companion files.
pub fn save_volume(vol: &ImageVolume, path: &Path) -> Result<()> {
    vol.validate()?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("nii") => {
            if vol.ndim() != 3 {
                return Err(Error::InvalidInput(format!(
                    "NIfTI output requires a 3D volume, got {}D",
                    vol.ndim()
                )));
            }
            nifti::write_f32(path, &vol.data, &vol.spacing)?;
            if let Some(labels) = &vol.labels {
                nifti::write_i16(&companion(path, "labels"), labels, &vol.spacing)?;
            }
            if let Some(fg) = &vol.foreground {
                let as_i32 = fg.mapv(|b| i32::from(b));
                nifti::write_i16(&companion(path, "fg"), &as_i32, &vol.spacing)?;
            }
            Ok(())
        }
        Some("rvol") => {
            raw::write_f32(path, &vol.data, &vol.spacing, Role::Image)?;
            if let Some(labels) = &vol.labels {
                raw::write_i16(&companion(path, "labels"), labels, &vol.spacing, Role::Labels)?;
            }
            if let Some(fg) = &vol.foreground {
                let as_i32 = fg.mapv(|b| i32::from(b));
                raw::write_i16(&companion(path, "fg"), &as_i32, &vol.spacing, Role::Mask)?;
            }
            Ok(())
        }
        other => Err(Error::InvalidInput(format!(
            "unsupported volume extension {other:?} (expected .nii or .rvol)"
        ))),
    }
}

/// Load a volume saved by [`save_volume`], restoring companion fields.
pub fn load_volume(path: &Path) -> Result<ImageVolume> {
    if !path.exists() {
        return Err(Error::InvalidInput(format!(
            "no such file: {}",
            path.display()
        )));
    }
    let (data, spacing) = match path.extension().and_then(|e| e.to_str()) {
        Some("nii") => nifti::read_f32(path)?,
        Some("rvol") => {
            let (data, spacing, role) = raw::read_f32(path)?;
            if role != Role::Image {
                return Err(Error::format(
                    "role",
                    format!("expected role `image`, found `{}`", role.as_str()),
                ));
            }
            (data, spacing)
        }
        other => {
            return Err(Error::InvalidInput(format!(
                "unsupported volume extension {other:?}"
            )));
        }
    };
    let mut vol = ImageVolume::new(data, spacing)?;
    let labels_path = companion(path, "labels");
    if labels_path.exists() {
        let labels = match path.extension().and_then(|e| e.to_str()) {
            Some("nii") => nifti::read_i32(&labels_path)?.0,
            _ => raw::read_i32(&labels_path)?.0,
        };
        if labels.shape() != vol.data.shape() {
            return Err(Error::format(
                "shape",
                format!(
                    "labels shape {:?} != data shape {:?}",
                    labels.shape(),
                    vol.data.shape()
                ),
            ));
        }
        vol.labels = Some(labels);
    }
    let fg_path = companion(path, "fg");
    if fg_path.exists() {
        let fg = match path.extension().and_then(|e| e.to_str()) {
            Some("nii") => nifti::read_i32(&fg_path)?.0,
            _ => raw::read_i32(&fg_path)?.0,
        };
        if fg.shape() != vol.data.shape() {
            return Err(Error::format(
                "shape",
                format!(
                    "foreground shape {:?} != data shape {:?}",
                    fg.shape(),
                    vol.data.shape()
                ),
            ));
        }
        vol.foreground = Some(fg.mapv(|x| x != 0));
    }
    vol.validate()?;
    Ok(vol)
}

/// Save a velocity field (role `svf`) in the raw container.
pub fn save_velocity<F: Real>(field: &VelocityField<F>, path: &Path) -> Result<()> {
    let data = field.data.mapv(|x| x.as_f64() as f32);
    let spacing = vec![1.0; field.spatial_ndim()];
    raw::write_f32(path, &data, &spacing, Role::Svf)
}

pub fn load_velocity<F: Real>(path: &Path) -> Result<VelocityField<F>> {
    let (data, _, role) = raw::read_f32(path)?;
    if role != Role::Svf {
        return Err(Error::format(
            "role",
            format!("expected role `svf`, found `{}`", role.as_str()),
        ));
    }
    VelocityField::new(data.mapv(|x| F::from_f64(f64::from(x))))
}

/// Save a displacement field (role `disp`) in the raw container.
pub fn save_displacement<F: Real>(field: &DisplacementField<F>, path: &Path) -> Result<()> {
    let data = field.data.mapv(|x| x.as_f64() as f32);
    let spacing = vec![1.0; field.spatial_ndim()];
    raw::write_f32(path, &data, &spacing, Role::Disp)
}

pub fn load_displacement<F: Real>(path: &Path) -> Result<DisplacementField<F>> {
    let (data, _, role) = raw::read_f32(path)?;
    if role != Role::Disp {
        return Err(Error::format(
            "role",
            format!("expected role `disp`, found `{}`", role.as_str()),
        ));
    }
    DisplacementField::new(data.mapv(|x| F::from_f64(f64::from(x))))
}
