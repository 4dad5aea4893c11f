//! On-disk study layout.
//!
//! ```text
//! <root>/<study_id>/manifest.json
//! <root>/<study_id>/{C0,LGE,T2,T1m,T2starm}.nii.gz   (one per available sequence)
//! <root>/<study_id>/label.nii.gz                      (optional)
//! ```
//!
//! Volumes are `rows × cols × slices`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Axis, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use super::{Availability, LabelMap, MultiSequenceStudy, SequenceId, Slice};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABEL_FILE: &str = "label.nii.gz";

/// Sidecar describing one study directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyManifest {
    pub availability: Vec<SequenceId>,
    /// (row, col) spacing in millimetres.
    pub spacing_mm: [f64; 2],
    /// Label file name relative to the study directory, or null.
    pub label: Option<String>,
}

fn read_volume(path: &Path) -> Result<Array3<f32>> {
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| nifti_error(path, e))?;
    let data = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|source| Error::Nifti {
            path: path.to_path_buf(),
            source,
        })?;
    let data = match data.ndim() {
        2 => data.insert_axis(Axis(2)),
        _ => data,
    };
    data.into_dimensionality::<Ix3>()
        .map_err(|_| Error::CorruptData(format!("{} is not a 2D/3D volume", path.display())))
}

fn spacing_header(spacing: [f64; 2]) -> NiftiHeader {
    let mut header = NiftiHeader::default();
    header.pixdim[1] = spacing[0] as f32;
    header.pixdim[2] = spacing[1] as f32;
    header
}

fn nifti_error(path: &Path, source: nifti::NiftiError) -> Error {
    match source {
        nifti::NiftiError::Io(e) => Error::io(path, e),
        source => Error::Nifti {
            path: path.to_path_buf(),
            source,
        },
    }
}

fn write_image_volume(path: &Path, vol: &Array3<f32>, spacing: [f64; 2]) -> Result<()> {
    let header = spacing_header(spacing);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(vol)
        .map_err(|e| nifti_error(path, e))
}

fn write_class_volume(path: &Path, vol: &Array3<u8>, spacing: [f64; 2]) -> Result<()> {
    let header = spacing_header(spacing);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(vol)
        .map_err(|e| nifti_error(path, e))
}

/// Loads `<root>/<study_id>` into per-slice form.
pub fn load_study(root: impl AsRef<Path>, study_id: &str) -> Result<MultiSequenceStudy> {
    let dir = root.as_ref().join(study_id);
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: StudyManifest = serde_json::from_str(&text)?;
    let availability = Availability::new(manifest.availability.iter().copied())?;

    let mut volumes = Vec::with_capacity(availability.len());
    for id in availability.iter() {
        let path = dir.join(id.file_name());
        if !path.exists() {
            return Err(Error::MissingSequence(id));
        }
        let vol = read_volume(&path)?;
        if vol.iter().any(|v| !v.is_finite()) {
            return Err(Error::CorruptData(format!(
                "non-finite voxels in {}",
                path.display()
            )));
        }
        volumes.push((id, vol));
    }

    let shape = volumes[0].1.dim();
    for (id, vol) in &volumes {
        if vol.dim() != shape {
            return Err(Error::shape(format!(
                "{id} volume is {:?} but {} is {:?}",
                vol.dim(),
                volumes[0].0,
                shape
            )));
        }
    }

    let label_vol = match &manifest.label {
        Some(name) => {
            let path = dir.join(name);
            let vol = read_volume(&path)?;
            if vol.dim() != shape {
                return Err(Error::shape(format!(
                    "label volume is {:?}, images are {:?}",
                    vol.dim(),
                    shape
                )));
            }
            Some(vol)
        }
        None => None,
    };

    let n_slices = shape.2;
    let mut slices = Vec::with_capacity(n_slices);
    for z in 0..n_slices {
        let images = volumes
            .iter()
            .map(|(id, vol)| (*id, vol.slice(s![.., .., z]).to_owned()))
            .collect();
        let label = match &label_vol {
            Some(vol) => Some(label_from_plane(vol.slice(s![.., .., z]).to_owned())?),
            None => None,
        };
        slices.push(Slice { images, label });
    }

    let study = MultiSequenceStudy {
        study_id: study_id.to_string(),
        slices,
        availability,
        pixel_spacing_mm: manifest.spacing_mm,
    };
    study.validate()?;
    Ok(study)
}

/// Reads a `rows × cols × slices` class volume written by
/// [`write_label_volume`].
pub fn read_label_volume(path: impl AsRef<Path>) -> Result<Vec<LabelMap>> {
    let path = path.as_ref();
    let vol = read_volume(path)?;
    (0..vol.dim().2)
        .map(|z| label_from_plane(vol.slice(s![.., .., z]).to_owned()))
        .collect()
}

fn label_from_plane(plane: Array2<f32>) -> Result<LabelMap> {
    if let Some(bad) = plane
        .iter()
        .find(|v| !v.is_finite() || v.fract() != 0.0 || **v < 0.0 || **v > 4.0)
    {
        return Err(Error::CorruptData(format!(
            "label voxel {bad} is not a class id"
        )));
    }
    LabelMap::new(plane.mapv(|v| v as u8))
}

/// Writes a study in the directory layout read by [`load_study`].
pub fn save_study(root: impl AsRef<Path>, study: &MultiSequenceStudy) -> Result<PathBuf> {
    study.validate()?;
    let dir = root.as_ref().join(&study.study_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (rows, cols) = study
        .slices
        .first()
        .and_then(Slice::dim)
        .ok_or_else(|| Error::InvalidConfig("cannot save a study without slices".into()))?;
    let n = study.slices.len();

    for id in study.availability.iter() {
        let mut vol = Array3::<f32>::zeros((rows, cols, n));
        for (z, slice) in study.slices.iter().enumerate() {
            vol.slice_mut(s![.., .., z]).assign(slice.image(id)?);
        }
        write_image_volume(&dir.join(id.file_name()), &vol, study.pixel_spacing_mm)?;
    }

    let label = if study.is_labeled() && !study.slices.is_empty() {
        let labels: Vec<_> = study
            .slices
            .iter()
            .filter_map(|s| s.label.as_ref())
            .collect();
        write_label_volume(&dir.join(LABEL_FILE), &labels, study.pixel_spacing_mm)?;
        Some(LABEL_FILE.to_string())
    } else {
        None
    };

    let manifest = StudyManifest {
        availability: study.availability.iter().collect(),
        spacing_mm: study.pixel_spacing_mm,
        label,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(dir)
}

/// Writes a stack of label maps as a `rows × cols × slices` uint8 volume.
pub fn write_label_volume(path: &Path, labels: &[&LabelMap], spacing: [f64; 2]) -> Result<()> {
    let (rows, cols) = labels
        .first()
        .map(|l| l.dim())
        .ok_or_else(|| Error::InvalidConfig("empty label stack".into()))?;
    let mut vol = Array3::<u8>::zeros((rows, cols, labels.len()));
    for (z, label) in labels.iter().enumerate() {
        if label.dim() != (rows, cols) {
            return Err(Error::shape("label slices differ in size"));
        }
        vol.slice_mut(s![.., .., z]).assign(label.classes());
    }
    write_class_volume(path, &vol, spacing)
}
