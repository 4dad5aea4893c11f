use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{AugmentConfig, Image, LabelMap, MultiSequenceStudy, Slice};
use crate::error::{Error, Result};

/// Population standard deviations below this produce an all-zero output.
pub const ZSCORE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Output (rows, cols) of every slice.
    pub crop_size: (usize, usize),
    pub augmentation: AugmentConfig,
    pub rng_seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            crop_size: (192, 192),
            augmentation: AugmentConfig::default(),
            rng_seed: 0,
        }
    }
}

impl PreprocessConfig {
    pub fn desk_scale() -> Self {
        PreprocessConfig {
            crop_size: (64, 64),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size.0 == 0 || self.crop_size.1 == 0 {
            return Err(Error::InvalidConfig(format!(
                "crop size {:?} must be positive",
                self.crop_size
            )));
        }
        self.augmentation.validate()
    }
}

/// Zero-mean, unit population-std rescaling of one slice.
pub fn zscore_normalize(image: &Image) -> Image {
    let n = image.len().max(1) as f64;
    let mean = image.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = image
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if std < ZSCORE_EPS {
        return Image::zeros(image.dim());
    }
    image.mapv(|v| ((v as f64 - mean) / std) as f32)
}

fn window_origin(size: (usize, usize), center: (usize, usize)) -> (isize, isize) {
    (
        center.0 as isize - (size.0 / 2) as isize,
        center.1 as isize - (size.1 / 2) as isize,
    )
}

fn check_window(dim: (usize, usize), size: (usize, usize), center: (usize, usize)) -> Result<()> {
    if size.0 == 0 || size.1 == 0 {
        return Err(Error::InvalidConfig(format!(
            "crop size {size:?} must be positive"
        )));
    }
    if center.0 >= dim.0 || center.1 >= dim.1 {
        return Err(Error::InvalidConfig(format!(
            "crop center {center:?} outside image of size {dim:?}"
        )));
    }
    Ok(())
}

/// Extracts a `size` window centred on `center`, filling out-of-image pixels
/// with `fill`.
///
/// The window starts at `center - size / 2` on each axis, so an image smaller
/// than the window is embedded symmetrically when centred.
pub fn crop_or_pad<T: Clone>(
    arr: &Array2<T>,
    size: (usize, usize),
    center: (usize, usize),
    fill: T,
) -> Result<Array2<T>> {
    check_window(arr.dim(), size, center)?;
    let (r0, c0) = window_origin(size, center);
    let (rows, cols) = (arr.nrows() as isize, arr.ncols() as isize);
    Ok(Array2::from_shape_fn(size, |(i, j)| {
        let (r, c) = (r0 + i as isize, c0 + j as isize);
        if r >= 0 && r < rows && c >= 0 && c < cols {
            arr[(r as usize, c as usize)].clone()
        } else {
            fill.clone()
        }
    }))
}

/// Inverse of [`crop_or_pad`]: places `window` back into an `original` sized
/// canvas filled with `fill`.
pub fn embed<T: Clone>(
    window: &Array2<T>,
    original: (usize, usize),
    center: (usize, usize),
    fill: T,
) -> Result<Array2<T>> {
    check_window(original, window.dim(), center)?;
    let (r0, c0) = window_origin(window.dim(), center);
    let mut out = Array2::from_elem(original, fill);
    for ((i, j), v) in window.indexed_iter() {
        let (r, c) = (r0 + i as isize, c0 + j as isize);
        if r >= 0 && (r as usize) < original.0 && c >= 0 && (c as usize) < original.1 {
            out[(r as usize, c as usize)] = v.clone();
        }
    }
    Ok(out)
}

/// Crop centre: rounded centroid of the myocardium when a labelled myocardium
/// exists, the image centre otherwise.
pub fn crop_center(slice: &Slice) -> (usize, usize) {
    let (rows, cols) = slice.dim().unwrap_or((0, 0));
    let image_center = (rows / 2, cols / 2);
    let Some(label) = &slice.label else {
        return image_center;
    };
    let (mut sr, mut sc, mut n) = (0usize, 0usize, 0usize);
    for ((r, c), &m) in label.myo_mask().indexed_iter() {
        if m {
            sr += r;
            sc += c;
            n += 1;
        }
    }
    if n == 0 {
        return image_center;
    }
    let round = |s: usize| (s as f64 / n as f64).round() as usize;
    (round(sr), round(sc))
}

/// Normalizes each sequence and crops image and label with one shared window.
///
/// Returns the cropped slice and the centre used, which [`embed`] needs to
/// map predictions back to the original geometry.
pub fn preprocess_slice(
    slice: &Slice,
    crop_size: (usize, usize),
) -> Result<(Slice, (usize, usize))> {
    let center = crop_center(slice);
    let images = slice
        .images
        .iter()
        .map(|(id, img)| {
            Ok((
                *id,
                crop_or_pad(&zscore_normalize(img), crop_size, center, 0.0)?,
            ))
        })
        .collect::<Result<_>>()?;
    let label = match &slice.label {
        Some(l) => Some(LabelMap::new(crop_or_pad(
            l.classes(),
            crop_size,
            center,
            0u8,
        )?)?),
        None => None,
    };
    Ok((Slice { images, label }, center))
}

/// Applies [`preprocess_slice`] to every slice of a study.
pub fn preprocess_study(
    study: &MultiSequenceStudy,
    config: &PreprocessConfig,
) -> Result<(MultiSequenceStudy, Vec<(usize, usize)>)> {
    config.validate()?;
    let mut centers = Vec::with_capacity(study.slices.len());
    let mut slices = Vec::with_capacity(study.slices.len());
    for s in &study.slices {
        let (cropped, center) = preprocess_slice(s, config.crop_size)?;
        slices.push(cropped);
        centers.push(center);
    }
    Ok((
        MultiSequenceStudy {
            study_id: study.study_id.clone(),
            slices,
            availability: study.availability.clone(),
            pixel_spacing_mm: study.pixel_spacing_mm,
        },
        centers,
    ))
}
