use std::path::Path;

use image::{Rgb, RgbImage};
use myops::study_io::{class, Image, LabelMap};

use crate::CliError;

pub const SCAR_RGB: [u8; 3] = [139, 0, 0];
pub const EDEMA_RGB: [u8; 3] = [0, 100, 0];
const ALPHA: f32 = 0.6;

/// Grey-scale rendering of `image` (min-max stretched) with scar tinted
/// dark red and edema without scar dark green.
pub fn render(image: &Image, label: &LabelMap) -> RgbImage {
    let (h, w) = image.dim();
    let (lo, hi) = image
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = if hi > lo { hi - lo } else { 1.0 };
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        let g = (image[(r, c)] - lo) / range * 255.0;
        let tint = match label.classes()[(r, c)] {
            class::SCAR => Some(SCAR_RGB),
            class::EDEMA_ONLY => Some(EDEMA_RGB),
            _ => None,
        };
        let px = match tint {
            Some(t) => t.map(|v| (ALPHA * v as f32 + (1.0 - ALPHA) * g).round() as u8),
            None => [g.round() as u8; 3],
        };
        Rgb(px)
    })
}

pub fn save(image: &Image, label: &LabelMap, path: &Path) -> Result<(), CliError> {
    render(image, label)
        .save(path)
        .map_err(|source| CliError::Image {
            path: path.to_path_buf(),
            source,
        })
}
