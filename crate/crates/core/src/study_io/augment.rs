//! Random rotation, flips and crop jitter applied identically to every
//! sequence and the label of a slice.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Image, LabelMap, Slice};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Rotation angle is drawn uniformly from ±this many degrees.
    pub max_rotation_deg: f64,
    /// Probability of mirroring columns (left/right).
    pub hflip_p: f64,
    /// Probability of mirroring rows (up/down).
    pub vflip_p: f64,
    /// Translation of the crop window, drawn uniformly in ±this many pixels.
    pub crop_jitter_px: u32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            max_rotation_deg: 15.0,
            hflip_p: 0.5,
            vflip_p: 0.5,
            crop_jitter_px: 8,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !p_ok(self.hflip_p) || !p_ok(self.vflip_p) {
            return Err(Error::InvalidConfig(
                "flip probabilities must lie in [0, 1]".into(),
            ));
        }
        if !self.max_rotation_deg.is_finite() || self.max_rotation_deg < 0.0 {
            return Err(Error::InvalidConfig(
                "rotation range must be a finite non-negative angle".into(),
            ));
        }
        Ok(())
    }
}

/// One sampled geometric transform: flip, then rotate about the image
/// centre, then translate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineTransform {
    pub rotation_deg: f64,
    pub flip_rows: bool,
    pub flip_cols: bool,
    /// (row, col) translation in pixels.
    pub shift: (i32, i32),
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform {
        rotation_deg: 0.0,
        flip_rows: false,
        flip_cols: false,
        shift: (0, 0),
    };

    pub fn sample(config: &AugmentConfig, rng: &mut impl Rng) -> Self {
        if !config.enabled {
            return Self::IDENTITY;
        }
        // Draw every component unconditionally so the stream length is fixed.
        let u: f64 = rng.random();
        let rotation_deg = (2.0 * u - 1.0) * config.max_rotation_deg;
        let flip_cols = rng.random::<f64>() < config.hflip_p;
        let flip_rows = rng.random::<f64>() < config.vflip_p;
        let j = config.crop_jitter_px as i32;
        let shift = (rng.random_range(-j..=j), rng.random_range(-j..=j));
        AffineTransform {
            rotation_deg,
            flip_rows,
            flip_cols,
            shift,
        }
    }

    /// Maps an output pixel back to its (fractional) source coordinate.
    fn source_of(&self, r: usize, c: usize, dim: (usize, usize)) -> (f64, f64) {
        let cr = (dim.0 as f64 - 1.0) / 2.0;
        let cc = (dim.1 as f64 - 1.0) / 2.0;
        let y = r as f64 - cr - self.shift.0 as f64;
        let x = c as f64 - cc - self.shift.1 as f64;
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        // inverse rotation
        let mut ys = cos * y - sin * x;
        let mut xs = sin * y + cos * x;
        if self.flip_rows {
            ys = -ys;
        }
        if self.flip_cols {
            xs = -xs;
        }
        (ys + cr, xs + cc)
    }

    /// Bilinear resampling; samples outside the image read as 0.
    pub fn apply_image(&self, img: &Image) -> Image {
        let dim = img.dim();
        let (rows, cols) = (dim.0 as isize, dim.1 as isize);
        let at = |r: isize, c: isize| -> f64 {
            if r >= 0 && r < rows && c >= 0 && c < cols {
                img[(r as usize, c as usize)] as f64
            } else {
                0.0
            }
        };
        Image::from_shape_fn(dim, |(r, c)| {
            let (y, x) = self.source_of(r, c, dim);
            let (y0, x0) = (y.floor(), x.floor());
            let (fy, fx) = (y - y0, x - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let v = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + at(y0, x0 + 1) * (1.0 - fy) * fx
                + at(y0 + 1, x0) * fy * (1.0 - fx)
                + at(y0 + 1, x0 + 1) * fy * fx;
            v as f32
        })
    }

    /// Nearest-neighbour resampling; samples outside the image are background.
    pub fn apply_label(&self, label: &LabelMap) -> LabelMap {
        let classes = label.classes();
        let dim = classes.dim();
        let out = ndarray::Array2::from_shape_fn(dim, |(r, c)| {
            let (y, x) = self.source_of(r, c, dim);
            let (y, x) = (y.round(), x.round());
            if y >= 0.0 && x >= 0.0 && (y as usize) < dim.0 && (x as usize) < dim.1 {
                classes[(y as usize, x as usize)]
            } else {
                0
            }
        });
        LabelMap::new(out).expect("resampling only copies valid classes")
    }

    pub fn apply(&self, slice: &Slice) -> Slice {
        Slice {
            images: slice
                .images
                .iter()
                .map(|(id, img)| (*id, self.apply_image(img)))
                .collect(),
            label: slice.label.as_ref().map(|l| self.apply_label(l)),
        }
    }
}

/// Samples one transform from `rng` and applies it to the whole slice.
pub fn augment(slice: &Slice, config: &AugmentConfig, rng: &mut impl Rng) -> Slice {
    let t = AffineTransform::sample(config, rng);
    if t == AffineTransform::IDENTITY {
        return slice.clone();
    }
    t.apply(slice)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::study_io::SequenceId;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ring_slice() -> Slice {
        let label = Array2::from_shape_fn((32, 32), |(r, c)| {
            let d = ((r as f64 - 15.5).powi(2) + (c as f64 - 14.0).powi(2)).sqrt();
            let ang = (r as f64 - 15.5).atan2(c as f64 - 14.0);
            match d {
                d if d < 5.0 => 1,
                d if d < 9.0 && ang > 0.0 && ang < 0.8 => 4,
                d if d < 9.0 && ang > -0.3 && ang < 1.4 => 3,
                d if d < 9.0 => 2,
                _ => 0,
            }
        });
        let img = label.mapv(|c| c as f32 * 0.7 + 0.1);
        Slice {
            images: [(SequenceId::C0, img.clone()), (SequenceId::T2, img)].into(),
            label: Some(LabelMap::new(label).unwrap()),
        }
    }

    fn nested(l: &LabelMap) -> bool {
        let (m, e, s) = (l.myo_mask(), l.edema_mask(), l.scar_mask());
        ndarray::Zip::from(&m)
            .and(&e)
            .and(&s)
            .all(|&m, &e, &s| (!s || e) && (!e || m))
    }

    #[test]
    fn same_seed_same_output() {
        let cfg = AugmentConfig {
            max_rotation_deg: 0.0,
            crop_jitter_px: 0,
            ..Default::default()
        };
        let slice = ring_slice();
        let a = augment(&slice, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let b = augment(&slice, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn quarter_turn_permutes_pixels() {
        let slice = ring_slice();
        let t = AffineTransform {
            rotation_deg: 90.0,
            ..AffineTransform::IDENTITY
        };
        let before = slice.label.as_ref().unwrap();
        let after = t.apply_label(before);
        for c in 0..=4 {
            assert_eq!(before.count(c), after.count(c), "class {c}");
        }
        assert_ne!(before, &after);
    }

    #[test]
    fn small_rotation_keeps_nesting() {
        let slice = ring_slice();
        let t = AffineTransform {
            rotation_deg: 10.0,
            flip_cols: true,
            shift: (2, -3),
            ..AffineTransform::IDENTITY
        };
        let out = t.apply(&slice);
        assert!(nested(out.label.as_ref().unwrap()));
        assert_eq!(out.images[&SequenceId::C0].dim(), (32, 32));
    }

    #[test]
    fn flips_are_involutions() {
        let slice = ring_slice();
        let t = AffineTransform {
            flip_rows: true,
            flip_cols: true,
            ..AffineTransform::IDENTITY
        };
        assert_eq!(t.apply(&t.apply(&slice)), slice);
    }

    #[test]
    fn disabled_config_is_identity() {
        let slice = ring_slice();
        let out = augment(
            &slice,
            &AugmentConfig::disabled(),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert_eq!(out, slice);
    }
}
