//! Aligned multi-sequence slice stacks and their labels.
//!
//! A study holds 2D slices of up to five co-registered CMR sequences. The
//! label of a slice uses a single nested encoding so that scar ⊂ edema ⊂ myo
//! holds for every [`LabelMap`] by construction.

mod augment;
mod nifti_io;
mod preprocess;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, AffineTransform, AugmentConfig};
pub use nifti_io::{
    load_study, read_label_volume, save_study, write_label_volume, StudyManifest, LABEL_FILE,
    MANIFEST_FILE,
};
pub use preprocess::{
    crop_center, crop_or_pad, embed, preprocess_slice, preprocess_study, zscore_normalize,
    PreprocessConfig, ZSCORE_EPS,
};

/// 2D image plane, rows × cols.
pub type Image = Array2<f32>;
/// Binary pixel mask, rows × cols.
pub type Mask = Array2<bool>;

/// The five CMR sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SequenceId {
    C0,
    #[serde(rename = "LGE")]
    Lge,
    T2,
    T1m,
    T2starm,
}

impl SequenceId {
    pub const ALL: [SequenceId; 5] = [
        SequenceId::C0,
        SequenceId::Lge,
        SequenceId::T2,
        SequenceId::T1m,
        SequenceId::T2starm,
    ];

    /// The two mapping sequences, which are always present or absent together.
    pub const MAPPINGS: [SequenceId; 2] = [SequenceId::T1m, SequenceId::T2starm];

    pub fn as_str(self) -> &'static str {
        match self {
            SequenceId::C0 => "C0",
            SequenceId::Lge => "LGE",
            SequenceId::T2 => "T2",
            SequenceId::T1m => "T1m",
            SequenceId::T2starm => "T2starm",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.nii.gz", self.as_str())
    }
}

impl fmt::Display for SequenceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SequenceId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SequenceId::ALL
            .into_iter()
            .find(|id| id.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown sequence id '{s}'")))
    }
}

/// Set of sequences acquired for a study.
///
/// Always contains C0 and T2; the two mapping sequences come as a pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<SequenceId>", into = "Vec<SequenceId>")]
pub struct Availability(BTreeSet<SequenceId>);

impl Availability {
    pub fn new(ids: impl IntoIterator<Item = SequenceId>) -> Result<Self> {
        let set: BTreeSet<_> = ids.into_iter().collect();
        for required in [SequenceId::C0, SequenceId::T2] {
            if !set.contains(&required) {
                return Err(Error::MissingSequence(required));
            }
        }
        let n_maps = SequenceId::MAPPINGS
            .iter()
            .filter(|s| set.contains(s))
            .count();
        if n_maps == 1 {
            let missing = SequenceId::MAPPINGS
                .into_iter()
                .find(|s| !set.contains(s))
                .expect("one mapping is absent");
            return Err(Error::MissingSequence(missing));
        }
        Ok(Availability(set))
    }

    /// All five sequences.
    pub fn full() -> Self {
        Availability(SequenceId::ALL.into_iter().collect())
    }

    /// {C0, LGE, T2}.
    pub fn lge_triple() -> Self {
        Availability(
            [SequenceId::C0, SequenceId::Lge, SequenceId::T2]
                .into_iter()
                .collect(),
        )
    }

    /// {C0, T2, T1m, T2starm}.
    pub fn mapping_quad() -> Self {
        Availability(
            [
                SequenceId::C0,
                SequenceId::T2,
                SequenceId::T1m,
                SequenceId::T2starm,
            ]
            .into_iter()
            .collect(),
        )
    }

    pub fn contains(&self, id: SequenceId) -> bool {
        self.0.contains(&id)
    }

    pub fn has_mappings(&self) -> bool {
        self.contains(SequenceId::T1m)
    }

    pub fn iter(&self) -> impl Iterator<Item = SequenceId> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_superset_of(&self, other: &Availability) -> bool {
        self.0.is_superset(&other.0)
    }
}

impl TryFrom<Vec<SequenceId>> for Availability {
    type Error = Error;

    fn try_from(v: Vec<SequenceId>) -> Result<Self> {
        Availability::new(v)
    }
}

impl From<Availability> for Vec<SequenceId> {
    fn from(a: Availability) -> Self {
        a.0.into_iter().collect()
    }
}

impl fmt::Display for Availability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(SequenceId::as_str).collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

/// Per-pixel classes of the nested label encoding.
pub mod class {
    pub const BACKGROUND: u8 = 0;
    pub const LV_BLOOD_POOL: u8 = 1;
    pub const HEALTHY_MYO: u8 = 2;
    pub const EDEMA_ONLY: u8 = 3;
    pub const SCAR: u8 = 4;
}

/// Five-class label map: 0 background, 1 LV blood pool, 2 healthy myocardium,
/// 3 edema without scar, 4 scar.
///
/// Derived masks: myo = {2,3,4}, edema = {3,4}, scar = {4}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    classes: Array2<u8>,
}

impl LabelMap {
    pub fn new(classes: Array2<u8>) -> Result<Self> {
        if let Some(bad) = classes.iter().find(|&&c| c > class::SCAR) {
            return Err(Error::CorruptData(format!(
                "label value {bad} outside 0..=4"
            )));
        }
        Ok(LabelMap { classes })
    }

    pub fn background(rows: usize, cols: usize) -> Self {
        LabelMap {
            classes: Array2::zeros((rows, cols)),
        }
    }

    /// Builds a label from independent anatomical and pathology masks.
    ///
    /// Pathology wins over anatomy: a scar pixel is class 4 whatever the
    /// other masks say, an edema pixel is at least class 3. Myo and LV then
    /// fill the remaining pixels, myo taking precedence.
    pub fn from_masks(lv: &Mask, myo: &Mask, edema: &Mask, scar: &Mask) -> Result<Self> {
        let dim = lv.dim();
        if myo.dim() != dim || edema.dim() != dim || scar.dim() != dim {
            return Err(Error::shape(
                "masks passed to LabelMap::from_masks differ in shape",
            ));
        }
        let classes = Array2::from_shape_fn(dim, |ix| {
            if scar[ix] {
                class::SCAR
            } else if edema[ix] {
                class::EDEMA_ONLY
            } else if myo[ix] {
                class::HEALTHY_MYO
            } else if lv[ix] {
                class::LV_BLOOD_POOL
            } else {
                class::BACKGROUND
            }
        });
        Ok(LabelMap { classes })
    }

    pub fn classes(&self) -> &Array2<u8> {
        &self.classes
    }

    pub fn dim(&self) -> (usize, usize) {
        self.classes.dim()
    }

    pub fn myo_mask(&self) -> Mask {
        self.classes.mapv(|c| c >= class::HEALTHY_MYO)
    }

    pub fn edema_mask(&self) -> Mask {
        self.classes.mapv(|c| c >= class::EDEMA_ONLY)
    }

    pub fn scar_mask(&self) -> Mask {
        self.classes.mapv(|c| c == class::SCAR)
    }

    pub fn lv_mask(&self) -> Mask {
        self.classes.mapv(|c| c == class::LV_BLOOD_POOL)
    }

    pub fn count(&self, c: u8) -> usize {
        self.classes.iter().filter(|&&v| v == c).count()
    }
}

/// One 2D slice: an image per available sequence plus an optional label.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub images: BTreeMap<SequenceId, Image>,
    pub label: Option<LabelMap>,
}

impl Slice {
    pub fn dim(&self) -> Option<(usize, usize)> {
        self.images.values().next().map(|img| img.dim())
    }

    pub fn image(&self, id: SequenceId) -> Result<&Image> {
        self.images.get(&id).ok_or(Error::MissingSequence(id))
    }

    fn validate(&self, availability: &Availability) -> Result<()> {
        let keys: BTreeSet<_> = self.images.keys().copied().collect();
        if keys != availability.0 {
            return Err(Error::CorruptData(format!(
                "slice images {:?} do not match availability {availability}",
                keys
            )));
        }
        let dim = self.dim().unwrap_or((0, 0));
        for (id, img) in &self.images {
            if img.dim() != dim {
                return Err(Error::shape(format!(
                    "sequence {id} is {:?}, expected {:?}",
                    img.dim(),
                    dim
                )));
            }
            if img.iter().any(|v| !v.is_finite()) {
                return Err(Error::CorruptData(format!("non-finite intensity in {id}")));
            }
        }
        if let Some(label) = &self.label {
            if label.dim() != dim {
                return Err(Error::shape(format!(
                    "label is {:?}, images are {:?}",
                    label.dim(),
                    dim
                )));
            }
        }
        Ok(())
    }
}

/// One subject's aligned slice stack.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiSequenceStudy {
    pub study_id: String,
    pub slices: Vec<Slice>,
    pub availability: Availability,
    /// In-plane spacing as (row, col) in millimetres.
    pub pixel_spacing_mm: [f64; 2],
}

impl MultiSequenceStudy {
    /// Checks the shape, finiteness and availability invariants.
    pub fn validate(&self) -> Result<()> {
        if !(self
            .pixel_spacing_mm
            .iter()
            .all(|s| s.is_finite() && *s > 0.0))
        {
            return Err(Error::InvalidConfig(format!(
                "pixel spacing {:?} must be positive",
                self.pixel_spacing_mm
            )));
        }
        let mut dim = None;
        for slice in &self.slices {
            slice.validate(&self.availability)?;
            match dim {
                None => dim = slice.dim(),
                Some(d) if slice.dim() != Some(d) => {
                    return Err(Error::shape("slices of one study differ in size"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn is_labeled(&self) -> bool {
        self.slices.iter().all(|s| s.label.is_some())
    }

    /// Removes every label, turning the study into unlabeled training data.
    pub fn without_labels(mut self) -> Self {
        for s in &mut self.slices {
            s.label = None;
        }
        self
    }

    /// Restricts the study to a subset of its sequences.
    pub fn restricted_to(&self, availability: &Availability) -> Result<Self> {
        if !self.availability.is_superset_of(availability) {
            let missing = availability
                .iter()
                .find(|s| !self.availability.contains(*s))
                .expect("non-superset has a missing id");
            return Err(Error::MissingSequence(missing));
        }
        let slices = self
            .slices
            .iter()
            .map(|s| Slice {
                images: s
                    .images
                    .iter()
                    .filter(|(id, _)| availability.contains(**id))
                    .map(|(id, img)| (*id, img.clone()))
                    .collect(),
                label: s.label.clone(),
            })
            .collect();
        Ok(MultiSequenceStudy {
            study_id: self.study_id.clone(),
            slices,
            availability: availability.clone(),
            pixel_spacing_mm: self.pixel_spacing_mm,
        })
    }
}
