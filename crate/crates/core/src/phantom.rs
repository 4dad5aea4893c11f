//! Seeded synthetic multi-sequence studies with analytic ground truth.
//!
//! Geometry per slice: a disc of LV blood pool inside a myocardial annulus.
//! Edema is an angular sector of the annulus and scar the central part of
//! that sector, so scar ⊂ edema ⊂ myo with nonempty differences. Each
//! sequence maps the five tissue classes to mean intensities plus Gaussian
//! noise; LGE highlights scar, T2 highlights edema and the mapping
//! sequences carry the same information with weaker contrast and more noise.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::study_io::{class, Availability, LabelMap, MultiSequenceStudy, SequenceId, Slice};

/// Mean intensities of one sequence per tissue, and its noise level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceIntensity {
    pub background: f64,
    pub blood: f64,
    pub healthy: f64,
    /// Intensity of the pathology this sequence shows.
    pub pathology: f64,
    /// Which pathology is shown; the other one renders as healthy.
    pub shows: Shows,
    pub noise_std: f64,
}

/// Pathology made visible by a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shows {
    Nothing,
    Scar,
    Edema,
}

impl SequenceIntensity {
    fn mean(&self, label: u8) -> f64 {
        match label {
            class::BACKGROUND => self.background,
            class::LV_BLOOD_POOL => self.blood,
            class::SCAR if self.shows != Shows::Nothing => self.pathology,
            class::EDEMA_ONLY if self.shows == Shows::Edema => self.pathology,
            _ => self.healthy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    /// (rows, cols).
    pub image_size: (usize, usize),
    pub n_slices: usize,
    /// Nominal (inner, outer) myocardium radii.
    pub myo_radii_px: (f64, f64),
    /// Per-slice relative radius jitter.
    pub radius_jitter: f64,
    /// Per-study displacement of the ventricle centre, uniform in ±this.
    pub center_jitter_px: f64,
    /// Range the edema sector's angular extent is drawn from, in degrees.
    pub edema_arc_deg: (f64, f64),
    /// Fraction of the edema sector occupied by scar.
    pub scar_fraction: f64,
    pub intensity: BTreeMap<SequenceId, SequenceIntensity>,
    pub pixel_spacing_mm: [f64; 2],
    pub rng_seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        let seq = |background, blood, healthy, pathology, shows, noise_std| SequenceIntensity {
            background,
            blood,
            healthy,
            pathology,
            shows,
            noise_std,
        };
        let intensity = BTreeMap::from([
            (
                SequenceId::C0,
                seq(0.1, 1.0, 0.35, 0.35, Shows::Nothing, 0.05),
            ),
            (SequenceId::Lge, seq(0.1, 0.6, 0.15, 0.9, Shows::Scar, 0.08)),
            (
                SequenceId::T2,
                seq(0.1, 0.5, 0.25, 0.65, Shows::Edema, 0.08),
            ),
            (SequenceId::T1m, seq(0.2, 0.7, 0.4, 0.55, Shows::Scar, 0.15)),
            (
                SequenceId::T2starm,
                seq(0.2, 0.6, 0.4, 0.52, Shows::Edema, 0.15),
            ),
        ]);
        PhantomParams {
            image_size: (64, 64),
            n_slices: 3,
            myo_radii_px: (10.0, 17.0),
            radius_jitter: 0.1,
            center_jitter_px: 3.0,
            edema_arc_deg: (90.0, 150.0),
            scar_fraction: 0.5,
            intensity,
            pixel_spacing_mm: [1.0, 1.0],
            rng_seed: 0,
        }
    }
}

impl PhantomParams {
    /// Default tissue model with radii scaled to a square image of `size`.
    pub fn for_size(size: usize) -> Self {
        let s = size as f64 / 64.0;
        PhantomParams {
            image_size: (size, size),
            myo_radii_px: (10.0 * s, 17.0 * s),
            center_jitter_px: 3.0 * s,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let (inner, outer) = self.myo_radii_px;
        if !(inner > 0.0 && inner < outer) {
            return bad(format!(
                "myocardium radii {:?} need 0 < inner < outer",
                self.myo_radii_px
            ));
        }
        if !(0.0..1.0).contains(&self.radius_jitter) || self.center_jitter_px < 0.0 {
            return bad("jitter must be non-negative and below 1 for radii".into());
        }
        let (h, w) = self.image_size;
        let reach = outer * (1.0 + self.radius_jitter) + self.center_jitter_px + 1.0;
        if 2.0 * reach > h.min(w) as f64 {
            return bad(format!(
                "ventricle of radius {reach:.1} does not fit in {h}x{w}"
            ));
        }
        if self.n_slices == 0 {
            return bad("a phantom needs at least one slice".into());
        }
        let (a0, a1) = self.edema_arc_deg;
        if !(a0 > 0.0 && a0 <= a1 && a1 < 360.0) {
            return bad(format!(
                "edema arc range {:?} must lie in (0, 360)",
                self.edema_arc_deg
            ));
        }
        if !(self.scar_fraction > 0.0 && self.scar_fraction < 1.0) {
            return bad(format!(
                "scar fraction {} must lie in (0, 1)",
                self.scar_fraction
            ));
        }
        for id in SequenceId::ALL {
            let Some(i) = self.intensity.get(&id) else {
                return bad(format!("no intensity model for {id}"));
            };
            if i.noise_std.is_nan() || i.noise_std < 0.0 {
                return bad(format!("noise of {id} must be non-negative"));
            }
        }
        if !self.pixel_spacing_mm.iter().all(|s| *s > 0.0) {
            return bad("pixel spacing must be positive".into());
        }
        Ok(())
    }
}

/// Label map of one slice.
fn draw_label(
    params: &PhantomParams,
    center: (f64, f64),
    rng: &mut ChaCha8Rng,
    sector: (f64, f64),
) -> LabelMap {
    let j = params.radius_jitter;
    let inner = params.myo_radii_px.0 * (1.0 + rng.random_range(-j..=j));
    let outer = params.myo_radii_px.1 * (1.0 + rng.random_range(-j..=j));
    let outer = outer.max(inner + 2.0);
    let (start, arc) = sector;
    let scar_arc = arc * params.scar_fraction;
    let scar_start = start + (arc - scar_arc) / 2.0;
    let in_arc = |theta: f64, from: f64, extent: f64| (theta - from).rem_euclid(TAU) < extent;
    let classes = Array2::from_shape_fn(params.image_size, |(r, c)| {
        let dy = r as f64 + 0.5 - center.0;
        let dx = c as f64 + 0.5 - center.1;
        let d = dy.hypot(dx);
        if d < inner {
            class::LV_BLOOD_POOL
        } else if d < outer {
            let theta = dy.atan2(dx);
            if in_arc(theta, scar_start, scar_arc) {
                class::SCAR
            } else if in_arc(theta, start, arc) {
                class::EDEMA_ONLY
            } else {
                class::HEALTHY_MYO
            }
        } else {
            class::BACKGROUND
        }
    });
    LabelMap::new(classes).expect("phantom classes are valid")
}

/// One study with every sequence in `availability`. A pure function of
/// `params` (including its seed): the geometry does not depend on which
/// sequences are requested.
pub fn generate_phantom_study(
    params: &PhantomParams,
    availability: &Availability,
    study_id: &str,
) -> Result<MultiSequenceStudy> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let (h, w) = params.image_size;
    let cj = params.center_jitter_px;
    let jitter = |rng: &mut ChaCha8Rng| {
        if cj > 0.0 {
            rng.random_range(-cj..=cj)
        } else {
            0.0
        }
    };
    let center = (
        h as f64 / 2.0 + jitter(&mut rng),
        w as f64 / 2.0 + jitter(&mut rng),
    );
    let start = rng.random_range(0.0..TAU);
    let (a0, a1) = params.edema_arc_deg;
    let mut slices = Vec::with_capacity(params.n_slices);
    for _ in 0..params.n_slices {
        let arc = rng.random_range(a0..=a1).to_radians();
        let slice_start = start + rng.random_range(-10f64..=10.0).to_radians();
        let label = draw_label(params, center, &mut rng, (slice_start, arc));
        let mut images = BTreeMap::new();
        // All five sequences are drawn so the random stream is independent of availability.
        for id in SequenceId::ALL {
            let model = &params.intensity[&id];
            let noise = Normal::new(0.0, model.noise_std).expect("validated noise");
            let img = label
                .classes()
                .mapv(|l| (model.mean(l) + noise.sample(&mut rng)) as f32);
            if availability.contains(id) {
                images.insert(id, img);
            }
        }
        slices.push(Slice {
            images,
            label: Some(label),
        });
    }
    let study = MultiSequenceStudy {
        study_id: study_id.to_string(),
        slices,
        availability: availability.clone(),
        pixel_spacing_mm: params.pixel_spacing_mm,
    };
    study.validate()?;
    Ok(study)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Seed of study `index` in `split`: the first 8 bytes of a SHA-256 over
/// the dataset seed, split name and index.
pub fn study_seed(dataset_seed: u64, split: Split, index: usize) -> u64 {
    let digest = Sha256::digest(format!("{dataset_seed}:{}:{index}", split.as_str()));
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Provenance of one generated study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub study_id: String,
    pub split: Split,
    pub seed: u64,
    pub availability: Vec<SequenceId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomDataset {
    pub train: Vec<MultiSequenceStudy>,
    pub val: Vec<MultiSequenceStudy>,
    pub test: Vec<MultiSequenceStudy>,
    pub records: Vec<StudyRecord>,
}

impl PhantomDataset {
    pub fn split(&self, split: Split) -> &[MultiSequenceStudy] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Hex SHA-256 over every study's id, availability, images and labels.
    pub fn hash(&self) -> String {
        dataset_hash(self.train.iter().chain(&self.val).chain(&self.test))
    }
}

/// Hex SHA-256 over the content of a sequence of studies.
pub fn dataset_hash<'a>(studies: impl IntoIterator<Item = &'a MultiSequenceStudy>) -> String {
    let mut h = Sha256::new();
    for s in studies {
        h.update(s.study_id.as_bytes());
        for id in s.availability.iter() {
            h.update(id.as_str().as_bytes());
        }
        for sp in s.pixel_spacing_mm {
            h.update(sp.to_le_bytes());
        }
        for slice in &s.slices {
            for (id, img) in &slice.images {
                h.update(id.as_str().as_bytes());
                for v in img.iter() {
                    h.update(v.to_le_bytes());
                }
            }
            match &slice.label {
                Some(l) => h.update(l.classes().iter().copied().collect::<Vec<u8>>()),
                None => h.update([0xff]),
            }
        }
    }
    hex::encode(h.finalize())
}

/// Train/val/test phantoms. `train_mix` lists (availability, count) pairs
/// whose counts sum to `n_train`; empty means all five sequences. Val and
/// test studies always have all five sequences.
pub fn generate_dataset(
    n_train: usize,
    n_val: usize,
    n_test: usize,
    params: &PhantomParams,
    train_mix: &[(Availability, usize)],
) -> Result<PhantomDataset> {
    params.validate()?;
    let full = [(Availability::full(), n_train)];
    let mix = if train_mix.is_empty() {
        &full[..]
    } else {
        train_mix
    };
    let mixed: usize = mix.iter().map(|(_, n)| n).sum();
    if mixed != n_train {
        return Err(Error::InvalidConfig(format!(
            "availability mix covers {mixed} studies, training split has {n_train}"
        )));
    }
    let train_avail = mix
        .iter()
        .flat_map(|(a, n)| std::iter::repeat_n(a.clone(), *n));
    let plan = train_avail
        .enumerate()
        .map(|(i, a)| (Split::Train, i, a))
        .chain((0..n_val).map(|i| (Split::Val, i, Availability::full())))
        .chain((0..n_test).map(|i| (Split::Test, i, Availability::full())));
    let mut ds = PhantomDataset {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        records: Vec::new(),
    };
    for (split, i, availability) in plan {
        let seed = study_seed(params.rng_seed, split, i);
        let study_id = format!("{}_{i:03}", split.as_str());
        let p = PhantomParams {
            rng_seed: seed,
            ..params.clone()
        };
        let study = generate_phantom_study(&p, &availability, &study_id)?;
        ds.records.push(StudyRecord {
            study_id,
            split,
            seed,
            availability: availability.iter().collect(),
        });
        match split {
            Split::Train => ds.train.push(study),
            Split::Val => ds.val.push(study),
            Split::Test => ds.test.push(study),
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nesting_is_strict() {
        for seed in 0..20 {
            let p = PhantomParams {
                rng_seed: seed,
                ..Default::default()
            };
            let s = generate_phantom_study(&p, &Availability::full(), "x").unwrap();
            for sl in &s.slices {
                let l = sl.label.as_ref().unwrap();
                let scar = l.count(class::SCAR);
                let edema = scar + l.count(class::EDEMA_ONLY);
                let myo = edema + l.count(class::HEALTHY_MYO);
                assert!(
                    0 < scar && scar < edema && edema < myo,
                    "seed {seed}: {scar} {edema} {myo}"
                );
            }
        }
    }

    #[test]
    fn geometry_is_independent_of_availability() {
        let p = PhantomParams::default();
        let full = generate_phantom_study(&p, &Availability::full(), "a").unwrap();
        let quad = generate_phantom_study(&p, &Availability::mapping_quad(), "a").unwrap();
        assert_eq!(
            full.restricted_to(&Availability::mapping_quad()).unwrap(),
            quad
        );
    }

    #[test]
    fn invalid_radii() {
        let p = PhantomParams {
            myo_radii_px: (12.0, 8.0),
            ..Default::default()
        };
        assert!(matches!(
            generate_phantom_study(&p, &Availability::full(), "x"),
            Err(Error::InvalidConfig(_))
        ));
        let p = PhantomParams {
            myo_radii_px: (10.0, 40.0),
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn mix_counts_must_match() {
        let p = PhantomParams::default();
        let mix = [(Availability::full(), 2), (Availability::lge_triple(), 1)];
        assert!(generate_dataset(4, 0, 0, &p, &mix).is_err());
        let ds = generate_dataset(3, 1, 1, &p, &mix).unwrap();
        assert_eq!(ds.train[2].availability, Availability::lge_triple());
        assert_eq!(ds.test[0].availability, Availability::full());
    }
}
