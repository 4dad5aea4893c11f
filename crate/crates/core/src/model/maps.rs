use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3, ArrayView3, Axis};

use super::{DecoderId, Pathology};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::study_io::{LabelMap, Mask};

/// Channels of the anatomy prior output.
pub mod mpc_class {
    pub const BACKGROUND: usize = 0;
    pub const MYO: usize = 1;
    pub const LV: usize = 2;
    pub const COUNT: usize = 3;
}

/// Channels of every pathology decoder output.
pub mod pathology_class {
    pub const BACKGROUND: usize = 0;
    pub const LV: usize = 1;
    pub const HEALTHY_MYO: usize = 2;
    pub const PATHOLOGY: usize = 3;
    pub const COUNT: usize = 4;
}

/// Softmax outputs for one slice, each `classes × rows × cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMaps {
    pub mpc: Array3<f64>,
    pub decoders: BTreeMap<DecoderId, Array3<f64>>,
}

pub(crate) fn sample_to_array(t: &Tensor, n: usize) -> Array3<f64> {
    let [_, c, h, w] = t.shape();
    Array3::from_shape_vec((c, h, w), t.sample(n).iter().map(|&v| v as f64).collect())
        .expect("sample length matches shape")
}

impl ProbabilityMaps {
    pub(crate) fn from_batch(
        mpc: &Tensor,
        decoders: &BTreeMap<DecoderId, &Tensor>,
        n: usize,
    ) -> Self {
        ProbabilityMaps {
            mpc: sample_to_array(mpc, n),
            decoders: decoders
                .iter()
                .map(|(id, t)| (*id, sample_to_array(t, n)))
                .collect(),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        let (_, h, w) = self.mpc.dim();
        (h, w)
    }

    pub fn scar_decoders(&self) -> impl Iterator<Item = (&DecoderId, &Array3<f64>)> {
        self.decoders
            .iter()
            .filter(|(d, _)| d.target == Pathology::Scar)
    }

    pub fn edema_decoders(&self) -> impl Iterator<Item = (&DecoderId, &Array3<f64>)> {
        self.decoders
            .iter()
            .filter(|(d, _)| d.target == Pathology::Edema)
    }

    /// Largest deviation of any per-pixel channel sum from 1, or of any
    /// entry below 0.
    pub fn simplex_error(&self) -> f64 {
        std::iter::once(&self.mpc)
            .chain(self.decoders.values())
            .map(|m| {
                let sums = m.sum_axis(Axis(0));
                let sum_err = sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
                let neg = m.iter().map(|v| (-v).max(0.0)).fold(0.0, f64::max);
                sum_err.max(neg)
            })
            .fold(0.0, f64::max)
    }

    /// Checks that every map shares the prior's spatial size and class count.
    pub fn validate(&self) -> Result<()> {
        if self.mpc.dim().0 != mpc_class::COUNT {
            return Err(Error::shape(format!(
                "prior map has {} channels",
                self.mpc.dim().0
            )));
        }
        let (_, h, w) = self.mpc.dim();
        for (id, m) in &self.decoders {
            if m.dim() != (pathology_class::COUNT, h, w) {
                return Err(Error::shape(format!(
                    "{id} map is {:?}, expected {:?}",
                    m.dim(),
                    (pathology_class::COUNT, h, w)
                )));
            }
        }
        Ok(())
    }
}

/// Prior map as `[myo, not-myo]`.
pub fn reformulate_mpc(psi: ArrayView3<f64>) -> Array3<f64> {
    let (_, h, w) = psi.dim();
    let mut out = Array3::zeros((2, h, w));
    out.slice_mut(s![0, .., ..])
        .assign(&psi.slice(s![mpc_class::MYO, .., ..]));
    let rest =
        &psi.slice(s![mpc_class::BACKGROUND, .., ..]) + &psi.slice(s![mpc_class::LV, .., ..]);
    out.slice_mut(s![1, .., ..]).assign(&rest);
    out
}

/// Pathology map as `[myo, not-myo]`, where myo is healthy plus pathological
/// myocardium.
pub fn reformulate_pathology(psi: ArrayView3<f64>) -> Array3<f64> {
    use pathology_class::*;
    let (_, h, w) = psi.dim();
    let mut out = Array3::zeros((2, h, w));
    let myo = &psi.slice(s![HEALTHY_MYO, .., ..]) + &psi.slice(s![PATHOLOGY, .., ..]);
    let rest = &psi.slice(s![BACKGROUND, .., ..]) + &psi.slice(s![LV, .., ..]);
    out.slice_mut(s![0, .., ..]).assign(&myo);
    out.slice_mut(s![1, .., ..]).assign(&rest);
    out
}

fn mean_pathology<'a>(
    maps: impl Iterator<Item = (&'a DecoderId, &'a Array3<f64>)>,
    what: &str,
) -> Result<Array2<f64>> {
    let mut acc: Option<Array2<f64>> = None;
    let mut n = 0usize;
    for (_, m) in maps {
        let p = m.slice(s![pathology_class::PATHOLOGY, .., ..]);
        match &mut acc {
            Some(a) => *a += &p,
            None => acc = Some(p.to_owned()),
        }
        n += 1;
    }
    acc.map(|a| a / n as f64)
        .ok_or_else(|| Error::ConfigMismatch(format!("no {what} decoder output to assemble")))
}

/// Scar and edema probabilities: the pathology channel averaged over each
/// decoder set.
pub fn pathology_probabilities(maps: &ProbabilityMaps) -> Result<(Array2<f64>, Array2<f64>)> {
    Ok((
        mean_pathology(maps.scar_decoders(), "scar")?,
        mean_pathology(maps.edema_decoders(), "edema")?,
    ))
}

/// Probabilities at or above this are pathology.
pub const PATHOLOGY_THRESHOLD: f64 = 0.5;

/// Final label map for one slice.
///
/// Anatomy comes from the prior's argmax (ties to the lower class). Scar and
/// edema are the averaged pathology probabilities thresholded at 0.5, a tie
/// counting as pathology. With `repair_nesting`, scar outside the edema mask
/// is added to edema; without it, such scar pixels are dropped.
pub fn assemble_prediction(maps: &ProbabilityMaps, repair_nesting: bool) -> Result<LabelMap> {
    maps.validate()?;
    let (scar_p, edema_p) = pathology_probabilities(maps)?;
    let mut scar: Mask = scar_p.mapv(|p| p >= PATHOLOGY_THRESHOLD);
    let mut edema: Mask = edema_p.mapv(|p| p >= PATHOLOGY_THRESHOLD);
    if repair_nesting {
        edema.zip_mut_with(&scar, |e, &s| *e |= s);
    } else {
        scar.zip_mut_with(&edema, |s, &e| *s &= e);
    }
    let argmax = maps.mpc.map_axis(Axis(0), |px| {
        let mut best = 0;
        for c in 1..px.len() {
            if px[c] > px[best] {
                best = c;
            }
        }
        best
    });
    let myo = argmax.mapv(|c| c == mpc_class::MYO);
    let lv = argmax.mapv(|c| c == mpc_class::LV);
    LabelMap::from_masks(&lv, &myo, &edema, &scar)
}
