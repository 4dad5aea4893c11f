use super::{assemble_prediction, MyoPsNet, NetInput, ProbabilityMaps};
use crate::error::Result;
use crate::study_io::{embed, preprocess_slice, LabelMap, MultiSequenceStudy};

/// Predicts every slice of a study in its original geometry.
///
/// Labels are ignored: slices are normalized and cropped around the image
/// centre, predicted as one batch, and pasted back with background fill.
pub fn predict_study(
    net: &MyoPsNet,
    study: &MultiSequenceStudy,
    crop_size: (usize, usize),
    repair_nesting: bool,
) -> Result<Vec<LabelMap>> {
    let maps = predict_study_maps(net, study, crop_size)?;
    let mut out = Vec::with_capacity(maps.len());
    for ((m, center), slice) in maps.into_iter().zip(&study.slices) {
        let cropped = assemble_prediction(&m, repair_nesting)?;
        let dim = slice.dim().unwrap_or(crop_size);
        out.push(LabelMap::new(embed(cropped.classes(), dim, center, 0u8)?)?);
    }
    Ok(out)
}

/// Probability maps in the cropped frame, with the crop centre of each slice.
pub fn predict_study_maps(
    net: &MyoPsNet,
    study: &MultiSequenceStudy,
    crop_size: (usize, usize),
) -> Result<Vec<(ProbabilityMaps, (usize, usize))>> {
    let mut cropped = Vec::with_capacity(study.slices.len());
    for slice in &study.slices {
        let mut unlabeled = slice.clone();
        unlabeled.label = None;
        cropped.push(preprocess_slice(&unlabeled, crop_size)?);
    }
    if cropped.is_empty() {
        return Ok(Vec::new());
    }
    let refs: Vec<_> = cropped.iter().map(|(s, _)| s).collect();
    let maps = net.predict(&NetInput::from_slices(&refs)?)?;
    Ok(maps
        .into_iter()
        .zip(cropped.iter().map(|(_, c)| *c))
        .collect())
}
