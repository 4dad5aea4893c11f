//! Cross-modal max fusion and pathology-branch inputs on plain tensors.
//!
//! The network applies the same operations on the tape; these versions are
//! the reference semantics and are what the oracle tests exercise.

use std::collections::BTreeMap;

use super::EncoderId;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::study_io::SequenceId;

/// Per-scale features of one encoder, finest scale first.
pub type FeaturePyramid = Vec<Tensor>;

/// Elementwise max over pyramids, scale by scale.
pub fn fuse_max(pyramids: &[&FeaturePyramid]) -> Result<FeaturePyramid> {
    let first = pyramids
        .first()
        .ok_or_else(|| Error::ConfigMismatch("fusion needs at least one pyramid".into()))?;
    for p in pyramids {
        if p.len() != first.len() {
            return Err(Error::shape(format!(
                "pyramids have {} and {} scales",
                p.len(),
                first.len()
            )));
        }
    }
    (0..first.len())
        .map(|l| {
            let mut out = first[l].clone();
            for p in &pyramids[1..] {
                if p[l].shape() != out.shape() {
                    return Err(Error::shape(format!(
                        "scale {l}: {:?} vs {:?}",
                        p[l].shape(),
                        out.shape()
                    )));
                }
                for (o, &v) in out.data_mut().iter_mut().zip(p[l].data()) {
                    if v > *o {
                        *o = v;
                    }
                }
            }
            Ok(out)
        })
        .collect()
}

/// Fused pyramid for `target`: the elementwise max over every other encoder.
pub fn cmff_fuse(
    pyramids: &BTreeMap<EncoderId, FeaturePyramid>,
    target: EncoderId,
) -> Result<FeaturePyramid> {
    let others: Vec<_> = pyramids
        .iter()
        .filter(|(id, _)| **id != target)
        .map(|(_, p)| p)
        .collect();
    if others.is_empty() {
        return Err(Error::ConfigMismatch(format!(
            "no encoder other than {target} to fuse"
        )));
    }
    fuse_max(&others)
}

/// Concatenates along channels; all parts share batch and spatial size.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concatenation of nothing"))?;
    let (n, (h, w)) = (first.batch(), first.spatial());
    let c: usize = parts.iter().map(|t| t.channels()).sum();
    let mut out = Tensor::zeros([n, c, h, w]);
    for s in 0..n {
        let mut off = 0;
        for t in parts {
            if t.batch() != n || t.spatial() != (h, w) {
                return Err(Error::shape(format!(
                    "cannot concatenate {:?} with {:?}",
                    t.shape(),
                    first.shape()
                )));
            }
            let src = t.sample(s);
            out.sample_mut(s)[off..off + src.len()].copy_from_slice(src);
            off += src.len();
        }
    }
    Ok(out)
}

/// Per-encoder inputs: the encoder's image channels followed by the full
/// anatomy prior.
pub fn build_pathology_inputs(
    images: &BTreeMap<SequenceId, Tensor>,
    psi_mpc: &Tensor,
    encoders: &[EncoderId],
) -> Result<BTreeMap<EncoderId, Tensor>> {
    encoders
        .iter()
        .map(|&e| {
            let mut parts = Vec::new();
            for s in e.sequences() {
                parts.push(images.get(s).ok_or(Error::MissingSequence(*s))?);
            }
            parts.push(psi_mpc);
            Ok((e, concat_channels(&parts)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(vals: &[f32]) -> Tensor {
        Tensor::from_vec([1, 1, 2, 2], vals.to_vec())
    }

    #[test]
    fn fuse_excludes_target() {
        let pyramids: BTreeMap<_, _> = [
            (EncoderId::Lge, vec![t(&[9.0, 9.0, 9.0, 9.0])]),
            (EncoderId::T2, vec![t(&[1.0, 5.0, -2.0, 0.0])]),
            (EncoderId::Mappings, vec![t(&[3.0, 4.0, -1.0, 0.0])]),
        ]
        .into();
        let fused = cmff_fuse(&pyramids, EncoderId::Lge).unwrap();
        assert_eq!(fused[0].data(), &[3.0, 5.0, -1.0, 0.0]);
    }

    #[test]
    fn single_other_encoder_is_identity() {
        let pyramids: BTreeMap<_, _> = [
            (EncoderId::Lge, vec![t(&[1.0, 2.0, 3.0, 4.0])]),
            (EncoderId::T2, vec![t(&[0.0; 4])]),
        ]
        .into();
        assert_eq!(
            cmff_fuse(&pyramids, EncoderId::T2).unwrap()[0],
            pyramids[&EncoderId::Lge][0]
        );
        let lone: BTreeMap<_, _> = [(EncoderId::T2, vec![t(&[0.0; 4])])].into();
        assert!(matches!(
            cmff_fuse(&lone, EncoderId::T2),
            Err(Error::ConfigMismatch(_))
        ));
    }

    #[test]
    fn misaligned_scales_are_rejected() {
        let a = vec![t(&[0.0; 4])];
        let b = vec![Tensor::zeros([1, 2, 2, 2])];
        assert!(matches!(fuse_max(&[&a, &b]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn pathology_input_channel_counts() {
        let images: BTreeMap<_, _> = SequenceId::ALL
            .into_iter()
            .map(|s| (s, Tensor::zeros([2, 1, 4, 4])))
            .collect();
        let prior = Tensor::full([2, 3, 4, 4], 1.0 / 3.0);
        let inputs = build_pathology_inputs(&images, &prior, &EncoderId::ALL).unwrap();
        let counts: Vec<_> = inputs.values().map(|t| t.channels()).collect();
        assert_eq!(counts, [4, 4, 5]);
        assert_eq!(inputs[&EncoderId::Mappings].plane(1, 4)[0], 1.0 / 3.0);
    }
}
