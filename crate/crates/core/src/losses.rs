//! Training objectives on per-slice probability maps.
//!
//! Every loss returns its value together with the gradient with respect to
//! each probability map it reads, so the trainer can seed the network's
//! backward pass directly. All arithmetic is `f64`.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{mpc_class, pathology_class, DecoderId, Pathology, ProbabilityMaps};
use crate::study_io::{class, LabelMap};

/// Term weights and numerical guards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of each scar decoder's segmentation term.
    pub lambda_scar: f64,
    /// Weight of each edema decoder's segmentation term.
    pub lambda_edema: f64,
    pub lambda_con: f64,
    pub lambda_inc: f64,
    /// Added inside every logarithm.
    pub eps_log: f64,
    /// Added to every normalizer and norm product.
    pub eps_denom: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_scar: 2.0,
            lambda_edema: 2.0,
            lambda_con: 1.0,
            lambda_inc: 1.0,
            eps_log: 1e-7,
            eps_denom: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            self.lambda_scar,
            self.lambda_edema,
            self.lambda_con,
            self.lambda_inc,
        ];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::InvalidConfig(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if !(self.eps_log > 0.0 && self.eps_denom > 0.0) {
            return Err(Error::InvalidConfig(
                "epsilon guards must be positive".into(),
            ));
        }
        Ok(())
    }

    fn lambda(&self, target: Pathology) -> f64 {
        match target {
            Pathology::Scar => self.lambda_scar,
            Pathology::Edema => self.lambda_edema,
        }
    }
}

/// Gradients with the same layout as [`ProbabilityMaps`].
#[derive(Clone, Debug, PartialEq)]
pub struct MapGrads {
    pub mpc: Array3<f64>,
    pub decoders: BTreeMap<DecoderId, Array3<f64>>,
}

impl MapGrads {
    pub fn zeros_like(maps: &ProbabilityMaps) -> Self {
        MapGrads {
            mpc: Array3::zeros(maps.mpc.dim()),
            decoders: maps
                .decoders
                .iter()
                .map(|(d, m)| (*d, Array3::zeros(m.dim())))
                .collect(),
        }
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &MapGrads, scale: f64) {
        self.mpc.scaled_add(scale, &other.mpc);
        for (d, g) in &other.decoders {
            self.decoders
                .get_mut(d)
                .expect("gradients built from the same maps")
                .scaled_add(scale, g);
        }
    }
}

fn check_same(a: &ArrayView3<f64>, b: &ArrayView3<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// One-hot encoding `classes × rows × cols` of a class-index map.
pub fn one_hot(classes: ArrayView2<u8>, n_classes: usize) -> Array3<f64> {
    let (h, w) = classes.dim();
    Array3::from_shape_fn((n_classes, h, w), |(c, r, col)| {
        f64::from(u8::from(classes[(r, col)] as usize == c))
    })
}

/// Ground truth of the prior network: 0 background, 1 myocardium, 2 LV.
pub fn mpc_target(label: &LabelMap) -> Array2<u8> {
    label.classes().mapv(|c| match c {
        class::LV_BLOOD_POOL => mpc_class::LV as u8,
        class::BACKGROUND => mpc_class::BACKGROUND as u8,
        _ => mpc_class::MYO as u8,
    })
}

/// Ground truth of a pathology decoder: 0 background, 1 LV, 2 healthy
/// myocardium, 3 the decoder's pathology.
///
/// For scar decoders edema without scar counts as healthy myocardium; for
/// edema decoders scar counts as edema.
pub fn pathology_target(label: &LabelMap, target: Pathology) -> Array2<u8> {
    use pathology_class::*;
    label.classes().mapv(|c| {
        (match (c, target) {
            (class::BACKGROUND, _) => BACKGROUND,
            (class::LV_BLOOD_POOL, _) => LV,
            (class::SCAR, _) => PATHOLOGY,
            (class::EDEMA_ONLY, Pathology::Edema) => PATHOLOGY,
            _ => HEALTHY_MYO,
        }) as u8
    })
}

/// Soft Dice loss: one minus the mean soft Dice over the foreground
/// classes (every channel but 0).
pub fn dice_loss(psi: ArrayView3<f64>, y: ArrayView3<f64>, eps: f64) -> Result<(f64, Array3<f64>)> {
    check_same(&psi, &y, "dice loss")?;
    let n_classes = psi.dim().0;
    if n_classes < 2 {
        return Err(Error::shape("dice loss needs a foreground class"));
    }
    let k = (n_classes - 1) as f64;
    let mut grad = Array3::zeros(psi.dim());
    let mut sum = 0.0;
    for c in 1..n_classes {
        let (p, g) = (psi.index_axis(Axis(0), c), y.index_axis(Axis(0), c));
        let inter: f64 = Zip::from(&p).and(&g).fold(0.0, |acc, a, b| acc + a * b);
        let denom = p.sum() + g.sum() + eps;
        let numer = 2.0 * inter + eps;
        sum += numer / denom;
        Zip::from(grad.index_axis_mut(Axis(0), c))
            .and(&g)
            .for_each(|d, &gv| *d = -(2.0 * gv * denom - numer) / (denom * denom) / k);
    }
    Ok((1.0 - sum / k, grad))
}

/// Weighted cross entropy normalized by the total weight of the target
/// pixels.
pub fn wce_loss(
    psi: ArrayView3<f64>,
    y: ArrayView3<f64>,
    class_weights: &[f64],
    eps_log: f64,
) -> Result<(f64, Array3<f64>)> {
    check_same(&psi, &y, "weighted cross entropy")?;
    if class_weights.len() != psi.dim().0 {
        return Err(Error::shape(format!(
            "{} class weights for {} classes",
            class_weights.len(),
            psi.dim().0
        )));
    }
    let mut norm = 0.0;
    let mut acc = 0.0;
    for (c, &w) in class_weights.iter().enumerate() {
        let (p, g) = (psi.index_axis(Axis(0), c), y.index_axis(Axis(0), c));
        norm += w * g.sum();
        acc += Zip::from(&p)
            .and(&g)
            .fold(0.0, |a, &pv, &gv| a + w * gv * (pv + eps_log).ln());
    }
    let mut grad = Array3::zeros(psi.dim());
    if norm <= 0.0 {
        return Ok((0.0, grad));
    }
    for (c, &w) in class_weights.iter().enumerate() {
        Zip::from(grad.index_axis_mut(Axis(0), c))
            .and(psi.index_axis(Axis(0), c))
            .and(y.index_axis(Axis(0), c))
            .for_each(|d, &pv, &gv| *d = -w * gv / ((pv + eps_log) * norm));
    }
    Ok((-acc / norm, grad))
}

/// Upper and lower clip of inverse-frequency class weights.
pub const CLASS_WEIGHT_RANGE: (f64, f64) = (0.1, 10.0);

/// Inverse-frequency class weights `1 / (C · f_c)` over a batch of targets,
/// clipped to [`CLASS_WEIGHT_RANGE`] and rescaled to mean 1. Absent classes
/// get the upper clip.
pub fn inverse_frequency_weights(targets: &[Array2<u8>], n_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_classes];
    for t in targets {
        for &c in t {
            counts[c as usize] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let (lo, hi) = CLASS_WEIGHT_RANGE;
    let raw: Vec<f64> = counts
        .iter()
        .map(|&n| {
            if n == 0 {
                hi
            } else {
                (total as f64 / (n_classes as f64 * n as f64)).clamp(lo, hi)
            }
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / n_classes as f64;
    raw.iter().map(|w| w / mean).collect()
}

/// Per-batch class weights for the prior and both pathology targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub mpc: Vec<f64>,
    pub scar: Vec<f64>,
    pub edema: Vec<f64>,
}

impl ClassWeights {
    pub fn from_labels(labels: &[&LabelMap]) -> Self {
        let mpc: Vec<_> = labels.iter().map(|l| mpc_target(l)).collect();
        let scar: Vec<_> = labels
            .iter()
            .map(|l| pathology_target(l, Pathology::Scar))
            .collect();
        let edema: Vec<_> = labels
            .iter()
            .map(|l| pathology_target(l, Pathology::Edema))
            .collect();
        ClassWeights {
            mpc: inverse_frequency_weights(&mpc, mpc_class::COUNT),
            scar: inverse_frequency_weights(&scar, pathology_class::COUNT),
            edema: inverse_frequency_weights(&edema, pathology_class::COUNT),
        }
    }

    pub fn uniform() -> Self {
        ClassWeights {
            mpc: vec![1.0; mpc_class::COUNT],
            scar: vec![1.0; pathology_class::COUNT],
            edema: vec![1.0; pathology_class::COUNT],
        }
    }

    fn for_target(&self, target: Pathology) -> &[f64] {
        match target {
            Pathology::Scar => &self.scar,
            Pathology::Edema => &self.edema,
        }
    }
}

/// Unweighted Dice + WCE of the prior and of every decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct SegTerms {
    pub mpc: f64,
    pub decoders: BTreeMap<DecoderId, f64>,
    /// `mpc + Σ λ_d · decoders[d]`.
    pub weighted: f64,
}

/// Segmentation loss with decoder-specific ground truths.
pub fn seg_loss(
    maps: &ProbabilityMaps,
    label: &LabelMap,
    weights: &LossWeights,
    class_weights: &ClassWeights,
) -> Result<(SegTerms, MapGrads)> {
    maps.validate()?;
    if label.dim() != maps.dim() {
        return Err(Error::shape(format!(
            "label {:?} vs maps {:?}",
            label.dim(),
            maps.dim()
        )));
    }
    let mut grads = MapGrads::zeros_like(maps);
    let term =
        |psi: ArrayView3<f64>, target: Array2<u8>, cw: &[f64]| -> Result<(f64, Array3<f64>)> {
            let y = one_hot(target.view(), psi.dim().0);
            let (d, gd) = dice_loss(psi, y.view(), weights.eps_denom)?;
            let (c, gc) = wce_loss(psi, y.view(), cw, weights.eps_log)?;
            Ok((d + c, gd + gc))
        };
    let (mpc, g) = term(maps.mpc.view(), mpc_target(label), &class_weights.mpc)?;
    grads.mpc = g;
    let mut weighted = mpc;
    let mut decoders = BTreeMap::new();
    for (d, psi) in &maps.decoders {
        let (v, g) = term(
            psi.view(),
            pathology_target(label, d.target),
            class_weights.for_target(d.target),
        )?;
        let lambda = weights.lambda(d.target);
        weighted += lambda * v;
        grads
            .decoders
            .get_mut(d)
            .expect("same keys")
            .scaled_add(lambda, &g);
        decoders.insert(*d, v);
    }
    Ok((
        SegTerms {
            mpc,
            decoders,
            weighted,
        },
        grads,
    ))
}

/// `1 − a·b / (‖a‖‖b‖ + ε)` over the flattened arrays, with its gradients.
pub fn cosine_loss(
    a: ArrayView3<f64>,
    b: ArrayView3<f64>,
    eps: f64,
) -> Result<(f64, Array3<f64>, Array3<f64>)> {
    check_same(&a, &b, "cosine loss")?;
    let dot = Zip::from(&a).and(&b).fold(0.0, |acc, x, y| acc + x * y);
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = na * nb + eps;
    let value = 1.0 - dot / denom;
    // d/da of dot/denom = b/denom − dot·‖b‖·a / (‖a‖·denom²)
    let grad = |x: &ArrayView3<f64>, y: &ArrayView3<f64>, nx: f64, ny: f64| {
        let coef = if nx > 0.0 {
            dot * ny / (nx * denom * denom)
        } else {
            0.0
        };
        Zip::from(x)
            .and(y)
            .map_collect(|&xv, &yv| -(yv / denom - coef * xv))
    };
    Ok((value, grad(&a, &b, na, nb), grad(&b, &a, nb, na)))
}

/// Sum over decoders of the cosine loss between the reformulated
/// myo/not-myo maps of the prior and of each decoder.
pub fn consistency_loss(maps: &ProbabilityMaps, eps: f64) -> Result<(f64, MapGrads)> {
    use crate::model::{reformulate_mpc, reformulate_pathology};
    maps.validate()?;
    let mut grads = MapGrads::zeros_like(maps);
    let prior = reformulate_mpc(maps.mpc.view());
    let mut total = 0.0;
    for (d, psi) in &maps.decoders {
        let hat = reformulate_pathology(psi.view());
        let (v, ga, gb) = cosine_loss(prior.view(), hat.view(), eps)?;
        total += v;
        {
            let g = &mut grads.mpc;
            let (g_myo, g_not) = (ga.index_axis(Axis(0), 0), ga.index_axis(Axis(0), 1));
            g.index_axis_mut(Axis(0), mpc_class::MYO)
                .zip_mut_with(&g_myo, |a, b| *a += b);
            g.index_axis_mut(Axis(0), mpc_class::BACKGROUND)
                .zip_mut_with(&g_not, |a, b| *a += b);
            g.index_axis_mut(Axis(0), mpc_class::LV)
                .zip_mut_with(&g_not, |a, b| *a += b);
        }
        let g = grads.decoders.get_mut(d).expect("same keys");
        let (g_myo, g_not) = (gb.index_axis(Axis(0), 0), gb.index_axis(Axis(0), 1));
        use pathology_class::*;
        g.index_axis_mut(Axis(0), HEALTHY_MYO)
            .zip_mut_with(&g_myo, |a, b| *a += b);
        g.index_axis_mut(Axis(0), PATHOLOGY)
            .zip_mut_with(&g_myo, |a, b| *a += b);
        g.index_axis_mut(Axis(0), BACKGROUND)
            .zip_mut_with(&g_not, |a, b| *a += b);
        g.index_axis_mut(Axis(0), LV)
            .zip_mut_with(&g_not, |a, b| *a += b);
    }
    Ok((total, grads))
}

fn pathology_channel(psi: &Array3<f64>) -> ArrayView2<'_, f64> {
    psi.slice(s![pathology_class::PATHOLOGY, .., ..])
}

fn pathology_grad(g: &mut Array3<f64>) -> ndarray::ArrayViewMut2<'_, f64> {
    g.slice_mut(s![pathology_class::PATHOLOGY, .., ..])
}

/// Inclusiveness against ground truth, as `(scar term, edema term)`.
///
/// The scar term penalizes scar probability outside the labelled edema,
/// normalized by the number of non-edema pixels. The edema term penalizes
/// low edema probability on labelled scar, normalized by the scar size, and
/// is 0 when the slice has no scar.
pub fn inclusiveness_labeled(
    maps: &ProbabilityMaps,
    label: &LabelMap,
    weights: &LossWeights,
) -> Result<(f64, f64, MapGrads)> {
    maps.validate()?;
    if label.dim() != maps.dim() {
        return Err(Error::shape("label and maps differ in size"));
    }
    let (el, ed) = (weights.eps_log, weights.eps_denom);
    let not_edema = label.edema_mask().mapv(|e| f64::from(u8::from(!e)));
    let scar = label.scar_mask().mapv(|s| f64::from(u8::from(s)));
    let omega_edema = not_edema.sum() + ed;
    let omega_scar = scar.sum();
    let mut grads = MapGrads::zeros_like(maps);
    let (mut l_s, mut l_e) = (0.0, 0.0);
    for (d, psi) in &maps.decoders {
        let p = pathology_channel(psi);
        let g = grads.decoders.get_mut(d).expect("same keys");
        match d.target {
            Pathology::Scar => {
                l_s -= Zip::from(&not_edema)
                    .and(&p)
                    .fold(0.0, |a, &m, &pv| a + m * (1.0 - pv + el).ln())
                    / omega_edema;
                Zip::from(pathology_grad(g))
                    .and(&not_edema)
                    .and(&p)
                    .for_each(|gv, &m, &pv| *gv += m / ((1.0 - pv + el) * omega_edema));
            }
            Pathology::Edema if omega_scar > 0.0 => {
                let norm = omega_scar + ed;
                l_e -= Zip::from(&scar)
                    .and(&p)
                    .fold(0.0, |a, &m, &pv| a + m * (pv + el).ln())
                    / norm;
                Zip::from(pathology_grad(g))
                    .and(&scar)
                    .and(&p)
                    .for_each(|gv, &m, &pv| *gv -= m / ((pv + el) * norm));
            }
            Pathology::Edema => {}
        }
    }
    Ok((l_s, l_e, grads))
}

/// Inclusiveness between predictions, as `(scar term, edema term)`, summed
/// over every (scar decoder, edema decoder) pair.
pub fn inclusiveness_unlabeled(
    maps: &ProbabilityMaps,
    weights: &LossWeights,
) -> Result<(f64, f64, MapGrads)> {
    maps.validate()?;
    let (el, ed) = (weights.eps_log, weights.eps_denom);
    let mut grads = MapGrads::zeros_like(maps);
    let (mut l_s, mut l_e) = (0.0, 0.0);
    let scars: Vec<_> = maps.scar_decoders().map(|(d, m)| (*d, m)).collect();
    let edemas: Vec<_> = maps.edema_decoders().map(|(d, m)| (*d, m)).collect();
    for &(sd, sm) in &scars {
        for &(edc, em) in &edemas {
            let ps = pathology_channel(sm);
            let pe = pathology_channel(em);

            // Scar outside predicted edema: −Σ(1−pe)·ln(1−ps+ε) / (Σ(1−pe)+ε).
            let log_ns = ps.mapv(|v| (1.0 - v + el).ln());
            let b = pe.iter().map(|v| 1.0 - v).sum::<f64>() + ed;
            let a = Zip::from(&pe)
                .and(&log_ns)
                .fold(0.0, |acc, &e, &l| acc + (1.0 - e) * l);
            l_s -= a / b;
            Zip::from(pathology_grad(grads.decoders.get_mut(&sd).expect("key")))
                .and(&pe)
                .and(&ps)
                .for_each(|g, &e, &s| *g += (1.0 - e) / ((1.0 - s + el) * b));
            Zip::from(pathology_grad(grads.decoders.get_mut(&edc).expect("key")))
                .and(&log_ns)
                .for_each(|g, &l| *g += (l * b - a) / (b * b));

            // Edema missing under predicted scar: −Σ ps·ln(pe+ε) / (Σ ps + ε).
            let log_e = pe.mapv(|v| (v + el).ln());
            let b = ps.sum() + ed;
            let a = Zip::from(&ps)
                .and(&log_e)
                .fold(0.0, |acc, &s, &l| acc + s * l);
            l_e -= a / b;
            Zip::from(pathology_grad(grads.decoders.get_mut(&edc).expect("key")))
                .and(&ps)
                .and(&pe)
                .for_each(|g, &s, &e| *g -= s / ((e + el) * b));
            Zip::from(pathology_grad(grads.decoders.get_mut(&sd).expect("key")))
                .and(&log_e)
                .for_each(|g, &l| *g -= (l * b - a) / (b * b));
        }
    }
    Ok((l_s, l_e, grads))
}

/// Itemized loss of one slice (or the mean over a batch).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub labeled: bool,
    /// Unweighted prior segmentation term; absent for unlabeled data.
    pub seg_mpc: Option<f64>,
    /// Unweighted per-decoder segmentation terms.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub seg_decoders: BTreeMap<DecoderId, f64>,
    /// Weighted segmentation loss; absent for unlabeled data.
    pub seg: Option<f64>,
    pub con: f64,
    pub inc_scar: f64,
    pub inc_edema: f64,
    pub lambda_con: f64,
    pub lambda_inc: f64,
    pub total: f64,
}

impl LossReport {
    pub fn inc(&self) -> f64 {
        self.inc_scar + self.inc_edema
    }

    /// Recomputes the total from the parts.
    pub fn weighted_sum(&self) -> f64 {
        self.seg.unwrap_or(0.0) + self.lambda_con * self.con + self.lambda_inc * self.inc()
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.con.is_finite()
            && self.inc().is_finite()
            && self.seg.is_none_or(f64::is_finite)
    }

    /// Field-wise mean; all reports must agree on `labeled`.
    pub fn mean(reports: &[LossReport]) -> Option<LossReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let mut seg_decoders = BTreeMap::new();
        for r in reports {
            for (d, v) in &r.seg_decoders {
                *seg_decoders.entry(*d).or_insert(0.0) += v / n;
            }
        }
        Some(LossReport {
            labeled: first.labeled,
            seg_mpc: first.seg_mpc.map(|_| avg(&|r| r.seg_mpc.unwrap_or(0.0))),
            seg_decoders,
            seg: first.seg.map(|_| avg(&|r| r.seg.unwrap_or(0.0))),
            con: avg(&|r| r.con),
            inc_scar: avg(&|r| r.inc_scar),
            inc_edema: avg(&|r| r.inc_edema),
            lambda_con: first.lambda_con,
            lambda_inc: first.lambda_inc,
            total: avg(&|r| r.total),
        })
    }
}

/// Full objective of one slice.
///
/// With a label: weighted segmentation + λ_con·consistency +
/// λ_inc·labelled inclusiveness. Without: λ_con·consistency +
/// λ_inc·unlabelled inclusiveness. `class_weights` defaults to weights from
/// this slice's own label.
pub fn total_loss(
    maps: &ProbabilityMaps,
    label: Option<&LabelMap>,
    weights: &LossWeights,
    class_weights: Option<&ClassWeights>,
) -> Result<(LossReport, MapGrads)> {
    weights.validate()?;
    let (con, con_g) = consistency_loss(maps, weights.eps_denom)?;
    let mut grads = MapGrads::zeros_like(maps);
    grads.add_scaled(&con_g, weights.lambda_con);
    let mut report = LossReport {
        labeled: label.is_some(),
        seg_mpc: None,
        seg_decoders: BTreeMap::new(),
        seg: None,
        con,
        inc_scar: 0.0,
        inc_edema: 0.0,
        lambda_con: weights.lambda_con,
        lambda_inc: weights.lambda_inc,
        total: 0.0,
    };
    let (inc_s, inc_e, inc_g) = match label {
        Some(label) => {
            let own;
            let cw = match class_weights {
                Some(cw) => cw,
                None => {
                    own = ClassWeights::from_labels(&[label]);
                    &own
                }
            };
            let (seg, seg_g) = seg_loss(maps, label, weights, cw)?;
            grads.add_scaled(&seg_g, 1.0);
            report.seg_mpc = Some(seg.mpc);
            report.seg_decoders = seg.decoders;
            report.seg = Some(seg.weighted);
            inclusiveness_labeled(maps, label, weights)?
        }
        None => inclusiveness_unlabeled(maps, weights)?,
    };
    grads.add_scaled(&inc_g, weights.lambda_inc);
    report.inc_scar = inc_s;
    report.inc_edema = inc_e;
    report.total = report.weighted_sum();
    Ok((report, grads))
}
