//! Overlap, confusion and boundary-distance metrics for scar, edema and
//! myocardium masks.

use std::fmt::{self, Write as _};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::study_io::{LabelMap, Mask};

/// Structures scored by [`evaluate_study`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Scar,
    Edema,
    Myo,
}

impl Structure {
    pub const ALL: [Structure; 3] = [Structure::Scar, Structure::Edema, Structure::Myo];

    pub fn as_str(self) -> &'static str {
        match self {
            Structure::Scar => "scar",
            Structure::Edema => "edema",
            Structure::Myo => "myo",
        }
    }

    pub fn mask(self, label: &LabelMap) -> Mask {
        match self {
            Structure::Scar => label.scar_mask(),
            Structure::Edema => label.edema_mask(),
            Structure::Myo => label.myo_mask(),
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Pixel confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn from_masks(pred: &Mask, gt: &Mask) -> Result<Self> {
        check_dims(pred, gt)?;
        let mut c = Counts::default();
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `2TP / (2TP + FP + FN)`; 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    /// `TP / (TP + FN)`; 1 without positives.
    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `TN / (TN + FP)`; 1 without negatives.
    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn check_dims(a: &Mask, b: &Mask) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "masks {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Overlap `2|P ∩ G| / (|P| + |G|)`; two empty masks score 1.
pub fn dice_score(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(Counts::from_masks(pred, gt)?.dice())
}

/// Accuracy, sensitivity, specificity and the counts behind them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub counts: Counts,
}

impl From<Counts> for Confusion {
    fn from(counts: Counts) -> Self {
        Confusion {
            acc: counts.accuracy(),
            sen: counts.sensitivity(),
            spe: counts.specificity(),
            counts,
        }
    }
}

pub fn confusion_metrics(pred: &Mask, gt: &Mask) -> Result<Confusion> {
    Ok(Counts::from_masks(pred, gt)?.into())
}

/// Mask pixels with a 4-neighbour outside the mask or outside the image.
pub fn boundary_pixels(mask: &Mask) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let inside = |r: isize, c: isize| {
        r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && mask[(r as usize, c as usize)]
    };
    let mut out = Vec::new();
    for ((r, c), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        let (ri, ci) = (r as isize, c as isize);
        if !(inside(ri - 1, ci) && inside(ri + 1, ci) && inside(ri, ci - 1) && inside(ri, ci + 1)) {
            out.push((r, c));
        }
    }
    out
}

fn directed_sq(from: &[(usize, usize)], to: &[(usize, usize)], spacing: [f64; 2]) -> f64 {
    let mut worst: f64 = 0.0;
    for &(r, c) in from {
        let mut best = f64::INFINITY;
        for &(r2, c2) in to {
            let dr = (r as f64 - r2 as f64) * spacing[0];
            let dc = (c as f64 - c2 as f64) * spacing[1];
            best = best.min(dr * dr + dc * dc);
            // Cannot raise the running maximum any further.
            if best <= worst {
                break;
            }
        }
        worst = worst.max(best);
    }
    worst
}

/// Symmetric Hausdorff distance in millimetres between the boundary pixel
/// sets of two masks. `spacing_mm` is (row, col).
pub fn hausdorff_mm(pred: &Mask, gt: &Mask, spacing_mm: [f64; 2]) -> Result<f64> {
    check_dims(pred, gt)?;
    let a = boundary_pixels(pred);
    let b = boundary_pixels(gt);
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric(
            "Hausdorff distance of an empty mask".into(),
        ));
    }
    Ok(directed_sq(&a, &b, spacing_mm)
        .max(directed_sq(&b, &a, spacing_mm))
        .sqrt())
}

/// Metrics of one structure in one study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureMetrics {
    /// Dice over the pixels pooled across slices.
    pub dice: f64,
    /// Largest per-slice Hausdorff distance; null when no slice had both
    /// masks nonempty.
    pub hd_mm: Option<f64>,
    /// Slices excluded from the Hausdorff maximum because a mask was empty.
    pub hd_undefined_slices: usize,
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub counts: Counts,
}

/// Per-study evaluation of scar, edema and myocardium.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub study_id: String,
    pub scar: StructureMetrics,
    pub edema: StructureMetrics,
    pub myo: StructureMetrics,
}

impl MetricReport {
    pub fn get(&self, s: Structure) -> &StructureMetrics {
        match s {
            Structure::Scar => &self.scar,
            Structure::Edema => &self.edema,
            Structure::Myo => &self.myo,
        }
    }
}

fn evaluate_structure(
    pred: &[LabelMap],
    gt: &[LabelMap],
    s: Structure,
    spacing: [f64; 2],
) -> Result<StructureMetrics> {
    let mut counts = Counts::default();
    let mut hd: Option<f64> = None;
    let mut undefined = 0;
    for (p, g) in pred.iter().zip(gt) {
        let (pm, gm) = (s.mask(p), s.mask(g));
        counts += Counts::from_masks(&pm, &gm)?;
        match hausdorff_mm(&pm, &gm, spacing) {
            Ok(d) => hd = Some(hd.map_or(d, |h| h.max(d))),
            Err(Error::UndefinedMetric(_)) => undefined += 1,
            Err(e) => return Err(e),
        }
    }
    let c = Confusion::from(counts);
    Ok(StructureMetrics {
        dice: counts.dice(),
        hd_mm: hd,
        hd_undefined_slices: undefined,
        acc: c.acc,
        sen: c.sen,
        spe: c.spe,
        counts,
    })
}

/// Scores a predicted slice stack against ground truth.
pub fn evaluate_study(
    study_id: &str,
    pred: &[LabelMap],
    gt: &[LabelMap],
    spacing_mm: [f64; 2],
) -> Result<MetricReport> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "{} predicted slices for {} ground-truth slices",
            pred.len(),
            gt.len()
        )));
    }
    Ok(MetricReport {
        study_id: study_id.to_string(),
        scar: evaluate_structure(pred, gt, Structure::Scar, spacing_mm)?,
        edema: evaluate_structure(pred, gt, Structure::Edema, spacing_mm)?,
        myo: evaluate_structure(pred, gt, Structure::Myo, spacing_mm)?,
    })
}

/// Mean and sample standard deviation of one metric across studies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Zero for a single study.
    pub std: f64,
    /// Number of studies contributing.
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std, n })
    }
}

/// Cross-study summary of one structure. Studies with an undefined
/// Hausdorff distance are left out of `hd_mm` only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureSummary {
    pub dice: MeanStd,
    pub hd_mm: Option<MeanStd>,
    pub acc: MeanStd,
    pub sen: MeanStd,
    pub spe: MeanStd,
}

/// Evaluation output: every study plus the cross-study summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub studies: Vec<MetricReport>,
    pub summary: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scar: StructureSummary,
    pub edema: StructureSummary,
    pub myo: StructureSummary,
}

impl Summary {
    pub fn get(&self, s: Structure) -> &StructureSummary {
        match s {
            Structure::Scar => &self.scar,
            Structure::Edema => &self.edema,
            Structure::Myo => &self.myo,
        }
    }
}

impl EvaluationReport {
    pub fn new(studies: Vec<MetricReport>) -> Result<Self> {
        if studies.is_empty() {
            return Err(Error::InvalidConfig("nothing to summarize".into()));
        }
        let summarize = |s: Structure| {
            let col = |f: &dyn Fn(&StructureMetrics) -> f64| {
                let v: Vec<f64> = studies.iter().map(|r| f(r.get(s))).collect();
                MeanStd::of(&v).expect("studies is nonempty")
            };
            let hd: Vec<f64> = studies.iter().filter_map(|r| r.get(s).hd_mm).collect();
            StructureSummary {
                dice: col(&|m| m.dice),
                hd_mm: MeanStd::of(&hd),
                acc: col(&|m| m.acc),
                sen: col(&|m| m.sen),
                spe: col(&|m| m.spe),
            }
        };
        let summary = Summary {
            scar: summarize(Structure::Scar),
            edema: summarize(Structure::Edema),
            myo: summarize(Structure::Myo),
        };
        Ok(EvaluationReport { studies, summary })
    }

    /// Plain-text `mean ± std` table, one row per structure, 4 decimals.
    pub fn to_table(&self) -> String {
        let cell = |m: Option<&MeanStd>| match m {
            Some(m) => format!("{:.4} ± {:.4}", m.mean, m.std),
            None => "n/a".to_string(),
        };
        let mut out = String::new();
        let head = ["structure", "dice", "hd_mm", "acc", "sen", "spe"];
        let mut rows = vec![head.map(String::from).to_vec()];
        for s in Structure::ALL {
            let m = self.summary.get(s);
            rows.push(vec![
                s.to_string(),
                cell(Some(&m.dice)),
                cell(m.hd_mm.as_ref()),
                cell(Some(&m.acc)),
                cell(Some(&m.sen)),
                cell(Some(&m.spe)),
            ]);
        }
        let widths: Vec<usize> = (0..head.len())
            .map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
            .collect();
        for r in rows {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

/// JSON Schema (draft 2020-12) of [`EvaluationReport`].
pub const EVALUATION_REPORT_SCHEMA: &str = include_str!("metrics/evaluation_report.schema.json");

/// Mask from a boolean closure, handy for tests and phantoms.
pub fn mask_from_fn(dim: (usize, usize), f: impl Fn(usize, usize) -> bool) -> Mask {
    Array2::from_shape_fn(dim, |(r, c)| f(r, c))
}
