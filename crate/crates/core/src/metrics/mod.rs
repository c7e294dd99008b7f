//! Segmentation and volume metrics.
//!
//! Overlap metrics come from voxel confusion counts (foreground = positive).
//! Surface metrics ([`surface`]) use 6-connected boundary voxels and exact
//! Euclidean distances between voxel centres in millimetres.

pub mod surface;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volgrid::{mask_volume_cm3, Mask3, VolgridError};

pub use surface::{asd, extract_surface, surface_distance_map, SurfaceSet};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Geometry(#[from] VolgridError),
    #[error("prediction and truth are both empty; DSC is undefined")]
    BothEmpty,
    #[error("{0} denominator is zero; metric undefined")]
    EmptyDenominator(&'static str),
    #[error("mask is empty")]
    EmptyMask,
    #[error("surface set is empty")]
    EmptySurface,
    #[error("lists must be non-empty and equally long ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("relative error with zero ground truth")]
    ZeroGroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(pred: &Mask3, truth: &Mask3) -> Result<ConfusionCounts, MetricsError> {
    pred.check_geometry(truth)?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Dice similarity coefficient `2TP / (FP + 2TP + FN)`.
pub fn dsc(c: &ConfusionCounts) -> Result<f64, MetricsError> {
    let den = c.fp + 2 * c.tp + c.fn_;
    if den == 0 {
        return Err(MetricsError::BothEmpty);
    }
    Ok(2.0 * c.tp as f64 / den as f64)
}

/// `TP / (TP + FN)`.
pub fn sensitivity(c: &ConfusionCounts) -> Result<f64, MetricsError> {
    let den = c.tp + c.fn_;
    if den == 0 {
        return Err(MetricsError::EmptyDenominator("sensitivity"));
    }
    Ok(c.tp as f64 / den as f64)
}

/// `TN / (TN + FP)`.
pub fn specificity(c: &ConfusionCounts) -> Result<f64, MetricsError> {
    let den = c.tn + c.fp;
    if den == 0 {
        return Err(MetricsError::EmptyDenominator("specificity"));
    }
    Ok(c.tn as f64 / den as f64)
}

fn check_lists(truth: &[f64], pred: &[f64]) -> Result<(), MetricsError> {
    if truth.is_empty() || truth.len() != pred.len() {
        return Err(MetricsError::LengthMismatch(truth.len(), pred.len()));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(truth: &[f64], pred: &[f64]) -> Result<f64, MetricsError> {
    check_lists(truth, pred)?;
    Ok(truth.iter().zip(pred).map(|(t, p)| (p - t).abs()).sum::<f64>() / truth.len() as f64)
}

/// Root mean square error.
pub fn rmse(truth: &[f64], pred: &[f64]) -> Result<f64, MetricsError> {
    check_lists(truth, pred)?;
    Ok((truth.iter().zip(pred).map(|(t, p)| (p - t).powi(2)).sum::<f64>() / truth.len() as f64).sqrt())
}

/// Relative error in percent, normalised by the ground-truth value.
pub fn relative_error(truth: f64, pred: f64) -> Result<f64, MetricsError> {
    if truth == 0.0 {
        return Err(MetricsError::ZeroGroundTruth);
    }
    Ok((truth - pred).abs() / truth.abs() * 100.0)
}

/// Overlap and surface metrics of one structure. `None` marks an undefined value.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StructureMetrics {
    pub dsc: Option<f64>,
    pub asd_mm: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

impl StructureMetrics {
    pub fn compute(pred: &Mask3, truth: &Mask3) -> Result<Self, MetricsError> {
        let c = confusion(pred, truth)?;
        let asd_mm = match (extract_surface(pred), extract_surface(truth)) {
            (Ok(s), Ok(g)) => Some(asd(&s, &g)?),
            _ => None,
        };
        Ok(Self {
            dsc: dsc(&c).ok(),
            asd_mm,
            sensitivity: sensitivity(&c).ok(),
            specificity: specificity(&c).ok(),
        })
    }

    /// Mean of each metric over the subjects where it is defined.
    pub fn mean(items: &[StructureMetrics]) -> Self {
        let avg = |f: fn(&StructureMetrics) -> Option<f64>| {
            let vals: Vec<f64> = items.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        Self {
            dsc: avg(|m| m.dsc),
            asd_mm: avg(|m| m.asd_mm),
            sensitivity: avg(|m| m.sensitivity),
            specificity: avg(|m| m.specificity),
        }
    }
}

/// Periosteal and endosteal masks of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureMasks {
    pub periosteal: Mask3,
    pub endosteal: Mask3,
}

/// Per-subject evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub subject: String,
    pub periosteal: StructureMetrics,
    pub endosteal: StructureMetrics,
    pub truth_periosteal_cm3: f64,
    pub pred_periosteal_cm3: f64,
    pub truth_endosteal_cm3: f64,
    pub pred_endosteal_cm3: f64,
}

/// Evaluation report. Serialised as TOML: structure tables `[periosteal]`
/// and `[endosteal]` with keys `dsc`, `asd_mm`, `sensitivity`,
/// `specificity` (absent when undefined), an array `[[regions]]` of volume
/// error rows, and an array `[[subjects]]` of per-subject records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub subject_count: usize,
    pub partition: String,
    pub periosteal: StructureMetrics,
    pub endosteal: StructureMetrics,
    #[serde(default)]
    pub regions: Vec<crate::regions::VolumeErrorRow>,
    #[serde(default)]
    pub subjects: Vec<SubjectMetrics>,
}

impl MetricsReport {
    pub fn from_subjects(subjects: Vec<SubjectMetrics>, regions: Vec<crate::regions::VolumeErrorRow>, partition: String) -> Self {
        let peri: Vec<_> = subjects.iter().map(|s| s.periosteal).collect();
        let endo: Vec<_> = subjects.iter().map(|s| s.endosteal).collect();
        Self {
            subject_count: subjects.len(),
            partition,
            periosteal: StructureMetrics::mean(&peri),
            endosteal: StructureMetrics::mean(&endo),
            regions,
            subjects,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report fields are all serialisable")
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

pub fn evaluate_subject(subject: &str, pred: &StructureMasks, truth: &StructureMasks) -> Result<SubjectMetrics, MetricsError> {
    Ok(SubjectMetrics {
        subject: subject.to_string(),
        periosteal: StructureMetrics::compute(&pred.periosteal, &truth.periosteal)?,
        endosteal: StructureMetrics::compute(&pred.endosteal, &truth.endosteal)?,
        truth_periosteal_cm3: mask_volume_cm3(&truth.periosteal),
        pred_periosteal_cm3: mask_volume_cm3(&pred.periosteal),
        truth_endosteal_cm3: mask_volume_cm3(&truth.endosteal),
        pred_endosteal_cm3: mask_volume_cm3(&pred.endosteal),
    })
}

/// Single-subject report with no regional rows.
pub fn evaluate_pair(pred: &StructureMasks, truth: &StructureMasks) -> Result<MetricsReport, MetricsError> {
    let s = evaluate_subject("subject", pred, truth)?;
    Ok(MetricsReport::from_subjects(vec![s], Vec::new(), "none".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::Spacing3;

    fn masks(bits: &[u8], f: impl Fn(u8) -> bool) -> Mask3 {
        Mask3::new([bits.len(), 1, 1], Spacing3::isotropic(1.0).unwrap(), bits.iter().map(|&b| f(b)).collect()).unwrap()
    }

    #[test]
    fn confusion_identity_and_complement() {
        let t = masks(&[1, 0, 1, 1, 0], |b| b == 1);
        let c = confusion(&t, &t).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 3, fp: 0, fn_: 0, tn: 2 });
        let c = confusion(&t.complement(), &t).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        let other = Mask3::filled([4, 1, 1], Spacing3::isotropic(1.0).unwrap(), false);
        assert!(matches!(confusion(&other, &t), Err(MetricsError::Geometry(_))));
    }

    #[test]
    fn hand_values() {
        let c = ConfusionCounts { tp: 2, fp: 1, fn_: 1, tn: 0 };
        assert!((dsc(&c).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        let c = ConfusionCounts { tp: 9, fp: 0, fn_: 1, tn: 0 };
        assert!((sensitivity(&c).unwrap() - 0.9).abs() < 1e-15);
        let c = ConfusionCounts { tp: 0, fp: 5, fn_: 0, tn: 95 };
        assert!((specificity(&c).unwrap() - 0.95).abs() < 1e-15);
        let disjoint = ConfusionCounts { tp: 0, fp: 3, fn_: 4, tn: 1 };
        assert_eq!(dsc(&disjoint).unwrap(), 0.0);
        let perfect = ConfusionCounts { tp: 5, fp: 0, fn_: 0, tn: 5 };
        assert_eq!(dsc(&perfect).unwrap(), 1.0);
        assert_eq!(sensitivity(&perfect).unwrap(), 1.0);
        assert_eq!(specificity(&perfect).unwrap(), 1.0);
    }

    #[test]
    fn undefined_metrics() {
        let empty = ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 10 };
        assert!(matches!(dsc(&empty), Err(MetricsError::BothEmpty)));
        assert!(matches!(sensitivity(&empty), Err(MetricsError::EmptyDenominator(_))));
        let full = ConfusionCounts { tp: 10, fp: 0, fn_: 0, tn: 0 };
        assert!(matches!(specificity(&full), Err(MetricsError::EmptyDenominator(_))));
    }

    #[test]
    fn volume_errors() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(relative_error(2.0, 2.0).unwrap(), 0.0);
        assert!((mae(&[10.0, 20.0], &[11.0, 18.0]).unwrap() - 1.5).abs() < 1e-15);
        assert!((rmse(&[10.0, 20.0], &[11.0, 18.0]).unwrap() - 1.5811388300841898).abs() < 1e-12);
        let re = relative_error(38.91, 40.11).unwrap();
        assert!((re - 1.2 / 38.91 * 100.0).abs() < 1e-12);
        assert!((re - 3.084).abs() < 5e-4);
        assert!(matches!(relative_error(0.0, 1.0), Err(MetricsError::ZeroGroundTruth)));
        assert!(matches!(mae(&[], &[]), Err(MetricsError::LengthMismatch(0, 0))));
        assert!(matches!(rmse(&[1.0], &[1.0, 2.0]), Err(MetricsError::LengthMismatch(1, 2))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rmse_dominates_mae(pairs in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..40)) {
                let (t, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
                prop_assert!(rmse(&t, &p).unwrap() >= mae(&t, &p).unwrap() * (1.0 - 1e-12));
            }

            #[test]
            fn overlap_metrics_are_bounded_and_dsc_symmetric(a in proptest::collection::vec(any::<bool>(), 1..200), seed in any::<u64>()) {
                let sp = Spacing3::isotropic(1.0).unwrap();
                let b: Vec<bool> = a.iter().enumerate().map(|(i, &v)| v ^ ((seed >> (i % 64)) & 1 == 1)).collect();
                let pa = Mask3::new([a.len(), 1, 1], sp, a.clone()).unwrap();
                let pb = Mask3::new([a.len(), 1, 1], sp, b).unwrap();
                let c = confusion(&pa, &pb).unwrap();
                let r = confusion(&pb, &pa).unwrap();
                prop_assert_eq!(c.total(), a.len() as u64);
                for v in [dsc(&c), sensitivity(&c), specificity(&c)].into_iter().flatten() {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                if let (Ok(x), Ok(y)) = (dsc(&c), dsc(&r)) { prop_assert_eq!(x, y); }
            }
        }
    }
}
