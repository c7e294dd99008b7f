//! Femur region partition (FH/FN/TR/IT) and regional volume accounting.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, MetricsError};
use crate::phantom::{FemurSolid, PhantomError, PhantomSpec};
use crate::volgrid::io::VoxelCodec;
use crate::volgrid::{count_volume_cm3, Grid, Mask3, VolgridError, Voxel};

#[derive(Debug, Error)]
pub enum RegionsError {
    #[error("femur mask is empty")]
    EmptyMask,
    #[error("degenerate partition geometry: {0}")]
    DegenerateGeometry(String),
    #[error(transparent)]
    Volgrid(#[from] VolgridError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("subject lists differ in length: {0} truth vs {1} predicted")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[repr(u8)]
pub enum Region {
    #[default]
    None = 0,
    FemurHead = 1,
    FemurNeck = 2,
    Trochanter = 3,
    Intertrochanter = 4,
}

impl Region {
    pub const LABELLED: [Region; 4] = [Region::FemurHead, Region::FemurNeck, Region::Trochanter, Region::Intertrochanter];

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Region::None),
            1 => Some(Region::FemurHead),
            2 => Some(Region::FemurNeck),
            3 => Some(Region::Trochanter),
            4 => Some(Region::Intertrochanter),
            _ => None,
        }
    }

    pub fn abbreviation(self) -> &'static str {
        match self {
            Region::None => "-",
            Region::FemurHead => "FH",
            Region::FemurNeck => "FN",
            Region::Trochanter => "TR",
            Region::Intertrochanter => "IT",
        }
    }
}

impl Voxel for Region {}

impl VoxelCodec for Region {
    const DTYPE: &'static str = "u8";
    const BYTES: usize = 1;
    fn encode(&self, out: &mut Vec<u8>) {
        out.push(*self as u8);
    }
    fn decode(bytes: &[u8]) -> Option<Self> {
        Region::from_u8(bytes[0])
    }
}

pub type LabelGrid = Grid<Region>;

/// Slice-wise cuts along one grid axis. Fractions are measured from the
/// `from_high` end of the femur's extent on that axis: slices before
/// `cuts[0]` are FH, then FN up to `cuts[1]`, TR up to `cuts[2]`, IT after.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneCuts {
    pub axis: usize,
    pub from_high: bool,
    pub cuts: [f64; 3],
}

impl Default for PlaneCuts {
    fn default() -> Self {
        Self {
            axis: 2,
            from_high: true,
            cuts: [0.3, 0.45, 0.7],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PartitionParams {
    /// Labels from the phantom's analytic region definition.
    Analytic(PhantomSpec),
    PlaneCuts(PlaneCuts),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionSource {
    AnalyticPhantom,
    PlaneCuts,
}

impl fmt::Display for PartitionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PartitionSource::AnalyticPhantom => "analytic-phantom (stand-in for vendor partition)",
            PartitionSource::PlaneCuts => "plane-cuts (stand-in for vendor partition)",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionPartition {
    pub labels: LabelGrid,
    pub source: PartitionSource,
}

impl RegionPartition {
    pub fn count(&self, region: Region) -> usize {
        self.labels.data().iter().filter(|&&r| r == region).count()
    }
}

pub fn partition(femur: &Mask3, params: &PartitionParams) -> Result<RegionPartition, RegionsError> {
    if femur.count() == 0 {
        return Err(RegionsError::EmptyMask);
    }
    match params {
        PartitionParams::Analytic(spec) => {
            let solid = FemurSolid::new(spec)?;
            let labels = Grid::from_fn(femur.dims(), femur.spacing(), |x, y, z| {
                if femur.get(x, y, z) {
                    solid.region_at(femur.position(x, y, z))
                } else {
                    Region::None
                }
            });
            Ok(RegionPartition {
                labels,
                source: PartitionSource::AnalyticPhantom,
            })
        }
        PartitionParams::PlaneCuts(p) => plane_partition(femur, p),
    }
}

fn plane_partition(femur: &Mask3, p: &PlaneCuts) -> Result<RegionPartition, RegionsError> {
    if p.axis > 2 {
        return Err(RegionsError::DegenerateGeometry(format!("axis {} out of range", p.axis)));
    }
    let c = p.cuts;
    if !(0.0 <= c[0] && c[0] <= c[1] && c[1] <= c[2] && c[2] <= 1.0) {
        return Err(RegionsError::DegenerateGeometry(format!("cuts {c:?} not increasing within [0, 1]")));
    }
    let mut lo = usize::MAX;
    let mut hi = 0;
    for (i, &b) in femur.data().iter().enumerate() {
        if b {
            let s = femur.coords(i)[p.axis];
            lo = lo.min(s);
            hi = hi.max(s);
        }
    }
    let extent = (hi - lo + 1) as f64;
    let labels = Grid::from_fn(femur.dims(), femur.spacing(), |x, y, z| {
        if !femur.get(x, y, z) {
            return Region::None;
        }
        let s = [x, y, z][p.axis];
        let offset = if p.from_high { hi - s } else { s - lo };
        let u = offset as f64 / extent;
        if u < c[0] {
            Region::FemurHead
        } else if u < c[1] {
            Region::FemurNeck
        } else if u < c[2] {
            Region::Trochanter
        } else {
            Region::Intertrochanter
        }
    });
    Ok(RegionPartition {
        labels,
        source: PartitionSource::PlaneCuts,
    })
}

/// The five reported volume targets, cm³.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionVolumes {
    pub femur_head: f64,
    pub femur_neck: f64,
    /// Neck, trochanter and intertrochanter together.
    pub combination: f64,
    pub cortical_neck: f64,
    pub cortical_combination: f64,
}

impl RegionVolumes {
    pub const TARGETS: [&'static str; 5] = [
        "Femur head",
        "Femur neck",
        "Combination",
        "Cortical bone in femur neck",
        "Cortical bone in combination",
    ];

    pub fn as_array(&self) -> [f64; 5] {
        [
            self.femur_head,
            self.femur_neck,
            self.combination,
            self.cortical_neck,
            self.cortical_combination,
        ]
    }
}

pub fn region_volumes(partition: &RegionPartition, periosteal: &Mask3, endosteal: &Mask3) -> Result<RegionVolumes, RegionsError> {
    partition.labels.check_geometry(periosteal)?;
    periosteal.check_geometry(endosteal)?;
    let mut total = [0usize; 5];
    let mut cortical = [0usize; 5];
    for ((&label, &p), &e) in partition.labels.data().iter().zip(periosteal.data()).zip(endosteal.data()) {
        total[label as usize] += 1;
        if p && !e {
            cortical[label as usize] += 1;
        }
    }
    let sp = periosteal.spacing();
    let (fh, fn_, tr, it) = (1, 2, 3, 4);
    Ok(RegionVolumes {
        femur_head: count_volume_cm3(total[fh], sp),
        femur_neck: count_volume_cm3(total[fn_], sp),
        combination: count_volume_cm3(total[fn_] + total[tr] + total[it], sp),
        cortical_neck: count_volume_cm3(cortical[fn_], sp),
        cortical_combination: count_volume_cm3(cortical[fn_] + cortical[tr] + cortical[it], sp),
    })
}

/// One row of the regional volume comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeErrorRow {
    pub target: String,
    pub truth_mean_cm3: f64,
    /// Sample standard deviation across subjects (0 for a single subject).
    pub truth_std_cm3: f64,
    pub mae_cm3: f64,
    pub rmse_cm3: f64,
    pub re_mean_pct: f64,
    pub re_min_pct: f64,
    pub re_max_pct: f64,
}

pub fn volume_error_table(truth: &[RegionVolumes], pred: &[RegionVolumes]) -> Result<Vec<VolumeErrorRow>, RegionsError> {
    if truth.len() != pred.len() {
        return Err(RegionsError::LengthMismatch(truth.len(), pred.len()));
    }
    let mut rows = Vec::with_capacity(5);
    for (k, target) in RegionVolumes::TARGETS.iter().enumerate() {
        let t: Vec<f64> = truth.iter().map(|v| v.as_array()[k]).collect();
        let p: Vec<f64> = pred.iter().map(|v| v.as_array()[k]).collect();
        let re: Vec<f64> = t.iter().zip(&p).map(|(&a, &b)| metrics::relative_error(a, b)).collect::<Result<_, _>>()?;
        let m = t.len() as f64;
        let mean = t.iter().sum::<f64>() / m;
        let std = if t.len() > 1 {
            (t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
        } else {
            0.0
        };
        rows.push(VolumeErrorRow {
            target: target.to_string(),
            truth_mean_cm3: mean,
            truth_std_cm3: std,
            mae_cm3: metrics::mae(&t, &p)?,
            rmse_cm3: metrics::rmse(&t, &p)?,
            re_mean_pct: re.iter().sum::<f64>() / m,
            re_min_pct: re.iter().copied().fold(f64::INFINITY, f64::min),
            re_max_pct: re.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
    }
    Ok(rows)
}

pub fn volume_table_csv(rows: &[VolumeErrorRow]) -> String {
    let mut out = String::from("target,truth_cm3_mean,truth_cm3_std,mae_cm3,rmse_cm3,re_mean_pct,re_min_pct,re_max_pct\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.2},{:.2},{:.2}\n",
            r.target, r.truth_mean_cm3, r.truth_std_cm3, r.mae_cm3, r.rmse_cm3, r.re_mean_pct, r.re_min_pct, r.re_max_pct
        ));
    }
    out
}

/// Human-readable table in the `mean±std | MAE | RMSE | (mean, min, max)` layout.
pub fn format_volume_table(rows: &[VolumeErrorRow]) -> String {
    let mut out = format!(
        "{:<30} {:>16} {:>9} {:>9}  {}\n",
        "Target", "Truth (cm3)", "MAE", "RMSE", "RE % (mean, min, max)"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<30} {:>16} {:>9.4} {:>9.4}  ({:.2}, {:.2}, {:.2})\n",
            r.target,
            format!("{:.2}±{:.2}", r.truth_mean_cm3, r.truth_std_cm3),
            r.mae_cm3,
            r.rmse_cm3,
            r.re_mean_pct,
            r.re_min_pct,
            r.re_max_pct
        ));
    }
    out
}
