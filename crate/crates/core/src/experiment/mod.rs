//! Experiment harness: configuration, subject splits, cross-validation
//! folds, per-stage training and the end-to-end pipeline.

mod pipeline;
mod train;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{AugmentConfig, AugmentError};
use crate::inference::InferenceError;
use crate::metrics::MetricsError;
use crate::nn::{NnError, VNetConfig};
use crate::phantom::{CohortJitter, PhantomError};
use crate::regions::RegionsError;
use crate::rng::SeededRng;
use crate::volgrid::VolgridError;

pub use pipeline::{generate_subjects, load_subjects, read_sample, run_pipeline, write_prediction, write_sample, PipelineSummary, SplitRecord};
pub use train::{
    centre_window, input_normalisation, patch_origin, select_model, stage_sample, train_model, train_stage, EpochRecord, FoldResult, StageSample, TrainLog,
    TrainOutcome,
};

const SPLIT_STREAM: u64 = 0x5911;
const FOLD_STREAM: u64 = 0xf01d;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("need at least {needed} subjects, have {found}")]
    TooFewSubjects { needed: usize, found: usize },
    #[error("no completed folds to select from")]
    NoFolds,
    #[error("missing data: {0}")]
    DataMissing(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot parse configuration: {0}")]
    ConfigParse(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Volgrid(#[from] VolgridError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Regions(#[from] RegionsError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

impl ExperimentError {
    /// Process exit status: 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use ExperimentError::*;
        match self {
            InvalidConfig(_) | ConfigParse(_) | Augment(_) => 1,
            Nn(NnError::InvalidConfig(_)) => 1,
            Nn(NnError::NonFinite(_)) | Metrics(_) | Regions(RegionsError::Metrics(_)) => 3,
            Inference(InferenceError::Nn(NnError::NonFinite(_))) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Periosteal,
    Endosteal,
}

impl Stage {
    pub const BOTH: [Stage; 2] = [Stage::Periosteal, Stage::Endosteal];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Periosteal => "periosteal",
            Stage::Endosteal => "endosteal",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl std::str::FromStr for Stage {
    type Err = ExperimentError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "periosteal" => Ok(Stage::Periosteal),
            "endosteal" => Ok(Stage::Endosteal),
            _ => Err(ExperimentError::InvalidConfig(format!("unknown stage '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Patch size `[x, y, z]` in voxels. Inference windows are `patch_size[2]` slices deep.
    pub patch_size: [usize; 3],
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Validation runs every this many epochs and after the last one.
    pub validate_every: usize,
    /// Binarise validation windows at their Otsu threshold instead of 0.5.
    pub validation_otsu: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 800,
            patch_size: [192, 192, 64],
            batch_size: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            validate_every: 1,
            validation_otsu: true,
        }
    }
}

impl TrainConfig {
    /// Workstation-sized schedule.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 60,
            patch_size: [64, 64, 32],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ExperimentError::InvalidConfig(m.into()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.patch_size.contains(&0) || self.batch_size == 0 || self.validate_every == 0 {
            return bad("patch_size, batch_size and validate_every must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }
}

/// Synthetic cohort drawn when the pipeline builds its own dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub subjects: usize,
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    pub jitter: CohortJitter,
    pub noise_sigma: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            subjects: 100,
            dims: [96, 96, 48],
            spacing_mm: 1.0,
            jitter: CohortJitter::default(),
            noise_sigma: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset_dir: PathBuf,
    pub split_fraction: f64,
    pub folds: usize,
    pub preset: String,
    pub stage: Stage,
    pub seed: u64,
    /// Voxels by which the periosteal mask is grown before masking stage two.
    pub dilation_margin: usize,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub cohort: CohortConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset_dir: PathBuf::from("data"),
            split_fraction: 0.85,
            folds: 10,
            preset: "full".into(),
            stage: Stage::Periosteal,
            seed: 0,
            dilation_margin: 1,
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            cohort: CohortConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn network(&self) -> Result<VNetConfig> {
        VNetConfig::preset(&self.preset).ok_or_else(|| ExperimentError::InvalidConfig(format!("unknown preset '{}'", self.preset)))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(ExperimentError::InvalidConfig("split_fraction must lie in (0, 1)".into()));
        }
        if self.folds < 2 {
            return Err(ExperimentError::InvalidConfig("folds must be at least 2".into()));
        }
        self.network()?;
        self.train.validate()?;
        self.augment.validate()?;
        if self.cohort.dims.contains(&0) || !(self.cohort.spacing_mm > 0.0) {
            return Err(ExperimentError::InvalidConfig("cohort dims and spacing must be positive".into()));
        }
        Ok(())
    }
}

/// Seeded shuffle, then `round(fraction * n)` training subjects (at least
/// one in each part) and the rest for testing.
pub fn split_subjects(ids: &[String], fraction: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if ids.len() < 2 {
        return Err(ExperimentError::TooFewSubjects { needed: 2, found: ids.len() });
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(ExperimentError::InvalidConfig("split fraction must lie in (0, 1)".into()));
    }
    let mut order = ids.to_vec();
    SeededRng::new(seed, SPLIT_STREAM).shuffle(&mut order);
    let n_train = ((fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    let test = order.split_off(n_train);
    Ok((order, test))
}

/// Fold index of every training subject.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub folds: usize,
    /// `(subject id, fold)` in the order the ids were given.
    pub assignment: Vec<(String, usize)>,
}

impl FoldAssignment {
    pub fn members(&self, fold: usize) -> Vec<String> {
        self.assignment.iter().filter(|(_, f)| *f == fold).map(|(id, _)| id.clone()).collect()
    }

    /// Every subject outside `fold`.
    pub fn training(&self, fold: usize) -> Vec<String> {
        self.assignment.iter().filter(|(_, f)| *f != fold).map(|(id, _)| id.clone()).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        (0..self.folds).map(|k| self.assignment.iter().filter(|(_, f)| *f == k).count()).collect()
    }
}

/// Seeded shuffle, then the subject at shuffled position `i` goes to fold `i mod k`.
pub fn assign_folds(ids: &[String], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k == 0 {
        return Err(ExperimentError::InvalidConfig("fold count must be positive".into()));
    }
    if ids.len() < k {
        return Err(ExperimentError::TooFewSubjects { needed: k, found: ids.len() });
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    SeededRng::new(seed, FOLD_STREAM).shuffle(&mut order);
    let mut fold = vec![0; ids.len()];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    Ok(FoldAssignment {
        folds: k,
        assignment: ids.iter().cloned().zip(fold).collect(),
    })
}

pub fn subject_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("subject-{i:03}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn split_sizes() {
        let (tr, te) = split_subjects(&subject_ids(100), 0.85, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (85, 15));
        let (tr, te) = split_subjects(&subject_ids(2), 0.5, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (1, 1));
        let (tr, te) = split_subjects(&subject_ids(10), 0.99, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (9, 1));
        assert!(matches!(split_subjects(&subject_ids(1), 0.5, 0), Err(ExperimentError::TooFewSubjects { .. })));
    }

    #[test]
    fn split_is_seeded_disjoint_and_exhaustive() {
        let ids = subject_ids(30);
        let a = split_subjects(&ids, 0.7, 9).unwrap();
        assert_eq!(a, split_subjects(&ids, 0.7, 9).unwrap());
        assert_ne!(a, split_subjects(&ids, 0.7, 10).unwrap());
        let tr: HashSet<_> = a.0.iter().collect();
        assert!(a.1.iter().all(|id| !tr.contains(id)));
        assert_eq!(tr.len() + a.1.len(), 30);
    }

    #[test]
    fn ten_folds_of_85() {
        let fa = assign_folds(&subject_ids(85), 10, 1).unwrap();
        let mut sizes = fa.sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, [8, 8, 8, 8, 8, 9, 9, 9, 9, 9]);
        let mut all: Vec<String> = (0..10).flat_map(|k| fa.members(k)).collect();
        all.sort();
        assert_eq!(all, subject_ids(85));
        for k in 0..10 {
            let val: HashSet<_> = fa.members(k).into_iter().collect();
            assert!(fa.training(k).iter().all(|id| !val.contains(id)));
        }
    }

    #[test]
    fn leave_one_out_and_errors() {
        let fa = assign_folds(&subject_ids(5), 5, 2).unwrap();
        assert_eq!(fa.sizes(), vec![1; 5]);
        assert!(matches!(assign_folds(&subject_ids(3), 4, 0), Err(ExperimentError::TooFewSubjects { .. })));
    }

    #[test]
    fn config_roundtrip_and_validation() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = ExperimentConfig::from_toml("seed = 4\nfolds = 3\n[train]\nepochs = 5\n").unwrap();
        assert_eq!(
            (partial.seed, partial.folds, partial.train.epochs, partial.train.patch_size),
            (4, 3, 5, [192, 192, 64])
        );
        assert!(ExperimentConfig::from_toml("folds = 1").is_err());
        assert!(ExperimentConfig::from_toml("split_fraction = 1.0").is_err());
        assert!(ExperimentConfig::from_toml("preset = \"huge\"").is_err());
        assert!(matches!(ExperimentConfig::from_toml("colour = 3"), Err(ExperimentError::ConfigParse(_))));
        assert_eq!(ExperimentConfig::from_toml("folds = 1").unwrap_err().exit_code(), 1);
    }
}
