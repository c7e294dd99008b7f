//! End-to-end experiment.
//!
//! Output directory layout:
//!
//! ```text
//! <out>/config.toml                   resolved configuration
//! <out>/split.toml                    train/test ids and fold assignment
//! <dataset_dir>/<id>/                 one sample directory per subject (see `write_sample`)
//! <out>/<stage>/fold-<k>/model.ckpt   best-validation checkpoint of fold k
//! <out>/<stage>/fold-<k>/log.toml     per-epoch loss and validation DSC
//! <out>/<stage>/selected.ckpt         checkpoint chosen across folds
//! <out>/predictions/<id>/             cascade output (see `write_prediction`)
//! <out>/report.toml                   metrics report
//! <out>/regions.csv                   regional volume table
//! ```
//!
//! A relative `dataset_dir` is resolved against `<out>`. Existing sample
//! directories there are reused; otherwise a phantom cohort is generated.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::train::{select_model, train_stage, FoldResult};
use super::{assign_folds, split_subjects, subject_ids, ExperimentConfig, ExperimentError, FoldAssignment, Result, Stage};
use crate::inference::{cascade_segment, CascadeConfig, CascadeResult};
use crate::metrics::{evaluate_subject, MetricsReport, StructureMasks};
use crate::nn::checkpoint::checkpoint_load;
use crate::phantom::{generate_cohort, PhantomSample, PhantomSpec};
use crate::regions::{partition, region_volumes, volume_error_table, volume_table_csv, PartitionParams, RegionVolumes, RegionsError};
use crate::volgrid::io::{read_grid, read_mask, read_volume, write_grid, write_mask, write_volume};
use crate::volgrid::Spacing3;

/// Writes `intensity.vhdr`, `periosteal.vhdr`, `endosteal.vhdr`,
/// `regions.vhdr` (with their payloads) and `spec.toml` into `dir`.
pub fn write_sample(dir: &Path, sample: &PhantomSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_volume(&sample.intensity, &dir.join("intensity.vhdr"))?;
    write_mask(&sample.periosteal, &dir.join("periosteal.vhdr"))?;
    write_mask(&sample.endosteal, &dir.join("endosteal.vhdr"))?;
    write_grid(&sample.regions, &dir.join("regions.vhdr"))?;
    fs::write(dir.join("spec.toml"), toml::to_string(&sample.spec).expect("spec serialises"))?;
    Ok(())
}

pub fn read_sample(dir: &Path) -> Result<PhantomSample> {
    let spec_path = dir.join("spec.toml");
    if !spec_path.exists() {
        return Err(ExperimentError::DataMissing(format!("{} has no spec.toml", dir.display())));
    }
    let spec: PhantomSpec = toml::from_str(&fs::read_to_string(spec_path)?)?;
    Ok(PhantomSample {
        spec,
        intensity: read_volume(&dir.join("intensity.vhdr"))?,
        periosteal: read_mask(&dir.join("periosteal.vhdr"))?,
        endosteal: read_mask(&dir.join("endosteal.vhdr"))?,
        regions: read_grid(&dir.join("regions.vhdr"))?,
    })
}

/// Writes probability maps, masks and `run.toml` (thresholds and timings).
pub fn write_prediction(dir: &Path, result: &CascadeResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, stage) in [("periosteal", &result.periosteal), ("endosteal", &result.endosteal)] {
        write_volume(&stage.probability, &dir.join(format!("{name}_probability.vhdr")))?;
        write_mask(&stage.mask, &dir.join(format!("{name}.vhdr")))?;
    }
    let report = format!(
        "periosteal_threshold = {}\nendosteal_threshold = {}\nperiosteal_seconds = {}\nendosteal_seconds = {}\n",
        result.periosteal.threshold, result.endosteal.threshold, result.periosteal.seconds, result.endosteal.seconds
    );
    fs::write(dir.join("run.toml"), report)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub fold_sizes: Vec<usize>,
    pub folds: FoldAssignment,
}

pub struct PipelineSummary {
    pub split: SplitRecord,
    pub selected: Vec<(Stage, FoldResult)>,
    pub report: MetricsReport,
}

/// Every sample directory directly under `dir`, keyed by directory name.
pub fn load_subjects(dir: &Path) -> Result<BTreeMap<String, PhantomSample>> {
    let mut subjects = BTreeMap::new();
    if dir.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("spec.toml").exists())
            .collect();
        entries.sort();
        for p in entries {
            let id = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            subjects.insert(id, read_sample(&p)?);
        }
    }
    Ok(subjects)
}

/// The configured phantom cohort, keyed by subject id.
pub fn generate_subjects(config: &ExperimentConfig) -> Result<BTreeMap<String, PhantomSample>> {
    let c = &config.cohort;
    let spacing = Spacing3::isotropic(c.spacing_mm)?;
    let base = PhantomSpec {
        seed: config.seed,
        noise_sigma: c.noise_sigma,
        ..PhantomSpec::for_cohort(c.dims, spacing, &c.jitter)
    };
    let cohort = generate_cohort(c.subjects, &base, &c.jitter, c.dims, spacing, config.seed)?;
    Ok(subject_ids(c.subjects).into_iter().zip(cohort).collect())
}

fn load_or_generate(config: &ExperimentConfig, dir: &Path) -> Result<BTreeMap<String, PhantomSample>> {
    let subjects = load_subjects(dir)?;
    if !subjects.is_empty() {
        return Ok(subjects);
    }
    let subjects = generate_subjects(config)?;
    for (id, s) in &subjects {
        write_sample(&dir.join(id), s)?;
    }
    Ok(subjects)
}

fn volumes_or_zero(sample: &PhantomSample, masks: &StructureMasks) -> Result<RegionVolumes> {
    match partition(&masks.periosteal, &PartitionParams::Analytic(sample.spec.clone())) {
        Ok(p) => Ok(region_volumes(&p, &masks.periosteal, &masks.endosteal)?),
        Err(RegionsError::EmptyMask) => Ok(RegionVolumes {
            femur_head: 0.0,
            femur_neck: 0.0,
            combination: 0.0,
            cortical_neck: 0.0,
            cortical_combination: 0.0,
        }),
        Err(e) => Err(e.into()),
    }
}

/// Cohort, split, cross-validated training of both stages, cascade
/// prediction of the test subjects and the metrics report.
pub fn run_pipeline(config: &ExperimentConfig, out: &Path) -> Result<PipelineSummary> {
    config.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), config.to_toml())?;
    let data_dir = out.join(&config.dataset_dir);
    let subjects = load_or_generate(config, &data_dir)?;
    let ids: Vec<String> = subjects.keys().cloned().collect();
    let (train, test) = split_subjects(&ids, config.split_fraction, config.seed)?;
    let folds = assign_folds(&train, config.folds, config.seed)?;
    let split = SplitRecord {
        seed: config.seed,
        train,
        test,
        fold_sizes: folds.sizes(),
        folds,
    };
    fs::write(out.join("split.toml"), toml::to_string(&split).expect("split serialises"))?;
    log::info!(
        "split: {} train, {} test, fold sizes {:?}",
        split.train.len(),
        split.test.len(),
        split.fold_sizes
    );

    let mut selected = Vec::new();
    for stage in Stage::BOTH {
        let mut results = Vec::new();
        for k in 0..config.folds {
            let dir = out.join(stage.name()).join(format!("fold-{k}"));
            log::info!("training {} fold {k}", stage.name());
            results.push(train_stage(config, stage, &subjects, &split.folds, k, &dir, None)?);
        }
        let best = select_model(&results)?.clone();
        fs::copy(&best.checkpoint, out.join(stage.name()).join("selected.ckpt"))?;
        selected.push((stage, best));
    }

    let mut peri = checkpoint_load(&selected[0].1.checkpoint)?;
    let mut endo = checkpoint_load(&selected[1].1.checkpoint)?;
    let cascade = CascadeConfig {
        window_depth: config.train.patch_size[2],
        dilation_margin: config.dilation_margin,
    };
    let (mut rows, mut truth_vols, mut pred_vols) = (Vec::new(), Vec::new(), Vec::new());
    for id in &split.test {
        let sample = &subjects[id];
        let r = cascade_segment(&mut peri, &mut endo, &sample.intensity, &cascade)?;
        write_prediction(&out.join("predictions").join(id), &r)?;
        let pred = StructureMasks {
            periosteal: r.periosteal.mask,
            endosteal: r.endosteal.mask,
        };
        let truth = StructureMasks {
            periosteal: sample.periosteal.clone(),
            endosteal: sample.endosteal.clone(),
        };
        rows.push(evaluate_subject(id, &pred, &truth)?);
        truth_vols.push(volumes_or_zero(sample, &truth)?);
        pred_vols.push(volumes_or_zero(sample, &pred)?);
    }
    let table = volume_error_table(&truth_vols, &pred_vols)?;
    fs::write(out.join("regions.csv"), volume_table_csv(&table))?;
    let report = MetricsReport::from_subjects(rows, table, "analytic-phantom".into());
    fs::write(out.join("report.toml"), report.to_toml())?;
    Ok(PipelineSummary { split, selected, report })
}
