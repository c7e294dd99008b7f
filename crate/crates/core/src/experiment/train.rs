use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, ExperimentError, FoldAssignment, Result, Stage, TrainConfig};
use crate::augment::{augment_sample, AugmentConfig};
use crate::inference::{binarize, mask_intensity, threshold_or_default};
use crate::metrics::{confusion, dsc};
use crate::nn::checkpoint::checkpoint_save;
use crate::nn::layers::onehot2;
use crate::nn::{Tensor, VNetModel};
use crate::phantom::PhantomSample;
use crate::rng::SeededRng;
use crate::volgrid::{Dims3, Mask3, Volume3};

const TRAIN_STREAM: u64 = 0x7a41;
const INIT_STREAM: u64 = 0x1417_0000;

/// Network input and target of one subject for one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSample {
    pub id: String,
    pub input: Volume3,
    pub target: Mask3,
}

/// Periosteal samples see the raw intensity. Endosteal samples see the
/// intensity zeroed outside the true periosteal mask grown by `margin`
/// voxels, or the raw intensity when `margin` is `None`.
pub fn stage_sample(id: &str, sample: &PhantomSample, stage: Stage, margin: Option<usize>) -> Result<StageSample> {
    let (input, target) = match (stage, margin) {
        (Stage::Periosteal, _) => (sample.intensity.clone(), sample.periosteal.clone()),
        (Stage::Endosteal, Some(m)) => (mask_intensity(&sample.intensity, &sample.periosteal, m)?, sample.endosteal.clone()),
        (Stage::Endosteal, None) => (sample.intensity.clone(), sample.endosteal.clone()),
    };
    Ok(StageSample {
        id: id.to_string(),
        input,
        target,
    })
}

/// `(offset, scale)` mapping the pooled training intensities to zero mean, unit variance.
pub fn input_normalisation(samples: &[StageSample]) -> (f32, f32) {
    let (mut n, mut s, mut s2) = (0.0f64, 0.0f64, 0.0f64);
    for v in samples.iter().flat_map(|s| s.input.data()) {
        let v = *v as f64;
        n += 1.0;
        s += v;
        s2 += v * v;
    }
    if n == 0.0 {
        return (0.0, 1.0);
    }
    let mean = s / n;
    let std = (s2 / n - mean * mean).max(0.0).sqrt();
    (mean as f32, if std > 0.0 { (1.0 / std) as f32 } else { 1.0 })
}

/// Corner of a training patch. Foreground patches are centred on a random
/// target voxel (clamped to the grid); the others are uniform.
pub fn patch_origin(dims: Dims3, patch: Dims3, target: &Mask3, foreground: bool, rng: &mut SeededRng) -> [usize; 3] {
    let fg = if foreground { target.count() } else { 0 };
    if fg > 0 {
        let nth = rng.below(fg);
        let idx = target.data().iter().enumerate().filter(|(_, &b)| b).nth(nth).map(|(i, _)| i).expect("counted");
        let c = target.coords(idx);
        [0, 1, 2].map(|a| c[a].saturating_sub(patch[a] / 2).min(dims[a] - patch[a]))
    } else {
        [0, 1, 2].map(|a| rng.below(dims[a] - patch[a] + 1))
    }
}

/// First slice of the `depth`-slice window centred in a volume of `nz` slices.
pub fn centre_window(nz: usize, depth: usize) -> usize {
    nz.saturating_sub(depth) / 2
}

fn volume_tensor(v: &Volume3) -> Tensor<f32> {
    let [nx, ny, nz] = v.dims();
    Tensor::new(vec![1, 1, nz, ny, nx], v.data().to_vec()).expect("grid length matches dims")
}

fn target_tensor(m: &Mask3) -> Tensor<f32> {
    let [nx, ny, nz] = m.dims();
    onehot2(m.data(), [nz, ny, nx])
}

/// Mean DSC over `val` of the centre window, binarised at its Otsu
/// threshold or at 0.5. Subjects whose window is empty in both prediction
/// and truth are skipped.
fn validation_dsc(model: &mut VNetModel<f32>, val: &[StageSample], depth: usize, otsu: bool) -> Result<Option<f64>> {
    let mut scores = Vec::new();
    for s in val {
        let [nx, ny, nz] = s.input.dims();
        let z0 = centre_window(nz, depth);
        let size = [nx, ny, depth.min(nz)];
        let x = s.input.crop_box([0, 0, z0 as i64], size)?;
        let truth = s.target.crop_box([0, 0, z0 as i64], size)?;
        let p = model.net.predict(&volume_tensor(&x))?;
        let prob = Volume3::new(size, x.spacing(), p.data[x.len()..].to_vec())?;
        let threshold = if otsu { threshold_or_default(&prob) } else { 0.5 };
        let pred = binarize(&prob, threshold);
        if let Ok(d) = dsc(&confusion(&pred, &truth)?) {
            scores.push(d);
        }
    }
    Ok((!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_dsc: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: Option<Stage>,
    pub fold: Option<usize>,
    pub train_subjects: Vec<String>,
    pub val_subjects: Vec<String>,
    pub best_epoch: Option<usize>,
    pub best_val_dsc: Option<f64>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("log serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

pub struct TrainOutcome {
    /// Parameters at the best validation DSC, or the final ones without validation data.
    pub best: VNetModel<f32>,
    pub last: VNetModel<f32>,
    pub log: TrainLog,
}

/// Runs `cfg.epochs` epochs from `model`. Each epoch visits every training
/// subject once in shuffled order; every second patch is foreground-centred.
/// Resuming from a trained model continues its optimiser step counter.
pub fn train_model(
    mut model: VNetModel<f32>,
    train: &[StageSample],
    val: &[StageSample],
    cfg: &TrainConfig,
    augment: &AugmentConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    augment.validate()?;
    if train.is_empty() {
        return Err(ExperimentError::DataMissing("no training subjects".into()));
    }
    model.config.check_input_dims(cfg.patch_size)?;
    for s in train.iter().chain(val) {
        s.input.check_geometry(&s.target)?;
        let d = s.input.dims();
        if (0..3).any(|a| d[a] < cfg.patch_size[a]) {
            return Err(ExperimentError::InvalidConfig(format!(
                "patch {:?} exceeds subject {} dims {d:?}",
                cfg.patch_size, s.id
            )));
        }
    }
    (model.adam.beta1, model.adam.beta2, model.adam.eps) = (cfg.beta1, cfg.beta2, cfg.eps);
    let mut rng = SeededRng::new(seed, TRAIN_STREAM ^ model.adam.t);
    let mut log = TrainLog {
        train_subjects: train.iter().map(|s| s.id.clone()).collect(),
        val_subjects: val.iter().map(|s| s.id.clone()).collect(),
        ..TrainLog::default()
    };
    let mut best = model.clone();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.shuffle(&mut order);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let mut patches = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &train[i];
                let (input, target) = if augment.is_identity() {
                    (s.input.clone(), s.target.clone())
                } else {
                    let a = augment_sample(&s.input, std::slice::from_ref(&s.target), augment, rng.next_u64())?;
                    (a.intensity, a.masks.into_iter().next().expect("one mask in, one out"))
                };
                let origin = patch_origin(input.dims(), cfg.patch_size, &target, step.is_multiple_of(2), &mut rng);
                let o = origin.map(|v| v as i64);
                let x = input.crop_box(o, cfg.patch_size)?;
                let y = target.crop_box(o, cfg.patch_size)?;
                patches.push((volume_tensor(&x), target_tensor(&y)));
                step += 1;
            }
            let refs: Vec<_> = patches.iter().map(|(x, y)| (x, y)).collect();
            losses.push(model.train_batch(&refs, cfg.learning_rate)?);
        }
        let val_dsc = if !val.is_empty() && (epoch % cfg.validate_every == 0 || epoch == cfg.epochs) {
            validation_dsc(&mut model, val, cfg.patch_size[2], cfg.validation_otsu)?
        } else {
            None
        };
        if let Some(d) = val_dsc {
            if log.best_val_dsc.is_none_or(|b| d > b) {
                log.best_val_dsc = Some(d);
                log.best_epoch = Some(epoch);
                best = model.clone();
            }
        }
        let loss = losses.iter().sum::<f64>() / losses.len() as f64;
        log::info!("epoch {epoch}/{}: loss {loss:.5} val dsc {val_dsc:?}", cfg.epochs);
        log.epochs.push(EpochRecord {
            epoch,
            loss,
            val_dsc,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    if log.best_epoch.is_none() {
        best = model.clone();
    }
    best.net.zero_grad();
    model.net.zero_grad();
    Ok(TrainOutcome { best, last: model, log })
}

/// Outcome of one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub val_dsc: Option<f64>,
    pub checkpoint: PathBuf,
}

/// Initial weights seed for a stage and fold.
pub(crate) fn init_seed(seed: u64, stage: Stage, fold: usize) -> u64 {
    SeededRng::new(seed, INIT_STREAM + stage.index() * 1024 + fold as u64).next_u64()
}

/// Trains one stage on every fold but `fold` and validates on `fold`.
/// Writes `model.ckpt` (best validation DSC) and `log.toml` into `out_dir`.
/// A `resume` model keeps its weights, normalisation and optimiser state.
pub fn train_stage(
    config: &ExperimentConfig,
    stage: Stage,
    subjects: &BTreeMap<String, PhantomSample>,
    folds: &FoldAssignment,
    fold: usize,
    out_dir: &Path,
    resume: Option<VNetModel<f32>>,
) -> Result<FoldResult> {
    let build = |ids: Vec<String>| -> Result<Vec<StageSample>> {
        ids.iter()
            .map(|id| {
                let s = subjects.get(id).ok_or_else(|| ExperimentError::DataMissing(format!("subject {id}")))?;
                stage_sample(id, s, stage, Some(config.dilation_margin))
            })
            .collect()
    };
    let train = build(folds.training(fold))?;
    let val = build(folds.members(fold))?;
    if fold >= folds.folds {
        return Err(ExperimentError::InvalidConfig(format!("fold {fold} out of range for {} folds", folds.folds)));
    }
    let model = match resume {
        Some(m) => m,
        None => {
            let mut m = VNetModel::<f32>::new(config.network()?, init_seed(config.seed, stage, fold))?;
            let (offset, scale) = input_normalisation(&train);
            m.set_normalisation(offset, scale);
            m
        }
    };
    let run_seed = init_seed(config.seed ^ TRAIN_STREAM, stage, fold);
    let mut outcome = train_model(model, &train, &val, &config.train, &config.augment, run_seed)?;
    outcome.log.stage = Some(stage);
    outcome.log.fold = Some(fold);
    fs::create_dir_all(out_dir)?;
    let checkpoint = out_dir.join("model.ckpt");
    checkpoint_save(&outcome.best, &checkpoint)?;
    fs::write(out_dir.join("log.toml"), outcome.log.to_toml())?;
    Ok(FoldResult {
        fold,
        val_dsc: outcome.log.best_val_dsc,
        checkpoint,
    })
}

/// Fold with the highest validation DSC; ties go to the lowest fold index.
/// Folds without a validation score rank last.
pub fn select_model(results: &[FoldResult]) -> Result<&FoldResult> {
    let mut sorted: Vec<&FoldResult> = results.iter().collect();
    sorted.sort_by_key(|r| r.fold);
    let mut best: Option<&FoldResult> = None;
    for r in sorted {
        let score = r.val_dsc.unwrap_or(f64::NEG_INFINITY);
        if best.is_none_or(|b| score > b.val_dsc.unwrap_or(f64::NEG_INFINITY)) {
            best = Some(r);
        }
    }
    best.ok_or(ExperimentError::NoFolds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::VNetConfig;
    use crate::volgrid::Spacing3;

    fn fr(fold: usize, d: f64) -> FoldResult {
        FoldResult {
            fold,
            val_dsc: Some(d),
            checkpoint: PathBuf::from(format!("f{fold}")),
        }
    }

    #[test]
    fn selection_argmax_and_ties() {
        assert_eq!(select_model(&[fr(0, 0.91), fr(1, 0.95), fr(2, 0.93)]).unwrap().fold, 1);
        assert_eq!(select_model(&[fr(0, 0.5)]).unwrap().fold, 0);
        assert_eq!(select_model(&[fr(0, 0.95), fr(1, 0.95)]).unwrap().fold, 0);
        assert_eq!(select_model(&[fr(1, 0.95), fr(0, 0.95)]).unwrap().fold, 0);
        assert!(matches!(select_model(&[]), Err(ExperimentError::NoFolds)));
    }

    #[test]
    fn patch_origins_stay_inside() {
        let sp = Spacing3::isotropic(1.0).unwrap();
        let target = Mask3::from_fn([20, 12, 9], sp, |x, y, z| x > 16 && y < 2 && z == 8);
        let mut rng = SeededRng::new(1, 1);
        for i in 0..200 {
            let o = patch_origin([20, 12, 9], [8, 8, 4], &target, i % 2 == 0, &mut rng);
            assert!(o[0] <= 12 && o[1] <= 4 && o[2] <= 5);
            if i % 2 == 0 {
                let patch = target.crop_box(o.map(|v| v as i64), [8, 8, 4]).unwrap();
                assert!(patch.count() > 0);
            }
        }
    }

    #[test]
    fn normalisation_standardises() {
        let sp = Spacing3::isotropic(1.0).unwrap();
        let s = StageSample {
            id: "a".into(),
            input: Volume3::new([4, 1, 1], sp, vec![1.0, 3.0, 1.0, 3.0]).unwrap(),
            target: Mask3::filled([4, 1, 1], sp, false),
        };
        assert_eq!(input_normalisation(&[s]), (2.0, 1.0));
        assert_eq!(centre_window(48, 32), 8);
        assert_eq!(centre_window(20, 32), 0);
    }

    fn toy_sample(id: &str) -> StageSample {
        let sp = Spacing3::isotropic(1.0).unwrap();
        let target = Mask3::from_fn([8, 8, 8], sp, |x, y, _| (2..6).contains(&x) && (2..6).contains(&y));
        let input = target.map(|b| if b { 1.0 } else { 0.0 });
        StageSample { id: id.into(), input, target }
    }

    #[test]
    fn zero_epochs_return_the_initial_model() {
        let m = VNetModel::<f32>::new(VNetConfig::tiny(), 5).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            patch_size: [8, 8, 8],
            ..TrainConfig::desk()
        };
        let out = train_model(m.clone(), &[toy_sample("a")], &[toy_sample("b")], &cfg, &AugmentConfig::identity(), 1).unwrap();
        assert!(out.best == m);
        assert!(out.log.epochs.is_empty());
        assert_eq!(out.best.adam.t, 0);
    }

    #[test]
    fn resume_continues_the_step_counter() {
        let m = VNetModel::<f32>::new(VNetConfig::tiny(), 5).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            patch_size: [8, 8, 8],
            ..TrainConfig::desk()
        };
        let data = [toy_sample("a"), toy_sample("b")];
        let first = train_model(m, &data, &[], &cfg, &AugmentConfig::identity(), 1).unwrap();
        assert_eq!(first.last.adam.t, 4);
        let second = train_model(first.last, &data, &[], &cfg, &AugmentConfig::identity(), 1).unwrap();
        assert_eq!(second.last.adam.t, 8);
        assert_eq!(second.log.epochs.len(), 2);
    }

    #[test]
    fn log_roundtrip() {
        let log = TrainLog {
            stage: Some(Stage::Endosteal),
            fold: Some(2),
            train_subjects: vec!["a".into()],
            val_subjects: vec!["b".into()],
            best_epoch: Some(1),
            best_val_dsc: Some(0.5),
            epochs: vec![EpochRecord {
                epoch: 1,
                loss: 0.25,
                val_dsc: Some(0.5),
                seconds: 1.0,
            }],
        };
        assert_eq!(TrainLog::from_toml(&log.to_toml()).unwrap(), log);
    }
}
