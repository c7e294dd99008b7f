use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use femurseg::experiment::{
    assign_folds, generate_subjects, load_subjects, read_sample, run_pipeline, split_subjects, train_stage, write_prediction, write_sample, CohortConfig,
    ExperimentConfig, ExperimentError, SplitRecord, Stage,
};
use femurseg::inference::{cascade_segment, CascadeConfig};
use femurseg::metrics::surface::distance_map_volume;
use femurseg::metrics::{evaluate_subject, extract_surface, surface_distance_map, MetricsReport, StructureMasks};
use femurseg::nn::checkpoint::checkpoint_load;
use femurseg::phantom::{generate, PhantomSpec};
use femurseg::regions::{format_volume_table, volume_table_csv};
use femurseg::volgrid::io::{read_mask, read_volume, write_volume};
use femurseg::volgrid::Spacing3;

#[derive(Parser)]
#[command(name = "femurseg", version, about = "Cascaded V-Net femur segmentation on synthetic phantoms")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

/// Flags that override fields of the configuration file.
#[derive(Args, Default)]
struct Overrides {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset_dir: Option<PathBuf>,
    #[arg(long)]
    split_fraction: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    /// Network preset: tiny or full.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    stage: Option<Stage>,
    #[arg(long)]
    dilation_margin: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long, num_args = 3, value_names = ["X", "Y", "Z"])]
    patch_size: Option<Vec<usize>>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    validate_every: Option<usize>,
    /// Number of phantoms in a generated cohort.
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long, num_args = 3, value_names = ["X", "Y", "Z"])]
    dims: Option<Vec<usize>>,
    #[arg(long)]
    spacing_mm: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
}

impl Overrides {
    fn resolve(&self, seed: Option<u64>) -> Result<ExperimentConfig, ExperimentError> {
        let mut c = match &self.config {
            Some(p) => toml::from_str(&fs::read_to_string(p)?)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($flag:expr, $field:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        set!(self.dataset_dir, c.dataset_dir);
        set!(self.split_fraction, c.split_fraction);
        set!(self.folds, c.folds);
        set!(self.preset, c.preset);
        set!(self.stage, c.stage);
        set!(self.dilation_margin, c.dilation_margin);
        set!(self.epochs, c.train.epochs);
        set!(self.learning_rate, c.train.learning_rate);
        set!(self.batch_size, c.train.batch_size);
        set!(self.validate_every, c.train.validate_every);
        set!(self.subjects, c.cohort.subjects);
        set!(self.spacing_mm, c.cohort.spacing_mm);
        set!(self.noise_sigma, c.cohort.noise_sigma);
        set!(seed, c.seed);
        if let Some(p) = &self.patch_size {
            c.train.patch_size = [p[0], p[1], p[2]];
        }
        if let Some(d) = &self.dims {
            c.cohort.dims = [d[0], d[1], d[2]];
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantom sample directories.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        /// Write a cohort of this many subjects as `<out>/subject-NNN`; 1 writes `<out>` itself.
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Split the subjects of a dataset into train/test and folds.
    Split {
        /// Output split file (TOML).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train one stage on one cross-validation fold.
    Train {
        /// Split file written by `split`.
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        fold: usize,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Cascade-segment one intensity volume.
    Predict {
        #[arg(long)]
        periosteal_model: PathBuf,
        #[arg(long)]
        endosteal_model: PathBuf,
        /// Intensity volume header.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        window_depth: usize,
        #[arg(long, default_value_t = 1)]
        dilation_margin: usize,
    },
    /// Score predicted masks against a phantom sample directory.
    Evaluate {
        /// Directory holding `periosteal.vhdr` and `endosteal.vhdr`.
        #[arg(long)]
        pred: PathBuf,
        /// Sample directory with the ground truth.
        #[arg(long)]
        truth: PathBuf,
        /// Report file (TOML).
        #[arg(long)]
        out: PathBuf,
        /// Also write per-voxel surface distance maps here.
        #[arg(long)]
        distance_maps: Option<PathBuf>,
    },
    /// Print a metrics report and optionally export its region table.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the full experiment.
    Pipeline {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn run(cmd: Command) -> Result<(), ExperimentError> {
    match cmd {
        Command::Phantom { out, count, seed, overrides } => {
            let c = overrides.resolve(seed)?;
            if count <= 1 {
                let spacing = Spacing3::isotropic(c.cohort.spacing_mm)?;
                let spec = PhantomSpec {
                    seed: c.seed,
                    noise_sigma: c.cohort.noise_sigma,
                    ..PhantomSpec::for_grid(c.cohort.dims, spacing)
                };
                write_sample(&out, &generate(&spec, c.cohort.dims, spacing)?)?;
            } else {
                let c = ExperimentConfig {
                    cohort: CohortConfig {
                        subjects: count,
                        ..c.cohort.clone()
                    },
                    ..c
                };
                for (id, s) in generate_subjects(&c)? {
                    write_sample(&out.join(id), &s)?;
                }
            }
        }
        Command::Split { out, seed, overrides } => {
            let c = overrides.resolve(seed)?;
            let ids: Vec<String> = load_subjects(&c.dataset_dir)?.into_keys().collect();
            if ids.is_empty() {
                return Err(ExperimentError::DataMissing(format!("no sample directories in {}", c.dataset_dir.display())));
            }
            let (train, test) = split_subjects(&ids, c.split_fraction, c.seed)?;
            let folds = assign_folds(&train, c.folds, c.seed)?;
            let record = SplitRecord {
                seed: c.seed,
                train,
                test,
                fold_sizes: folds.sizes(),
                folds,
            };
            fs::write(&out, toml::to_string(&record).expect("split serialises"))?;
            println!("{} train, {} test, fold sizes {:?}", record.train.len(), record.test.len(), record.fold_sizes);
        }
        Command::Train {
            split,
            fold,
            out,
            resume,
            seed,
            overrides,
        } => {
            let c = overrides.resolve(seed)?;
            let record: SplitRecord = toml::from_str(&fs::read_to_string(&split)?)?;
            let subjects = load_subjects(&c.dataset_dir)?;
            let resume = resume.map(|p| checkpoint_load(&p)).transpose()?;
            let r = train_stage(&c, c.stage, &subjects, &record.folds, fold, &out, resume)?;
            println!("fold {} validation DSC {:?}, checkpoint {}", r.fold, r.val_dsc, r.checkpoint.display());
        }
        Command::Predict {
            periosteal_model,
            endosteal_model,
            input,
            out,
            window_depth,
            dilation_margin,
        } => {
            let mut peri = checkpoint_load(&periosteal_model)?;
            let mut endo = checkpoint_load(&endosteal_model)?;
            let vol = read_volume(&input)?;
            let r = cascade_segment(&mut peri, &mut endo, &vol, &CascadeConfig { window_depth, dilation_margin })?;
            write_prediction(&out, &r)?;
            println!(
                "thresholds {:.4} / {:.4}, {:.2} s + {:.2} s",
                r.periosteal.threshold, r.endosteal.threshold, r.periosteal.seconds, r.endosteal.seconds
            );
        }
        Command::Evaluate {
            pred,
            truth,
            out,
            distance_maps,
        } => {
            let sample = read_sample(&truth)?;
            let p = StructureMasks {
                periosteal: read_mask(&pred.join("periosteal.vhdr"))?,
                endosteal: read_mask(&pred.join("endosteal.vhdr"))?,
            };
            let t = StructureMasks {
                periosteal: sample.periosteal,
                endosteal: sample.endosteal,
            };
            let id = truth.file_name().and_then(|n| n.to_str()).unwrap_or("subject");
            let row = evaluate_subject(id, &p, &t)?;
            let report = MetricsReport::from_subjects(vec![row], Vec::new(), "none".into());
            fs::write(&out, report.to_toml())?;
            if let Some(dir) = distance_maps {
                fs::create_dir_all(&dir)?;
                for (name, pm, tm) in [("periosteal", &p.periosteal, &t.periosteal), ("endosteal", &p.endosteal, &t.endosteal)] {
                    let (ps, ts) = (extract_surface(pm)?, extract_surface(tm)?);
                    let d = surface_distance_map(&ps, &ts)?;
                    write_volume(&distance_map_volume(&ps, &d)?, &dir.join(format!("{name}_distance.vhdr")))?;
                }
            }
            print_summary(&report);
        }
        Command::Report { input, csv } => {
            let report = MetricsReport::from_toml(&fs::read_to_string(&input)?)?;
            print_summary(&report);
            if !report.regions.is_empty() {
                print!("{}", format_volume_table(&report.regions));
            }
            if let Some(p) = csv {
                fs::write(p, volume_table_csv(&report.regions))?;
            }
        }
        Command::Pipeline { out, seed, overrides } => {
            let c = overrides.resolve(Some(seed))?;
            let summary = run_pipeline(&c, &out)?;
            print_summary(&summary.report);
            print!("{}", format_volume_table(&summary.report.regions));
        }
    }
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("undefined".into(), |x| format!("{x:.4}"))
}

fn print_summary(r: &MetricsReport) {
    println!("subjects: {}", r.subject_count);
    for (name, m) in [("periosteal", &r.periosteal), ("endosteal", &r.endosteal)] {
        println!(
            "{name:<11} DSC {}  ASD {} mm  SN {}  SP {}",
            fmt(m.dsc),
            fmt(m.asd_mm),
            fmt(m.sensitivity),
            fmt(m.specificity)
        );
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .parse_default_env()
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
