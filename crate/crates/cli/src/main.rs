use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lesionflow_cli::config::PipelineConfig;
use lesionflow_cli::pipeline::{Arch, Pipeline};

#[derive(Parser)]
#[command(
    name = "lesionflow",
    version,
    about = "Lesion segmentation pipeline on synthetic phantoms"
)]
struct Cli {
    /// JSON file overlaid on the selected profile.
    #[arg(long, global = true, env = "LF_CONFIG")]
    config: Option<PathBuf>,
    /// Base parameter profile: desk or paper.
    #[arg(long, global = true, env = "LF_PROFILE", default_value = "desk")]
    profile: String,
    /// Pipeline setting (1..7).
    #[arg(long, global = true, env = "LF_SETTING")]
    setting: Option<u8>,
    /// Master seed; every stage derives its own stream from it.
    #[arg(long, global = true, env = "LF_SEED")]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "LF_JOBS")]
    jobs: Option<usize>,
    /// Directory holding all stage artifacts.
    #[arg(long, global = true, env = "LF_WORK_DIR")]
    work_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic phantom cohorts.
    Synth,
    /// Bias-correct, crop and normalize every case.
    Preprocess,
    /// Train a segmentation model (cross-validated U-Net or single U-Net++).
    TrainSeg {
        #[arg(long, value_enum, default_value_t = Arch::Unet)]
        arch: Arch,
    },
    /// Train the axial slice classifier.
    TrainClf,
    /// Train the radiomics false-positive classifier.
    TrainFpclf,
    /// Sliding-window inference over the test cohort.
    Predict {
        #[arg(long, value_enum, default_value_t = Arch::Unet)]
        arch: Arch,
    },
    /// Average the U-Net and U-Net++ probability maps.
    Ensemble,
    /// Binarize, restore native geometry and apply the setting's filters.
    Postprocess,
    /// Score the final masks against ground truth.
    Evaluate,
    /// Emit the results table, size scatter, t-tests and error heatmaps.
    Report {
        /// Settings to tabulate; the first drives scatter and heatmaps.
        #[arg(long, value_delimiter = ',')]
        settings: Vec<u8>,
    },
    /// Run the configured setting end to end.
    Run,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> lesionflow_cli::Result<()> {
    let base = PipelineConfig::profile(&cli.profile)?;
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let overlay: serde_json::Value = serde_json::from_str(&text)?;
            PipelineConfig::from_json_overlay(base, &overlay)?
        }
        None => base,
    };
    if let Some(s) = cli.setting {
        cfg.setting = s;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if let Some(w) = &cli.work_dir {
        cfg.work_dir = w.clone();
    }
    cfg.validate()?;
    if cfg.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build_global()
            .ok();
    }

    let mut pipeline = Pipeline::new(cfg)?;
    let command = match &cli.command {
        Command::Synth => {
            let s = pipeline.synth()?;
            println!("synth -> {}", s.dir.display());
            "synth"
        }
        Command::Preprocess => {
            let s = pipeline.preprocess()?;
            println!("preprocess -> {}", s.dir.display());
            "preprocess"
        }
        Command::TrainSeg { arch } => {
            let s = pipeline.train_seg(*arch)?;
            println!("train-seg ({}) -> {}", arch.as_str(), s.dir.display());
            "train-seg"
        }
        Command::TrainClf => {
            let s = pipeline.train_clf()?;
            println!("train-clf -> {}", s.dir.display());
            "train-clf"
        }
        Command::TrainFpclf => {
            let s = pipeline.train_fpclf()?;
            println!("train-fpclf -> {}", s.dir.display());
            "train-fpclf"
        }
        Command::Predict { arch } => {
            let s = pipeline.predict(*arch)?;
            println!("predict ({}) -> {}", arch.as_str(), s.dir.display());
            "predict"
        }
        Command::Ensemble => {
            let s = pipeline.ensemble()?;
            println!("ensemble -> {}", s.dir.display());
            "ensemble"
        }
        Command::Postprocess => {
            let s = pipeline.postprocess()?;
            println!("postprocess -> {}", s.dir.display());
            "postprocess"
        }
        Command::Evaluate => {
            let s = pipeline.evaluate()?;
            println!("evaluate -> {}", s.dir.display());
            "evaluate"
        }
        Command::Report { settings } => {
            let list = if settings.is_empty() {
                vec![pipeline.config().setting]
            } else {
                settings.clone()
            };
            let s = pipeline.report(&list)?;
            println!("report -> {}", s.dir.display());
            "report"
        }
        Command::Run => {
            let setting = pipeline.config().setting;
            let m = pipeline.run_setting()?;
            println!(
                "setting {} done: n={} accuracy={:.4} overall-dsc={:.4}",
                setting, m.n, m.accuracy, m.overall.mean
            );
            "run"
        }
    };
    pipeline.write_run_record(command)?;
    Ok(())
}
