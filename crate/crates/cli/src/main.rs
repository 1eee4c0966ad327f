//! Command-line driver for dataset generation, training and evaluation.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rbfood::Error;

const AFTER_HELP: &str = "\
Errors are printed as one line `error:<kind>:<message>` with exit status:
  1 other, 2 config or usage, 3 io, 4 shape or data, 5 non-finite training loss

Outputs (all text unless noted):
  gen-data         dataset.bin (binary), index.csv (scene_id,proposal_id,split,gt_class)
  toy2d            summary.csv (variant,train_accuracy,auroc,fpr95,ood_below_0.3),
                   <variant>_scores.csv (score,label), <variant>_grid.umap/.pgm
  train-propseg    propseg.ckpt (binary), propseg_log.csv (epoch,lr,l_in,l_bd,l_reg,total)
  train-propcls    propcls.ckpt (binary), propcls_log.csv (same columns)
  eval-proposals   pixel_scores.csv (score,label), raw_scores.csv (proposal_id,score,label),
                   proposals.csv (proposal_id,split,gt_class,positives,negatives,auroc,ap,fpr95),
                   summary.csv (metric,value), maps/<proposal_id>.umap/.pgm;
                   with --propcls also cls_scores.csv (score,label) and
                   classification.csv (proposal_id,split,gt_class,predicted,u_cls,whole_box)
  eval-image       scene_<id>.umap/.pgm, contributing_<id>.csv (proposal_id,u_cls),
                   pixel_scores.csv (score,label), summary.csv (metric,value)
  metrics          auroc, ap and fpr95 lines `name,value` on stdout (and in --out if given)
  flag-detections  detections.csv (scene,x,y,w,h,class,score,u_cls,flagged,mislabeled),
                   summary.csv (metric,value)";

#[derive(Parser)]
#[command(name = "rbfood", version, about = "Distance-aware uncertainty for unknown-object detection", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (a file for `metrics`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic proposal benchmark.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a toy 2-D variant and dump its uncertainty grid.
    Toy2d {
        #[command(flatten)]
        common: Common,
    },
    /// Train the proposal segmentation model.
    TrainPropseg {
        #[command(flatten)]
        common: Common,
        /// Dataset file written by gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the proposal classifier on masks from a segmentation model.
    TrainPropcls {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        propseg: PathBuf,
    },
    /// Per-pixel uncertainty on the test proposals.
    EvalProposals {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        propseg: PathBuf,
        #[arg(long)]
        propcls: Option<PathBuf>,
    },
    /// Whole-image uncertainty maps for test scenes.
    EvalImage {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        propseg: PathBuf,
        #[arg(long)]
        propcls: PathBuf,
        /// Only this scene (default: every test scene).
        #[arg(long)]
        scene: Option<usize>,
    },
    /// AUROC, AP and FPR at the configured TPR of a `score,label` file.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scores: PathBuf,
    },
    /// Flag detections whose class is uncertain.
    FlagDetections {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        propseg: PathBuf,
        #[arg(long)]
        propcls: PathBuf,
    },
}

fn error_kind(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Config { .. } => ("config", 2),
        Error::Io(_) => ("io", 3),
        Error::NonFinite(_) => ("nonfinite", 5),
        Error::Shape(_) | Error::LayerShape { .. } | Error::Format(_) | Error::Invalid(_) | Error::StaleCache(_) => ("data", 4),
        Error::Placement(_) => ("other", 1),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error:usage:{line}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::GenData { common } => commands::gen_data(&common),
        Command::Toy2d { common } => commands::toy2d(&common),
        Command::TrainPropseg { common, data } => commands::train_propseg(&common, &data),
        Command::TrainPropcls { common, data, propseg } => commands::train_propcls(&common, &data, &propseg),
        Command::EvalProposals {
            common,
            data,
            propseg,
            propcls,
        } => commands::eval_proposals(&common, &data, &propseg, propcls.as_deref()),
        Command::EvalImage {
            common,
            data,
            propseg,
            propcls,
            scene,
        } => commands::eval_image(&common, &data, &propseg, &propcls, scene),
        Command::Metrics { common, scores } => commands::metrics(&common, &scores),
        Command::FlagDetections {
            common,
            data,
            propseg,
            propcls,
        } => commands::flag_detections(&common, &data, &propseg, &propcls),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = error_kind(&e);
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error:{kind}:{msg}");
            ExitCode::from(code)
        }
    }
}
