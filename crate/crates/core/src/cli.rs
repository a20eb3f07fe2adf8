//! Command-line front end. Values come from built-in defaults, then the
//! `--config` JSON file, then flags; later sources win.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::dataio::{gen_synthetic_to_dir, Corpus, SyntheticConfig};
use crate::decode::{read_predictions, write_predictions_file};
use crate::error::{Error, Result};
use crate::evalkit::{mean_ap, read_ground_truth, validate_thresholds, Preset};
use crate::trainer::{detect, gradcheck_random_model, train, Checkpoint, TrainConfig};
use crate::tubes::{interpolate_tube, label_tube, link_video, read_detections, LinkConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Contents of a `--config` file. Every section is optional and unknown
/// keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfigFile {
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
    pub link: LinkConfig,
    pub preset: Option<Preset>,
}

impl CliConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), e.line())))
    }
}

#[derive(Debug, Parser)]
#[command(name = "compad", version, about = "Complex activity detection on pre-extracted snippet features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus to <out>/train and <out>/test.
    GenSynth(GenSynthArgs),
    /// Train a model and write its checkpoint.
    Train(TrainArgs),
    /// Run a checkpoint over feature files and write a predictions CSV.
    Detect(DetectArgs),
    /// Score predictions against ground truth (temporal mAP).
    Eval(EvalArgs),
    /// Finite-difference check of the full model's gradients.
    Gradcheck(GradcheckArgs),
    /// Link per-frame agent detections into labelled tubes.
    LinkTubes(LinkTubesArgs),
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// JSON config file (sections: train, synthetic, link, preset) [default: none]
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Generator seed [default: config, else 7]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Feature file or directory of .jsonl feature files
    #[arg(long)]
    features: PathBuf,
    /// Ground-truth CSV
    #[arg(long)]
    annotations: PathBuf,
    /// Checkpoint path to write
    #[arg(long)]
    out: PathBuf,
    /// Initialization and shuffling seed [default: config, else 7]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct DetectArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Feature file or directory of .jsonl feature files
    #[arg(long)]
    features: PathBuf,
    /// Predictions CSV to write
    #[arg(long)]
    out: PathBuf,
    /// Boundary threshold [default: checkpoint config, else 0.5]
    #[arg(long)]
    theta: Option<f64>,
    /// Worker threads, 0 for all cores
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Predictions CSV
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth CSV
    #[arg(long)]
    gt: PathBuf,
    /// Threshold preset: road, thumos or activitynet [default: config, else thumos]
    #[arg(long, conflicts_with = "thresholds")]
    preset: Option<Preset>,
    /// Comma-separated IoU thresholds, e.g. 0.3,0.5,0.7 [default: preset]
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    /// Report JSON path [default: standard output]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Seed for the random model and inputs
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Debug, Args)]
struct LinkTubesArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Detections CSV: video_id,frame,x1,y1,x2,y2,agentness,score_0..
    #[arg(long)]
    detections: PathBuf,
    /// Tubes JSON to write
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Numeric(_) | Error::UndefinedIou => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenSynth(a) => {
            let mut cfg = CliConfigFile::load(a.config.config.as_deref())?.synthetic;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let data = gen_synthetic_to_dir(&cfg, &a.out)?;
            info!(
                "wrote {} train and {} test videos to {} (nearest-centroid probe accuracy {:.4})",
                data.train.videos.len(),
                data.test.videos.len(),
                a.out.display(),
                data.probe_accuracy
            );
        }
        Command::Train(a) => {
            let mut cfg = CliConfigFile::load(a.config.config.as_deref())?.train;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let corpus = Corpus::load(&a.features, Some(&a.annotations))?;
            let ck = train(&cfg, &corpus)?;
            ck.save(&a.out)?;
            info!("checkpoint written to {}", a.out.display());
        }
        Command::Detect(a) => {
            let ck = Checkpoint::load(&a.checkpoint)?;
            let mut decode = ck.config.decode.clone();
            if let Some(t) = a.theta {
                decode.theta = t;
            }
            let corpus = Corpus::load(&a.features, None)?;
            let preds = detect(&ck, &corpus, &decode, a.jobs)?;
            write_predictions_file(&a.out, &preds)?;
            info!("{} segments written to {}", preds.len(), a.out.display());
        }
        Command::Eval(a) => {
            let file = CliConfigFile::load(a.config.config.as_deref())?;
            let thresholds = match (a.thresholds, a.preset.or(file.preset)) {
                (Some(t), _) => t,
                (None, Some(p)) => p.thresholds(),
                (None, None) => Preset::Thumos.thresholds(),
            };
            validate_thresholds(&thresholds)?;
            let preds = read_predictions(&a.pred)?;
            let gts = read_ground_truth(&a.gt)?;
            let report = mean_ap(&preds, &gts, &thresholds)?;
            eprint!("{}", report.to_table());
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Internal(format!("serializing report: {e}")))?;
            match a.out {
                Some(p) => std::fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?,
                None => println!("{json}"),
            }
        }
        Command::Gradcheck(a) => {
            let r = gradcheck_random_model(a.seed, 1e-5)?;
            println!(
                "max relative error {:.3e} over {} coordinates",
                r.max_rel_error, r.coordinates
            );
            if r.max_rel_error >= 1e-4 {
                eprintln!("error: gradient check failed");
                return Ok(EXIT_NUMERIC);
            }
        }
        Command::LinkTubes(a) => {
            let cfg = CliConfigFile::load(a.config.config.as_deref())?.link;
            let by_video = read_detections(&a.detections)?;
            let mut out = Vec::new();
            for (video_id, dets) in &by_video {
                for tube in link_video(dets, &cfg) {
                    let classes = tube.class_scores_mean().len();
                    let labels = label_tube(&tube, cfg.top_k.min(classes))?;
                    let filled = interpolate_tube(&tube);
                    out.push(serde_json::json!({
                        "video_id": video_id,
                        "tube_id": tube.id,
                        "labels": labels,
                        "mean_agentness": tube.mean_agentness(),
                        "class_scores": tube.class_scores_mean(),
                        "boxes": filled.entries,
                    }));
                }
            }
            let json = serde_json::to_string_pretty(&out)
                .map_err(|e| Error::Internal(format!("serializing tubes: {e}")))?;
            std::fs::write(&a.out, json + "\n").map_err(|e| Error::io(&a.out, e))?;
            info!("{} tubes written to {}", out.len(), a.out.display());
        }
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["compad"]), EXIT_USAGE);
        assert_eq!(run(["compad", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["compad", "eval", "--pred", "p.csv"]), EXIT_USAGE);
        assert_eq!(run(["compad", "eval", "--pred", "p", "--gt", "g", "--preset", "imagenet"]), EXIT_USAGE);
        assert_eq!(run(["compad", "--help"]), EXIT_OK);
    }

    #[test]
    fn help_lists_every_flag() {
        use clap::CommandFactory;
        let mut cmd = Cli::command();
        for sub in cmd.get_subcommands_mut() {
            let help = sub.render_long_help().to_string();
            for arg in sub.get_arguments() {
                if let Some(l) = arg.get_long() {
                    assert!(help.contains(&format!("--{l}")), "{} --{l}", sub.get_name());
                }
            }
        }
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"train": {"lr": 0.1, "learning_rate": 3}}"#).unwrap();
        assert!(matches!(CliConfigFile::load(Some(&p)), Err(Error::Config(_))));
        std::fs::write(&p, r#"{"train": {"lr": 0.1}, "preset": "road"}"#).unwrap();
        let c = CliConfigFile::load(Some(&p)).unwrap();
        assert_eq!(c.train.lr, 0.1);
        assert_eq!(c.train.epochs, TrainConfig::default().epochs);
        assert_eq!(c.preset, Some(Preset::Road));
    }
}
