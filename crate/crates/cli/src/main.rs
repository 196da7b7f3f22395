use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use digit::analysis::{cosine_report, level_cka_report, offset_statistics, Stage};
use digit::checkpoint::{load_checkpoint, load_params, parse_checkpoint, save_checkpoint};
use digit::config::RunConfig;
use digit::data::save_split;
use digit::model::DigitModel;
use digit::train::{evaluate, train, EpochLog};

#[derive(Parser)]
#[command(name = "digit", version, about = "Temporal action detection: train, evaluate, analyze")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a per-epoch loss log.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Checkpoint path (default: <output.dir>/model.ckpt).
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the eval split.
    Eval {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, overrides_with = "no_nms")]
        nms: bool,
        #[arg(long = "no-nms", overrides_with = "nms")]
        no_nms: bool,
    },
    /// Generate the synthetic dataset into data.dir.
    GenData {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Representation and sampling diagnostics for a checkpoint.
    Analyze {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Eval-split video index for the cosine report.
        #[arg(long, default_value_t = 0)]
        video: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Cka,
    Cosine,
    Offsets,
}

fn load_config(path: &Path) -> Result<RunConfig> {
    Ok(RunConfig::load(path)?)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn cmd_train(config: &Path, ckpt: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let (train_split, _) = cfg.data.splits()?;
    let mut model = DigitModel::<f32>::new(cfg.model.clone(), cfg.optimizer.seed)?;
    let mut csv = format!("{}\n", EpochLog::CSV_HEADER);
    let logs = train(&mut model, &train_split, &cfg.loss, &cfg.optimizer, |log| {
        eprintln!("epoch {:>4}  loss {:.6}", log.epoch, log.loss.total);
        csv.push_str(&log.csv_row());
        csv.push('\n');
    })?;
    let dir = &cfg.output.dir;
    write(dir, "train_log.csv", &csv)?;
    let ckpt = ckpt.unwrap_or_else(|| dir.join("model.ckpt"));
    if let Some(parent) = ckpt.parent() {
        fs::create_dir_all(parent)?;
    }
    save_checkpoint(&ckpt, &model)?;
    let summary = serde_json::json!({
        "checkpoint": ckpt,
        "epochs": logs.len(),
        "final_loss": logs.last().map(|l| l.loss.total),
        "parameters": model.params.num_scalars(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_eval(config: &Path, ckpt: &Path, nms: Option<bool>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(n) = nms {
        cfg.eval.nms_enabled = n;
    }
    let (_, table) = parse_checkpoint(&fs::read(ckpt).with_context(|| format!("reading {}", ckpt.display()))?)?;
    let mut model = DigitModel::<f32>::new(cfg.model.clone(), 0)?;
    load_params(&mut model, table)?;
    let (_, eval_split) = cfg.data.splits()?;
    let report = evaluate(&model, &eval_split, &cfg.eval)?;
    let tag = if report.nms { "nms" } else { "raw" };
    let json = serde_json::to_string_pretty(&report)?;
    write(&cfg.output.dir, &format!("eval_{tag}.json"), &json)?;
    write(&cfg.output.dir, &format!("eval_{tag}.csv"), &report.to_csv())?;
    println!("{json}");
    Ok(())
}

fn cmd_gen_data(config: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let Some(dir) = cfg.data.dir.clone() else {
        return Err(digit::Error::Config("gen-data needs data.dir in the config".into()).into());
    };
    let (train_split, eval_split) = digit::synth::generate_dataset(&cfg.data.synth)?;
    save_split(&dir, "train", &train_split)?;
    save_split(&dir, "eval", &eval_split)?;
    let summary = serde_json::json!({
        "dir": dir,
        "train_videos": train_split.len(),
        "eval_videos": eval_split.len(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_analyze(kind: Kind, ckpt: &Path, config: Option<&Path>, video: usize) -> Result<()> {
    let cfg = match config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let model = load_checkpoint(ckpt)?;
    if model.config.input_dim != cfg.data.synth.feature_dim && cfg.data.dir.is_none() {
        bail!(
            "checkpoint expects {} input channels but data.synth.feature_dim is {}",
            model.config.input_dim,
            cfg.data.synth.feature_dim
        );
    }
    let (_, eval_split) = cfg.data.splits()?;
    let dir = &cfg.output.dir;
    let (json, written) = match kind {
        Kind::Cka => {
            let reports = vec![
                level_cka_report(&model, &eval_split, Stage::PreEncoder)?,
                level_cka_report(&model, &eval_split, Stage::PostEncoder)?,
            ];
            let csv: String = reports
                .iter()
                .zip(["pre_encoder", "post_encoder"])
                .map(|(r, s)| format!("# {s}\n{}", r.to_csv()))
                .collect();
            (serde_json::to_string_pretty(&reports)?, write(dir, "analysis_cka.csv", &csv)?)
        }
        Kind::Cosine => {
            let r = cosine_report(&model, &eval_split, video)?;
            (serde_json::to_string_pretty(&r)?, write(dir, "analysis_cosine.csv", &r.to_csv())?)
        }
        Kind::Offsets => {
            let r = offset_statistics(&model, &eval_split)?;
            (serde_json::to_string_pretty(&r)?, write(dir, "analysis_offsets.csv", &r.to_csv())?)
        }
    };
    let name = written.file_stem().and_then(|s| s.to_str()).unwrap_or("analysis").to_string();
    write(dir, &format!("{name}.json"), &json)?;
    println!("{json}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, ckpt } => cmd_train(&config, ckpt),
        Command::Eval {
            config,
            ckpt,
            nms,
            no_nms,
        } => {
            let flag = match (nms, no_nms) {
                (true, _) => Some(true),
                (_, true) => Some(false),
                _ => None,
            };
            cmd_eval(&config, &ckpt, flag)
        }
        Command::GenData { config } => cmd_gen_data(&config),
        Command::Analyze {
            kind,
            ckpt,
            config,
            video,
        } => cmd_analyze(kind, &ckpt, config.as_deref(), video),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            match err.downcast_ref::<digit::Error>() {
                Some(digit::Error::Config(_)) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
