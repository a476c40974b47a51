//! Command-line driver: dataset generation, training, evaluation, ablation
//! comparison and runtime self-verification.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use explicit3d::config::RunConfig;
use explicit3d::error::Error;
use explicit3d::model::Model;
use explicit3d::synthscene::{generate_dataset, load_dataset, split, GeneratorConfig, SceneSample};
use explicit3d::train::{
    config_hash, evaluate, init_store, load_checkpoint, render_ablation_table,
    render_eval_report, run_ablation, save_checkpoint, train, Checkpoint, EpochLog,
    CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
use explicit3d::verify::{run_verification, VerifyLevel};

#[derive(Parser)]
#[command(
    name = "explicit3d",
    about = "Sparse scene-graph 3D object detection on a synthetic indoor benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the run seed (training seed, or the data seed for gen-data).
    #[arg(long)]
    seed: Option<u64>,
    /// Additional `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Write the primary output here instead of stdout (checkpoint paths
    /// are always required explicitly).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset file.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the held-out split of a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Which part of the dataset to score.
        #[arg(long, default_value = "test", value_parser = ["train", "test", "all"])]
        split: String,
    },
    /// Train and score every ablation configuration on one dataset.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the built-in oracle suites (finite differences, Monte-Carlo IoU,
    /// exhaustive clustering, transform round trips).
    Verify {
        #[arg(long, default_value = "fast", value_parser = ["fast", "thorough"])]
        level: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidInput(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn resolve_config(common: &Common) -> Result<RunConfig, Error> {
    let overrides: Vec<(String, String)> = common
        .set
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("override {s:?} is not KEY=VALUE")))
        })
        .collect::<Result<_, _>>()?;
    RunConfig::resolve(common.config.as_deref(), &overrides)
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn print_epoch(log: &EpochLog) {
    println!(
        "epoch {}\ttotal={:.6}\tindividual={:.6}\tdirect={:.6}\tholistic={:.6}\tcorner={:.6}\tphysical={:.6}\tclamped_bins={}",
        log.epoch,
        log.mean.total,
        log.mean.individual,
        log.mean.direct,
        log.mean.holistic,
        log.mean.corner,
        log.mean.physical,
        log.clamped_bins
    );
}

fn load_split(path: &Path, which: &str) -> Result<Vec<SceneSample>, Error> {
    let all = load_dataset(path)?;
    let picked: Vec<SceneSample> = match which {
        "all" => all,
        "train" => split(&all).0.into_iter().cloned().collect(),
        "test" => split(&all).1.into_iter().cloned().collect(),
        other => return Err(Error::Config(format!("unknown split {other:?}"))),
    };
    if picked.is_empty() {
        return Err(Error::InvalidInput(format!(
            "dataset split {which:?} is empty"
        )));
    }
    Ok(picked)
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::GenData { common } => {
            let mut cfg = resolve_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.data_seed = seed;
            }
            let out = common
                .out
                .clone()
                .ok_or_else(|| Error::Config("gen-data requires --out".into()))?;
            let gen_cfg = GeneratorConfig::default();
            let samples = generate_dataset(&gen_cfg, cfg.n_scenes, cfg.data_seed, &out)?;
            let n_objects: usize = samples.iter().map(|s| s.objects.len()).sum();
            let (tr, te) = split(&samples);
            println!(
                "wrote {} scenes ({} objects, {} train / {} test) to {} [seed {}]",
                samples.len(),
                n_objects,
                tr.len(),
                te.len(),
                out.display(),
                cfg.data_seed
            );
        }
        Command::Train {
            common,
            data,
            resume,
        } => {
            let mut cfg = resolve_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.train.seed = seed;
            }
            let out = common
                .out
                .clone()
                .ok_or_else(|| Error::Config("train requires --out for the checkpoint".into()))?;
            let train_scenes = load_split(&data, "train")?;
            let refs: Vec<&SceneSample> = train_scenes.iter().collect();

            let model = Model::new(cfg.model.clone());
            let hash = config_hash(&model.cfg);
            let (mut store, start_epoch) = match &resume {
                Some(path) => {
                    let ckpt = load_checkpoint(path)?;
                    if ckpt.config_hash != hash {
                        return Err(Error::Checkpoint(
                            "checkpoint was trained with a different model config".into(),
                        ));
                    }
                    (ckpt.store, ckpt.epoch)
                }
                None => (init_store(&model, cfg.train.seed)?, 0),
            };
            println!(
                "training {} epochs from epoch {start_epoch} on {} scenes [config {hash:016x}, seed {}]",
                cfg.train.epochs,
                refs.len(),
                cfg.train.seed
            );
            train(&model, &mut store, &refs, &cfg.train, start_epoch, |log| {
                print_epoch(log)
            })?;
            save_checkpoint(
                &Checkpoint {
                    format: CHECKPOINT_FORMAT.into(),
                    version: CHECKPOINT_VERSION,
                    epoch: start_epoch + cfg.train.epochs,
                    config_hash: hash,
                    model: model.cfg.clone(),
                    store,
                },
                &out,
            )?;
            println!("checkpoint written to {}", out.display());
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            split: which,
        } => {
            let cfg = resolve_config(&common)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let scenes = load_split(&data, &which)?;
            let refs: Vec<&SceneSample> = scenes.iter().collect();
            let model = Model::new(ckpt.model.clone());
            let report = evaluate(&model, &ckpt.store, &refs, cfg.scale_mode)?;
            let text = render_eval_report(&report, ckpt.config_hash, cfg.train.seed);
            emit(&common.out, &text)?;
        }
        Command::Ablate { common, data } => {
            let mut cfg = resolve_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.train.seed = seed;
            }
            let all = load_dataset(&data)?;
            let (train_refs, test_refs) = split(&all);
            if train_refs.is_empty() || test_refs.is_empty() {
                return Err(Error::InvalidInput("dataset too small to split".into()));
            }
            let rows = run_ablation(
                &cfg.model,
                &cfg.train,
                &train_refs,
                &test_refs,
                cfg.scale_mode,
                |name, log| {
                    if (log.epoch + 1) % 10 == 0 || log.epoch == 0 {
                        print!("[{name}] ");
                        print_epoch(log);
                    }
                },
            )?;
            emit(&common.out, &render_ablation_table(&rows))?;
        }
        Command::Verify { level } => {
            let level = VerifyLevel::parse(&level)
                .ok_or_else(|| Error::Config(format!("unknown verify level {level:?}")))?;
            let report = run_verification(level);
            print!("{}", report.render());
            if !report.all_passed() {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
