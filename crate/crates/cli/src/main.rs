//! `smmcl`: generate synthetic dark scenes, train and ablate the dual-stream
//! segmenter, evaluate checkpoints, and run the gradient checks.
//!
//! Exit codes: 0 success, 1 invalid input (flags, config), 2 failure at run time.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use smmcl::config::{RunConfig, CONFIG_FILE};
use smmcl::data::{generate_set, read_dataset, write_dataset, SceneSample};
use smmcl::gradcheck::Scope;
use smmcl::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use smmcl::train::{
    ablation_csv, ablation_matrix, describe, evaluate, history_csv, summarize, summary_csv, train_with, write_report,
};

const BUILD_ID: &str = env!("SMMCL_BUILD_ID");
const RUN_INFO: &str = "run.toml";

#[derive(Parser)]
#[command(name = "smmcl", version, about = "Multi-modal contrastive segmentation of dark scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset: `train/`, `eval/` and the resolved config.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "N")]
        train_scenes: Option<usize>,
        #[arg(long, value_name = "N")]
        eval_scenes: Option<usize>,
    },
    /// Train one model, checkpointing after every epoch.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `generate`.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Variant of the ablation to train (model1..model4); default uses the config flags.
        #[arg(long)]
        variant: Option<smmcl::train::Variant>,
    },
    /// Train all four ablation variants over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Comma-separated seeds; defaults to five consecutive seeds from `--seed`.
        #[arg(long, value_delimiter = ',', value_name = "LIST")]
        seeds: Vec<u64>,
    },
    /// Evaluate a checkpoint and print a CSV report.
    Eval {
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        /// Dataset root (its `eval/` split is used) or a split directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Also write the report to this file.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(value_parser = ["losses", "fusion", "model", "all"])]
        scope: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run config; unset keys keep their defaults
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for both data generation and training
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Weight of the cross-modal contrastive loss
    #[arg(long, value_name = "F")]
    lambda_cm: Option<f64>,
    /// Weight of the visible intra-modal loss
    #[arg(long, value_name = "F")]
    lambda_vis: Option<f64>,
    /// Weight of the auxiliary intra-modal loss
    #[arg(long, value_name = "F")]
    lambda_aux: Option<f64>,
    /// Contrastive temperature
    #[arg(long, value_name = "F")]
    tau: Option<f64>,
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    /// Feed raw projector rows to the losses instead of unit vectors
    #[arg(long)]
    no_normalize_embeddings: bool,
    /// Also contrast auxiliary anchors against the visible set
    #[arg(long)]
    symmetrize_cm: bool,
}

impl Common {
    /// Config file (or defaults) with flag overrides applied, validated.
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        let c = &mut cfg.train.contrast;
        c.lambda_cm = self.lambda_cm.unwrap_or(c.lambda_cm);
        c.lambda_vis = self.lambda_vis.unwrap_or(c.lambda_vis);
        c.lambda_aux = self.lambda_aux.unwrap_or(c.lambda_aux);
        c.tau = self.tau.unwrap_or(c.tau);
        c.symmetrize_cm |= self.symmetrize_cm;
        cfg.train.epochs = self.epochs.unwrap_or(cfg.train.epochs);
        cfg.train.normalize_embeddings &= !self.no_normalize_embeddings;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Input problems, reported with exit code 1.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err.chain().any(|e| {
        e.is::<Invalid>() || e.downcast_ref::<smmcl::Error>().is_some_and(smmcl::Error::is_validation)
    });
    if validation {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Generate {
            common,
            train_scenes,
            eval_scenes,
        } => {
            let mut cfg = common.resolve()?;
            cfg.data.train_scenes = train_scenes.unwrap_or(cfg.data.train_scenes);
            cfg.data.eval_scenes = eval_scenes.unwrap_or(cfg.data.eval_scenes);
            cfg.validate()?;
            generate(&cfg, &common.out)?;
        }
        Command::Train { common, data, variant } => {
            let mut cfg = common.resolve()?;
            if let Some(v) = variant {
                cfg.train = v.apply(&cfg.train);
            }
            train_run(&cfg, &data, &common.out)?;
        }
        Command::Ablate { common, data, seeds } => {
            let cfg = common.resolve()?;
            let seeds = if seeds.is_empty() {
                (cfg.train.seed..cfg.train.seed + 5).collect()
            } else {
                seeds
            };
            ablate(&cfg, &data, &common.out, &seeds)?;
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            seed,
        } => eval(&checkpoint, &data, out.as_deref(), seed)?,
        Command::Gradcheck { scope, seed } => return gradcheck(&scope, seed),
    }
    Ok(ExitCode::SUCCESS)
}

fn ensure_output_dir(dir: &Path) -> anyhow::Result<()> {
    if dir.is_file() {
        return Err(invalid(format!("output path {} is a file", dir.display())));
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_run_info(dir: &Path, command: &str, seeds: &[u64]) -> anyhow::Result<()> {
    let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
    let text = format!("build = \"{BUILD_ID}\"\ncommand = \"{command}\"\nseeds = [{}]\n", seeds.join(", "));
    write_report(&dir.join(RUN_INFO), &text)?;
    Ok(())
}

fn generate(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let train = generate_set(&cfg.generator, 0, cfg.data.train_scenes)?;
    let eval = generate_set(&cfg.generator, cfg.data.train_scenes as u64, cfg.data.eval_scenes)?;
    ensure_output_dir(out)?;
    write_dataset(&train, &out.join("train"))?;
    if !eval.is_empty() {
        write_dataset(&eval, &out.join("eval"))?;
    }
    cfg.save(&out.join(CONFIG_FILE))?;
    write_run_info(out, "generate", &[cfg.generator.seed])?;
    info!("wrote {} train and {} eval scenes to {}", train.len(), eval.len(), out.display());
    Ok(())
}

/// Train split and, when present, eval split of a dataset root.
fn load_splits(data: &Path) -> anyhow::Result<(Vec<SceneSample>, Option<Vec<SceneSample>>)> {
    let train = read_dataset(&data.join("train")).with_context(|| format!("loading dataset {}", data.display()))?;
    let eval_dir = data.join("eval");
    let eval = if eval_dir.exists() { Some(read_dataset(&eval_dir)?) } else { None };
    Ok((train, eval))
}

fn check_compatible(model: &ModelConfig, samples: &[SceneSample]) -> anyhow::Result<()> {
    let Some(first) = samples.first() else {
        bail!(smmcl::Error::EmptyInput("dataset has no scenes".into()));
    };
    let l = &first.label;
    if (l.height(), l.width()) != (model.height, model.width) {
        return Err(invalid(format!(
            "dataset scenes are {}x{} but the model expects {}x{}",
            l.height(),
            l.width(),
            model.height,
            model.width
        )));
    }
    for s in samples {
        s.label
            .validate(model.num_classes)
            .map_err(|e| invalid(format!("dataset labels do not fit {} classes: {e}", model.num_classes)))?;
    }
    Ok(())
}

fn train_run(cfg: &RunConfig, data: &Path, out: &Path) -> anyhow::Result<()> {
    let (train, eval) = load_splits(data)?;
    check_compatible(&cfg.model, &train)?;
    if let Some(e) = &eval {
        check_compatible(&cfg.model, e)?;
    }
    ensure_output_dir(out)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    write_run_info(out, "train", &[cfg.train.seed])?;
    let checkpoint = out.join("checkpoint");
    let history_path = out.join("history.csv");
    let mut history = Vec::new();
    train_with(&train, eval.as_deref(), &cfg.model, &cfg.train, |record, params| {
        history.push(record.clone());
        save_checkpoint(&checkpoint, &cfg.model, params)?;
        write_report(&history_path, &history_csv(&history))
    })
    .context("training aborted")?;
    info!("checkpoint and history written to {}", out.display());
    Ok(())
}

fn ablate(cfg: &RunConfig, data: &Path, out: &Path, seeds: &[u64]) -> anyhow::Result<()> {
    let (train, eval) = load_splits(data)?;
    let eval = eval.ok_or_else(|| invalid(format!("{} has no eval split", data.display())))?;
    check_compatible(&cfg.model, &train)?;
    check_compatible(&cfg.model, &eval)?;
    let threads = match std::env::var("SMMCL_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| invalid(format!("SMMCL_THREADS must be a positive integer, got `{v}`")))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    ensure_output_dir(out)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    write_run_info(out, "ablate", seeds)?;
    let cells_dir = out.join("cells");
    let cells = ablation_matrix(&train, &eval, &cfg.model, &cfg.train, seeds, threads, |cell, params| {
        let dir = cells_dir.join(format!("{}-seed{}", cell.variant, cell.seed));
        fs::create_dir_all(&dir).map_err(|e| smmcl::Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        write_report(&dir.join("history.csv"), &history_csv(&cell.history))?;
        save_checkpoint(&dir.join("checkpoint"), &cfg.model, params)?;
        info!("{} seed {}: miou {:.4}", cell.variant, cell.seed, cell.miou);
        Ok(())
    })?;
    write_report(&out.join("ablation.csv"), &ablation_csv(&cells))?;
    let summary = summarize(&cells);
    let text = summary_csv(&summary);
    write_report(&out.join("ablation_summary.csv"), &text)?;
    print!("{text}");
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, out: Option<&Path>, seed: u64) -> anyhow::Result<()> {
    let (model_cfg, params) = load_checkpoint::<f32>(checkpoint)?;
    let split = if data.join("eval").is_dir() { data.join("eval") } else { data.to_path_buf() };
    let samples = read_dataset(&split).with_context(|| format!("loading eval split {}", split.display()))?;
    check_compatible(&model_cfg, &samples)
        .with_context(|| format!("checkpoint {} does not match the dataset", checkpoint.display()))?;
    let model = Model::new(model_cfg)?;
    let report = evaluate(&model, &params, &samples, seed)?;
    let text = report.csv();
    if let Some(path) = out {
        write_report(path, &text)?;
    }
    print!("{text}");
    describe(&report, &mut std::io::stderr())?;
    Ok(())
}

fn gradcheck(scope: &str, seed: u64) -> anyhow::Result<ExitCode> {
    let scopes: Vec<Scope> = if scope == "all" { Scope::ALL.to_vec() } else { vec![scope.parse()?] };
    let mut ok = true;
    for s in scopes {
        let report = s.run(seed)?;
        for o in &report.outcomes {
            println!(
                "{:<5} {s:<7} {:<40} checked {:>4}  worst rel err {:.3e}  (tol {:.0e})",
                if o.passed() { "PASS" } else { "FAIL" },
                o.name,
                o.checked,
                o.worst_rel_err,
                o.tolerance
            );
        }
        if let Some(w) = report.worst() {
            println!("{s}: worst {:.3e} in {}", w.worst_rel_err, w.name);
        }
        ok &= report.passed();
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(2) })
}
