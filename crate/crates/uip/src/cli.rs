//! Command-line front end over the experiment pipelines.

use crate::data::UnlearnSelection;
use crate::error::{Error, Result};
use crate::harness::config::{DefenseMethod, ExperimentConfig, UnlearnMethod};
use crate::harness::pipeline::{
    run_attack_feature, run_attack_label, run_defend, run_train, run_unlearn, DefendArgs,
    FeatureAttackArgs, LabelAttackArgs,
};
use crate::harness::results::aggregate_report;
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "uip",
    version,
    about = "Train small classifiers, unlearn samples, mount unlearning inversion attacks, and evaluate defenses"
)]
struct Cli {
    /// Cap worker threads for inversion restarts and probe construction.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain on the public split and fine-tune on the private split,
    /// writing the m0/m checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Produce an unlearned checkpoint by exact retraining or the
    /// single-gradient approximate method.
    Unlearn {
        #[arg(long)]
        config: PathBuf,
        /// exact | approx (defaults to the config's [unlearn] section).
        #[arg(long)]
        method: Option<String>,
        /// index:i[,j...] | class:<id>:<proportion> | classes:a,b,...
        #[arg(long)]
        select: Option<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// White-box feature recovery from the difference of two checkpoints.
    AttackFeature {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        unlearned: PathBuf,
        /// Ground truth as `<dataset.uipd>,<index>`; enables rmse/psnr.
        #[arg(long)]
        truth: Option<String>,
        /// Known label for the dummy sample (overrides the truth label).
        #[arg(long)]
        label: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Black-box label inference via probing samples.
    AttackLabel {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        unlearned: PathBuf,
        /// Probing samples per class.
        #[arg(long, default_value_t = 10)]
        probes: usize,
        /// Number of classes to infer.
        #[arg(long, default_value_t = 1)]
        topk: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Post-process an unlearned checkpoint with one defense.
    Defend {
        #[arg(long)]
        unlearned: PathBuf,
        /// obfuscate | prune | finetune
        #[arg(long)]
        method: String,
        /// sigma (obfuscate) | fraction (prune) | learning rate (finetune)
        #[arg(long)]
        param: f64,
        /// Original checkpoint (obfuscation re-applies the gradient to it).
        #[arg(long)]
        original: Option<PathBuf>,
        /// Saved removal gradient (UIPG) for obfuscation.
        #[arg(long)]
        grad: Option<PathBuf>,
        /// Validation dataset (UIPD) for the utility ratio.
        #[arg(long)]
        val_data: Option<PathBuf>,
        /// Extra dataset (UIPD) for the fine-tuning defense.
        #[arg(long)]
        extra_data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Aggregate result records into CSV summary tables.
    Report {
        #[arg(long)]
        results: PathBuf,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        // Ignore the error when a pool already exists (tests, repeat calls).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build_global();
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &Path) -> Result<(ExperimentConfig, String)> {
    ExperimentConfig::load(path)
}

fn parse_truth(spec: &str) -> Result<(PathBuf, usize)> {
    let (path, index) = spec.rsplit_once(',').ok_or_else(|| {
        Error::InvalidArgument(format!("expected <dataset>,<index>, got `{spec}`"))
    })?;
    Ok((
        PathBuf::from(path),
        index
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad truth index `{index}`")))?,
    ))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train { config, out_dir } => {
            let (cfg, hash) = load_config(&config)?;
            let out = out_dir.unwrap_or_else(|| cfg.output_dir.clone());
            let record = run_train(&cfg, &hash, &out)?;
            println!(
                "trained: m0 + m under {} (private accuracy {:.4})",
                out.display(),
                record.metrics["m"]["private_accuracy"].as_f64().unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::Unlearn { config, method, select, out_dir } => {
            let (cfg, hash) = load_config(&config)?;
            let out = out_dir.unwrap_or_else(|| cfg.output_dir.clone());
            let method: UnlearnMethod = match method {
                Some(m) => m.parse()?,
                None => {
                    cfg.unlearn
                        .as_ref()
                        .ok_or_else(|| {
                            Error::InvalidArgument(
                                "no --method and no [unlearn] section in the config".into(),
                            )
                        })?
                        .method
                }
            };
            let select = match select {
                Some(s) => s,
                None => {
                    cfg.unlearn
                        .as_ref()
                        .ok_or_else(|| {
                            Error::InvalidArgument(
                                "no --select and no [unlearn] section in the config".into(),
                            )
                        })?
                        .select
                        .clone()
                }
            };
            let selection = UnlearnSelection::parse(&select)?;
            let record = run_unlearn(&cfg, &hash, &out, method, &selection)?;
            println!(
                "unlearned ({}): removed {} samples -> {}",
                method.as_str(),
                record.metrics["removed_count"],
                record.artifacts.get("m_u").cloned().unwrap_or_default()
            );
            Ok(())
        }
        Command::AttackFeature { original, unlearned, truth, label, config, out_dir } => {
            let config = config.map(|p| load_config(&p)).transpose()?;
            let truth = truth.as_deref().map(parse_truth).transpose()?;
            let record = run_attack_feature(&FeatureAttackArgs {
                original,
                unlearned,
                truth,
                label,
                config,
                out_dir,
            })?;
            println!(
                "feature attack: cosine {:.4}, loss {:.4}",
                record.metrics["final_cosine"].as_f64().unwrap_or(f64::NAN),
                record.metrics["final_loss"].as_f64().unwrap_or(f64::NAN)
            );
            if let Some(rmse) = record.metrics["slots"][0]["rmse"].as_f64() {
                println!("slot 0 rmse {rmse:.4}");
            }
            Ok(())
        }
        Command::AttackLabel { original, unlearned, probes, topk, config, out_dir } => {
            let config = config.map(|p| load_config(&p)).transpose()?;
            let record = run_attack_label(&LabelAttackArgs {
                original,
                unlearned,
                probes,
                top_k: topk,
                config,
                out_dir,
            })?;
            println!("inferred classes: {}", record.metrics["inferred"]);
            println!("beta: {}", record.metrics["beta"]);
            Ok(())
        }
        Command::Defend {
            unlearned,
            method,
            param,
            original,
            grad,
            val_data,
            extra_data,
            config,
            out_dir,
        } => {
            let method: DefenseMethod = method.parse()?;
            let config = config.map(|p| load_config(&p)).transpose()?;
            let record = run_defend(&DefendArgs {
                unlearned,
                method,
                param,
                original,
                grad,
                val_data,
                extra_data,
                config,
                out_dir,
            })?;
            println!(
                "defended ({} {}): utility ratio {:.4}",
                record.metrics["defense"].as_str().unwrap_or("?"),
                param,
                record.metrics["utility_ratio"].as_f64().unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::Report { results, out } => {
            let csv = aggregate_report(&results)?;
            match out {
                Some(path) => std::fs::write(path, csv)?,
                None => print!("{csv}"),
            }
            Ok(())
        }
    }
}
