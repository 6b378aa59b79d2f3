//! Command-line front end: parameter accounting, gradient checking,
//! training, evaluation, routing/embedding analysis, ablations, and
//! merged-weight export.
//!
//! Exit codes: 0 on success, 2 on validation errors (bad flags, bad config,
//! bad inputs), 1 on runtime failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ept_core::router::routing_report_csv;
use ept_core::tasks::embedding_export;
use ept_train::accounting::count_params;
use ept_train::checkpoint::{load_checkpoint, restore, save_checkpoint, save_tensor_set};
use ept_train::config::EptConfig;
use ept_train::data::make_tasks;
use ept_train::gradcheck::end_to_end_gradcheck;
use ept_train::merge::{export_merged, GatePolicy};
use ept_train::trainer::{
    evaluate_eval_split, metrics_to_jsonl, run_ablation, train_from, train_loop,
    AblationToggles, TrainOptions, TrainRun,
};
use ept_train::TrainError;

#[derive(Parser)]
#[command(name = "ept", about = "Expert pyramid tuning over frozen linear weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer parameter accounting with baselines.
    Params(ParamsArgs),
    /// End-to-end finite-difference gradient check on a miniature run.
    Gradcheck {
        /// Configuration file; defaults to the built-in miniature config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train on the synthetic multi-task suite.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for metrics.jsonl, routing.csv and checkpoint/.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-task accuracy of a checkpoint on its eval split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Export analysis artifacts from a checkpoint.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
    /// Train one arm per ablation combination and compare.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Axes to vary (comma separated from ab_init, top_k, alp); the
        /// harness runs the all-on arm plus one arm per named axis off.
        /// Defaults to all three axes.
        #[arg(long, value_delimiter = ',')]
        toggles: Option<Vec<String>>,
        /// Also write the comparative JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fold adapter deltas into dense weights.
    Merge {
        #[arg(long)]
        checkpoint: PathBuf,
        /// per_task_mean or fixed.
        #[arg(long)]
        policy: String,
        /// Dense gate vector for the fixed policy (comma separated).
        #[arg(long, value_delimiter = ',')]
        gates: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Routing statistics CSV (task,expert,count,fraction).
    Routing {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory; defaults to the checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Task-embedding CSVs: raw coordinates and 2-D PCA.
    Embeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ParamsArgs {
    /// Model width d.
    #[arg(long, default_value_t = 768)]
    d: u64,
    /// Shared latent rank r.
    #[arg(long, default_value_t = 8)]
    r: u64,
    /// Expert count N (for the independent-expert baseline).
    #[arg(long, default_value_t = 8)]
    experts: u64,
    /// Kernel scales, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![2u64, 2, 4, 4, 6, 6, 8, 8])]
    scales: Vec<u64>,
    /// Subspace dimension d_sub; defaults to ceil(d / min scale).
    #[arg(long)]
    dsub: Option<u64>,
    /// Emit JSON instead of the plain-text table.
    #[arg(long)]
    json: bool,
}

const GRADCHECK_GATE: f64 = 1e-4;

fn read_config(path: &PathBuf) -> Result<EptConfig, TrainError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| TrainError::Config(format!("cannot read {}: {e}", path.display())))?;
    EptConfig::from_json(&text)
}

fn write_run_outputs(out: &PathBuf, run: &TrainRun) -> Result<(), TrainError> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("metrics.jsonl"), metrics_to_jsonl(&run.metrics))?;
    std::fs::write(out.join("routing.csv"), routing_report_csv(&run.final_routing))?;
    save_checkpoint(&out.join("checkpoint"), &run.model, &run.opt_state, Some(&run.final_routing))?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), TrainError> {
    match cli.command {
        Command::Params(args) => {
            let min_scale = *args
                .scales
                .iter()
                .min()
                .ok_or_else(|| TrainError::Config("params: empty scale list".into()))?;
            if min_scale == 0 {
                return Err(TrainError::Config("params: scale 0 is invalid".into()));
            }
            let dsub = args.dsub.unwrap_or(args.d.div_ceil(min_scale));
            let breakdown = count_params(args.d, args.r, args.experts, &args.scales, dsub)?;
            if args.json {
                println!("{}", breakdown.to_json());
            } else {
                print!("{}", breakdown.table());
            }
        }
        Command::Gradcheck { config } => {
            let cfg = match config {
                Some(path) => read_config(&path)?,
                None => EptConfig::miniature(),
            };
            let err = end_to_end_gradcheck(&cfg, 1e-6)?;
            println!("max relative error: {err:.3e}");
            if err >= GRADCHECK_GATE {
                return Err(TrainError::Diverged(format!(
                    "gradient check failed: {err:.3e} >= {GRADCHECK_GATE:.0e}"
                )));
            }
        }
        Command::Train { config, out, seed, resume } => {
            let mut cfg = read_config(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let run = match resume {
                None => train_loop(&cfg)?,
                Some(dir) => {
                    let ckpt = load_checkpoint(&dir)?;
                    if ckpt.config != cfg {
                        return Err(TrainError::Config(
                            "resume: checkpoint config differs from --config".into(),
                        ));
                    }
                    let (model, opt) = restore(&ckpt)?;
                    train_from(model, opt, TrainOptions::default())?
                }
            };
            write_run_outputs(&out, &run)?;
            println!(
                "trained to step {}; wrote metrics.jsonl, routing.csv, checkpoint/ to {}",
                run.step,
                out.display()
            );
        }
        Command::Eval { checkpoint } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let (model, _) = restore(&ckpt)?;
            let datasets = make_tasks(model.cfg())?;
            let accuracies = evaluate_eval_split(&model, &datasets)?;
            println!("task accuracy");
            for (task, acc) in accuracies.iter().enumerate() {
                println!("{task} {acc:.4}");
            }
        }
        Command::Analyze { what } => match what {
            AnalyzeCommand::Routing { checkpoint, out } => {
                let ckpt = load_checkpoint(&checkpoint)?;
                let stats = ckpt.routing.ok_or_else(|| {
                    TrainError::Core(ept_core::EptError::Contract(
                        "checkpoint carries no routing statistics".into(),
                    ))
                })?;
                let dir = out.unwrap_or(checkpoint);
                std::fs::create_dir_all(&dir)?;
                let path = dir.join("routing.csv");
                std::fs::write(&path, routing_report_csv(&stats))?;
                println!("wrote {}", path.display());
            }
            AnalyzeCommand::Embeddings { checkpoint, out } => {
                let ckpt = load_checkpoint(&checkpoint)?;
                let (model, _) = restore(&ckpt)?;
                let export = embedding_export(model.task_table()).map_err(TrainError::Core)?;
                let dir = out.unwrap_or(checkpoint);
                std::fs::create_dir_all(&dir)?;
                let raw_path = dir.join("embeddings.csv");
                std::fs::write(&raw_path, &export.raw_csv)?;
                println!("wrote {}", raw_path.display());
                match export.pca_csv {
                    Some(pca) => {
                        let pca_path = dir.join("embeddings_pca.csv");
                        std::fs::write(&pca_path, pca)?;
                        println!("wrote {}", pca_path.display());
                    }
                    None => println!("{}", export.notice.unwrap_or_default()),
                }
            }
        },
        Command::Ablate { config, toggles, out } => {
            let cfg = read_config(&config)?;
            let axes = toggles
                .unwrap_or_else(|| vec!["ab_init".into(), "top_k".into(), "alp".into()]);
            for axis in &axes {
                if !["ab_init", "top_k", "alp"].contains(&axis.as_str()) {
                    return Err(TrainError::Config(format!("ablate: unknown toggle {axis:?}")));
                }
            }
            let mut combos = vec![AblationToggles::all_on()];
            for axis in &axes {
                let mut t = AblationToggles::all_on();
                match axis.as_str() {
                    "ab_init" => t.ab_init = false,
                    "top_k" => t.top_k = false,
                    "alp" => t.alp = false,
                    _ => unreachable!(),
                }
                combos.push(t);
            }
            let arms = run_ablation(&cfg, &combos)?;
            let summary = ept_train::trainer::ablation_summary_json(&arms);
            println!("{summary}");
            if let Some(path) = out {
                std::fs::write(path, summary)?;
            }
        }
        Command::Merge { checkpoint, policy, gates, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let (model, _) = restore(&ckpt)?;
            let policy = match policy.as_str() {
                "per_task_mean" => GatePolicy::PerTaskMean,
                "fixed" => GatePolicy::Fixed(gates.ok_or_else(|| {
                    TrainError::Config("merge: fixed policy requires --gates".into())
                })?),
                other => {
                    return Err(TrainError::Config(format!(
                        "merge: unknown policy {other:?} (expected per_task_mean or fixed)"
                    )))
                }
            };
            let tensors = export_merged(&model, ckpt.routing.as_ref(), &policy)?;
            let policy_name = match &policy {
                GatePolicy::PerTaskMean => "per_task_mean",
                GatePolicy::Fixed(_) => "fixed",
            };
            save_tensor_set(&out, model.cfg(), ckpt.step, &tensors, policy_name)?;
            println!(
                "wrote merged checkpoint ({} tensors) to {}",
                tensors.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
