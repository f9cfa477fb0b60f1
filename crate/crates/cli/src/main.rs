use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use capsbench::autodiff::BackwardFault;
use capsbench::data::{load_dataset_dir, synth_shapes, write_dataset_dir, DatasetKind, PreprocessChain, ShapesSpec};
use capsbench::harness::{
    evaluate_checkpoint, format_accuracy, format_duration, parse_pairs, results_markdown, run_bench, run_experiment,
    run_gradcheck, run_kfold, ExperimentConfig, GradCheckOutcome,
};
use capsbench::{Error, Result};

#[derive(Parser)]
#[command(name = "capsbench", version, about = "Train and benchmark capsule networks against classical baselines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a config file.
    Train {
        config: PathBuf,
        /// Override a config key, e.g. `--set capsnet.D1=4`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy of a saved checkpoint on a dataset.
    Eval { checkpoint: PathBuf, dataset: String },
    /// Run every `.cfg` in a directory and write a results table.
    Bench {
        config_dir: PathBuf,
        #[arg(long, default_value = "runs/bench")]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients at a reduced size.
    Gradcheck {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Deliberately perturb the backward pass; the check should fail.
        #[arg(long)]
        corrupt_backward: bool,
    },
    /// Write a synthetic shapes dataset as a class-per-folder directory.
    Synth {
        /// e.g. `n_per_class=50,size=64,seed=1,jitter=0.1`
        spec: String,
        out: PathBuf,
    },
    /// Apply a dataset's preprocessing chain to a directory of images.
    Preprocess {
        /// yale, mit, belgiumts or cifar100
        name: String,
        input: PathBuf,
        output: PathBuf,
        /// always, never or auto
        #[arg(long, default_value = "auto")]
        equalize: String,
    },
}

fn overrides(set: &[String]) -> Result<Vec<(String, String)>> {
    parse_pairs(&set.join("\n"))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, set, epochs, out } => {
            let mut pairs = overrides(&set)?;
            if let Some(e) = epochs {
                pairs.push(("epochs".into(), e.to_string()));
            }
            if let Some(o) = out {
                pairs.push(("output_dir".into(), o.to_string_lossy().into_owned()));
            }
            let cfg = ExperimentConfig::load(&config, &pairs)?;
            if cfg.kfold()?.is_some() {
                let report = run_kfold(&cfg)?;
                for (i, acc) in report.fold_accuracies.iter().enumerate() {
                    println!("fold {i}: {}", format_accuracy(*acc));
                }
                println!(
                    "mean accuracy {} over {} folds, mean training time {}",
                    format_accuracy(report.mean_accuracy),
                    report.fold_accuracies.len(),
                    format_duration(report.mean_train_time_s)
                );
                return Ok(true);
            }
            let outcome = run_experiment(&cfg)?;
            let s = &outcome.summary;
            println!(
                "{} on {}: test accuracy {}, best epoch {} of {}, training time {}",
                s.algorithm,
                s.dataset,
                format_accuracy(s.test_accuracy),
                outcome.fit.best_epoch,
                outcome.fit.epochs_run,
                format_duration(outcome.fit.train_time_s)
            );
            println!("outputs in {}", outcome.output_dir.display());
        }
        Command::Eval { checkpoint, dataset } => {
            let acc = evaluate_checkpoint(&checkpoint, &dataset)?;
            println!("accuracy {} ({acc})", format_accuracy(acc));
        }
        Command::Bench { config_dir, out } => {
            let runs = run_bench(&config_dir, &out)?;
            print!("{}", results_markdown(&runs));
        }
        Command::Gradcheck { config, set, corrupt_backward } => {
            let cfg = ExperimentConfig::load(&config, &overrides(&set)?)?;
            let fault = corrupt_backward.then_some(BackwardFault::ScaleActivationGrad(1.05));
            match run_gradcheck(&cfg, fault)? {
                GradCheckOutcome::NotApplicable(kind) => println!("{kind} has no analytic gradient; nothing to check"),
                GradCheckOutcome::Checked(report) => {
                    print!("{report}");
                    return Ok(report.passed());
                }
            }
        }
        Command::Synth { spec, out } => {
            let spec = ShapesSpec::parse(&spec)?;
            let samples = synth_shapes(&spec)?;
            write_dataset_dir(&out, &samples)?;
            println!("wrote {} images to {}", samples.len(), out.display());
        }
        Command::Preprocess { name, input, output, equalize } => {
            let kind: DatasetKind = name.parse()?;
            let cfg = ExperimentConfig::from_pairs([
                ("model".to_string(), "fisherfaces".to_string()),
                ("dataset".to_string(), name.clone()),
                ("equalize".to_string(), equalize),
            ])?;
            let chain = PreprocessChain::for_dataset(kind, cfg.equalize_policy()?);
            let samples = load_dataset_dir(&input, Some(&chain))?;
            write_dataset_dir(&output, &samples)?;
            let steps: Vec<String> = chain.steps().iter().map(ToString::to_string).collect();
            println!("{} images -> {} [{}]", samples.len(), output.display(), steps.join(", "));
        }
    }
    Ok(true)
}

fn exit_code(e: &Error) -> u8 {
    if e.is_data_error() {
        2
    } else if e.is_numeric_error() {
        3
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("CAPSBENCH_THREADS").ok().and_then(|v| v.parse().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size thread pool: {e}");
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
