//! `jpis` command line: train, evaluate and run models, generate the
//! synthetic corpus, import ProSLU data, and check gradients.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use jpis_core::config::{Ablation, TrainConfig};
use jpis_core::data::{load_corpus, save_corpus, CorpusRecord};
use jpis_core::error::{Error, Result};
use jpis_core::metrics::evaluate;
use jpis_core::model::{gradcheck_small_model, gradcheck_tiny_model, JpisModel};
use jpis_core::proslu::convert_proslu;
use jpis_core::synth::{synth_generate, synth_train_config};
use jpis_core::train::{grid_search, train, EpochLog, TrainingLog};

#[derive(Parser)]
#[command(name = "jpis", version, about = "Joint profile-aware intent detection and slot filling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and save the best-validation checkpoint.
    Train {
        /// TOML training configuration (includes the profile manifest).
        #[arg(long)]
        config: PathBuf,
        /// Training corpus (one JSON record per line).
        #[arg(long)]
        train: PathBuf,
        /// Validation corpus for checkpoint selection.
        #[arg(long)]
        valid: PathBuf,
        /// Checkpoint output path; the training log is written next to it
        /// with a .log.json extension.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured ablation
        /// (none, no_slot2intent, no_up, no_ca, no_profile).
        #[arg(long)]
        ablation: Option<String>,
        /// Override the run seed (default: first configured seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Override the learning rate.
        #[arg(long)]
        lr: Option<f64>,
        /// Override the loss mixture weight.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Evaluate a checkpoint and write a metrics report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON report output path.
        #[arg(long)]
        report: PathBuf,
    },
    /// Print per-utterance predictions as JSON lines.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train over the learning-rate and lambda grids, keep the best pair.
    Gridsearch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        /// Receives grid.json, best.ckpt and best.log.json.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compare analytic gradients with finite differences on a fixed
    /// small model; fails when the max relative error reaches 1e-4.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = GradcheckDims::Tiny)]
        dims: GradcheckDims,
    },
    /// Generate a synthetic profile-disambiguation corpus.
    Synth {
        #[arg(long)]
        seed: u64,
        /// Training-split size; validation and test get 1/8 each.
        #[arg(long)]
        size: usize,
        /// Fraction of utterances whose text fits two intents.
        #[arg(long)]
        ambiguity: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Import ProSLU-format JSON splits into the corpus format.
    ConvertProslu {
        /// Directory holding train/dev/test .json files.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GradcheckDims {
    /// Hidden dims 8, three tokens.
    Tiny,
    /// Hidden dims 12, four tokens.
    Small,
}

const GRADCHECK_THRESHOLD: f64 = 1e-4;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Numerical(_) => 2,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, train: train_path, valid, out, ablation, seed, lr, lambda } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(name) = ablation {
                cfg.ablation = Ablation::parse(&name)?;
            }
            if let Some(lr) = lr {
                cfg.learning_rate = lr;
            }
            if let Some(lambda) = lambda {
                cfg.lambda = lambda;
            }
            cfg.validate()?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let train_set = load_corpus(&train_path, &cfg.model.profile)?;
            let valid_set = load_corpus(&valid, &cfg.model.profile)?;
            let outcome = train(&cfg, &train_set, &valid_set, seed)?;
            print_log(&outcome.log);
            outcome.model.save(&out)?;
            write_json(&out.with_extension("log.json"), &outcome.log)?;
            println!(
                "saved checkpoint {} (best epoch {}, valid overall {:.4})",
                out.display(),
                outcome.log.best_epoch,
                outcome.log.best_overall
            );
            Ok(())
        }
        Command::Eval { ckpt, data, report } => {
            let model = JpisModel::load(&ckpt)?;
            let records = load_corpus(&data, &model.cfg.profile)?;
            let metrics = evaluate(&model, &records)?;
            write_json(&report, &metrics)?;
            println!(
                "intent {:.4} slot_f1 {:.4} overall {:.4} on {} utterances",
                metrics.intent_accuracy,
                metrics.slot_f1,
                metrics.overall_accuracy,
                metrics.n_utterances
            );
            Ok(())
        }
        Command::Predict { ckpt, data } => {
            use std::io::Write;
            let model = JpisModel::load(&ckpt)?;
            let records = load_corpus(&data, &model.cfg.profile)?;
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            for record in &records {
                let prediction = model.predict_record(record)?;
                let line = serde_json::json!({
                    "intent": model.labels.intents[prediction.intent],
                    "tags": prediction
                        .tags
                        .iter()
                        .map(|&t| model.labels.tag_str(t))
                        .collect::<Vec<_>>(),
                });
                // A closed pipe on the reading side ends output cleanly.
                if writeln!(out, "{line}").is_err() {
                    break;
                }
            }
            Ok(())
        }
        Command::Gridsearch { config, train: train_path, valid, out_dir } => {
            let cfg = TrainConfig::load(&config)?;
            let train_set = load_corpus(&train_path, &cfg.model.profile)?;
            let valid_set = load_corpus(&valid, &cfg.model.profile)?;
            let outcome = grid_search(&cfg, &train_set, &valid_set)?;
            std::fs::create_dir_all(&out_dir)?;
            for point in &outcome.table {
                println!(
                    "lr {:<7} lambda {:<4} valid overall {:.4} (best epoch {})",
                    point.learning_rate, point.lambda, point.valid_overall, point.best_epoch
                );
            }
            println!(
                "best: lr {} lambda {} valid overall {:.4}",
                outcome.best_learning_rate, outcome.best_lambda, outcome.best.log.best_overall
            );
            outcome.best.model.save(&out_dir.join("best.ckpt"))?;
            write_json(&out_dir.join("best.log.json"), &outcome.best.log)?;
            write_json(
                &out_dir.join("grid.json"),
                &serde_json::json!({
                    "best_learning_rate": outcome.best_learning_rate,
                    "best_lambda": outcome.best_lambda,
                    "table": outcome.table,
                }),
            )?;
            Ok(())
        }
        Command::Gradcheck { dims } => {
            let check = match dims {
                GradcheckDims::Tiny => gradcheck_tiny_model,
                GradcheckDims::Small => gradcheck_small_model,
            };
            let mut worst: f64 = 0.0;
            for ablation in [Ablation::None, Ablation::NoSlot2intent] {
                let report = check(ablation)?;
                println!(
                    "{}: max relative error {:.3e} ({}[{}], analytic {:.6e}, finite diff {:.6e})",
                    match ablation {
                        Ablation::None => "full",
                        _ => "no_slot2intent",
                    },
                    report.max_rel,
                    report.worst_param,
                    report.worst_index,
                    report.analytic,
                    report.finite_diff
                );
                worst = worst.max(report.max_rel);
            }
            if worst >= GRADCHECK_THRESHOLD {
                return Err(Error::Numerical(format!(
                    "max relative error {worst:.3e} reaches {GRADCHECK_THRESHOLD:e}"
                )));
            }
            println!("gradcheck passed (threshold {GRADCHECK_THRESHOLD:e})");
            Ok(())
        }
        Command::Synth { seed, size, ambiguity, out_dir } => {
            let corpus = synth_generate(seed, size, ambiguity)?;
            std::fs::create_dir_all(&out_dir)?;
            write_split(&out_dir, "train.jsonl", &corpus.train)?;
            write_split(&out_dir, "valid.jsonl", &corpus.valid)?;
            write_split(&out_dir, "test.jsonl", &corpus.test)?;
            write_json(&out_dir.join("metadata.json"), &corpus.metadata)?;
            synth_train_config().save(&out_dir.join("config.toml"))?;
            println!(
                "wrote {} train / {} valid / {} test records to {}",
                corpus.train.len(),
                corpus.valid.len(),
                corpus.test.len(),
                out_dir.display()
            );
            Ok(())
        }
        Command::ConvertProslu { input, out_dir } => {
            let counts = convert_proslu(&input, &out_dir)?;
            for (split, n) in &counts {
                println!("{split}: {n} records");
            }
            println!("wrote corpus files and config.toml to {}", out_dir.display());
            Ok(())
        }
    }
}

fn print_log(log: &TrainingLog) {
    for EpochLog { epoch, mean_loss, valid } in &log.epochs {
        let loss = match mean_loss {
            Some(l) => format!("loss {l:.6}"),
            None => "init".to_string(),
        };
        println!(
            "epoch {epoch:>3} {loss} valid intent {:.4} slot_f1 {:.4} overall {:.4}",
            valid.intent_accuracy, valid.slot_f1, valid.overall_accuracy
        );
    }
}

fn write_split(dir: &Path, name: &str, records: &[CorpusRecord]) -> Result<()> {
    save_corpus(&dir.join(name), records)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text)?;
    Ok(())
}
