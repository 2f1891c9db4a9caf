//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 when a command fails (including a missing
//! input file), 2 for usage and configuration errors.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{EvalMode, PipelineConfig};
use crate::convert::{convert_cmu_dog, convert_wizard};
use crate::corpus::{build_vocabulary, load_corpus, write_corpus, Corpus, Split, Vocabulary};
use crate::error::Error;
use crate::evaluation::{
    evaluate_with_results, greedy_select, sweep, Assembly, EvalSettings, GenerationRecord, SelectionRecord,
    SweepVariable,
};
use crate::metrics::EmbeddingTable;
use crate::pseudo::{load_or_build, warmup_corpora_from_labels, PseudoLabel};
use crate::training::{Models, Trainer};

#[derive(Debug, Parser)]
#[command(name = "kgdial", about = "Knowledge-grounded dialogue pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON configuration layered over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a field by dotted path, e.g. `--set train.t_max=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Wizard,
    CmuDog,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert a Wizard of Wikipedia or CMU_DoG file to the corpus format.
    Preprocess {
        #[arg(long, value_enum)]
        format: Format,
        #[arg(long)]
        input: PathBuf,
        /// CMU_DoG document directory.
        #[arg(long)]
        docs: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Build the vocabulary and pseudo labels for the training corpus.
    Pseudo(Common),
    /// Warm up the selector and generator on pseudo labels.
    Warmup(Common),
    /// Warm-up (if not done yet) followed by joint training.
    Train(Common),
    /// Write greedy knowledge selections for the evaluation corpus.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write greedy responses for the evaluation corpus.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score the evaluation corpus and write a metrics report.
    Evaluate(Common),
    /// Evaluate once per value of `t_max` or `trunc_budget`.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variable: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
}

/// A failed command with its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult<T = ()> = std::result::Result<T, Failure>;

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(command: Command) -> CmdResult {
    match command {
        Command::Preprocess {
            format,
            input,
            docs,
            output,
            split,
        } => preprocess(format, &input, docs.as_deref(), &output, &split),
        Command::Pseudo(common) => pseudo_cmd(&load_config(&common)?),
        Command::Warmup(common) => warmup_cmd(&load_config(&common)?),
        Command::Train(common) => train_cmd(&load_config(&common)?),
        Command::Select { common, output } => select_cmd(&load_config(&common)?, output),
        Command::Generate { common, output } => generate_cmd(&load_config(&common)?, output),
        Command::Evaluate(common) => evaluate_cmd(&load_config(&common)?),
        Command::Sweep {
            common,
            variable,
            values,
        } => {
            let variable: SweepVariable = variable.parse().map_err(|e: Error| usage(e.to_string()))?;
            sweep_cmd(&load_config(&common)?, variable, &values)
        }
    }
}

fn load_config(common: &Common) -> CmdResult<PipelineConfig> {
    if let Some(path) = &common.config {
        existing(Some(path), "--config")?;
    }
    PipelineConfig::load(common.config.as_deref(), &common.overrides).map_err(|e| usage(e.to_string()))
}

/// The path must be configured (else usage error) and exist (else exit 1).
fn existing<'a>(path: Option<&'a PathBuf>, field: &str) -> CmdResult<&'a Path> {
    let path = path.ok_or_else(|| usage(format!("{field} is not set")))?;
    if !path.exists() {
        return Err(Failure {
            code: 1,
            message: format!("{field}: no such file: {}", path.display()),
        });
    }
    Ok(path)
}

fn check_optional(path: Option<&PathBuf>, field: &str) -> CmdResult {
    if path.is_some() {
        existing(path, field)?;
    }
    Ok(())
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::from(Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_failure(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn append_lines<S: serde::Serialize>(path: &Path, records: &[S]) -> CmdResult {
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_failure(path, e))?;
    for record in records {
        let line = serde_json::to_string(record).map_err(Error::from)?;
        writeln!(file, "{line}").map_err(|e| io_failure(path, e))?;
    }
    Ok(())
}

fn preprocess(format: Format, input: &Path, docs: Option<&Path>, output: &Path, split: &str) -> CmdResult {
    let split: Split = split.parse().map_err(|e: Error| usage(e.to_string()))?;
    existing(Some(&input.to_path_buf()), "--input")?;
    let corpus = match format {
        Format::Wizard => convert_wizard(input, split)?,
        Format::CmuDog => {
            let docs = docs.ok_or_else(|| usage("--docs is required for cmu-dog"))?;
            existing(Some(&docs.to_path_buf()), "--docs")?;
            convert_cmu_dog(input, docs, split)?
        }
    };
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_failure(parent, e))?;
    }
    write_corpus(output, &corpus)?;
    println!("wrote {} examples to {}", corpus.len(), output.display());
    Ok(())
}

/// Everything the training commands share.
struct TrainInputs {
    run_dir: PathBuf,
    corpus: Corpus,
    valid: Option<Corpus>,
    vocab: Vocabulary,
    labels: Vec<PseudoLabel>,
}

fn train_inputs(cfg: &PipelineConfig) -> CmdResult<TrainInputs> {
    let train_path = existing(cfg.paths.train.as_ref(), "paths.train")?;
    check_optional(cfg.paths.valid.as_ref(), "paths.valid")?;
    let run_dir = cfg.run_dir(true)?.expect("created on demand");
    write_text(
        &run_dir.join("config.json"),
        &serde_json::to_string_pretty(cfg).map_err(Error::from)?,
    )?;
    let corpus = load_corpus(train_path, Split::Train)?;
    let valid = cfg
        .paths
        .valid
        .as_ref()
        .map(|p| load_corpus(p, Split::Valid))
        .transpose()?;
    let vocab_path = run_dir.join("vocab.json");
    let vocab = if vocab_path.exists() {
        Vocabulary::load(&vocab_path)?
    } else {
        let vocab = build_vocabulary(&corpus, cfg.vocab_max_size)?;
        vocab.save(&vocab_path)?;
        vocab
    };
    let cache_dir = cfg.paths.cache_dir.clone().unwrap_or_else(|| run_dir.join("cache"));
    fs::create_dir_all(&cache_dir).map_err(|e| io_failure(&cache_dir, e))?;
    let labels = load_or_build(cache_dir.join("pseudo_train.jsonl"), &corpus)?;
    Ok(TrainInputs {
        run_dir,
        corpus,
        valid,
        vocab,
        labels,
    })
}

fn pseudo_cmd(cfg: &PipelineConfig) -> CmdResult {
    let inputs = train_inputs(cfg)?;
    let mean = inputs.labels.iter().map(|l| l.m_bar as f64).sum::<f64>() / inputs.labels.len().max(1) as f64;
    println!(
        "{} pseudo labels (mean length {mean:.2}), vocabulary of {} tokens, run directory {}",
        inputs.labels.len(),
        inputs.vocab.len(),
        inputs.run_dir.display()
    );
    Ok(())
}

fn checkpoint_dir(run_dir: &Path, name: &str) -> PathBuf {
    run_dir.join("checkpoints").join(name)
}

/// Resumes from the newest compatible checkpoint in the run directory,
/// else starts from freshly initialised models.
fn make_trainer<'v>(cfg: &PipelineConfig, inputs: &TrainInputs, vocab: &'v Vocabulary) -> CmdResult<Trainer<'v>> {
    for name in ["latest", "warmup"] {
        let dir = checkpoint_dir(&inputs.run_dir, name);
        if dir.join("manifest.json").exists() {
            let ck = load_checkpoint(&dir)?;
            ck.check_resume(&cfg.model, &cfg.train)?;
            if ck.vocabulary != *vocab {
                return Err(Error::Checkpoint(format!("{}: vocabulary differs from the run's", dir.display())).into());
            }
            log::info!("resuming from {} at step {}", dir.display(), ck.state.step);
            let mut trainer = Trainer::new(ck.models, cfg.train.clone(), cfg.model, vocab)?;
            trainer.state = ck.state;
            return Ok(trainer);
        }
    }
    let models = Models::new(&cfg.model, vocab.len(), cfg.train.seed)?;
    Ok(Trainer::new(models, cfg.train.clone(), cfg.model, vocab)?)
}

fn save(trainer: &Trainer<'_>, dir: &Path, vocab: &Vocabulary) -> crate::Result<()> {
    save_checkpoint(
        dir,
        &trainer.models,
        &trainer.state,
        &trainer.model_config,
        &trainer.config,
        vocab,
    )
}

fn run_warmup(trainer: &mut Trainer<'_>, inputs: &TrainInputs) -> CmdResult {
    let corpora = warmup_corpora_from_labels(&inputs.corpus, inputs.labels.clone());
    let before = trainer.state.warmup_step;
    let records = trainer.warmup(&corpora)?;
    append_lines(&inputs.run_dir.join("warmup_log.jsonl"), &records)?;
    if trainer.state.warmup_step > before || !checkpoint_dir(&inputs.run_dir, "warmup").exists() {
        save(trainer, &checkpoint_dir(&inputs.run_dir, "warmup"), &inputs.vocab)?;
    }
    if let Some(last) = records.last() {
        println!(
            "warm-up finished at step {}: selector nll {:.4}, generator nll {:.4}",
            last.step, last.selector_nll, last.generator_nll
        );
    }
    Ok(())
}

fn warmup_cmd(cfg: &PipelineConfig) -> CmdResult {
    let inputs = train_inputs(cfg)?;
    let mut trainer = make_trainer(cfg, &inputs, &inputs.vocab)?;
    run_warmup(&mut trainer, &inputs)
}

fn train_cmd(cfg: &PipelineConfig) -> CmdResult {
    let inputs = train_inputs(cfg)?;
    let mut trainer = make_trainer(cfg, &inputs, &inputs.vocab)?;
    run_warmup(&mut trainer, &inputs)?;
    let log_path = inputs.run_dir.join("train_log.jsonl");
    let latest = checkpoint_dir(&inputs.run_dir, "latest");
    let best = checkpoint_dir(&inputs.run_dir, "best");
    let mut on_validation = |t: &Trainer<'_>, _: &crate::training::StepRecord, is_best: bool| {
        save(t, &latest, &inputs.vocab)?;
        if is_best {
            save(t, &best, &inputs.vocab)?;
        }
        Ok(())
    };
    let records = trainer.joint_train(&inputs.corpus, &inputs.labels, inputs.valid.as_ref(), &mut on_validation)?;
    append_lines(&log_path, &records)?;
    save(&trainer, &latest, &inputs.vocab)?;
    println!(
        "trained to step {} (p = {:.6}){}; run directory {}",
        trainer.state.step,
        trainer.state.p,
        if trainer.state.stopped_early { ", stopped early" } else { "" },
        inputs.run_dir.display()
    );
    Ok(())
}

/// Inputs for the evaluation commands.
struct EvalInputs {
    out_dir: PathBuf,
    checkpoint: Checkpoint,
    corpus: Corpus,
    embeddings: Option<EmbeddingTable>,
}

fn eval_inputs(cfg: &PipelineConfig) -> CmdResult<EvalInputs> {
    let eval_path = existing(cfg.paths.eval.as_ref(), "paths.eval")?;
    check_optional(cfg.paths.embeddings.as_ref(), "paths.embeddings")?;
    let run_dir = cfg.run_dir(false)?;
    let ck_dir = match &cfg.paths.checkpoint {
        Some(dir) => existing(Some(dir), "paths.checkpoint")?.to_path_buf(),
        None => run_dir
            .as_ref()
            .and_then(|run| {
                ["best", "latest", "warmup"]
                    .iter()
                    .map(|n| checkpoint_dir(run, n))
                    .find(|d| d.join("manifest.json").exists())
            })
            .ok_or_else(|| Failure {
                code: 1,
                message: "no checkpoint found: set paths.checkpoint or train first".into(),
            })?,
    };
    let out_dir = match run_dir {
        Some(dir) => dir,
        None => ck_dir.clone(),
    };
    Ok(EvalInputs {
        out_dir,
        checkpoint: load_checkpoint(&ck_dir)?,
        corpus: load_corpus(eval_path, cfg.eval.split)?,
        embeddings: cfg.paths.embeddings.as_ref().map(EmbeddingTable::load).transpose()?,
    })
}

fn settings<'a>(cfg: &PipelineConfig, inputs: &'a EvalInputs) -> EvalSettings<'a> {
    let assembly = match cfg.eval.mode {
        EvalMode::Select => Assembly::Select { t_max: cfg.eval_t_max() },
        EvalMode::Truncate => Assembly::Truncate {
            budget: cfg.eval.trunc_budget,
        },
    };
    EvalSettings {
        assembly,
        response_budget: inputs.checkpoint.manifest.model_config.response_budget,
        embeddings: inputs.embeddings.as_ref(),
    }
}

fn write_records<S: serde::Serialize>(path: &Path, records: &[S]) -> CmdResult {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(Error::from)?);
        text.push('\n');
    }
    write_text(path, &text)
}

fn select_cmd(cfg: &PipelineConfig, output: Option<PathBuf>) -> CmdResult {
    let inputs = eval_inputs(cfg)?;
    let ck = &inputs.checkpoint;
    let records = inputs
        .corpus
        .examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            greedy_select(&ck.models, ex, cfg.eval_t_max(), &ck.vocabulary).map(|s| SelectionRecord::new(i, &s))
        })
        .collect::<crate::Result<Vec<_>>>()?;
    let path = output.unwrap_or_else(|| inputs.out_dir.join("selections.jsonl"));
    write_records(&path, &records)?;
    println!("wrote {} selections to {}", records.len(), path.display());
    Ok(())
}

fn generate_cmd(cfg: &PipelineConfig, output: Option<PathBuf>) -> CmdResult {
    let inputs = eval_inputs(cfg)?;
    let ck = &inputs.checkpoint;
    let (_, results) = evaluate_with_results(&ck.models, &inputs.corpus, &settings(cfg, &inputs), &ck.vocabulary)?;
    let records: Vec<GenerationRecord> = results
        .into_iter()
        .map(|r| GenerationRecord {
            example_id: r.example_id,
            text: r.text,
            token_count: r.token_count,
            mean_nll: r.mean_nll,
        })
        .collect();
    let path = output.unwrap_or_else(|| inputs.out_dir.join("generations.jsonl"));
    write_records(&path, &records)?;
    println!("wrote {} responses to {}", records.len(), path.display());
    Ok(())
}

fn evaluate_cmd(cfg: &PipelineConfig) -> CmdResult {
    let inputs = eval_inputs(cfg)?;
    let ck = &inputs.checkpoint;
    let (report, _) = evaluate_with_results(&ck.models, &inputs.corpus, &settings(cfg, &inputs), &ck.vocabulary)?;
    let path = cfg.paths.report.clone().unwrap_or_else(|| inputs.out_dir.join("report.json"));
    write_text(&path, &(report.to_json_line() + "\n"))?;
    println!("{}", report.to_json_line());
    println!("report written to {}", path.display());
    Ok(())
}

fn sweep_cmd(cfg: &PipelineConfig, variable: SweepVariable, values: &[usize]) -> CmdResult {
    if values.is_empty() || values.contains(&0) {
        return Err(usage("sweep values must be positive integers"));
    }
    let inputs = eval_inputs(cfg)?;
    let ck = &inputs.checkpoint;
    let table = sweep(
        &ck.models,
        &inputs.corpus,
        variable,
        values,
        ck.manifest.model_config.response_budget,
        inputs.embeddings.as_ref(),
        &ck.vocabulary,
    )?;
    let stem = match variable {
        SweepVariable::TMax => "sweep_t_max",
        SweepVariable::TruncBudget => "sweep_trunc_budget",
    };
    write_text(&inputs.out_dir.join(format!("{stem}.txt")), &table.to_text())?;
    write_text(&inputs.out_dir.join(format!("{stem}.jsonl")), &table.to_json_lines())?;
    print!("{}", table.to_text());
    Ok(())
}
