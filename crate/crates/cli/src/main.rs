//! `mcqa`: validate data, train, evaluate, ablate, cross-evaluate and
//! inspect predictions of summary-infilling multiple-choice readers.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Command;
use config::{ConfigError, RunConfig, Source};

#[derive(Parser, Debug)]
#[command(
    name = "mcqa",
    version,
    about = "Summary-infilling multiple-choice reading comprehension"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Check a dataset file and print split statistics.
    Validate(ValidateArgs),
    /// Train a model on one task and keep the best dev checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a labeled dataset.
    Eval(EvalArgs),
    /// Train and score one model per (input mode, task) cell.
    Ablate(AblateArgs),
    /// Swap test sets between two task checkpoints and report the drops.
    Crosseval(CrossArgs),
    /// Per-option scores for selected examples, as CSV or an SVG chart.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config file with [dataset], [composer], [encoder], [trainer], [analyzer], [run] and [data] sections.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Write outputs here instead of a fresh directory under run.out_dir.
    #[arg(long, value_name = "DIR")]
    run_dir: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out_dir: Option<String>,
    #[arg(long)]
    task: Option<String>,
    /// passage_summary | passage_summary_question | passage_summary_answer | passage_question_answer
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "TOKEN")]
    placeholder_token: Option<String>,
    /// Skip invalid records instead of failing on the first one.
    #[arg(long)]
    lenient: bool,
    #[arg(long)]
    max_len: Option<usize>,
    /// Any other setting, e.g. `--set trainer.beta2=0.98`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    /// toy | pretrained-adapter
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long, value_name = "FILE")]
    encoder_checkpoint: Option<String>,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "FILE")]
    data: Option<String>,
    /// train | dev | test; guessed from the file name when omitted.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_name = "FILE")]
    train: Option<String>,
    #[arg(long, value_name = "FILE")]
    dev: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "FILE")]
    ckpt: Option<String>,
    #[arg(long, value_name = "FILE")]
    data: Option<String>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated input modes.
    #[arg(long)]
    modes: Option<String>,
    /// Comma-separated task names; data comes from data.<task>_train / _dev.
    #[arg(long)]
    tasks: Option<String>,
    /// Repeat every cell over this many consecutive seeds.
    #[arg(long)]
    seeds: Option<usize>,
}

#[derive(Args, Debug)]
struct CrossArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "FILE")]
    ckpt_i: Option<String>,
    #[arg(long, value_name = "FILE")]
    ckpt_n: Option<String>,
    #[arg(long, value_name = "FILE")]
    data_i: Option<String>,
    #[arg(long, value_name = "FILE")]
    data_n: Option<String>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "FILE")]
    ckpt: Option<String>,
    #[arg(long, value_name = "FILE")]
    data: Option<String>,
    /// Comma-separated example ids; all examples when omitted.
    #[arg(long)]
    ids: Option<String>,
    /// Constant added to logits for display.
    #[arg(long)]
    bias: Option<f64>,
    /// csv | plot
    #[arg(long)]
    format: Option<String>,
}

/// Flag overrides as `(section, key, text)`.
type Overrides = Vec<(&'static str, String, String)>;

fn push(out: &mut Overrides, section: &'static str, key: &str, value: Option<impl ToString>) {
    if let Some(v) = value {
        out.push((section, key.to_string(), v.to_string()));
    }
}

impl Common {
    fn overrides(&self, out: &mut Overrides) -> Result<(), ConfigError> {
        for item in &self.set {
            let (path, value) = item
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("--set expects section.key=value, got {item:?}")))?;
            let (section, key) = path
                .split_once('.')
                .ok_or_else(|| ConfigError(format!("--set expects section.key=value, got {item:?}")))?;
            let section = match section {
                "dataset" => "dataset",
                "composer" => "composer",
                "encoder" => "encoder",
                "trainer" => "trainer",
                "analyzer" => "analyzer",
                "run" => "run",
                "data" => "data",
                other => return Err(ConfigError(format!("unknown config section [{other}]"))),
            };
            push(out, section, key, Some(value));
        }
        push(out, "run", "out_dir", self.out_dir.as_ref());
        push(out, "run", "task", self.task.as_ref());
        push(out, "trainer", "mode", self.mode.as_ref());
        push(out, "trainer", "seed", self.seed);
        push(out, "dataset", "placeholder", self.placeholder_token.as_ref());
        push(out, "dataset", "lenient", self.lenient.then_some(true));
        push(out, "composer", "max_len", self.max_len);
        Ok(())
    }
}

impl ModelArgs {
    fn overrides(&self, out: &mut Overrides) {
        push(out, "trainer", "epochs", self.epochs);
        push(out, "trainer", "learning_rate", self.lr);
        push(out, "trainer", "batch_size", self.batch_size);
        push(out, "encoder", "hidden_dim", self.hidden_dim);
        push(out, "encoder", "layers", self.layers);
        push(out, "encoder", "ffn_dim", self.ffn_dim);
        push(out, "encoder", "kind", self.encoder.as_ref());
        push(out, "encoder", "checkpoint", self.encoder_checkpoint.as_ref());
    }
}

impl Cmd {
    fn parts(&self) -> Result<(Command, &Common, Overrides), ConfigError> {
        let mut o = Overrides::new();
        let (command, common) = match self {
            Cmd::Validate(a) => {
                push(&mut o, "run", "data", a.data.as_ref());
                push(&mut o, "dataset", "split", a.split.as_ref());
                (Command::Validate, &a.common)
            }
            Cmd::Train(a) => {
                a.model.overrides(&mut o);
                (Command::Train, &a.common)
            }
            Cmd::Eval(a) => {
                push(&mut o, "run", "ckpt", a.ckpt.as_ref());
                push(&mut o, "run", "data", a.data.as_ref());
                (Command::Eval, &a.common)
            }
            Cmd::Ablate(a) => {
                a.model.overrides(&mut o);
                push(&mut o, "run", "modes", a.modes.as_ref());
                push(&mut o, "run", "tasks", a.tasks.as_ref());
                push(&mut o, "run", "seeds", a.seeds);
                (Command::Ablate, &a.common)
            }
            Cmd::Crosseval(a) => {
                push(&mut o, "run", "ckpt_i", a.ckpt_i.as_ref());
                push(&mut o, "run", "ckpt_n", a.ckpt_n.as_ref());
                push(&mut o, "run", "data_i", a.data_i.as_ref());
                push(&mut o, "run", "data_n", a.data_n.as_ref());
                (Command::Crosseval, &a.common)
            }
            Cmd::Analyze(a) => {
                push(&mut o, "run", "ckpt", a.ckpt.as_ref());
                push(&mut o, "run", "data", a.data.as_ref());
                push(&mut o, "analyzer", "ids", a.ids.as_ref());
                push(&mut o, "analyzer", "bias", a.bias);
                push(&mut o, "analyzer", "format", a.format.as_ref());
                (Command::Analyze, &a.common)
            }
        };
        common.overrides(&mut o)?;
        Ok((command, common, o))
    }

    /// `--train` / `--dev` name files for the resolved task.
    fn data_overrides(&self, config: &mut RunConfig) -> Result<(), ConfigError> {
        if let Cmd::Train(a) = self {
            let task = config.task().to_string();
            if let Some(p) = &a.train {
                config.set_text("data", &format!("{task}_train"), p, Source::Flag)?;
            }
            if let Some(p) = &a.dev {
                config.set_text("data", &format!("{task}_dev"), p, Source::Flag)?;
            }
        }
        Ok(())
    }
}

fn resolve(cmd: &Cmd) -> Result<(Command, RunConfig, Option<PathBuf>), ConfigError> {
    let (command, common, overrides) = cmd.parts()?;
    let mut config = RunConfig::default();
    if let Some(path) = &common.config {
        config.apply_file(path)?;
    }
    config.apply_env(std::env::vars())?;
    for (section, key, text) in overrides {
        config.set_text(section, &key, &text, Source::Flag)?;
    }
    cmd.data_overrides(&mut config)?;
    Ok((command, config, common.run_dir.clone()))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<mcqa::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = resolve(&cli.command)
        .map_err(anyhow::Error::from)
        .and_then(|(command, config, run_dir)| {
            let dir = commands::prepare_run_dir(command, &config, run_dir.as_deref())?;
            log::info!("run directory {}", dir.display());
            commands::run(command, &config, &dir)
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
