//! Command-line front end for the prompt-tuning pipeline.
//!
//! Every subcommand accepts `--config FILE` with `key = value` lines using the
//! flag names; flags given on the command line win. Exit codes: 0 success,
//! 1 bad input, 2 internal failure.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, Result};
use clap::{Args, Parser, Subcommand};
use softprompt::codec::TaskKind;
use softprompt::eval::MatchMode;
use softprompt::model::{ModelConfig, PretrainConfig};
use softprompt::prompt::{InitMode, TuningConfig};
use softprompt::tokenizer::TokenizerMode;

pub use commands::*;
pub use config::ConfigFile;

#[derive(Debug, Parser)]
#[command(name = "softprompt", version, about = "Soft-prompt tuning of a frozen language model")]
pub struct Cli {
    /// `key = value` file supplying defaults for any flag
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a tokenizer on a text or .jsonl corpus
    Tokenizer(TokenizerArgs),
    /// Pretrain a base language model
    Pretrain(PretrainArgs),
    /// Write synthetic task instances
    Synth(SynthArgs),
    /// Convert a directory of standoff .txt/.ann files to instances
    Convert(ConvertArgs),
    /// Tune a soft prompt against a frozen model
    Tune(TuneArgs),
    /// Greedy generation for each instance
    Generate(GenerateArgs),
    /// Score generations against gold annotations
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct TokenizerArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// bpe or word
    #[arg(long)]
    pub mode: Option<TokenizerMode>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub task: Option<TaskKind>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Progress notes only: name the label in the plan text
    #[arg(long)]
    pub label_cue: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Directory of standoff files
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<TaskKind>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<TaskKind>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub prompt_len: Option<usize>,
    /// direct or lstm
    #[arg(long)]
    pub init_mode: Option<InitMode>,
    #[arg(long)]
    pub max_target_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<TaskKind>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub task: Option<TaskKind>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub generations: Option<PathBuf>,
    /// strict or relaxed
    #[arg(long)]
    pub mode: Option<MatchMode>,
    /// `CUI<TAB>name` lines replacing the built-in lexicon
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn need<T>(cfg: &ConfigFile, flag: Option<T>, key: &str) -> Result<T>
where
    T: FromStr,
    T::Err: std::fmt::Display,
{
    cfg.pick_opt(flag, key)?
        .ok_or_else(|| anyhow!("missing --{key} (flag or config key)"))
}

impl Command {
    fn config_keys(&self) -> &'static [&'static str] {
        match self {
            Command::Tokenizer(_) => &["data", "vocab-size", "mode", "out"],
            Command::Pretrain(_) => &[
                "data", "tokenizer", "out", "steps", "lr", "batch", "seed", "window", "d-model", "layers",
                "heads", "d-ff", "max-seq-len",
            ],
            Command::Synth(_) => &["task", "count", "seed", "label-cue", "out"],
            Command::Convert(_) => &["data", "task", "out"],
            Command::Tune(_) => &[
                "model", "tokenizer", "data", "task", "out", "steps", "lr", "batch", "seed", "prompt-len",
                "init-mode", "max-target-len",
            ],
            Command::Generate(_) => &["model", "prompt", "tokenizer", "data", "task", "out", "max-new-tokens"],
            Command::Eval(_) => &["task", "data", "generations", "mode", "lexicon", "out"],
        }
    }

    /// Resolves flags against the config file and runs the stage.
    pub fn execute(self, cfg: &ConfigFile) -> Result<()> {
        cfg.check_keys(self.config_keys())?;
        match self {
            Command::Tokenizer(a) => {
                cmd_tokenizer(&TokenizerOpts {
                    data: need(cfg, a.data, "data")?,
                    vocab_size: cfg.pick(a.vocab_size, "vocab-size", 512)?,
                    mode: cfg.pick(a.mode, "mode", TokenizerMode::ByteLevelBpe)?,
                    out: need(cfg, a.out, "out")?,
                })?;
            }
            Command::Pretrain(a) => {
                let (m, t) = (ModelConfig::default(), PretrainConfig::default());
                cmd_pretrain(&PretrainOpts {
                    data: need(cfg, a.data, "data")?,
                    tokenizer: need(cfg, a.tokenizer, "tokenizer")?,
                    out: need(cfg, a.out, "out")?,
                    model: ModelConfig {
                        d_model: cfg.pick(a.d_model, "d-model", m.d_model)?,
                        n_layers: cfg.pick(a.layers, "layers", m.n_layers)?,
                        n_heads: cfg.pick(a.heads, "heads", m.n_heads)?,
                        d_ff: cfg.pick(a.d_ff, "d-ff", m.d_ff)?,
                        max_seq_len: cfg.pick(a.max_seq_len, "max-seq-len", m.max_seq_len)?,
                        ..m
                    },
                    train: PretrainConfig {
                        steps: cfg.pick(a.steps, "steps", t.steps)?,
                        lr: cfg.pick(a.lr, "lr", t.lr)?,
                        batch_size: cfg.pick(a.batch, "batch", t.batch_size)?,
                        seed: cfg.pick(a.seed, "seed", t.seed)?,
                        window: cfg.pick(a.window, "window", t.window)?,
                        ..t
                    },
                })?;
            }
            Command::Synth(a) => {
                cmd_synth(&SynthOpts {
                    task: need(cfg, a.task, "task")?,
                    count: need(cfg, a.count, "count")?,
                    seed: cfg.pick(a.seed, "seed", 42)?,
                    label_cue: a.label_cue || cfg.get("label-cue")?.unwrap_or(false),
                    out: need(cfg, a.out, "out")?,
                })?;
            }
            Command::Convert(a) => {
                cmd_convert(&ConvertOpts {
                    dir: need(cfg, a.data, "data")?,
                    task: need(cfg, a.task, "task")?,
                    out: need(cfg, a.out, "out")?,
                })?;
            }
            Command::Tune(a) => {
                let t = TuningConfig::default();
                cmd_tune(&TuneOpts {
                    model: need(cfg, a.model, "model")?,
                    tokenizer: need(cfg, a.tokenizer, "tokenizer")?,
                    data: need(cfg, a.data, "data")?,
                    task: cfg.pick_opt(a.task, "task")?,
                    out: need(cfg, a.out, "out")?,
                    tuning: TuningConfig {
                        prompt_len: cfg.pick(a.prompt_len, "prompt-len", t.prompt_len)?,
                        lr: cfg.pick(a.lr, "lr", t.lr)?,
                        steps: cfg.pick(a.steps, "steps", t.steps)?,
                        batch_size: cfg.pick(a.batch, "batch", t.batch_size)?,
                        seed: cfg.pick(a.seed, "seed", t.seed)?,
                        init_mode: cfg.pick(a.init_mode, "init-mode", t.init_mode)?,
                        max_target_len: cfg.pick_opt(a.max_target_len, "max-target-len")?,
                    },
                })?;
            }
            Command::Generate(a) => {
                cmd_generate(&GenerateOpts {
                    model: need(cfg, a.model, "model")?,
                    prompt: need(cfg, a.prompt, "prompt")?,
                    tokenizer: need(cfg, a.tokenizer, "tokenizer")?,
                    data: need(cfg, a.data, "data")?,
                    task: cfg.pick_opt(a.task, "task")?,
                    out: need(cfg, a.out, "out")?,
                    max_new_tokens: cfg.pick(a.max_new_tokens, "max-new-tokens", 64)?,
                })?;
            }
            Command::Eval(a) => {
                cmd_eval(&EvalOpts {
                    task: cfg.pick_opt(a.task, "task")?,
                    data: need(cfg, a.data, "data")?,
                    generations: need(cfg, a.generations, "generations")?,
                    mode: cfg.pick(a.mode, "mode", MatchMode::Strict)?,
                    lexicon: cfg.pick_opt(a.lexicon, "lexicon")?,
                    out: need(cfg, a.out, "out")?,
                })?;
            }
        }
        Ok(())
    }
}

/// 2 for failures of the program itself, 1 for everything caused by input.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<Internal>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<softprompt::Error>() {
            if matches!(e, softprompt::Error::Shape { .. } | softprompt::Error::EmptyLoss) {
                return 2;
            }
        }
    }
    1
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match &cli.config {
        Some(path) => ConfigFile::load(path),
        None => Ok(ConfigFile::default()),
    }
    .and_then(|cfg| cli.command.execute(&cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
