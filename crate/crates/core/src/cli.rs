//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::{write_atomic, Checkpoint};
use crate::corpus::{corpus_stats, parse_conll, sample_fewshot, write_conll, Schema, TaggedCorpus};
use crate::error::Error;
use crate::eval::{evaluate, Tagger};
use crate::training::{run_scheme, Scheme, StageRecord, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "fsner", version, about = "Few-shot named entity recognition toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DataSchema {
    /// Tagging schema of the input CoNLL files.
    #[arg(long = "data-schema", default_value = "bio", value_parser = parse_schema)]
    pub data_schema: Schema,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print corpus statistics as JSON.
    Stats {
        conll: PathBuf,
        #[command(flatten)]
        schema: DataSchema,
    },
    /// Draw a few-shot subsample (at least SHOTS sentences per entity type).
    Sample {
        conll: PathBuf,
        #[arg(long)]
        shots: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        schema: DataSchema,
    },
    /// Train a model with one of the schemes lc, proto, lc+nsp, proto+nsp,
    /// lc+st, lc+nsp+st.
    ///
    /// Unlabeled text (for the st schemes) is plain tokenized text: one
    /// sentence per line, tokens separated by whitespace.
    Train {
        #[arg(long, value_parser = parse_scheme)]
        scheme: Option<Scheme>,
        /// JSON or TOML training configuration.
        #[arg(long)]
        config: PathBuf,
        /// Labeled target training data (CoNLL).
        #[arg(long)]
        train: PathBuf,
        /// Source corpus for the nsp schemes (CoNLL).
        #[arg(long)]
        source: Option<PathBuf>,
        /// Unlabeled text for the st schemes.
        #[arg(long)]
        unlabeled: Option<PathBuf>,
        /// Overrides the configuration's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        schema: DataSchema,
    },
    /// Score a checkpoint on test data and print the report as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Scoring schema.
        #[arg(long, default_value = "bio", value_parser = parse_schema)]
        schema: Schema,
        /// Support corpus; required for prototype checkpoints.
        #[arg(long)]
        support: Option<PathBuf>,
        #[command(flatten)]
        data: DataSchema,
    },
    /// Training-free inference from (multi-)prototypes built on a support set.
    Protoinfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        support: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Examples per type; ⌈K/5⌉ prototypes are built per label.
        #[arg(long)]
        shots: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "bio", value_parser = parse_schema)]
        schema: Schema,
        #[command(flatten)]
        data: DataSchema,
    },
}

fn parse_schema(s: &str) -> Result<Schema, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = if e.is_numeric() {
            EXIT_NUMERIC
        } else if matches!(e, Error::Config(_) | Error::UnknownSchema(_)) {
            EXIT_USAGE
        } else {
            EXIT_DATA
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e).into())
}

fn load_corpus(path: &Path, schema: Schema) -> CliResult<TaggedCorpus> {
    parse_conll(&read(path)?, schema).map_err(|e| CliError {
        code: EXIT_DATA,
        message: format!("{}: {e}", path.display()),
    })
}

/// One sentence per non-blank line, whitespace-separated tokens.
pub fn parse_unlabeled(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split_whitespace().map(String::from).collect::<Vec<_>>())
        .filter(|t| !t.is_empty())
        .collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable report");
    s.push('\n');
    s
}

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub scheme: Scheme,
    pub config: TrainConfig,
    pub seed: u64,
    pub inputs: Vec<InputDigest>,
    pub stages: Vec<String>,
    pub checkpoint: String,
    pub metrics: String,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Serialize)]
struct Metrics<'a> {
    scheme: Scheme,
    stages: &'a [StageRecord],
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(OsString::from).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

/// Executes one parsed command, writing command output to `out`.
pub fn execute(command: Command, out: &mut dyn Write) -> CliResult<()> {
    let emit = |out: &mut dyn Write, text: &str| {
        out.write_all(text.as_bytes()).map_err(|e| CliError {
            code: EXIT_DATA,
            message: format!("writing output: {e}"),
        })
    };
    match command {
        Command::Stats { conll, schema } => {
            let corpus = load_corpus(&conll, schema.data_schema)?;
            emit(out, &to_json_pretty(&corpus_stats(&corpus)))
        }
        Command::Sample {
            conll,
            shots,
            seed,
            out: path,
            schema,
        } => {
            let corpus = load_corpus(&conll, schema.data_schema)?;
            let sample = sample_fewshot(&corpus, shots, seed)?;
            write_atomic(&path, write_conll(&sample).as_bytes())?;
            Ok(())
        }
        Command::Train {
            scheme,
            config,
            train,
            source,
            unlabeled,
            seed,
            out: path,
            schema,
        } => {
            let started = Instant::now();
            let config_text = read(&config)?;
            let mut cfg = TrainConfig::parse(&config_text)?;
            if let Some(s) = scheme {
                cfg.scheme = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let scheme = cfg.scheme;
            if scheme.needs_source() && source.is_none() {
                return Err(CliError {
                    code: EXIT_USAGE,
                    message: format!("scheme {scheme} requires --source"),
                });
            }
            if scheme.needs_unlabeled() && unlabeled.is_none() {
                return Err(CliError {
                    code: EXIT_USAGE,
                    message: format!("scheme {scheme} requires --unlabeled"),
                });
            }

            let mut inputs = vec![InputDigest {
                role: "config".into(),
                path: config.display().to_string(),
                sha256: sha256_hex(config_text.as_bytes()),
            }];
            let train_text = read(&train)?;
            inputs.push(InputDigest {
                role: "train".into(),
                path: train.display().to_string(),
                sha256: sha256_hex(train_text.as_bytes()),
            });
            let labeled = parse_conll(&train_text, schema.data_schema).map_err(|e| CliError {
                code: EXIT_DATA,
                message: format!("{}: {e}", train.display()),
            })?;
            let source_corpus = match (&source, scheme.needs_source()) {
                (Some(p), true) => {
                    let text = read(p)?;
                    inputs.push(InputDigest {
                        role: "source".into(),
                        path: p.display().to_string(),
                        sha256: sha256_hex(text.as_bytes()),
                    });
                    Some(parse_conll(&text, schema.data_schema).map_err(|e| CliError {
                        code: EXIT_DATA,
                        message: format!("{}: {e}", p.display()),
                    })?)
                }
                _ => None,
            };
            let unlabeled_sentences = match (&unlabeled, scheme.needs_unlabeled()) {
                (Some(p), true) => {
                    let text = read(p)?;
                    inputs.push(InputDigest {
                        role: "unlabeled".into(),
                        path: p.display().to_string(),
                        sha256: sha256_hex(text.as_bytes()),
                    });
                    Some(parse_unlabeled(&text))
                }
                _ => None,
            };

            let run = run_scheme(&labeled, source_corpus.as_ref(), unlabeled_sentences.as_deref(), &cfg)?;
            run.checkpoint.save(&path)?;
            let metrics_path = sibling(&path, ".metrics.json");
            write_atomic(
                &metrics_path,
                to_json_pretty(&Metrics {
                    scheme,
                    stages: &run.stages,
                })
                .as_bytes(),
            )?;
            let manifest = RunManifest {
                scheme,
                seed: cfg.seed,
                config: cfg,
                inputs,
                stages: run.stages.iter().map(|s| s.name.clone()).collect(),
                checkpoint: path.display().to_string(),
                metrics: metrics_path.display().to_string(),
                wall_clock_seconds: started.elapsed().as_secs_f64(),
            };
            write_atomic(&sibling(&path, ".manifest.json"), to_json_pretty(&manifest).as_bytes())?;
            Ok(())
        }
        Command::Eval {
            checkpoint,
            test,
            schema,
            support,
            data,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let test = load_corpus(&test, data.data_schema)?;
            let support = support
                .map(|p| load_corpus(&p, data.data_schema))
                .transpose()?;
            let tagger = Tagger::from_checkpoint(&ckpt, support.as_ref())?;
            let report = evaluate(&tagger, &test, schema)?;
            emit(out, &to_json_pretty(&report))
        }
        Command::Protoinfer {
            checkpoint,
            support,
            test,
            shots,
            seed,
            schema,
            data,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let support = load_corpus(&support, data.data_schema)?;
            let test = load_corpus(&test, data.data_schema)?;
            if shots == 0 {
                return Err(CliError {
                    code: EXIT_USAGE,
                    message: "--shots must be positive".into(),
                });
            }
            for ty in support.labels().entity_types() {
                let n = support.sentences().iter().filter(|s| s.contains_type(ty)).count();
                if n < shots {
                    return Err(Error::InsufficientData {
                        entity_type: ty.clone(),
                        message: format!("support has {n} examples, {shots} required"),
                    }
                    .into());
                }
            }
            let tagger = Tagger::from_support(&ckpt.encoder, &support, Some(shots), seed)?;
            let report = evaluate(&tagger, &test, schema)?;
            emit(out, &to_json_pretty(&report))
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(rendered.as_bytes())
            } else {
                out.write_all(rendered.as_bytes())
            };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}
