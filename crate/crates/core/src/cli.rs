//! Command-line front end. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or configuration error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::thread;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::corpus::{load_corpus, write_corpus, Corpus, CorpusRecord, FeatureMap};
use crate::data::synthetic::{generate_synthetic, write_synthetic};
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::generate::DecodeMode;
use crate::metrics::evaluate_corpus;
use crate::model::{DialogueExample, MtnTct};
use crate::selfcheck::{run_suite, Scope};
use crate::train::train;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const HYPOTHESES_FILE: &str = "hypotheses.jsonl";
pub const REPORT_FILE: &str = "report.txt";
pub const GRADCHECK_FILE: &str = "gradcheck.txt";

#[derive(Debug, Parser)]
#[command(name = "mtn-tct", version, about = "Cross-modal translator dialogue model: data, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file (flat `key = value` pairs).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Configuration override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a synthetic corpus (vocabulary, mapping, three splits).
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains on `<data_dir>/train.jsonl`, selecting on `valid.jsonl`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores hypothesis answers against reference answers.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Corpus whose `answer` fields are the hypotheses.
        #[arg(long)]
        hyp: PathBuf,
        /// Reference corpus, repeatable.
        #[arg(long = "ref", required = true)]
        refs_files: Vec<PathBuf>,
        /// Use at most N references per example.
        #[arg(long = "refs", value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
        max_refs: Option<u64>,
    },
    /// Generates answers for every record of a corpus.
    Translate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = parse_scope)]
        scope: Scope,
    },
}

fn parse_scope(s: &str) -> std::result::Result<Scope, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = Scope::ALL.iter().map(|s| s.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Output goes to `stdout`, diagnostics to stderr.
pub fn run_cli<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let common = match &cli.command {
        Command::GenData { common, .. }
        | Command::Train { common, .. }
        | Command::Eval { common, .. }
        | Command::Translate { common, .. }
        | Command::Gradcheck { common, .. } => common,
    };
    let config = match resolve(common) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    match execute(&cli.command, config, stdout) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut overrides = common.set.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    RunConfig::resolve(common.config.as_deref(), &overrides)
}

fn execute(command: &Command, mut config: RunConfig, stdout: &mut dyn Write) -> Result<i32> {
    let say = |stdout: &mut dyn Write, text: &str| -> Result<()> {
        stdout.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
    };
    match command {
        Command::GenData { out, .. } => {
            config.data_dir = out.clone();
            let corpus = generate_synthetic(&config.synthetic_spec())?;
            write_synthetic(&corpus, out)?;
            config.write_snapshot(out)?;
            say(
                stdout,
                &format!(
                    "wrote {} train, {} valid, {} test examples to {}\n",
                    corpus.train.records.len(),
                    corpus.valid.records.len(),
                    corpus.test.records.len(),
                    out.display()
                ),
            )?;
        }
        Command::Train { out, .. } => {
            config.write_snapshot(out)?;
            let vocab = Vocabulary::load(&config.vocab_path())?;
            let train_set = load_examples(&config.data_dir.join("train.jsonl"), &vocab)?;
            let valid_set = load_examples(&config.data_dir.join("valid.jsonl"), &vocab)?;
            let mut model = build_model(&config, &vocab, &train_set)?;
            let summary = train(&mut model, &train_set, &valid_set, &config.train_config(), out)?;
            say(
                stdout,
                &format!(
                    "best step {} perplexity {:.9} checkpoint {}\n",
                    summary.best_step,
                    summary.best_perplexity,
                    summary.checkpoint.display()
                ),
            )?;
        }
        Command::Eval {
            out,
            hyp,
            refs_files,
            max_refs,
            ..
        } => {
            config.write_snapshot(out)?;
            let hypotheses = load_corpus(hyp)?;
            let references = refs_files.iter().map(|p| load_corpus(p)).collect::<Result<Vec<_>>>()?;
            let report = evaluate_corpus(&hypotheses, &references, max_refs.map(|n| n as usize))?;
            let text = report.to_string();
            let path = out.join(REPORT_FILE);
            fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
            say(stdout, &text)?;
        }
        Command::Translate {
            out,
            checkpoint,
            input,
            ..
        } => {
            config.write_snapshot(out)?;
            let mode = config.decode_mode()?;
            let vocab = Vocabulary::load(&config.vocab_path())?;
            let corpus = load_corpus(input)?;
            let examples = corpus.examples(&vocab)?;
            let mut model = build_model(&config, &vocab, &examples)?;
            model.load(checkpoint)?;
            let answers = generate_all(&model, &examples, mode, config.max_answer_len)?;
            let records = hypothesis_records(&corpus, &vocab, &answers);
            let path = out.join(HYPOTHESES_FILE);
            write_corpus(&path, &records, &FeatureMap::new())?;
            say(stdout, &format!("wrote {} answers to {}\n", records.len(), path.display()))?;
        }
        Command::Gradcheck { out, scope, .. } => {
            let report = run_suite(*scope, config.seed)?;
            let text = report.to_string();
            if let Some(out) = out {
                config.write_snapshot(out)?;
                let path = out.join(GRADCHECK_FILE);
                fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
            }
            say(stdout, &text)?;
            if !report.passed() {
                return Ok(EXIT_FAILURE);
            }
        }
    }
    Ok(EXIT_OK)
}

fn load_examples(path: &Path, vocab: &Vocabulary) -> Result<Vec<DialogueExample>> {
    load_corpus(path)?.examples(vocab)
}

/// Feature widths found in `examples` (0 when a modality is absent).
pub fn feature_dims(examples: &[DialogueExample]) -> (usize, usize) {
    let width = |f: fn(&DialogueExample) -> Option<&crate::tensor::Tensor>| {
        examples.iter().find_map(|e| f(e).map(|t| t.last_dim())).unwrap_or(0)
    };
    (width(|e| e.visual.as_ref()), width(|e| e.audio.as_ref()))
}

fn build_model(config: &RunConfig, vocab: &Vocabulary, examples: &[DialogueExample]) -> Result<MtnTct> {
    let (visual, audio) = feature_dims(examples);
    MtnTct::new(config.model_config(vocab.len(), visual, audio), config.seed)
}

/// Generated answers in input order; work is spread over the available
/// cores, longest questions first.
pub fn generate_all(
    model: &MtnTct,
    examples: &[DialogueExample],
    mode: DecodeMode,
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(examples[i].question.len()));
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(examples.len().max(1));
    let mut answers: Vec<Option<Vec<usize>>> = vec![None; examples.len()];
    let results: Vec<Result<Vec<(usize, Vec<usize>)>>> = thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let mine: Vec<usize> = order.iter().copied().skip(w).step_by(workers).collect();
                s.spawn(move || {
                    mine.into_iter()
                        .map(|i| Ok((i, model.generate(&examples[i], mode, max_len)?.tokens)))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("generation worker panicked")).collect()
    });
    for chunk in results {
        for (i, tokens) in chunk? {
            answers[i] = Some(tokens);
        }
    }
    Ok(answers.into_iter().map(|a| a.expect("every index assigned")).collect())
}

/// Input records with `answer` replaced by the generated text; references
/// and inline features are dropped.
fn hypothesis_records(corpus: &Corpus, vocab: &Vocabulary, answers: &[Vec<usize>]) -> Vec<CorpusRecord> {
    corpus
        .records
        .iter()
        .zip(answers)
        .map(|(r, tokens)| CorpusRecord {
            answer: vocab.detokenize(tokens),
            references: Vec::new(),
            visual: None,
            audio: None,
            ..r.clone()
        })
        .collect()
}
