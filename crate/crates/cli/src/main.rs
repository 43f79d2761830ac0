use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sana_core::bundle::ModelMeta;
use sana_core::config::RunConfig;
use sana_core::decoder::DecodeOptions;
use sana_core::gradsuite;
use sana_core::metrics::evaluate;
use sana_core::pipeline::{oracle_skeletons, predict_skeletons, realize};
use sana_core::pointer::PointerModel;
use sana_core::realizer::RealizerModel;
use sana_core::skeleton::annotate_corpus;
use sana_core::synth::{generate, TemplateSpec};
use sana_core::table::{read_corpus_file, tokenize, write_corpus, Corpus, StopWordList};
use sana_core::train::{train_editor, train_pointer, TrainLog};

#[derive(Parser)]
#[command(name = "sana", version, about = "Skeleton-based table-to-text generation")]
struct Cli {
    /// Run configuration (JSON); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed; overrides SANA_SEED and the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a templated synthetic corpus.
    SynthCorpus {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Add the automatic skeleton to every example.
    Annotate {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        stopwords: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the pointer network on an annotated corpus.
    TrainPointer(TrainArgs),
    /// Train the realizer on an annotated corpus.
    TrainEditor(TrainArgs),
    /// Predict skeletons with a trained pointer network.
    Skeleton {
        #[arg(long)]
        pointer: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        beam_width: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate text from tables.
    Generate {
        #[arg(long)]
        pointer: Option<PathBuf>,
        #[arg(long)]
        editor: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        max_iter: Option<usize>,
        #[arg(long)]
        beam_width: Option<usize>,
        /// Allow the realizer to delete skeleton tokens.
        #[arg(long)]
        no_hard_constraints: bool,
        /// Use the corpus skeletons instead of pointer predictions.
        #[arg(long)]
        oracle_skeleton: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score generated text against a gold corpus.
    Evaluate {
        /// Generated JSON Lines with a "text" field.
        #[arg(long)]
        outputs: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference check of every layer and both models.
    Gradcheck,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    k_max: Option<usize>,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            RunConfig::from_json(&text).with_context(|| format!("config {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Ok(s) = std::env::var("SANA_SEED") {
        config.seed = s.trim().parse().with_context(|| format!("SANA_SEED={s:?} is not an unsigned integer"))?;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn required(flag: Option<&PathBuf>, fallback: Option<&PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or(fallback).cloned().ok_or_else(|| anyhow!("missing --{name} (or paths.{name} in the config)"))
}

fn read_corpus(path: &Path) -> Result<Corpus> {
    read_corpus_file(path).with_context(|| format!("reading corpus {}", path.display()))
}

/// Opens `path` for writing, or stdout.
fn sink(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            Box::new(io::BufWriter::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?))
        }
        None => Box::new(io::BufWriter::new(io::stdout().lock())),
    })
}

fn emit_log(line: &TrainLog) {
    eprintln!("{}", line.to_json());
}

fn apply_train_flags(config: &mut RunConfig, args: &TrainArgs, editor: bool) -> Result<()> {
    let stage = if editor { &mut config.editor } else { &mut config.pointer };
    if let Some(v) = args.epochs {
        stage.epochs = v;
    }
    if let Some(v) = args.batch_size {
        stage.batch_size = v;
    }
    if let Some(v) = args.peak_lr {
        stage.peak_lr = v;
    }
    if let Some(v) = args.warmup {
        stage.warmup = v;
    }
    if let Some(v) = args.lambda {
        config.lambda = v;
    }
    if let Some(v) = args.k_max {
        config.k_max = v;
    }
    config.validate()?;
    Ok(())
}

/// Checkpoint config, refusing a run config whose architecture differs.
fn checkpoint_config(dir: &Path, run: &RunConfig, explicit: bool) -> Result<RunConfig> {
    let meta = ModelMeta::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    if explicit && meta.config.model != run.model {
        bail!(
            "model dimensions in the config do not match checkpoint {}: {:?} vs {:?}",
            dir.display(),
            run.model,
            meta.config.model
        );
    }
    Ok(meta.config)
}

fn run(cli: Cli) -> Result<bool> {
    let mut config = load_config(&cli)?;
    let explicit = cli.config.is_some();
    let paths = config.paths.clone();
    match &cli.command {
        Command::SynthCorpus { n, out } => {
            let spec = TemplateSpec {
                seed: config.seed,
                ..TemplateSpec::default()
            };
            let corpus = generate(&spec, *n)?;
            let mut w = sink(out.as_ref().or(paths.output.as_ref()))?;
            write_corpus(&corpus, &mut w)?;
            w.flush()?;
        }
        Command::Annotate { corpus, stopwords, out } => {
            let mut data = read_corpus(&required(corpus.as_ref(), paths.corpus.as_ref(), "corpus")?)?;
            let stop = match stopwords.as_ref().or(paths.stopwords.as_ref()) {
                Some(p) => StopWordList::from_file(p).with_context(|| format!("reading stop words {}", p.display()))?,
                None => StopWordList::english(),
            };
            annotate_corpus(&mut data, &stop);
            let empty = data.iter().filter(|e| e.skeleton.as_ref().is_some_and(Vec::is_empty)).count();
            if empty > 0 {
                log::warn!("{empty} examples have an empty skeleton");
            }
            let mut w = sink(out.as_ref().or(paths.output.as_ref()))?;
            write_corpus(&data, &mut w)?;
            w.flush()?;
        }
        Command::TrainPointer(args) | Command::TrainEditor(args) => {
            let editor = matches!(cli.command, Command::TrainEditor(_));
            apply_train_flags(&mut config, args, editor)?;
            let data = read_corpus(&required(args.corpus.as_ref(), paths.corpus.as_ref(), "corpus")?)?;
            let fallback = if editor { paths.editor_checkpoint.as_ref() } else { paths.pointer_checkpoint.as_ref() };
            let dir = required(args.out.as_ref(), fallback, "out")?;
            if editor {
                train_editor(&data, &config, &mut emit_log)?.save(&dir)?;
            } else {
                train_pointer(&data, &config, &mut emit_log)?.save(&dir)?;
            }
            log::info!("checkpoint written to {}", dir.display());
        }
        Command::Skeleton { pointer, corpus, beam_width, out } => {
            let dir = required(pointer.as_ref(), paths.pointer_checkpoint.as_ref(), "pointer")?;
            let ckpt = checkpoint_config(&dir, &config, explicit)?;
            let model = PointerModel::load(&dir).with_context(|| format!("loading pointer {}", dir.display()))?;
            let mut data = read_corpus(&required(corpus.as_ref(), paths.corpus.as_ref(), "corpus")?)?;
            let width = beam_width.unwrap_or(if explicit { config.beam_width } else { ckpt.beam_width });
            let skeletons = predict_skeletons(&model, &data, width, ckpt.max_skeleton_len)?;
            for (ex, sk) in data.examples.iter_mut().zip(skeletons) {
                ex.skeleton = Some(sk);
            }
            let mut w = sink(out.as_ref().or(paths.output.as_ref()))?;
            write_corpus(&data, &mut w)?;
            w.flush()?;
        }
        Command::Generate {
            pointer,
            editor,
            corpus,
            max_iter,
            beam_width,
            no_hard_constraints,
            oracle_skeleton,
            out,
        } => {
            let data = read_corpus(&required(corpus.as_ref(), paths.corpus.as_ref(), "corpus")?)?;
            let editor_dir = required(editor.as_ref(), paths.editor_checkpoint.as_ref(), "editor")?;
            let ckpt = checkpoint_config(&editor_dir, &config, explicit)?;
            let model = RealizerModel::load(&editor_dir).with_context(|| format!("loading editor {}", editor_dir.display()))?;
            let skeletons = if *oracle_skeleton {
                oracle_skeletons(&data)?
            } else {
                let dir = required(pointer.as_ref(), paths.pointer_checkpoint.as_ref(), "pointer")?;
                let pconf = checkpoint_config(&dir, &config, false)?;
                let p = PointerModel::load(&dir).with_context(|| format!("loading pointer {}", dir.display()))?;
                let width = beam_width.unwrap_or(if explicit { config.beam_width } else { pconf.beam_width });
                predict_skeletons(&p, &data, width, pconf.max_skeleton_len)?
            };
            let base = if explicit { &config } else { &ckpt };
            let mut opts = DecodeOptions::from_config(base);
            opts.k_max = ckpt.k_max;
            opts.max_state_len = ckpt.max_state_len;
            if let Some(m) = max_iter {
                opts.max_iter = *m;
            }
            if *no_hard_constraints {
                opts.hard_constraints = false;
            }
            let outputs = realize(&model, &data, &skeletons, &opts)?;
            let mut w = sink(out.as_ref().or(paths.output.as_ref()))?;
            for g in &outputs {
                writeln!(w, "{}", g.to_json_line())?;
            }
            w.flush()?;
        }
        Command::Evaluate { outputs, corpus, report } => {
            let gold = read_corpus(&required(corpus.as_ref(), paths.corpus.as_ref(), "corpus")?)?;
            let text = fs::read_to_string(outputs).with_context(|| format!("reading outputs {}", outputs.display()))?;
            let mut hyps = Vec::new();
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let v: serde_json::Value =
                    serde_json::from_str(line).with_context(|| format!("{}:{}: invalid JSON", outputs.display(), i + 1))?;
                let t = v
                    .get("text")
                    .and_then(|t| t.as_str())
                    .ok_or_else(|| anyhow!("{}:{}: missing \"text\" field", outputs.display(), i + 1))?;
                hyps.push(tokenize(t));
            }
            if hyps.len() != gold.len() {
                bail!("{} outputs for {} gold examples", hyps.len(), gold.len());
            }
            let refs: Vec<Vec<String>> = gold.iter().map(|e| e.reference.clone()).collect();
            let tables: Vec<_> = gold.iter().map(|e| &e.table).collect();
            let r = evaluate(&hyps, &refs, &tables, config.parent_lambda_mix)?;
            let json = serde_json::to_string_pretty(&r)?;
            match report {
                Some(p) => fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?,
                None => println!("{json}"),
            }
            eprint!("{}", r.to_table());
        }
        Command::Gradcheck => {
            let cases = gradsuite::run_suite(config.seed)?;
            let mut ok = true;
            for c in &cases {
                println!("{}", serde_json::to_string(c)?);
                ok &= c.passed;
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
