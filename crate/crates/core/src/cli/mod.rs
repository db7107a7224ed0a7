//! The `medeir` command line.

mod pipeline;

use std::ffi::OsString;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::datapipe::{
    clean_document, dedup_corpus, filter_pairs_by_similarity, mine_hard_negatives, pack_chunks, CorpusDocument,
    FilterMode, MineOptions, SentencePair, DEFAULT_CHUNK_LEN, DEFAULT_MIN_TAIL,
};
use crate::error::{Error, Result};
use crate::eval::{compare_models, EmbeddingCache, EvalModel, EvalReport, RetrievalDataset};
use crate::io::{read_json, read_jsonl, to_jsonl, write_atomic, write_json, write_jsonl};
use crate::model::{EncoderModel, TextEncoder};
use crate::tokenizer::{merge_vocabularies, tokenizer_compare, train_wordpiece_with, TokenizerModel, TrainerConfig, Vocabulary};
use crate::training::{build_model, train_to_dir, PairExample, Stage, StageConfig, StageData};

pub use pipeline::{run_pipeline, PipelinePaths, RunConfig, RUN_CONFIG_VERSION};

#[derive(Debug, Parser)]
#[command(name = "medeir", version, about = "Domain-adapted tokenizer, encoder training and retrieval evaluation")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run every parallel section on one thread.
    #[arg(long, global = true)]
    deterministic: bool,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build, merge and compare WordPiece vocabularies.
    #[command(subcommand)]
    Tokenizer(TokenizerCmd),
    /// Clean, pack, filter and mine training data.
    #[command(subcommand)]
    Data(DataCmd),
    /// Run one training stage.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Print sentence embeddings as JSON lines.
    Embed(EmbedArgs),
    /// Retrieval evaluation.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Tokenizer, packing, every configured stage and evaluation in one go.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Subcommand)]
enum TokenizerCmd {
    /// Train a WordPiece vocabulary on a JSON-lines corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        min_freq: u64,
        /// Keep letter case.
        #[arg(long)]
        cased: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Append the new tokens of a domain vocabulary to a base vocabulary.
    Merge {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        domain: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count sub-tokens of two vocabularies over the same corpus.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum DataCmd {
    /// Strip markup and links, collapse repeats, drop duplicate documents.
    Clean {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep exact duplicate documents.
        #[arg(long)]
        keep_duplicates: bool,
    },
    /// Tokenize documents and pack them into fixed-length chunks.
    Pack {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CHUNK_LEN)]
        chunk_len: usize,
        #[arg(long, default_value_t = DEFAULT_MIN_TAIL)]
        min_tail: usize,
    },
    /// Drop low-similarity pairs.
    Filter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Remove this fraction of least similar pairs (default 0.10).
        #[arg(long, conflicts_with = "threshold")]
        drop_fraction: Option<f64>,
        /// Keep pairs with at least this cosine similarity.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Attach hard negatives from a corpus to each pair.
    Mine {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        per_query: usize,
        #[arg(long, default_value_t = 0.3, allow_hyphen_values = true)]
        band_lo: f64,
        #[arg(long, default_value_t = 0.9, allow_hyphen_values = true)]
        band_hi: f64,
        /// Mine a random sample of this many pairs.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Stage config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Packed chunks for mlm, pairs for the contrastive stages (JSON lines).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to continue from.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Vocabulary for a fresh model (required without --init).
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Extra copy of the loss log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum TrainCmd {
    Mlm(TrainArgs),
    Contrastive(TrainArgs),
    Hardneg(TrainArgs),
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    model: PathBuf,
    /// Text to embed (repeatable).
    #[arg(long)]
    text: Vec<String>,
    /// JSON-lines file of {"id","text"} records.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum EvalCmd {
    /// Evaluate one checkpoint on one dataset.
    Run {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare checkpoints across datasets.
    Compare {
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        datasets: Vec<PathBuf>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// One packed chunk in a JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub ids: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TextRecord {
    id: String,
    text: String,
}

#[derive(Debug, Serialize)]
struct EmbeddingRecord<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<&'a str>,
    text: &'a str,
    embedding: Vec<f64>,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 for bad input, 2 for internal failures.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();

    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    let pool = match threads {
        Some(0) => {
            eprintln!("error: --threads must be at least 1");
            return 1;
        }
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    };
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return 2;
        }
    };
    let outcome = catch_unwind(AssertUnwindSafe(|| pool.install(|| run(cli.command))));
    match outcome {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
        Err(_) => {
            eprintln!("error: internal failure");
            2
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Tokenizer(c) => tokenizer(c),
        Command::Data(c) => data(c),
        Command::Train(c) => train(c),
        Command::Embed(a) => embed(a),
        Command::Eval(c) => eval(c),
        Command::Pipeline(a) => {
            let cfg: RunConfig = read_json(&a.config)?;
            let base = a.config.parent().unwrap_or(Path::new("."));
            let report = run_pipeline(&cfg, base, &a.out)?;
            print!("{}", report.render_table());
            Ok(())
        }
    }
}

fn read_texts(path: &Path) -> Result<Vec<String>> {
    Ok(read_jsonl::<TextRecord>(path)?.into_iter().map(|r| r.text).collect())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn tokenizer(cmd: TokenizerCmd) -> Result<()> {
    match cmd {
        TokenizerCmd::Train {
            corpus,
            size,
            min_freq,
            cased,
            out,
        } => {
            let texts = read_texts(&corpus)?;
            let cfg = TrainerConfig {
                lowercase: !cased,
                ..TrainerConfig::default()
            };
            let vocab = train_wordpiece_with(&texts, size, min_freq, &cfg)?;
            write_atomic(&out, vocab.to_file_string().as_bytes())?;
            log::info!("wrote {} tokens to {}", vocab.len(), out.display());
        }
        TokenizerCmd::Merge { base, domain, out } => {
            let merged = merge_vocabularies(&Vocabulary::load(&base)?, &Vocabulary::load(&domain)?)?;
            write_atomic(&out, merged.to_file_string().as_bytes())?;
        }
        TokenizerCmd::Compare { a, b, corpus, report } => {
            let texts = read_texts(&corpus)?;
            let id = corpus.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let r = tokenizer_compare(&TokenizerModel::load(&a)?, &TokenizerModel::load(&b)?, &texts, &id)?;
            if let Some(path) = report {
                write_json(&path, &r)?;
            }
            print_json(&r)?;
        }
    }
    Ok(())
}

fn data(cmd: DataCmd) -> Result<()> {
    let cache = EmbeddingCache::from_env();
    match cmd {
        DataCmd::Clean {
            input,
            out,
            keep_duplicates,
        } => {
            let docs: Vec<CorpusDocument> = read_jsonl(&input)?;
            let total = docs.len();
            let mut cleaned: Vec<CorpusDocument> = docs
                .into_iter()
                .map(|d| CorpusDocument {
                    text: clean_document(&d.text),
                    ..d
                })
                .filter(|d| !d.text.is_empty())
                .collect();
            if !keep_duplicates {
                cleaned = dedup_corpus(cleaned);
            }
            log::info!("kept {} of {total} documents", cleaned.len());
            write_jsonl(&out, &cleaned)?;
        }
        DataCmd::Pack {
            input,
            vocab,
            out,
            chunk_len,
            min_tail,
        } => {
            let texts = read_texts(&input)?;
            let chunks = pack_chunks(&texts, &TokenizerModel::load(&vocab)?, chunk_len, min_tail)?;
            let records: Vec<ChunkRecord> = chunks.into_iter().map(|ids| ChunkRecord { ids }).collect();
            log::info!("{} chunks", records.len());
            write_jsonl(&out, &records)?;
        }
        DataCmd::Filter {
            input,
            model,
            out,
            drop_fraction,
            threshold,
        } => {
            let pairs: Vec<SentencePair> = read_jsonl(&input)?;
            let (m, tok) = EncoderModel::load(&model)?;
            let enc = TextEncoder::new(&m, &tok);
            let mode = match threshold {
                Some(t) => FilterMode::Threshold(t),
                None => FilterMode::DropFraction(drop_fraction.unwrap_or(0.10)),
            };
            let kept = filter_pairs_by_similarity(&pairs, &enc, mode)?;
            log::info!("kept {} of {} pairs", kept.len(), pairs.len());
            write_jsonl(&out, &kept)?;
        }
        DataCmd::Mine {
            input,
            corpus,
            model,
            out,
            per_query,
            band_lo,
            band_hi,
            limit,
            seed,
        } => {
            let pairs: Vec<SentencePair> = read_jsonl(&input)?;
            let corpus = read_texts(&corpus)?;
            let (m, tok) = EncoderModel::load(&model)?;
            let enc = TextEncoder::new(&m, &tok);
            let opts = MineOptions {
                per_query,
                band: (band_lo, band_hi),
                limit,
                seed,
            };
            let mined = mine_hard_negatives(&pairs, &corpus, &enc, opts, cache.as_ref())?;
            let short = mined.iter().filter(|r| r.short).count();
            let records: Vec<_> = mined
                .into_iter()
                .filter(|r| !r.record.negatives.is_empty())
                .map(|r| r.record)
                .collect();
            if short > 0 {
                log::warn!(
                    "{short} queries found fewer than {per_query} negatives in the band; {} written",
                    records.len()
                );
            }
            write_jsonl(&out, &records)?;
        }
    }
    Ok(())
}

fn train(cmd: TrainCmd) -> Result<()> {
    let (stage, args) = match cmd {
        TrainCmd::Mlm(a) => (Stage::Mlm, a),
        TrainCmd::Contrastive(a) => (Stage::Contrastive, a),
        TrainCmd::Hardneg(a) => (Stage::HardNegative, a),
    };
    let cfg: StageConfig = read_json(&args.config)?;
    if cfg.stage != stage {
        return Err(Error::Config(format!(
            "config is for stage `{}`, command runs `{}`",
            cfg.stage.as_str(),
            stage.as_str()
        )));
    }
    let chunks: Vec<Vec<u32>>;
    let pairs: Vec<PairExample>;
    let data = if stage == Stage::Mlm {
        chunks = read_jsonl::<ChunkRecord>(&args.data)?.into_iter().map(|c| c.ids).collect();
        StageData::Chunks(&chunks)
    } else {
        pairs = read_jsonl(&args.data)?;
        StageData::Pairs(&pairs)
    };
    let (mut model, tokenizer) = match (&args.init, &args.vocab) {
        (Some(_), Some(_)) => {
            return Err(Error::invalid("--vocab is only for fresh models; the --init checkpoint carries its own"))
        }
        (Some(init), None) => EncoderModel::load(init)?,
        (None, Some(vocab)) => {
            let tok = TokenizerModel::load(vocab)?;
            let counts_from = match data {
                StageData::Chunks(c) => Some(c),
                StageData::Pairs(_) => None,
            };
            (build_model(&cfg, &tok, counts_from)?, tok)
        }
        (None, None) => return Err(Error::invalid("either --init or --vocab is required")),
    };
    let report = train_to_dir(&cfg, &mut model, &tokenizer, data, &args.out, args.log.as_deref())?;
    if let Some(last) = report.records.last() {
        log::info!("{} steps, final loss {:.4}", report.steps, last.loss);
    }
    Ok(())
}

fn embed(args: EmbedArgs) -> Result<()> {
    let (model, tok) = EncoderModel::load(&args.model)?;
    let mut items: Vec<(Option<String>, String)> = args.text.into_iter().map(|t| (None, t)).collect();
    if let Some(path) = &args.input {
        items.extend(read_jsonl::<TextRecord>(path)?.into_iter().map(|r| (Some(r.id), r.text)));
    }
    if items.is_empty() {
        return Err(Error::invalid("nothing to embed: pass --text or --input"));
    }
    let records = items
        .iter()
        .map(|(id, text)| {
            Ok(EmbeddingRecord {
                id: id.as_deref(),
                text,
                embedding: model.embed_text(&tok, text)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let bytes = to_jsonl(&records)?;
    match &args.out {
        Some(path) => write_atomic(path, &bytes),
        None => std::io::stdout().write_all(&bytes).map_err(|e| Error::io("<stdout>", e)),
    }
}

fn model_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Loads checkpoints and datasets and compares them.
fn compare_paths(models: &[PathBuf], datasets: &[PathBuf], k: usize) -> Result<EvalReport> {
    let loaded: Vec<(String, EncoderModel, TokenizerModel)> = models
        .iter()
        .map(|p| EncoderModel::load(p).map(|(m, t)| (model_name(p), m, t)))
        .collect::<Result<_>>()?;
    let encoders: Vec<TextEncoder> = loaded.iter().map(|(_, m, t)| TextEncoder::new(m, t)).collect();
    let eval_models: Vec<EvalModel> = loaded
        .iter()
        .zip(&encoders)
        .map(|((name, _, _), e)| EvalModel::from_encoder(name.clone(), e))
        .collect();
    let datasets: Vec<RetrievalDataset> = datasets.iter().map(|d| RetrievalDataset::load(d)).collect::<Result<_>>()?;
    compare_models(&eval_models, &datasets, k, EmbeddingCache::from_env().as_ref())
}

fn emit_report(report: &EvalReport, out: Option<&Path>) -> Result<()> {
    let table = report.render_table();
    if let Some(path) = out {
        write_json(path, report)?;
        write_atomic(&path.with_extension("txt"), table.as_bytes())?;
    }
    print!("{table}");
    Ok(())
}

fn eval(cmd: EvalCmd) -> Result<()> {
    match cmd {
        EvalCmd::Run { model, dataset, k, out } => {
            let report = compare_paths(&[model], &[dataset], k)?;
            emit_report(&report, out.as_deref())
        }
        EvalCmd::Compare { models, datasets, k, out } => {
            let report = compare_paths(&models, &datasets, k)?;
            emit_report(&report, out.as_deref())
        }
    }
}
