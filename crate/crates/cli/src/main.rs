use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ragbench::config::RunConfig;
use ragbench::corpus::{ingest_corpus, CorpusFormat, DEFAULT_CHUNK_WORDS};
use ragbench::eval::{aggregate_tables, default_special_tokens, strip_jsonl};
use ragbench::index::InvertedIndex;
use ragbench::pipeline::{run_batch, BatchFile, Rag};
use ragbench::service::http::serve;
use ragbench::service::ServiceOptions;
use ragbench::Error;

/// Run, trace and compare retrieval-augmented generation algorithms.
#[derive(Parser)]
#[command(name = "ragbench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate one algorithm, or a batch of them, over a benchmark.
    Eval {
        /// Run config (YAML).
        #[arg(short, long)]
        config: PathBuf,
        /// Override a config field, e.g. `--set algorithm=iter_retgen`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Batch file listing the runs to compare under the same config.
        #[arg(long)]
        batch: Option<PathBuf>,
    },
    /// Answer questions from stdin, printing each answer and its track.
    ///
    /// `:track json` prints the last track as JSON; `:quit` exits.
    Interact {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Chunk a corpus and write a BM25 index.
    BuildIndex {
        /// Corpus file: DPR-style TSV (id, text, title) or JSONL.
        #[arg(long)]
        corpus: PathBuf,
        /// `dpr-tsv` or `jsonl`.
        #[arg(long, default_value = "dpr-tsv")]
        format: String,
        #[arg(long)]
        out: PathBuf,
        /// Words per passage.
        #[arg(long, default_value_t = DEFAULT_CHUNK_WORDS)]
        chunk_words: usize,
    },
    /// Serve an index over HTTP with a persistent query cache.
    ServeRetriever {
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8765")]
        addr: String,
        #[arg(long)]
        cache: Option<PathBuf>,
        /// LRU bound on cached queries.
        #[arg(long)]
        max_cache_entries: Option<usize>,
    },
    /// Remove reflection and markup tokens from a JSONL file.
    PrepData {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// One token per line; the built-in list when omitted.
        #[arg(long)]
        tokens: Option<PathBuf>,
    },
}

fn io_error(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn cmd_eval(config: &Path, set: &[String], batch: Option<&Path>) -> Result<(), Error> {
    let cfg = RunConfig::load(config, set)?;
    match batch {
        Some(path) => {
            let batch = BatchFile::load(path)?;
            let outcome = run_batch(&cfg, &batch)?;
            print!("{}", outcome.text);
            println!("comparison written to {}", cfg.output_dir.display());
        }
        None => {
            let rag = Rag::from_config(&cfg)?;
            let report = rag.evaluate()?;
            rag.persist_cache()?;
            let (_, text) = aggregate_tables(
                std::slice::from_ref(&report),
                &rag.prepared()
                    .benchmark
                    .as_ref()
                    .map(|(_, p)| p.metrics.clone())
                    .unwrap_or_default(),
            );
            print!("{text}");
            println!("report written to {}", cfg.output_dir.join(&report.run_id).display());
        }
    }
    Ok(())
}

fn cmd_interact(config: &Path, set: &[String]) -> Result<(), Error> {
    let cfg = RunConfig::load(config, set)?;
    let rag = Rag::from_config(&cfg)?;
    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    let write_err = io_error(Path::new("<stdout>"));
    let result = repl(&rag, stdin.lock(), &mut out);
    rag.persist_cache()?;
    result.map_err(write_err)
}

fn repl(rag: &Rag, input: impl BufRead, out: &mut impl Write) -> io::Result<()> {
    let mut last = None;
    write!(out, "> ")?;
    out.flush()?;
    for line in input.lines() {
        let line = line?;
        let query = line.trim();
        match query {
            "" => {}
            ":quit" | ":q" => return Ok(()),
            ":track json" => match &last {
                Some(track) => writeln!(
                    out,
                    "{}",
                    serde_json::to_string_pretty(track).expect("track serializes")
                )?,
                None => writeln!(out, "no track yet")?,
            },
            _ => match rag.interact(query) {
                Ok(inference) => {
                    writeln!(out, "{}", inference.answer)?;
                    write!(out, "{}", inference.track.render_text())?;
                    last = Some(inference.track);
                }
                Err(failure) => {
                    eprintln!("error: {}", failure.error);
                    write!(out, "{}", failure.track.render_text())?;
                    last = Some(failure.track);
                }
            },
        }
        write!(out, "> ")?;
        out.flush()?;
    }
    writeln!(out)
}

fn cmd_build_index(corpus: &Path, format: &str, out: &Path, chunk_words: usize) -> Result<(), Error> {
    let format: CorpusFormat = format.parse()?;
    let corpus = ingest_corpus(corpus, format, chunk_words)?;
    let index = InvertedIndex::build(&corpus);
    index.save(out)?;
    println!(
        "{}",
        serde_json::json!({
            "passages": index.doc_count(),
            "terms": index.term_count(),
            "avgdl": index.avgdl(),
            "corpus_fingerprint": index.corpus_fingerprint(),
        })
    );
    Ok(())
}

fn cmd_serve(index: &Path, addr: &str, cache: Option<PathBuf>, max_cache_entries: Option<usize>) -> Result<(), Error> {
    let index = InvertedIndex::load(index)?;
    let handle = serve(
        index,
        addr,
        ServiceOptions {
            cache_path: cache,
            max_entries: max_cache_entries,
        },
    )?;
    for w in handle.service().warnings() {
        log::warn!("{w}");
    }
    println!("listening on {}", handle.endpoint());
    let _ = io::stdout().flush();
    let runtime = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(io_error(Path::new("<runtime>")))?;
    runtime
        .block_on(wait_for_signal())
        .map_err(io_error(Path::new("<signal>")))?;
    log::info!("shutting down");
    handle.shutdown()?;
    Ok(())
}

async fn wait_for_signal() -> io::Result<()> {
    #[cfg(unix)]
    {
        let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate())?;
        tokio::select! {
            r = tokio::signal::ctrl_c() => r,
            _ = term.recv() => Ok(()),
        }
    }
    #[cfg(not(unix))]
    tokio::signal::ctrl_c().await
}

fn cmd_prep_data(input: &Path, out: &Path, tokens: Option<&Path>) -> Result<(), Error> {
    let tokens = match tokens {
        Some(p) => std::fs::read_to_string(p)
            .map_err(io_error(p))?
            .lines()
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect(),
        None => default_special_tokens(),
    };
    let reader = BufReader::new(File::open(input).map_err(io_error(input))?);
    let writer = BufWriter::new(File::create(out).map_err(io_error(out))?);
    let removed = strip_jsonl(reader, writer, &tokens)?;
    println!("removed {removed} special tokens");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Eval { config, set, batch } => cmd_eval(&config, &set, batch.as_deref()),
        Command::Interact { config, set } => cmd_interact(&config, &set),
        Command::BuildIndex {
            corpus,
            format,
            out,
            chunk_words,
        } => cmd_build_index(&corpus, &format, &out, chunk_words),
        Command::ServeRetriever {
            index,
            addr,
            cache,
            max_cache_entries,
        } => cmd_serve(&index, &addr, cache, max_cache_entries),
        Command::PrepData { input, out, tokens } => cmd_prep_data(&input, &out, tokens.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
