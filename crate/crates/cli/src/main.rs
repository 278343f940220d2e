use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use higen::config::PipelineConfig;
use higen::data::{ContextEvent, ItemId};
use higen::decoder::DecoderModel;
use higen::docid::{load_index, DocId};
use higen::expansion::{expand, I2ITable, Source, Variant};
use higen::pipeline::{ablation_study, cross_validate, Pipeline, Stage};
use higen::synth::{generate, SynthConfig};
use higen::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "higen", version, about = "Generative retrieval with hierarchical docIDs")]
struct Cli {
    /// Pipeline config file (.toml or .json). HIGEN_* variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset used when the config names none.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the bundled synthetic corpus.
    GenSynthetic(GenArgs),
    /// Train the two-tower model and export atomic embeddings.
    TrainEmbed,
    /// Train the fusion network on page-view triplets.
    TrainMetric,
    /// Cluster items into docIDs and write the index.
    BuildDocids,
    /// Train the docID decoder.
    TrainDecoder,
    /// Evaluate the trained pipeline and write the report.
    Eval(ReportArgs),
    /// Run every stage, reusing cached artifacts.
    RunAll(RunAllArgs),
    /// Decode queries from JSONL into ranked docIDs.
    Decode(DecodeArgs),
    /// Expand decoded docIDs into final recall sets.
    Expand(ExpandArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    categories: Option<usize>,
    #[arg(long)]
    train_queries: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunAllArgs {
    #[command(flatten)]
    report: ReportArgs,
    /// Train the decoder with plain cross-entropy.
    #[arg(long)]
    no_position_aware_loss: bool,
    /// Cluster the whole catalog without category tokens.
    #[arg(long)]
    no_category_clustering: bool,
    /// Run the full configuration and both ablations with seeds 1..=N.
    #[arg(long, value_name = "N")]
    ablation_seeds: Option<u64>,
    /// Query-level k-fold cross-validation over the training set.
    #[arg(long, value_name = "K")]
    folds: Option<usize>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long, default_value_t = 20)]
    beam: usize,
    #[arg(long, default_value_t = 10)]
    topk: usize,
    /// Query JSONL; stdin when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Result JSONL; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ExpandArgs {
    #[arg(long)]
    index: PathBuf,
    /// `direct`, `cluster-K`, `i2i` or `cluster-K-i2i`.
    #[arg(long, default_value = "direct")]
    variant: String,
    #[arg(long, default_value_t = 5000)]
    cap: usize,
    #[arg(long)]
    i2i: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    per_seed: usize,
    /// Output of `decode`; stdin when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Context entries may be bare item ids or `{item_id, behavior}` objects.
#[derive(Deserialize)]
#[serde(untagged)]
enum ContextEntry {
    Id(ItemId),
    Event(ContextEvent),
}

#[derive(Deserialize)]
struct QueryLine {
    #[serde(default)]
    user_id: String,
    query: String,
    #[serde(default)]
    context: Vec<ContextEntry>,
}

#[derive(Serialize, Deserialize)]
struct DecodedDocId {
    docid: String,
    item_id: ItemId,
    logprob: f64,
}

#[derive(Serialize, Deserialize)]
struct DecodedLine {
    query: String,
    results: Vec<DecodedDocId>,
}

#[derive(Serialize)]
struct ExpandedItem {
    item_id: ItemId,
    source: Source,
    score: f64,
}

#[derive(Serialize)]
struct ExpandedLine<'a> {
    query: &'a str,
    variant: String,
    recall_num: usize,
    items: Vec<ExpandedItem>,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    match &cli.config {
        Some(path) => PipelineConfig::load(path, &cli.preset),
        None => PipelineConfig::resolve(serde_json::json!({}), &cli.preset, std::env::vars()),
    }
}

fn reader(path: Option<&Path>) -> Result<Box<dyn BufRead>> {
    Ok(match path {
        Some(p) => Box::new(BufReader::new(File::open(p).map_err(|e| io_error(p, e))?)),
        None => Box::new(BufReader::new(std::io::stdin())),
    })
}

fn writer(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| io_error(p, e))?)),
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Parses each non-blank line; errors carry the line number.
fn json_lines<T: serde::de::DeserializeOwned>(input: Box<dyn BufRead>) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| io_error(Path::new("<input>"), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Data(format!("input line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

fn write_line<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    let text = serde_json::to_string(value)?;
    writeln!(out, "{text}").map_err(|e| io_error(Path::new("<output>"), e))
}

fn write_report<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    if let Some(p) = path {
        let text = serde_json::to_string_pretty(value)?;
        std::fs::write(p, text).map_err(|e| io_error(p, e))?;
    }
    Ok(())
}

fn run_stages(cli: &Cli, until: Stage, out: Option<&Path>) -> Result<()> {
    let mut pipeline = Pipeline::new(load_config(cli)?)?;
    let result = pipeline.run(until);
    for r in pipeline.records() {
        let state = if r.skipped { "cached" } else { "done" };
        eprintln!("{:<8} {state:<6} {}", r.stage.name(), r.dir.display());
    }
    let outcome = result?;
    if let Some(report) = outcome.report {
        print!("{}", report.summary());
        write_report(out, &report)?;
    }
    Ok(())
}

fn gen_synthetic(args: &GenArgs) -> Result<()> {
    let mut config = SynthConfig::default();
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(n) = args.items {
        config.items = n;
    }
    if let Some(n) = args.categories {
        config.categories = n;
    }
    if let Some(n) = args.train_queries {
        config.train_queries = n;
    }
    let corpus = generate(&config)?;
    corpus.write(&args.out)?;
    eprintln!(
        "wrote {} items, {} training rows and {} test rows to {}",
        corpus.catalog.len(),
        corpus.train.len(),
        corpus.test.len(),
        args.out.display()
    );
    Ok(())
}

fn run_all(cli: &Cli, args: &RunAllArgs) -> Result<()> {
    let mut config = load_config(cli)?;
    if args.no_position_aware_loss {
        config = config.without_position_aware_loss();
    }
    if args.no_category_clustering {
        config = config.without_category_clustering();
    }
    let out = args.report.out.as_deref();
    if let Some(n) = args.ablation_seeds {
        let seeds: Vec<u64> = (1..=n).collect();
        let k = if config.eval.ks.contains(&10) { 10 } else { config.eval.max_k() };
        let report = ablation_study(&config, &seeds, k)?;
        print!("{}", report.summary());
        return write_report(out, &report);
    }
    if let Some(k) = args.folds {
        let report = cross_validate(&config, k)?;
        for (f, m) in report.folds.iter().enumerate() {
            println!("fold {f}: {} queries, recall@k {:?}", m.queries, m.recall_at_k);
        }
        println!("mean recall@k {:?}", report.mean_recall_at_k);
        return write_report(out, &report);
    }
    let mut pipeline = Pipeline::new(config)?;
    let result = pipeline.run(Stage::Eval);
    if result.is_err() {
        for r in pipeline.records() {
            eprintln!("completed before failure: {} {}", r.stage.name(), r.dir.display());
        }
    }
    let report = result?
        .report
        .ok_or_else(|| Error::Config("evaluation stage produced no report".into()))?;
    print!("{}", report.summary());
    write_report(out, &report)
}

fn decode(args: &DecodeArgs) -> Result<()> {
    if args.topk == 0 || args.beam < args.topk {
        return Err(Error::Config(format!("need 1 <= --topk <= --beam, got topk {} beam {}", args.topk, args.beam)));
    }
    let model = DecoderModel::load(&args.checkpoint)?;
    let index = load_index(&args.index)?;
    let queries: Vec<QueryLine> = json_lines(reader(args.input.as_deref())?)?;
    let mut out = writer(args.output.as_deref())?;
    for q in queries {
        let context: Vec<ContextEvent> = q
            .context
            .into_iter()
            .map(|c| match c {
                ContextEntry::Id(item_id) => ContextEvent {
                    item_id,
                    behavior: "click".into(),
                },
                ContextEntry::Event(e) => e,
            })
            .collect();
        let encoded = model.vocab.encode(&q.user_id, &q.query, &context);
        let results = model
            .decode(&encoded, &index, args.beam, args.topk)?
            .into_iter()
            .map(|b| DecodedDocId {
                docid: index.docid(b.item).map_or_else(String::new, |d| d.to_string()),
                item_id: b.item,
                logprob: b.log_prob,
            })
            .collect();
        write_line(&mut out, &DecodedLine { query: q.query, results })?;
    }
    out.flush().map_err(|e| io_error(Path::new("<output>"), e))
}

fn expand_cmd(args: &ExpandArgs) -> Result<()> {
    let variant: Variant = args.variant.parse()?;
    if args.cap == 0 {
        return Err(Error::Config("--cap must be >= 1".into()));
    }
    let index = load_index(&args.index)?;
    let table = args.i2i.as_deref().map(I2ITable::load).transpose()?;
    let lines: Vec<DecodedLine> = json_lines(reader(args.input.as_deref())?)?;
    let mut out = writer(args.output.as_deref())?;
    for line in &lines {
        let decoded = line
            .results
            .iter()
            .map(|r| {
                let d = DocId::parse(&r.docid, 0)?;
                Ok((d.tokens, r.logprob))
            })
            .collect::<Result<Vec<_>>>()?;
        let set = expand(variant, &decoded, &index, table.as_ref(), args.per_seed, args.cap)?;
        let record = ExpandedLine {
            query: &line.query,
            variant: variant.to_string(),
            recall_num: set.recall_num(),
            items: set
                .entries
                .iter()
                .map(|e| ExpandedItem {
                    item_id: e.item_id,
                    source: e.source,
                    score: e.score,
                })
                .collect(),
        };
        write_line(&mut out, &record)?;
    }
    out.flush().map_err(|e| io_error(Path::new("<output>"), e))
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::TrainEmbed => run_stages(cli, Stage::Embed, None),
        Command::TrainMetric => run_stages(cli, Stage::Metric, None),
        Command::BuildDocids => run_stages(cli, Stage::Docids, None),
        Command::TrainDecoder => run_stages(cli, Stage::Decoder, None),
        Command::Eval(a) => run_stages(cli, Stage::Eval, a.out.as_deref()),
        Command::RunAll(a) => run_all(cli, a),
        Command::Decode(a) => decode(a),
        Command::Expand(a) => expand_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
