use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::json;

use blockdiff::ablation::{ablate, write_csv};
use blockdiff::checkpoint::Checkpoint;
use blockdiff::config::RunConfig;
use blockdiff::data::{synth_corpus, Corpus, PatternMix, RelationInventory, SynthSpec};
use blockdiff::eval::{evaluate, MatchMode};
use blockdiff::infer::{infer_corpus, read_predictions, write_predictions, InferConfig};
use blockdiff::tensor::Rng;
use blockdiff::train::train;
use blockdiff::{Error, Result};

#[derive(Parser)]
#[command(name = "blockdiff", version, about = "Relational triple extraction by block denoising diffusion")]
struct Cli {
    /// Worker threads (0 = one per core; BLOCKDIFF_THREADS overrides the default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Log verbosity: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus a metrics log.
    Train(TrainArgs),
    /// Predict triples for a JSONL corpus.
    Infer(InferArgs),
    /// Score a predictions file against gold triples.
    Eval(EvalArgs),
    /// Write a synthetic corpus.
    Synth(SynthArgs),
    /// Sweep block counts and denoising steps.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key = value configuration file; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    data: PathBuf,
    /// Relation inventory, one name per line; inferred from the data when absent.
    #[arg(long)]
    relations: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Initial noisy blocks per sentence.
    #[arg(long = "D", default_value_t = 30)]
    blocks: usize,
    /// Denoising iterations.
    #[arg(long, default_value_t = 10)]
    sigma: usize,
    /// Confidence threshold on the summed head maxima (0 to 5).
    #[arg(long, default_value_t = 4.0)]
    phi: f64,
    /// Sentences per batch.
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Additional batch sizes to time (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "1,8")]
    timing_batches: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fail on sentences longer than the model limit instead of truncating.
    #[arg(long, default_value_t = false)]
    strict: bool,
    /// Predictions file; the timing report goes next to it with a `.timing.json` suffix.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    /// Relation inventory used at training time; taken from the gold file when absent.
    #[arg(long)]
    relations: Option<PathBuf>,
    #[arg(long, default_value = "exact", value_parser = ["exact", "last_word"])]
    mode: String,
    /// `patterns` adds per-pattern and per-count breakdowns.
    #[arg(long, default_value = "none", value_parser = ["none", "patterns"])]
    split: String,
    /// Head/tail collision rule for the SOO pattern.
    #[arg(long, default_value = "overlap", value_parser = ["overlap", "equal"])]
    soo: String,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    sentences: usize,
    /// Number of relation types.
    #[arg(long = "K", default_value_t = 4)]
    relations: usize,
    #[arg(long, default_value_t = 50)]
    vocab: usize,
    #[arg(long, default_value_t = 8)]
    min_len: usize,
    #[arg(long, default_value_t = 20)]
    max_len: usize,
    #[arg(long, default_value_t = 6)]
    max_triples: usize,
    /// Pattern weights as normal,seo,epo,soo.
    #[arg(long, value_delimiter = ',', default_value = "0.4,0.25,0.2,0.15")]
    mix: Vec<f64>,
    #[arg(long, default_value_t = 0.5)]
    single_token_rate: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "D-grid", value_delimiter = ',', default_value = "2,5,10,15,20,30")]
    block_grid: Vec<usize>,
    #[arg(long = "sigma-grid", value_delimiter = ',', default_value = "5,10,15")]
    sigma_grid: Vec<usize>,
    #[arg(long, default_value_t = 4.0)]
    phi: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Timing repetitions per grid point; the fastest is reported.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// CSV output.
    #[arg(long)]
    out: PathBuf,
}

fn load_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Invalid { what: "config", detail: format!("--set expects KEY=VALUE, got {kv:?}") })?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = load_config(&args)?;
    let relations = args.relations.as_deref().map(RelationInventory::load).transpose()?;
    let corpus = Corpus::load_jsonl(&args.data, relations)?;
    if corpus.skipped > 0 {
        log::warn!("{} sentences skipped while loading {}", corpus.skipped, args.data.display());
    }
    fs::create_dir_all(&args.out).map_err(|source| Error::Io { path: args.out.clone(), source })?;
    let echo = cfg.echo();
    write_text(&args.out.join("config.txt"), &echo)?;
    corpus.relations.save(&args.out.join("relations.txt"))?;
    let outcome = train(&corpus, cfg.model.clone(), &cfg.train, &echo, Some(&args.out))?;
    if let Some(last) = outcome.metrics.last() {
        log::info!("finished {} steps, final loss {:.4}", last.step, last.loss);
    }
    Ok(())
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let (ck, params) = Checkpoint::load(&args.checkpoint)?;
    let run = RunConfig::parse(&ck.config_echo)?;
    let schedule = run.train.schedule()?;
    let corpus = Corpus::load_jsonl(&args.data, Some(ck.relations.clone()))?;
    let sentences: Vec<Vec<usize>> = corpus.sentences.iter().map(|s| ck.vocab.encode(&s.words)).collect();
    let cfg = InferConfig {
        blocks: args.blocks,
        sigma: args.sigma,
        phi: args.phi,
        batch: args.batch,
        seed: args.seed,
        strict: args.strict,
    };
    let (preds, timing) = infer_corpus(&sentences, &params, &cfg, &schedule)?;
    let mut timings = vec![timing];
    for &b in &args.timing_batches {
        if timings.iter().all(|t| t.batch != b.max(1)) {
            let (again, t) = infer_corpus(&sentences, &params, &InferConfig { batch: b, ..cfg.clone() }, &schedule)?;
            debug_assert_eq!(again, preds);
            timings.push(t);
        }
    }
    write_predictions(&args.out, &preds)?;
    let raw: usize = preds.iter().map(|p| p.kept_blocks).sum();
    let triples: usize = preds.iter().map(|p| p.triples.len()).sum();
    log::info!("{} sentences, {triples} triples from {raw} kept blocks", preds.len());
    let report = json!({
        "sentences": preds.len(),
        "D": args.blocks,
        "sigma": args.sigma,
        "phi": args.phi,
        "timings": timings,
    });
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    let mut timing_path = args.out.clone().into_os_string();
    timing_path.push(".timing.json");
    write_text(Path::new(&timing_path), &text)?;
    println!("{text}");
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let relations = args.relations.as_deref().map(RelationInventory::load).transpose()?;
    let gold = Corpus::load_jsonl(&args.gold, relations)?;
    let pred = read_predictions(&args.pred)?;
    let mode: MatchMode = args.mode.parse()?;
    let soo = if args.soo == "equal" { blockdiff::data::SooRule::Equal } else { blockdiff::data::SooRule::Overlap };
    let gold_sets: Vec<_> = gold.sentences.iter().map(|s| s.triples.clone()).collect();
    let report = evaluate(&pred, &gold_sets, mode, soo)?;
    if args.split == "patterns" {
        println!("{}", report.to_json());
    } else {
        let o = report.overall;
        let brief = json!({
            "mode": report.mode,
            "sentences": report.sentences,
            "precision": o.precision,
            "recall": o.recall,
            "f1": o.f1,
            "predicted": o.predicted,
            "gold": o.gold,
            "correct": o.correct,
        });
        println!("{}", serde_json::to_string_pretty(&brief).expect("report serializes"));
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    if args.mix.len() != 4 {
        return Err(Error::Invalid { what: "config", detail: "--mix takes four weights".into() });
    }
    let spec = SynthSpec {
        sentences: args.sentences,
        vocab: args.vocab,
        relations: args.relations,
        min_len: args.min_len,
        max_len: args.max_len,
        max_triples: args.max_triples,
        mix: PatternMix { normal: args.mix[0], seo: args.mix[1], epo: args.mix[2], soo: args.mix[3] },
        single_token_rate: args.single_token_rate,
    };
    let corpus = synth_corpus(&spec, &mut Rng::new(args.seed))?;
    corpus.save_jsonl(&args.out)?;
    log::info!("wrote {} sentences with {} triples to {}", corpus.len(), corpus.triple_count(), args.out.display());
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let (ck, params) = Checkpoint::load(&args.checkpoint)?;
    let run = RunConfig::parse(&ck.config_echo)?;
    let schedule = run.train.schedule()?;
    let corpus = Corpus::load_jsonl(&args.data, Some(ck.relations.clone()))?;
    let sentences: Vec<Vec<usize>> = corpus.sentences.iter().map(|s| ck.vocab.encode(&s.words)).collect();
    let gold: Vec<_> = corpus.sentences.iter().map(|s| s.triples.clone()).collect();
    let base = InferConfig { phi: args.phi, batch: args.batch, seed: args.seed, ..InferConfig::default() };
    let rows = ablate(&sentences, &gold, &params, &schedule, &base, &args.block_grid, &args.sigma_grid, args.repeats)?;
    write_csv(&args.out, &rows)?;
    print!("{}", blockdiff::ablation::to_csv(&rows));
    Ok(())
}

/// `train --help` lists every configuration key with its default.
fn parse_cli() -> std::result::Result<Cli, clap::Error> {
    let keys: String = RunConfig::default().pairs().iter().map(|(k, v)| format!("  {k} = {v}\n")).collect();
    let help = format!("Configuration keys (file or --set) and their defaults:\n{keys}");
    let mut cmd = Cli::command().mut_subcommand("train", |c| c.after_help(help));
    Cli::from_arg_matches(&cmd.try_get_matches_from_mut(std::env::args_os())?)
}

fn main() -> ExitCode {
    let cli = match parse_cli() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    let threads = match (cli.threads, std::env::var("BLOCKDIFF_THREADS").ok()) {
        (0, Some(v)) => v.parse().unwrap_or(0),
        (n, _) => n,
    };
    if threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
