use std::io::{BufReader, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use emd_core::checkpoint::{load_checkpoint, save_checkpoint, Manifest, MANIFEST_FILE};
use emd_core::corpus::multiwoz::{load_multiwoz, split_official};
use emd_core::corpus::synthetic::{generate_synthetic, SyntheticConfig};
use emd_core::corpus::{load_corpus_arg, stats, Split};
use emd_core::encoder::ModelConfig;
use emd_core::tracker::{
    bench_csv, bench_itc, evaluate, run_repl, EmdTracker, EvalOptions, ScriptedPredictor, TrackOptions, TurnModel,
};
use emd_core::training::{grad_check_demo, metrics_csv, train, GradCheckConfig, TrainConfig};
use emd_core::Error;

#[derive(Parser)]
#[command(name = "emd", version, about = "Dialogue state tracking with a single shared encoder")]
struct Cli {
    /// Worker threads for training and evaluation (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus.
    GenCorpus(GenCorpusArgs),
    /// Convert a MultiWoz 2.0 release into the corpus layout.
    Ingest(IngestArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Track a corpus split and report metrics.
    Eval(EvalArgs),
    /// Track a dialogue typed on stdin or read from a script.
    Track(TrackArgs),
    /// Count forward passes per turn against a per-slot baseline.
    BenchItc(BenchArgs),
    /// Compare analytic gradients with finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    /// Synthetic corpus config (JSON); the built-in 3-domain catalog if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    /// Directory holding data.json, valListFile.json and testListFile.json.
    #[arg(long)]
    multiwoz: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Training config (JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Encoder width; uses the small layout for this width.
    #[arg(long)]
    dims: Option<usize>,
    /// Per-epoch metrics CSV (default: metrics.csv inside the checkpoint).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Corpus directory or a JSON-lines split next to ontology.json.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, required_unless_present = "oracle")]
    model: Option<PathBuf>,
    /// Replay gold deltas instead of running a model.
    #[arg(long, conflicts_with = "model")]
    oracle: bool,
    /// Split to read when --corpus is a directory.
    #[arg(long, default_value = "test", value_parser = ["train", "dev", "test"])]
    split: String,
    /// Extra table rows: cold-hot, single-multi.
    #[arg(long, value_delimiter = ',', value_parser = ["cold-hot", "single-multi"])]
    splits: Vec<String>,
    /// Decode without the slot constraint.
    #[arg(long)]
    no_mask: bool,
    #[arg(long, default_value_t = 6)]
    cold_threshold: usize,
    /// Write the full report, including per-dialogue detail, as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    model: PathBuf,
    /// Alternating system and user lines; stdin if omitted.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long)]
    no_mask: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Checkpoint whose encoder shape is benchmarked.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Encoder width when no checkpoint is given.
    #[arg(long, default_value_t = 16, conflicts_with = "model")]
    dims: usize,
    #[arg(long, value_delimiter = ',', default_value = "10,100,1000")]
    slots: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    turns: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output path; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 8)]
    dims: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type CmdResult = Result<(), Failure>;

fn write_file(path: &Path, contents: &[u8]) -> CmdResult {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn gen_corpus(a: GenCorpusArgs) -> CmdResult {
    let config = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Validation(format!("{}: {e}", p.display())))?;
            SyntheticConfig::from_json_str(&text)?
        }
        None => SyntheticConfig::default(),
    };
    let splits = generate_synthetic(&config, a.seed)?;
    splits.save(&a.out)?;
    for (name, split) in [("train", &splits.train), ("dev", &splits.dev), ("test", &splits.test)] {
        let s = stats(split);
        println!(
            "{name}: {} dialogues ({} multi-domain), {:.1} turns on average",
            s.n_dialogs, s.n_multi_domain, s.avg_turns
        );
    }
    Ok(())
}

fn ingest(a: IngestArgs) -> CmdResult {
    let ingested = load_multiwoz(&a.multiwoz)?;
    let mismatches = ingested.reconstruction_mismatches();
    let report = ingested.report.clone();
    let splits = split_official(&a.multiwoz, ingested)?;
    splits.save(&a.out)?;
    println!(
        "train {} / dev {} / test {} dialogues, {} turns",
        splits.train.len(),
        splits.dev.len(),
        splits.test.len(),
        report.turns
    );
    println!("delta replay mismatches: {mismatches}");
    if report.unmapped_ctype_values > 0 {
        println!("unmapped C-type values: {}", report.unmapped_ctype_values);
    }
    for (slot, n) in &report.skipped_slots {
        println!("skipped {slot}: {n}");
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let mut config = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.seed {
        config.seed = v;
    }
    if let Some(v) = a.epochs {
        config.epochs = v;
    }
    if let Some(v) = a.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    if let Some(d) = a.dims {
        config.model = ModelConfig::tiny(d);
    }
    config.validate()?;
    let splits = emd_core::corpus::CorpusSplits::load(&a.corpus)?;
    let outcome = train(&splits, &config, |m| {
        log::info!(
            "epoch {} loss {:.4} dev jga {:.3} dev domain {:.3}",
            m.epoch,
            m.loss,
            m.dev_jga,
            m.dev_domain_accuracy
        );
    })?;
    save_checkpoint(&outcome.model, &a.out)?;
    let metrics = a.metrics.unwrap_or_else(|| a.out.join("metrics.csv"));
    write_file(&metrics, metrics_csv(&outcome.log).as_bytes())?;
    println!(
        "best epoch {} of {}, checkpoint {}",
        outcome.best_epoch,
        outcome.log.len(),
        a.out.display()
    );
    if let Some(e) = outcome.diverged {
        return Err(Failure::Runtime(format!("training diverged, kept last good model: {e}")));
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> CmdResult {
    let split = match a.split.as_str() {
        "train" => Split::Train,
        "dev" => Split::Dev,
        _ => Split::Test,
    };
    let (ontology, corpus) = load_corpus_arg(&a.corpus, split)?;
    let options = EvalOptions {
        cold_threshold: a.cold_threshold,
        ..EvalOptions::default()
    };
    let report = if a.oracle {
        evaluate(&corpus, &ScriptedPredictor::perfect(&corpus), &options)
    } else {
        let path = a.model.expect("clap requires --model without --oracle");
        let model = load_checkpoint(&path)?;
        if model.ontology != ontology {
            return Err(Failure::Validation(format!(
                "{}: model ontology differs from the corpus ontology",
                path.display()
            )));
        }
        let tracker = EmdTracker::with_options(&model, TrackOptions { masking: !a.no_mask });
        evaluate(&corpus, &tracker, &options)
    };
    let rows: Vec<&str> = a.splits.iter().map(String::as_str).collect();
    print!("{}", report.table(&rows));
    if report.truncated_turns > 0 {
        println!("truncated turns: {}", report.truncated_turns);
    }
    if let Some(p) = a.json {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        write_file(&p, json.as_bytes())?;
    }
    Ok(())
}

fn track_cmd(a: TrackArgs) -> CmdResult {
    let model = load_checkpoint(&a.model)?;
    let tracker = EmdTracker::with_options(&model, TrackOptions { masking: !a.no_mask });
    let model_ref: &dyn TurnModel = &tracker;
    let stdout = std::io::stdout().lock();
    match a.script {
        Some(p) => {
            let f = std::fs::File::open(&p).map_err(|e| Failure::Validation(format!("{}: {e}", p.display())))?;
            run_repl(model_ref, BufReader::new(f), stdout, false)?;
        }
        None => {
            let stdin = std::io::stdin();
            let prompt = stdin.is_terminal();
            run_repl(model_ref, stdin.lock(), stdout, prompt)?;
        }
    }
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> CmdResult {
    let config = match &a.model {
        Some(dir) => {
            let p = dir.join(MANIFEST_FILE);
            let text = std::fs::read_to_string(&p).map_err(|e| Failure::Validation(format!("{}: {e}", p.display())))?;
            Manifest::from_json_str(&text)?.config
        }
        None => ModelConfig::tiny(a.dims),
    };
    config.validate()?;
    if a.slots.contains(&0) {
        return Err(Failure::Validation("--slots sizes must be positive".into()));
    }
    let rows = bench_itc(&config, &a.slots, a.turns, a.seed)?;
    let csv = bench_csv(&rows);
    match a.out {
        Some(p) => write_file(&p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn grad_check_cmd(a: GradCheckArgs) -> CmdResult {
    if a.dims == 0 {
        return Err(Failure::Validation("--dims must be positive".into()));
    }
    let config = GradCheckConfig {
        tolerance: a.tolerance,
        ..GradCheckConfig::default()
    };
    let reports = grad_check_demo(a.dims, a.seed, &config)?;
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<12} max rel err {:.3e}  {status}", r.component, r.max_rel_err());
        for name in r.failures() {
            println!("  {name}");
            failed.push(format!("{}/{name}", r.component));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Failure::Validation("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Ingest(a) => ingest(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Track(a) => track_cmd(a),
        Command::BenchItc(a) => bench_cmd(a),
        Command::GradCheck(a) => grad_check_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EMD_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = run(cli);
    let _ = std::io::stdout().flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
