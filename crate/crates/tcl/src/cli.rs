//! Command-line surface: `train`, `eval`, and `stats` subcommands over
//! delimiter-separated event files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::autodiff::Scalar;
use crate::checkpoint;
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::eval::evaluate;
use crate::ingest::{chronological_split, load_interactions, ColumnSpec, InteractionLog, SplitSpec};
use crate::objective::{train_with_hook, TrainConfig};

#[derive(Parser)]
#[command(
    name = "tcl",
    about = "Temporal contrastive learning over interaction streams: train, evaluate, and inspect datasets",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing checkpoints and a loss trace
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint: Mean Rank and Hit@10 over a replayed split
    Eval(EvalArgs),
    /// Print dataset statistics for an event file
    Stats(StatsArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Event file with source, target, and timestamp columns
    #[arg(long)]
    data: PathBuf,
    /// Chronological train/val/test split, e.g. 60/20/20
    #[arg(long, default_value = "60/20/20")]
    split: String,
    /// Zero-based source column
    #[arg(long, default_value_t = 0)]
    col_source: usize,
    /// Zero-based target column
    #[arg(long, default_value_t = 1)]
    col_target: usize,
    /// Zero-based timestamp column
    #[arg(long, default_value_t = 2)]
    col_time: usize,
    /// Column delimiter; splits on whitespace when omitted
    #[arg(long)]
    delimiter: Option<char>,
}

impl DataArgs {
    fn columns(&self) -> ColumnSpec {
        ColumnSpec {
            source: self.col_source,
            target: self.col_target,
            timestamp: self.col_time,
            delimiter: self.delimiter,
        }
    }

    fn load(&self) -> Result<(InteractionLog, SplitSpec)> {
        let log = load_interactions(&self.data, &self.columns())?;
        let split = SplitSpec::parse(&self.split)?;
        Ok((log, split))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationFlag {
    /// Drop the time-interval embedding
    NoTe,
    /// Drop the depth embedding
    NoDe,
    /// Skip the cross-attention stage
    NoCa,
}

#[derive(Args)]
struct ModelArgs {
    /// Max sub-graph depth k
    #[arg(long, default_value_t = 5)]
    depth: usize,
    /// Embedding dimension
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Attention heads
    #[arg(long, default_value_t = 16)]
    heads: usize,
    /// Graph transformer blocks per stream
    #[arg(long, default_value_t = 1)]
    blocks: usize,
    /// Input dropout probability
    #[arg(long, default_value_t = 0.6)]
    dropout: Scalar,
    /// Feed-forward hidden width (defaults to --dim)
    #[arg(long)]
    ffn_hidden: Option<usize>,
    /// Serialized sequence cap (defaults to the full 2^(k+1)-1 closure)
    #[arg(long)]
    max_seq_len: Option<usize>,
    /// Give each head a full dim-wide projection
    #[arg(long)]
    full_width_heads: bool,
    /// Ablations: no-te, no-de, no-ca (repeatable)
    #[arg(long, value_enum)]
    ablation: Vec<AblationFlag>,
}

impl ModelArgs {
    fn encoder_config(&self) -> EncoderConfig {
        let mut cfg = EncoderConfig {
            dim: self.dim,
            heads: self.heads,
            blocks: self.blocks,
            depth: self.depth,
            dropout: self.dropout,
            ffn_hidden: self.ffn_hidden.unwrap_or(self.dim),
            full_width_heads: self.full_width_heads,
            max_seq_len: self
                .max_seq_len
                .unwrap_or((1usize << (self.depth + 1)) - 1),
            no_te: false,
            no_de: false,
            no_ca: false,
        };
        for a in &self.ablation {
            match a {
                AblationFlag::NoTe => cfg.no_te = true,
                AblationFlag::NoDe => cfg.no_de = true,
                AblationFlag::NoCa => cfg.no_ca = true,
            }
        }
        cfg
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Learning rate
    #[arg(long, default_value_t = 5e-4)]
    lr: Scalar,
    /// Mini-batch size
    #[arg(long, default_value_t = 512)]
    batch: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Negative samples per event
    #[arg(long, default_value_t = 5)]
    neg: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Final checkpoint path
    #[arg(long)]
    checkpoint: PathBuf,
    /// Loss trace path (default: <checkpoint>.trace.jsonl)
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Write per-epoch checkpoints every N epochs (0 = final only)
    #[arg(long, default_value_t = 1)]
    save_every: usize,
    /// Report validation Mean Rank every N epochs (0 = off)
    #[arg(long, default_value_t = 0)]
    val_every: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Trained checkpoint to evaluate
    #[arg(long, required = true)]
    checkpoint: PathBuf,
    /// Metrics record output path (JSON); also printed to stdout
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    /// Which split to replay: val or test
    #[arg(long, default_value = "test")]
    on: String,
    /// Echoed into the metrics record
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    data: DataArgs,
}

fn epoch_checkpoint_path(base: &Path, epoch: usize) -> PathBuf {
    let stem = base
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "checkpoint".to_string());
    let ext = base
        .extension()
        .map(|e| format!(".{}", e.to_string_lossy()))
        .unwrap_or_default();
    base.with_file_name(format!("{stem}.epoch{epoch}{ext}"))
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let (log, split) = args.data.load()?;
    let (train_log, val_log, _test) = chronological_split(&log, &split)?;
    let enc_cfg = args.model.encoder_config();
    let tcfg = TrainConfig {
        lr: args.lr,
        batch_size: args.batch,
        epochs: args.epochs,
        n_neg: args.neg,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let candidates = log.target_candidates();
    let started = Instant::now();
    let result = train_with_hook(&train_log, &enc_cfg, &tcfg, |epoch, params| {
        if args.save_every > 0 && epoch % args.save_every == 0 {
            checkpoint::save(params, &log.vocab, epoch_checkpoint_path(&args.checkpoint, epoch))?;
        }
        if args.val_every > 0 && epoch % args.val_every == 0 {
            let m = evaluate(params, &train_log, &val_log, &candidates)?;
            println!(
                "epoch {epoch}: val mr {:.2}, val hit@10 {:.4} ({} events)",
                m.mean_rank, m.hit_at_10, m.n_events
            );
        }
        Ok(())
    })?;
    checkpoint::save(&result.params, &log.vocab, &args.checkpoint)?;
    let trace_path = args
        .trace_out
        .clone()
        .unwrap_or_else(|| args.checkpoint.with_extension("trace.jsonl"));
    let mut trace_text = String::new();
    for rec in &result.trace {
        trace_text.push_str(&serde_json::to_string(rec)?);
        trace_text.push('\n');
    }
    std::fs::write(&trace_path, trace_text)?;
    println!(
        "trained {} epochs ({} optimizer steps) in {:.1}s; checkpoint {}, trace {}",
        args.epochs,
        result.trace.len(),
        started.elapsed().as_secs_f64(),
        args.checkpoint.display(),
        trace_path.display()
    );
    if let Some(last) = result.trace.last() {
        println!("final batch loss {:.6}", last.loss);
    }
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let (log, split) = args.data.load()?;
    let (train_log, val_log, test_log) = chronological_split(&log, &split)?;
    let (params, ckpt_vocab) = checkpoint::load(&args.checkpoint)?;
    checkpoint::check_vocab(&ckpt_vocab, &log.vocab)?;
    let candidates = log.target_candidates();
    let started = Instant::now();
    let (history, stream) = match args.on.as_str() {
        "val" => (train_log.clone(), &val_log),
        "test" => {
            let mut hist = train_log.clone();
            hist.events.extend_from_slice(&val_log.events);
            let mut hist = InteractionLog::from_events(hist.events, hist.vocab);
            hist.sources.extend(val_log.sources.iter().copied());
            hist.targets.extend(val_log.targets.iter().copied());
            (hist, &test_log)
        }
        other => {
            return Err(crate::error::TclError::Config(format!(
                "--on must be val or test, got `{other}`"
            )))
        }
    };
    let metrics = evaluate(&params, &history, stream, &candidates)?;
    let record = serde_json::json!({
        "mr": metrics.mean_rank,
        "hit_at_10": metrics.hit_at_10,
        "n_events": metrics.n_events,
        "config": {
            "encoder": params.cfg,
            "data": args.data.data.display().to_string(),
            "split": args.data.split,
            "on": args.on,
            "candidates": candidates.len(),
        },
        "seed": args.seed,
        "wall_time_s": started.elapsed().as_secs_f64(),
    });
    let text = serde_json::to_string_pretty(&record)?;
    println!("{text}");
    if let Some(path) = &args.metrics_out {
        std::fs::write(path, text)?;
    }
    Ok(())
}

fn run_stats(args: &StatsArgs) -> Result<()> {
    let (log, split) = args.data.load()?;
    let (train_log, _val, test_log) = chronological_split(&log, &split)?;
    let stats = crate::ingest::dataset_stats(&train_log, &test_log, &log)?;
    println!("#u                   {}", stats.n_sources);
    println!("#v                   {}", stats.n_targets);
    println!("#interactions        {}", stats.n_interactions);
    println!(
        "repetition density   {:.2}%",
        stats.repetition_density * 100.0
    );
    println!("duration (days)      {:.2}", stats.duration_days);
    Ok(())
}

/// Parse arguments and run. Library errors exit with status 1; argument
/// errors exit with clap's status 2.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Stats(args) => run_stats(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
