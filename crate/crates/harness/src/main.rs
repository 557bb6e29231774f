use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use moelab_core::codec::{
    decode_pattern, distinct_quantized_patterns, encode_interval, leakage_bits_per_token, leakage_inequality_holds, pick_cutoff,
    SelectionPattern,
};
use moelab_core::metrics::consistency;
use moelab_harness::corpus::synthetic_text;
use moelab_harness::report::write_report;
use moelab_harness::run::train_run;
use moelab_harness::sim::{sim_header, sim_row, simulate, SimConfig, SimMode};
use moelab_harness::trace::{load_pair, COMPARE_COLUMNS};
use moelab_harness::RunConfig;
use moelab_lm::RoutingMode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sparse mixture-of-experts routing laboratory.
///
/// Log verbosity follows the MOELAB_LOG environment variable
/// (error, warn, info, debug, trace).
#[derive(Parser)]
#[command(name = "moelab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a micro language model from a run config.
    Train(TrainArgs),
    /// Push synthetic Gaussian logits through a routing rule and log usage and cutoffs.
    RouteSim(SimArgs),
    /// Interval-coding demos and leakage bounds.
    #[command(subcommand)]
    Codec(CodecCommand),
    /// Routing-consistency metrics between two trace files.
    CompareTraces(CompareArgs),
    /// Aggregate CSV summaries over run directories.
    Report(ReportArgs),
    /// Write a seeded synthetic text corpus.
    GenCorpus(GenArgs),
}

#[derive(Args)]
struct TrainArgs {
    config: PathBuf,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    mode: Option<RoutingMode>,
}

#[derive(Args)]
struct SimArgs {
    /// TOML simulation config; defaults apply when omitted.
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<SimMode>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_tokens: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CodecCommand {
    /// Encode and decode every pattern of length N (N <= 16) or random samples.
    Roundtrip {
        n: usize,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Show the interval, cutoff and decoded pattern for one 0/1 string.
    Pattern { bits: String },
    /// Per-token leakage bound for a layer stack.
    Bounds {
        #[arg(long = "G", default_value_t = 2)]
        granularity: u64,
        #[arg(long = "E", default_value_t = 8)]
        expansion: u64,
        #[arg(long, default_value_t = 9)]
        layers: u64,
        /// Pool sizes for the exact table.
        #[arg(long, value_delimiter = ',', default_values_t = [64u64, 256, 1024, 4096])]
        n: Vec<u64>,
    },
    /// Distinct decoded patterns reachable from b-bit cutoffs.
    Quantize {
        #[arg(long, default_value_t = 8)]
        bits: u32,
        #[arg(long, default_value_t = 16)]
        n: usize,
    },
}

#[derive(Args)]
struct CompareArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 1_200_000)]
    bytes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.train.total_steps = s;
    }
    if let Some(m) = a.mode {
        cfg.model.routing_mode = m;
    }
    cfg.validate()?;
    let corpus = cfg.data.load(a.config.parent())?;
    let out = train_run(&cfg, &corpus, Some(&a.out))?;
    let s = &out.summary;
    println!(
        "{} seed {}: final eval ce {:.4} after {} steps in {:.1}s -> {}",
        s.mode,
        s.seed,
        s.final_eval_ce,
        s.total_steps,
        s.seconds,
        a.out.display()
    );
    Ok(())
}

fn route_sim(a: SimArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<SimConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SimConfig::default(),
    };
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(b) = a.batch_tokens {
        cfg.batch_tokens = b;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let steps = simulate(&cfg)?;
    let sink: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(sim_header(cfg.n_experts()))?;
    for s in &steps {
        w.write_record(sim_row(cfg.mode, s))?;
    }
    w.flush()?;
    if a.out.is_some() {
        let mean = steps.iter().map(|s| s.mean_usage()).sum::<f64>() / steps.len().max(1) as f64;
        println!("{} steps of {}: mean usage {:.5} (1/E = {:.5})", steps.len(), cfg.mode.name(), mean, 1.0 / cfg.expansion as f64);
    }
    Ok(())
}

fn codec(c: CodecCommand) -> Result<()> {
    match c {
        CodecCommand::Roundtrip { n, samples, seed } => {
            let patterns: Vec<SelectionPattern> = if n <= 16 {
                (0..1u64 << n).map(|v| SelectionPattern::from_index(v, n)).collect::<Result<_, _>>()?
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..samples)
                    .map(|_| SelectionPattern::new((0..n).map(|_| rng.gen_bool(0.5)).collect()))
                    .collect::<Result<_, _>>()?
            };
            let mut failures = 0;
            for z in &patterns {
                let c = pick_cutoff(&encode_interval(z));
                if &decode_pattern(&c, n)?.0 != z {
                    failures += 1;
                }
            }
            println!("N = {n}: {} patterns, {} recovered, {failures} failed", patterns.len(), patterns.len() - failures);
            if failures > 0 {
                bail!("{failures} patterns failed to round-trip");
            }
        }
        CodecCommand::Pattern { bits } => {
            let z = SelectionPattern::parse(&bits)?;
            let interval = encode_interval(&z);
            let c = pick_cutoff(&interval);
            let (decoded, found) = decode_pattern(&c, z.len())?;
            println!("pattern  {z}");
            println!("interval {interval}");
            println!("cutoff   {c} ({:.12})", c.to_f64());
            println!("decoded  {decoded} in {found}");
            if decoded != z {
                bail!("decoded pattern differs");
            }
        }
        CodecCommand::Bounds { granularity, expansion, layers, n } => {
            if expansion < 2 {
                bail!("--E must be at least 2");
            }
            let lower = layers as f64 * granularity as f64 * ((expansion - 1) as f64).log2();
            println!("G = {granularity}, E = {expansion}, layers = {layers}");
            println!("lower bound: {lower:.2} bits/token ({layers} x {granularity} x log2({}))", expansion - 1);
            println!("{:>8} {:>8} {:>16} {:>10}", "N", "k", "bits/token", "exact");
            for pool in n {
                let b = leakage_bits_per_token(pool, granularity, expansion, layers)?;
                let holds = leakage_inequality_holds(pool, expansion)?;
                println!("{pool:>8} {:>8} {:>16.4} {:>10}", pool / expansion, b.per_token_bound, if holds { "holds" } else { "fails" });
            }
        }
        CodecCommand::Quantize { bits, n } => {
            let d = distinct_quantized_patterns(bits, n)?;
            println!("{bits}-bit cutoffs at N = {n}: {d} distinct patterns (limit {})", 1u64 << bits);
        }
    }
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    let (ta, tb) = load_pair(&a.a, &a.b)?;
    let c = consistency(&ta, &tb)?;
    let sink: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(COMPARE_COLUMNS)?;
    w.write_record([
        a.a.display().to_string(),
        a.b.display().to_string(),
        c.weighted_jaccard.to_string(),
        c.weighted_dice.to_string(),
        c.jaccard.to_string(),
        c.dice.to_string(),
        c.joint_jsd.to_string(),
        c.total_variation.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::RouteSim(a) => route_sim(a),
        Command::Codec(c) => codec(c),
        Command::CompareTraces(a) => compare(a),
        Command::Report(a) => {
            for p in write_report(&a.runs, &a.out)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::GenCorpus(a) => {
            std::fs::write(&a.out, synthetic_text(a.seed, a.bytes)).with_context(|| format!("writing {}", a.out.display()))?;
            println!("{} bytes -> {}", a.bytes, a.out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("MOELAB_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
