//! `winfair`: run fair fine-tuning experiments described by a TOML file.
//!
//! Exit codes: 0 success, 2 configuration, 3 data, 4 numerical, 5 I/O.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use winfair::experiment::{
    cmd_analyze, cmd_finetune, cmd_pretrain, cmd_report, ExperimentSpec, Overrides,
    CHECKPOINT_FILE,
};
use winfair::lowrank::RankPolicy;
use winfair::Error;

#[derive(Parser, Debug)]
#[command(name = "winfair", version, about = "Fairness-aware low-rank fine-tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the source network and write `pretrained.json`.
    Pretrain(Common),
    /// Fine-tune every configured method and seed from a checkpoint.
    Finetune(WithCheckpoint),
    /// Export the representation PCA and the per-group Fisher heatmap.
    Analyze(WithCheckpoint),
    /// Aggregate `results.jsonl` into a mean±std table.
    Report(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment file.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,

    /// Seeds for fine-tuning runs, e.g. `0,1,2` or `0..10`.
    #[arg(long, value_name = "LIST", value_parser = parse_seed_list)]
    seed_list: Option<SeedList>,

    /// Worker threads for independent runs.
    #[arg(long, value_name = "N", default_value_t = 1)]
    jobs: usize,

    /// Output directory (overrides `out_dir`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Fixed rank for F_SVD and OURS runs.
    #[arg(long, value_name = "R", conflicts_with = "energy")]
    rank: Option<usize>,

    /// Retained-energy threshold for F_SVD and OURS runs.
    #[arg(long, value_name = "E")]
    energy: Option<f64>,

    /// Group-1 weight when blending importances in OURS runs.
    #[arg(long, value_name = "A")]
    alpha: Option<f64>,

    /// Log progress to stderr.
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Args, Debug)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,

    /// Pretrained checkpoint; defaults to `pretrained.json` in the output
    /// directory.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
struct SeedList(Vec<u64>);

fn parse_seed_list(s: &str) -> Result<SeedList, String> {
    let bad = |p: &str| format!("`{p}` is not a seed or a range like 0..10");
    let mut seeds = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.parse().map_err(|_| bad(part))?;
            let b: u64 = b.parse().map_err(|_| bad(part))?;
            if a >= b {
                return Err(format!("empty range `{part}`"));
            }
            seeds.extend(a..b);
        } else {
            seeds.push(part.parse().map_err(|_| bad(part))?);
        }
    }
    if seeds.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(SeedList(seeds))
}

fn load(common: &Common) -> Result<ExperimentSpec, Error> {
    let mut spec = ExperimentSpec::load(&common.config)?;
    let rank = match (common.rank, common.energy) {
        (Some(r), _) => Some(RankPolicy::Fixed(r)),
        (None, Some(e)) => Some(RankPolicy::Energy(e)),
        (None, None) => None,
    };
    spec.apply_overrides(&Overrides {
        seeds: common.seed_list.clone().map(|l| l.0),
        out_dir: common.out.clone(),
        rank,
        alpha: common.alpha,
    })?;
    Ok(spec)
}

fn checkpoint_path(spec: &ExperimentSpec, args: &WithCheckpoint) -> PathBuf {
    args.checkpoint
        .clone()
        .unwrap_or_else(|| spec.out_dir().join(CHECKPOINT_FILE))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Pretrain(common) => {
            let spec = load(&common)?;
            let out = cmd_pretrain(&spec)?;
            println!("checkpoint: {}", out.checkpoint.display());
            println!("report:     {}", out.report.display());
        }
        Command::Finetune(args) => {
            let spec = load(&args.common)?;
            let out = cmd_finetune(&spec, &checkpoint_path(&spec, &args), args.common.jobs)?;
            println!("{} runs", out.lines.len());
            println!("results: {}", out.results.display());
            println!("summary: {}", out.summary.display());
            println!("timings: {}", out.timings.display());
        }
        Command::Analyze(args) => {
            let spec = load(&args.common)?;
            let out = cmd_analyze(&spec, &checkpoint_path(&spec, &args))?;
            println!("pca:     {} ({} positively predicted samples)", out.pca.display(), out.positive_count);
            println!("heatmap: {}", out.heatmap.display());
        }
        Command::Report(common) => {
            let spec = load(&common)?;
            let out = cmd_report(&spec)?;
            print!("{}", out.table);
            println!("report: {}", out.report.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let verbose = match &cli.command {
        Command::Pretrain(c) | Command::Report(c) => c.verbose,
        Command::Finetune(a) | Command::Analyze(a) => a.common.verbose,
    };
    env_logger::Builder::new()
        .filter_level(if verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}
