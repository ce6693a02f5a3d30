use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dilhyfs::data::{gen_dataset, save_dataset, GeneratorConfig, Split};
use dilhyfs::experiment::{format_table, run_experiment, write_outputs, ExperimentConfig};
use dilhyfs::model::BranchMask;
use dilhyfs::nn::LayerKind;
use dilhyfs::selfcheck;
use dilhyfs::{Error, Result};

#[derive(Parser)]
#[command(name = "dilhyfs", version, about = "Dual-branch few-shot class-incremental learning on SAR-like imagery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as PGM files plus a JSON-lines manifest.
    Gen(GenArgs),
    /// Run the incremental protocol over one or more seeds.
    Run(RunArgs),
    /// Compare spatial-only, spectral-only and dual-branch features on the same runs.
    Ablate(RunArgs),
    /// Run the built-in invariant battery.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; the built-in desk preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// A count `N` (seeds 0..N) or a comma-separated list such as `3,7,11`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

#[derive(Args)]
struct SelfcheckArgs {
    #[arg(long, hide = true)]
    corrupt_layer: Option<String>,
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("--seeds expects a count or a comma-separated list, got {s:?}"));
    if s.contains(',') {
        let seeds = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<u64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        if seeds.is_empty() {
            return Err(bad());
        }
        Ok(seeds)
    } else {
        let n: u64 = s.trim().parse().map_err(|_| bad())?;
        if n == 0 {
            return Err(bad());
        }
        Ok((0..n).collect())
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DILHYFS_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("DILHYFS_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let cfg = GeneratorConfig {
        num_classes: args.classes,
        per_class: args.per_class,
        size: args.size,
        seed: args.seed,
        ..GeneratorConfig::default()
    };
    cfg.validate()?;
    let (data, _) = gen_dataset(&cfg)?;
    let entries = save_dataset(&args.out, &data)?;
    println!(
        "wrote {} images ({} train, {} test, {} classes) to {}",
        entries.len(),
        data.count(Split::Train),
        data.count(Split::Test),
        data.num_classes,
        args.out.display()
    );
    Ok(())
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(s) = &args.seeds {
        cfg.seeds = parse_seeds(s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_run(args: &RunArgs, masks: &[BranchMask]) -> Result<()> {
    let cfg = load_config(args)?;
    let outputs = run_experiment(&cfg, masks)?;
    write_outputs(&args.out, &outputs)?;
    print!("{}", format_table(&outputs.results));
    println!("results written to {}", args.out.join("results.json").display());
    Ok(())
}

fn cmd_selfcheck(args: &SelfcheckArgs) -> Result<bool> {
    let corrupt_layer = match &args.corrupt_layer {
        Some(name) => Some(LayerKind::parse(name).ok_or_else(|| Error::Config(format!("unknown layer kind {name:?}")))?),
        None => None,
    };
    let groups = selfcheck::run(&selfcheck::Options { corrupt_layer })?;
    let mut ok = true;
    for g in &groups {
        let status = if g.failures.is_empty() { "PASS" } else { "FAIL" };
        println!("{status} {:<10} {}/{}", g.name, g.passed(), g.total);
        for f in &g.failures {
            println!("     {f}");
        }
        ok &= g.failures.is_empty();
    }
    Ok(ok)
}

fn dispatch(cli: &Cli) -> Result<bool> {
    configure_threads()?;
    match &cli.command {
        Command::Gen(a) => cmd_gen(a).map(|_| true),
        Command::Run(a) => cmd_run(a, &[BranchMask::Both]).map(|_| true),
        Command::Ablate(a) => {
            cmd_run(a, &[BranchMask::SpatialOnly, BranchMask::SpectralOnly, BranchMask::Both]).map(|_| true)
        }
        Command::Selfcheck(a) => cmd_selfcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
