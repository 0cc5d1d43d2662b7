use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use shevar_harness::config::ExperimentConfig;
use shevar_harness::experiments::{simulate_paths, summarize};
use shevar_harness::{run, with_threads, write_outputs, ExperimentKind, ExperimentReport};

#[derive(Parser)]
#[command(name = "shevar", version, about = "Power-variation experiments for the stochastic heat equation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: `output.dir` from the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the replicate count.
    #[arg(long)]
    replicates: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Exact identity sweep over the alpha grid.
    Identities(Common),
    /// Law of large numbers error decay.
    Lln(Common),
    /// Distribution of the studentized CLT statistic.
    Clt(Common),
    /// Estimator bias, RMSE and interval coverage.
    Estimate(Common),
    /// Temporal and spatial Hölder scaling.
    Scaling(Common),
    /// Dump simulated paths.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Also write little-endian binary panels.
        #[arg(long)]
        binary: bool,
    },
    /// Check a report: config hash, summary against its records, and
    /// optionally a fresh run.
    Verify {
        #[arg(long)]
        report: PathBuf,
        /// Re-run the embedded configuration and compare the payload.
        #[arg(long)]
        rerun: bool,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn load(common: &Common, kind: ExperimentKind) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if cfg.kind != kind {
        bail!("config {} is for `{}`, not `{}`", common.config.display(), cfg.kind.name(), kind.name());
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(r) = common.replicates {
        cfg.replicates = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn experiment(common: &Common, kind: ExperimentKind) -> Result<bool> {
    let cfg = load(common, kind)?;
    let report = with_threads(common.threads, || run(&cfg))??;
    let dir = common.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    write_outputs(&report, &dir)?;
    if cfg.output.write_paths && kind != ExperimentKind::Identities {
        dump_paths(&cfg, &dir, common.threads, false)?;
    }
    for c in &report.summary.checks {
        println!("{} {}: {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value.map_or("non-finite".to_string(), |v| v.to_string()), c.condition);
    }
    println!("wrote {}", dir.display());
    Ok(report.passed)
}

fn dump_paths(cfg: &ExperimentConfig, dir: &std::path::Path, threads: Option<usize>, binary: bool) -> Result<()> {
    let sampler = match cfg.kind {
        ExperimentKind::Lln => cfg.lln.sampler,
        ExperimentKind::Estimate => cfg.estimate.sampler,
        _ => cfg.clt.sampler,
    };
    let paths = with_threads(threads, || simulate_paths(&cfg.model, &cfg.design, sampler, cfg.seed, cfg.replicates))??;
    let pdir = dir.join("paths");
    fs::create_dir_all(&pdir)?;
    for (i, p) in paths.iter().enumerate() {
        p.write_csv(fs::File::create(pdir.join(format!("replicate_{i:05}.csv")))?)?;
        if binary {
            p.write_binary(fs::File::create(pdir.join(format!("replicate_{i:05}.bin")))?)?;
        }
    }
    println!("wrote {} paths to {}", paths.len(), pdir.display());
    Ok(())
}

fn verify(path: &PathBuf, rerun: bool, threads: Option<usize>) -> Result<bool> {
    let report = ExperimentReport::from_json(&fs::read_to_string(path).with_context(|| path.display().to_string())?)?;
    let cfg = ExperimentConfig::from_toml(&report.provenance.config)?;
    let mut ok = true;
    let hash = cfg.hash()?;
    if hash != report.provenance.config_hash {
        println!("FAIL config hash: embedded {} recomputed {hash}", report.provenance.config_hash);
        ok = false;
    }
    let summary = summarize(&cfg, &report.records)?;
    if summary != report.summary {
        println!("FAIL summary differs from the one recomputed from records");
        ok = false;
    }
    if rerun {
        let fresh = with_threads(threads, || run(&cfg))??;
        if fresh.records != report.records || fresh.summary != report.summary {
            println!("FAIL re-run payload differs");
            ok = false;
        }
    }
    println!("{} {}", if ok { "verified" } else { "not verified" }, path.display());
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Identities(c) => experiment(c, ExperimentKind::Identities),
        Command::Lln(c) => experiment(c, ExperimentKind::Lln),
        Command::Clt(c) => experiment(c, ExperimentKind::Clt),
        Command::Estimate(c) => experiment(c, ExperimentKind::Estimate),
        Command::Scaling(c) => experiment(c, ExperimentKind::Scaling),
        Command::Simulate { common, binary } => ExperimentConfig::load(&common.config)
            .map_err(anyhow::Error::from)
            .and_then(|mut cfg| {
                if let Some(s) = common.seed {
                    cfg.seed = s;
                }
                if let Some(r) = common.replicates {
                    cfg.replicates = r;
                }
                let dir = common.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
                dump_paths(&cfg, &dir, common.threads, *binary).map(|_| true)
            }),
        Command::Verify { report, rerun, threads } => verify(report, *rerun, *threads),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
