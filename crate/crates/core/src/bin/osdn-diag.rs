use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use osdn::container::read_json;
use osdn::diag::{cmd_bench, cmd_equiv, cmd_replay, cmd_theory, ConfigOverrides, DiagConfig, OutputFormat};

#[derive(Parser, Debug)]
#[command(name = "osdn-diag", version, about = "Equivalence checks, residual-ratio replay, theory audits and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON file with any subset of the config fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory receiving the reports.
    #[arg(long, global = true, default_value = "diag-out")]
    out: PathBuf,

    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Csv)]
    format: OutputFormat,

    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Chunkwise against recurrent over the shape grid.
    Equiv,
    /// Geometric-mean residual ratio on repeated typed-key streams.
    Replay,
    /// Bound audits on quadratic problems and traced streams.
    Theory,
    /// Median timings of phase 1, chunkwise and recurrent forwards.
    Bench,
}

fn ext(format: OutputFormat) -> &'static str {
    match format {
        OutputFormat::Csv => "csv",
        OutputFormat::Json => "json",
    }
}

fn write(dir: &Path, name: &str, body: &str) -> anyhow::Result<()> {
    let path = dir.join(name);
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    let file: Option<ConfigOverrides> = match &cli.config {
        Some(p) => Some(read_json(p).with_context(|| format!("reading config {}", p.display()))?),
        None => None,
    };
    let cfg = DiagConfig::resolve(file.as_ref(), &cli.overrides)?;
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let (fmt, dir) = (cli.format, cli.out.as_path());
    match cli.command {
        Command::Equiv => {
            let rep = cmd_equiv(&cfg)?;
            write(dir, &format!("equiv.{}", ext(fmt)), &rep.render(fmt)?)?;
            let failed = rep.rows.iter().filter(|r| !r.pass).count();
            println!("{} cases, {failed} over tolerance", rep.rows.len());
            if let Some(w) = rep.worst().filter(|_| failed > 0) {
                eprintln!(
                    "worst case: {} {:?} C={} output {:e} state {:e} f32 {:e}",
                    w.case.variant, w.case.dims, w.case.chunk_size, w.output_err, w.state_err, w.rel_err_f32
                );
            }
            Ok(rep.ok())
        }
        Command::Replay => {
            let rep = cmd_replay(&cfg)?;
            write(dir, &format!("replay.{}", ext(fmt)), &rep.render(fmt)?)?;
            println!("{}", rep.summary());
            Ok(true)
        }
        Command::Theory => {
            let rep = cmd_theory(&cfg)?;
            write(dir, &format!("theory.{}", ext(fmt)), &rep.render(fmt)?)?;
            println!("{} pass, {} fail, {} n/a", rep.passed, rep.failed, rep.not_applicable);
            for r in rep.records.iter().filter(|r| r.verdict.is_fail()) {
                eprintln!("FAIL {} (seed {}): {}", r.theorem, r.seed, r.note);
            }
            Ok(rep.ok())
        }
        Command::Bench => {
            let rep = cmd_bench(&cfg)?;
            write(dir, &format!("bench.{}", ext(fmt)), &rep.render(fmt)?)?;
            write(dir, "bench_checksums.json", &rep.render_checksums()?)?;
            for (b, s) in &rep.phase1_share_pct {
                println!("{b}: phase 1 is {s:.2}% of forward time");
            }
            Ok(rep.ok())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
