//! Command-line driver for the dllm-cache engine: single runs, baseline
//! comparisons and parameter sweeps, with CSV/JSON/SVG output.

pub mod config;
pub mod error;
pub mod output;
pub mod plot;
pub mod runner;
pub mod tokenizer;

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use error::{CliError, Result};
pub use runner::Mode;

#[derive(Debug, Parser)]
#[command(
    name = "dcache",
    version,
    about = "Cached generation for masked diffusion language models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate once and write metrics.csv and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Compare)]
        mode: Mode,
        /// Output directory; overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write per-token similarity traces.
        #[arg(long)]
        trace: bool,
    },
    /// Run the config's sweep grid and write sweep.csv plus charts.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads. Defaults to the number of CPUs.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn out_dir(exp: &config::Experiment, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| exp.output_dir())
}

fn list_files(s: &mut String, files: &[PathBuf]) {
    for f in files {
        writeln!(s, "wrote {}", f.display()).unwrap();
    }
}

/// Executes one command and returns the text for stdout.
pub fn execute(cli: Cli, seed_override: Option<&str>) -> Result<String> {
    let mut s = String::new();
    match cli.command {
        Command::Run {
            config,
            mode,
            out,
            trace,
        } => {
            let exp = config::load(&config, seed_override)?;
            let report = runner::run(&exp, mode, trace || exp.config.trace)?;
            let dir = out_dir(&exp, out);
            let files = output::write_run(&dir, &exp, &report)?;
            let primary = report.primary();
            writeln!(s, "mode: {}", mode_name(mode)).unwrap();
            if let Some(b) = &report.baseline {
                writeln!(s, "baseline flops: {}", b.metrics.total_flops).unwrap();
            }
            if let Some(c) = &report.cached {
                writeln!(s, "cached flops: {}", c.metrics.total_flops).unwrap();
            }
            if let (Some(sp), Some(d)) = (report.speedup(), report.divergence) {
                writeln!(s, "speedup: {sp:.4}").unwrap();
                writeln!(s, "match rate: {:.4}", d.match_rate).unwrap();
                writeln!(s, "max |hidden diff|: {:e}", d.max_abs_hidden_diff).unwrap();
            }
            writeln!(s, "output: {:?}", tokenizer::detokenize(&primary.tokens)).unwrap();
            list_files(&mut s, &files);
        }
        Command::Sweep { config, out, jobs } => {
            let exp = config::load(&config, seed_override)?;
            let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            if jobs == 0 {
                return Err(CliError::Config("--jobs must be at least 1".into()));
            }
            let report = runner::sweep(&exp, jobs)?;
            let dir = out_dir(&exp, out);
            let files = output::write_sweep(&dir, &report)?;
            writeln!(s, "K_p\tK_r\trho\tflops\tspeedup\tmatch").unwrap();
            for r in &report.rows {
                writeln!(
                    s,
                    "{}\t{}\t{}\t{}\t{:.4}\t{:.4}",
                    r.prompt_interval, r.response_interval, r.update_ratio, r.flops, r.speedup, r.match_rate
                )
                .unwrap();
            }
            list_files(&mut s, &files);
        }
    }
    Ok(s)
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Baseline => "baseline",
        Mode::Cached => "cached",
        Mode::Compare => "compare",
    }
}
