//! Result files. Every file is written to a temporary sibling and renamed
//! into place, so readers never see a partial file.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dllm_cache::metrics::{RefreshCounts, Staleness};
use dllm_cache::trace::SimilarityTrace;
use dllm_cache::{analytic_flops, CachePolicy, ModelConfig, RunMetrics, TokenId};
use serde::Serialize;

use crate::config::{Experiment, GenSettings};
use crate::error::{CliError, Result};
use crate::plot::{line_chart, Series};
use crate::runner::{Mode, RunReport, SweepReport, SweepRow};
use crate::tokenizer::{detokenize, MASK_ID, PAD_ID};

pub const METRICS_CSV: &str = "metrics.csv";
pub const BASELINE_METRICS_CSV: &str = "baseline_metrics.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const TRACE_CSV: &str = "trace.csv";
pub const CORRELATION_CSV: &str = "trace_correlation.csv";
pub const SWEEP_CSV: &str = "sweep.csv";

pub fn write_atomic(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    let io_err = |source| CliError::Output {
        path: path.clone(),
        source,
    };
    fs::create_dir_all(dir).map_err(io_err)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(contents.as_bytes()).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(&path).map_err(|e| io_err(e.error))?;
    Ok(path)
}

pub fn metrics_csv(m: &RunMetrics) -> String {
    let mut s = String::from("step,case_codes,flops,tokens_recomputed\n");
    for r in &m.per_step {
        writeln!(s, "{},{},{},{}", r.step, r.case_codes(), r.flops, r.tokens_recomputed).unwrap();
    }
    s
}

pub fn trace_csv(t: &SimilarityTrace) -> String {
    let mut s = String::from("step,layer,token,sim_K,sim_V,sim_attn,sim_ffn\n");
    for r in &t.rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.step, r.layer, r.token, r.sim_k, r.sim_v, r.sim_attn, r.sim_ffn
        )
        .unwrap();
    }
    s
}

pub fn correlation_csv(t: &SimilarityTrace) -> String {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("step,layer,k_attn,k_ffn,v_attn,v_ffn\n");
    for c in &t.correlations {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            c.step,
            c.layer,
            cell(c.k_attn),
            cell(c.k_ffn),
            cell(c.v_attn),
            cell(c.v_ffn)
        )
        .unwrap();
    }
    s
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("K_p,K_r,rho,flops,speedup,match_rate\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.prompt_interval, r.response_interval, r.update_ratio, r.flops, r.speedup, r.match_rate
        )
        .unwrap();
    }
    s
}

#[derive(Serialize)]
struct ReservedIds {
    /// Token ids `0..=255` are raw bytes.
    bytes: &'static str,
    tokenizer_mask: TokenId,
    tokenizer_pad: TokenId,
    /// The id the model treats as masked.
    model_mask: TokenId,
}

#[derive(Serialize)]
struct Summary<'a> {
    reserved_ids: ReservedIds,
    mode: Mode,
    model: &'a ModelConfig,
    gen: &'a GenSettings,
    prompt_len: usize,
    policy: &'a CachePolicy,
    total_flops: u64,
    analytic_flops: u64,
    baseline_flops: Option<u64>,
    cached_flops: Option<u64>,
    speedup: Option<f64>,
    match_rate: Option<f64>,
    max_abs_hidden_diff: Option<f64>,
    cache_elements: usize,
    flops_per_generated_token: f64,
    refresh_counts: &'a RefreshCounts,
    staleness: Staleness,
    output_tokens: &'a [TokenId],
    output_text: String,
}

pub fn summary_json(exp: &Experiment, report: &RunReport) -> String {
    let primary = report.primary();
    let policy = match report.mode {
        Mode::Baseline => CachePolicy::disabled(),
        _ => exp.config.policy.clone(),
    };
    let summary = Summary {
        reserved_ids: ReservedIds {
            bytes: "0-255",
            tokenizer_mask: MASK_ID,
            tokenizer_pad: PAD_ID,
            model_mask: exp.config.model.mask_token_id,
        },
        mode: report.mode,
        model: &exp.config.model,
        gen: &exp.config.gen,
        prompt_len: exp.gen.prompt.len(),
        policy: &exp.config.policy,
        total_flops: primary.metrics.total_flops,
        analytic_flops: analytic_flops(&exp.config.model, &exp.gen, &policy),
        baseline_flops: report.baseline.as_ref().map(|b| b.metrics.total_flops),
        cached_flops: report.cached.as_ref().map(|c| c.metrics.total_flops),
        speedup: report.speedup(),
        match_rate: report.divergence.map(|d| d.match_rate),
        max_abs_hidden_diff: report.divergence.map(|d| d.max_abs_hidden_diff),
        cache_elements: primary.metrics.cache_elements,
        flops_per_generated_token: primary.metrics.flops_per_generated_token(exp.gen.gen_len),
        refresh_counts: &primary.metrics.refresh_counts,
        staleness: primary.metrics.staleness,
        output_tokens: &primary.tokens,
        output_text: detokenize(&primary.tokens),
    };
    let mut s = serde_json::to_string_pretty(&summary).expect("summary serializes");
    s.push('\n');
    s
}

/// Writes the files for one `run` invocation and returns their paths.
pub fn write_run(dir: &Path, exp: &Experiment, report: &RunReport) -> Result<Vec<PathBuf>> {
    let mut written = vec![write_atomic(dir, METRICS_CSV, &metrics_csv(&report.primary().metrics))?];
    if let (Mode::Compare, Some(b)) = (report.mode, &report.baseline) {
        written.push(write_atomic(dir, BASELINE_METRICS_CSV, &metrics_csv(&b.metrics))?);
    }
    written.push(write_atomic(dir, SUMMARY_JSON, &summary_json(exp, report))?);
    if let Some(t) = &report.trace {
        written.push(write_atomic(dir, TRACE_CSV, &trace_csv(t))?);
        written.push(write_atomic(dir, CORRELATION_CSV, &correlation_csv(t))?);
    }
    Ok(written)
}

#[derive(Clone, Copy)]
enum Axis {
    PromptInterval,
    ResponseInterval,
    UpdateRatio,
}

impl Axis {
    const ALL: [Axis; 3] = [Axis::PromptInterval, Axis::ResponseInterval, Axis::UpdateRatio];

    fn name(self) -> &'static str {
        match self {
            Axis::PromptInterval => "K_p",
            Axis::ResponseInterval => "K_r",
            Axis::UpdateRatio => "rho",
        }
    }

    fn value(self, r: &SweepRow) -> f64 {
        match self {
            Axis::PromptInterval => r.prompt_interval as f64,
            Axis::ResponseInterval => r.response_interval as f64,
            Axis::UpdateRatio => r.update_ratio,
        }
    }
}

/// Speedup and match-rate charts against each axis that takes more than
/// one value, one line per combination of the other two axes.
pub fn sweep_plots(rows: &[SweepRow]) -> Vec<(String, String)> {
    let mut files = Vec::new();
    for axis in Axis::ALL {
        let distinct: BTreeSet<u64> = rows.iter().map(|r| axis.value(r).to_bits()).collect();
        if distinct.len() < 2 {
            continue;
        }
        let others: Vec<Axis> = Axis::ALL.into_iter().filter(|a| a.name() != axis.name()).collect();
        let mut groups: Vec<(String, Vec<&SweepRow>)> = Vec::new();
        for r in rows {
            let label = others
                .iter()
                .map(|a| format!("{}={}", a.name(), a.value(r)))
                .collect::<Vec<_>>()
                .join(", ");
            match groups.iter_mut().find(|(l, _)| *l == label) {
                Some((_, g)) => g.push(r),
                None => groups.push((label, vec![r])),
            }
        }
        for (metric, title) in [("speedup", "FLOPs speedup"), ("match", "Token match rate")] {
            let series: Vec<Series> = groups
                .iter()
                .map(|(label, g)| {
                    let mut points: Vec<(f64, f64)> = g
                        .iter()
                        .map(|r| {
                            let y = if metric == "speedup" { r.speedup } else { r.match_rate };
                            (axis.value(r), y)
                        })
                        .collect();
                    points.sort_by(|a, b| a.0.total_cmp(&b.0));
                    Series {
                        label: label.clone(),
                        points,
                    }
                })
                .collect();
            let chart = line_chart(&format!("{title} vs {}", axis.name()), axis.name(), title, &series);
            files.push((format!("{metric}_vs_{}.svg", axis.name()), chart));
        }
    }
    files
}

pub fn write_sweep(dir: &Path, report: &SweepReport) -> Result<Vec<PathBuf>> {
    let mut written = vec![write_atomic(dir, SWEEP_CSV, &sweep_csv(&report.rows))?];
    written.push(write_atomic(
        dir,
        BASELINE_METRICS_CSV,
        &metrics_csv(&report.baseline.metrics),
    )?);
    for (name, svg) in sweep_plots(&report.rows) {
        written.push(write_atomic(dir, &name, &svg)?);
    }
    Ok(written)
}
