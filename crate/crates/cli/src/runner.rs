//! Run orchestration: baseline, cached, compare and sweep.
//!
//! Every run is audited before anything is written: the FLOPs ledger must
//! equal the analytic count, there must be one record per step, the
//! response must be fully unmasked and the cache footprint must be the
//! closed-form size.

use clap::ValueEnum;
use dllm_cache::metrics::{Divergence, Staleness};
use dllm_cache::trace::{similarity_trace, SimilarityTrace};
use dllm_cache::{
    analytic_flops, compare_outputs, generate, reference_generate, speedup, CachePolicy, GenerationOutput, ModelParams,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::Experiment;
use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Uncached reference loop only.
    Baseline,
    /// Cached engine only.
    Cached,
    /// Both, with divergence and speedup.
    Compare,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub mode: Mode,
    pub baseline: Option<GenerationOutput>,
    pub cached: Option<GenerationOutput>,
    pub divergence: Option<Divergence>,
    pub trace: Option<SimilarityTrace>,
}

impl RunReport {
    /// The run whose per-step records go to `metrics.csv`.
    pub fn primary(&self) -> &GenerationOutput {
        self.cached
            .as_ref()
            .or(self.baseline.as_ref())
            .expect("every mode runs at least one path")
    }

    pub fn speedup(&self) -> Option<f64> {
        match (&self.baseline, &self.cached) {
            (Some(b), Some(c)) => Some(speedup(&b.metrics, &c.metrics)),
            _ => None,
        }
    }
}

/// Checks the invariants every finished run must satisfy.
pub fn audit(exp: &Experiment, policy: &CachePolicy, out: &GenerationOutput) -> Result<()> {
    let m = &out.metrics;
    let model = &exp.config.model;
    let expected = analytic_flops(model, &exp.gen, policy);
    if m.total_flops != expected {
        return Err(CliError::Invariant(format!(
            "FLOPs ledger {} differs from analytic count {expected}",
            m.total_flops
        )));
    }
    let summed: u64 = m.per_step.iter().map(|s| s.flops).sum();
    if summed != m.total_flops {
        return Err(CliError::Invariant(format!(
            "per-step FLOPs sum to {summed}, total is {}",
            m.total_flops
        )));
    }
    if m.per_step.len() != exp.gen.steps {
        return Err(CliError::Invariant(format!(
            "{} step records for {} steps",
            m.per_step.len(),
            exp.gen.steps
        )));
    }
    if let Some(i) = out.tokens.iter().position(|&t| t == model.mask_token_id) {
        return Err(CliError::Invariant(format!("response position {i} is still masked")));
    }
    if policy.enabled {
        let footprint = 4 * model.num_layers * (exp.gen.prompt.len() + exp.gen.gen_len) * model.hidden_dim;
        if m.per_step.iter().any(|s| s.cache_elements != footprint) || m.cache_elements != footprint {
            return Err(CliError::Invariant(format!(
                "cache footprint is not a constant {footprint} elements"
            )));
        }
    }
    Ok(())
}

fn cached_run(exp: &Experiment, params: &ModelParams, policy: &CachePolicy) -> Result<GenerationOutput> {
    let out = generate(params, &exp.gen, policy)?;
    audit(exp, policy, &out)?;
    Ok(out)
}

fn baseline_run(
    exp: &Experiment,
    params: &ModelParams,
    trace: bool,
) -> Result<(GenerationOutput, Option<SimilarityTrace>)> {
    let (out, trace) = if trace {
        let (out, t) = similarity_trace(params, &exp.gen)?;
        (out, Some(t))
    } else {
        (reference_generate(params, &exp.gen)?, None)
    };
    audit(exp, &CachePolicy::disabled(), &out)?;
    Ok((out, trace))
}

pub fn run(exp: &Experiment, mode: Mode, trace: bool) -> Result<RunReport> {
    let params = ModelParams::new(&exp.config.model)?;
    let policy = &exp.config.policy;
    let (baseline, trace) = match mode {
        Mode::Baseline | Mode::Compare => {
            let (out, t) = baseline_run(exp, &params, trace)?;
            (Some(out), t)
        }
        // The trace comes from the reference path, which has every fresh
        // feature; its output is discarded in cached mode.
        Mode::Cached if trace => (None, Some(similarity_trace(&params, &exp.gen)?.1)),
        Mode::Cached => (None, None),
    };
    let cached = match mode {
        Mode::Cached | Mode::Compare => Some(cached_run(exp, &params, policy)?),
        Mode::Baseline => None,
    };
    let divergence = match (&baseline, &cached) {
        (Some(b), Some(c)) => Some(compare_outputs(b, c)?),
        _ => None,
    };
    let mut report = RunReport {
        mode,
        baseline,
        cached,
        divergence,
        trace,
    };
    if let (Some(c), Some(d)) = (report.cached.as_mut(), report.divergence) {
        c.metrics.divergence = Some(d);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub prompt_interval: usize,
    pub response_interval: usize,
    pub update_ratio: f64,
    pub flops: u64,
    pub speedup: f64,
    pub match_rate: f64,
    pub max_abs_hidden_diff: f64,
    pub staleness: Staleness,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub baseline: GenerationOutput,
    pub rows: Vec<SweepRow>,
}

/// One cached run per grid point, all compared against a single baseline.
/// Points run on up to `jobs` threads; rows come back in grid order
/// (`K_p` outermost, then `K_r`, then `ρ`).
pub fn sweep(exp: &Experiment, jobs: usize) -> Result<SweepReport> {
    let (kps, krs, rhos) = exp.sweep_axes()?;
    let params = ModelParams::new(&exp.config.model)?;
    let (baseline, _) = baseline_run(exp, &params, false)?;

    let mut points = Vec::new();
    for &kp in &kps {
        for &kr in &krs {
            for &rho in &rhos {
                points.push(CachePolicy {
                    prompt_interval: kp,
                    response_interval: kr,
                    update_ratio: rho,
                    metric: exp.config.policy.metric,
                    enabled: true,
                });
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {jobs} workers: {e}")))?;
    let rows = pool.install(|| {
        points
            .par_iter()
            .map(|policy| {
                let out = cached_run(exp, &params, policy)?;
                let d = compare_outputs(&baseline, &out)?;
                Ok(SweepRow {
                    prompt_interval: policy.prompt_interval,
                    response_interval: policy.response_interval,
                    update_ratio: policy.update_ratio,
                    flops: out.metrics.total_flops,
                    speedup: speedup(&baseline.metrics, &out.metrics),
                    match_rate: d.match_rate,
                    max_abs_hidden_diff: d.max_abs_hidden_diff,
                    staleness: out.metrics.staleness,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(SweepReport { baseline, rows })
}
