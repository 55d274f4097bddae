//! FLOPs ledger, run records and the closed-form cost model used to check
//! them.
//!
//! Convention: one multiply-add is 2 FLOPs. Only matrix products are
//! counted; softmax, norms, GELU and residual adds are free. The V
//! projection done for V-verify at adaptive steps is charged.

use serde::{Deserialize, Serialize};

use crate::engine::{GenConfig, GenerationOutput};
use crate::error::{contract, Result};
use crate::model::ModelConfig;
use crate::policy::{update_count, CachePolicy, LayerCase};

/// Running FLOPs total for one unit of work.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter(u64);

impl FlopCounter {
    pub fn add(&mut self, flops: u64) {
        self.0 += flops;
    }

    /// Charges an `m×k` by `k×n` product.
    pub fn add_matmul(&mut self, m: usize, k: usize, n: usize) {
        self.add(2 * (m as u64) * (k as u64) * (n as u64));
    }

    pub fn total(&self) -> u64 {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Denoising step index `k`, counting down from `K` to 1.
    pub step: usize,
    pub cases: Vec<LayerCase>,
    pub flops: u64,
    /// Token rows that went through the FFN fresh, summed over layers.
    pub tokens_recomputed: usize,
    pub cache_elements: usize,
}

impl StepRecord {
    pub fn case_codes(&self) -> String {
        self.cases.iter().map(|c| c.code()).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefreshCounts {
    pub init: usize,
    pub full: usize,
    pub prompt_only: usize,
    pub response_only: usize,
    pub adaptive: usize,
    pub reuse: usize,
    pub uncached: usize,
}

impl RefreshCounts {
    fn bump(&mut self, case: LayerCase) {
        let slot = match case {
            LayerCase::Init => &mut self.init,
            LayerCase::Full => &mut self.full,
            LayerCase::PromptOnly => &mut self.prompt_only,
            LayerCase::ResponseOnly => &mut self.response_only,
            LayerCase::Adaptive => &mut self.adaptive,
            LayerCase::Reuse => &mut self.reuse,
            LayerCase::Uncached => &mut self.uncached,
        };
        *slot += 1;
    }

    /// Layer-steps after initialization that used the cache.
    pub fn cached_total(&self) -> usize {
        self.full + self.prompt_only + self.response_only + self.adaptive + self.reuse
    }
}

/// Oldest cache row seen at any step, in steps since its last write.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Staleness {
    pub prompt: Option<usize>,
    pub response: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    /// Fraction of response positions with equal tokens.
    pub match_rate: f64,
    /// Largest absolute difference between final hidden states.
    pub max_abs_hidden_diff: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub total_flops: u64,
    pub per_step: Vec<StepRecord>,
    pub cache_elements: usize,
    pub refresh_counts: RefreshCounts,
    pub staleness: Staleness,
    pub divergence: Option<Divergence>,
}

impl RunMetrics {
    pub fn push_step(&mut self, record: StepRecord) {
        self.total_flops += record.flops;
        for &c in &record.cases {
            self.refresh_counts.bump(c);
        }
        self.per_step.push(record);
    }

    pub fn observe_staleness(&mut self, prompt: Option<usize>, response: Option<usize>) {
        self.staleness.prompt = self.staleness.prompt.max(prompt);
        self.staleness.response = self.staleness.response.max(response);
    }

    pub fn flops_per_generated_token(&self, gen_len: usize) -> f64 {
        self.total_flops as f64 / gen_len.max(1) as f64
    }
}

/// Total FLOPs over one run, from the schedule alone.
///
/// Enumerates every step and layer, decides which case fires, and sums the
/// cost of the rows each product touches. Shares no code with the
/// instrumented ledger beyond the `⌊ρ·L⌋` cardinality rule.
pub fn analytic_flops(model: &ModelConfig, gen: &GenConfig, policy: &CachePolicy) -> u64 {
    let d = model.hidden_dim as u64;
    let f = model.ffn_dim as u64;
    let vocab = model.vocab_size as u64;
    let m = gen.prompt.len() as u64;
    let l = gen.gen_len as u64;
    let t = m + l;
    let layers = model.num_layers as u64;

    // q/k/v rows projected, attention queries, FFN rows. Keys always span
    // the full sequence.
    let layer = |q: u64, k: u64, v: u64, queries: u64, ffn_rows: u64| -> u64 {
        2 * d * d * (q + k + v) // projections
            + 2 * queries * t * d // scores
            + 2 * queries * t * d // weighted values
            + 2 * queries * d * d // output projection
            + 2 * ffn_rows * d * f // up
            + 2 * ffn_rows * f * d // down
    };
    let head = 2 * l * d * vocab;
    let full = layer(t, t, t, t, t);
    let steps = gen.steps as u64;

    if !policy.enabled {
        return steps * (layers * full + head);
    }

    let n = update_count(gen.gen_len, policy.update_ratio) as u64;
    let mut total = layers * full + head; // step K
    for k in 1..gen.steps {
        let prompt = k % policy.prompt_interval == 0;
        let response = k % policy.response_interval == 0;
        let per_layer = match (prompt, response) {
            (true, true) => full,
            (true, false) => layer(m, m, m, m, m),
            (false, true) => layer(l, l, l, l, l),
            (false, false) if policy.update_ratio > 0.0 => layer(n, n, l, n, n),
            (false, false) => 0,
        };
        total += layers * per_layer + head;
    }
    total
}

/// `reference / cached` total FLOPs.
pub fn speedup(reference: &RunMetrics, cached: &RunMetrics) -> f64 {
    reference.total_flops as f64 / cached.total_flops as f64
}

pub fn compare_outputs(a: &GenerationOutput, b: &GenerationOutput) -> Result<Divergence> {
    contract!(
        a.tokens.len() == b.tokens.len(),
        "comparing responses of length {} and {}",
        a.tokens.len(),
        b.tokens.len()
    );
    let matches = a.tokens.iter().zip(&b.tokens).filter(|(x, y)| x == y).count();
    let match_rate = if a.tokens.is_empty() {
        1.0
    } else {
        matches as f64 / a.tokens.len() as f64
    };
    Ok(Divergence {
        match_rate,
        max_abs_hidden_diff: a.hidden.max_abs_diff(&b.hidden)?,
    })
}
