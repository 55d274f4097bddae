//! Adjacent-step feature similarity diagnostics over a reference run.
//!
//! For every pair of consecutive steps and every layer, records the cosine
//! similarity of each token's K, V, AttnOut and FFNOut. For the response
//! tokens it also ranks how well K or V drift predicts AttnOut or FFNOut
//! drift: take the 25% of response tokens whose K (or V) moved most and
//! compute the Spearman correlation of their similarities.

use serde::{Deserialize, Serialize};

use crate::cache::LayerFeatures;
use crate::engine::{reference_generate_observed, GenConfig, GenerationOutput, LayerObserver};
use crate::error::Result;
use crate::model::ModelParams;
use crate::policy::{select_update_indices, SimilarityMetric};
use crate::tensor::cosine_similarity;

/// Share of most-changed response tokens used for the correlations.
pub const DISSIMILAR_FRACTION: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// The later step of the pair.
    pub step: usize,
    pub layer: usize,
    /// Position in the full sequence.
    pub token: usize,
    pub sim_k: f64,
    pub sim_v: f64,
    pub sim_attn: f64,
    pub sim_ffn: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRecord {
    pub step: usize,
    pub layer: usize,
    pub k_attn: Option<f64>,
    pub k_ffn: Option<f64>,
    pub v_attn: Option<f64>,
    pub v_ffn: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTrace {
    pub rows: Vec<TraceRow>,
    pub correlations: Vec<CorrelationRecord>,
}

/// Average ranks, 1-based, ties sharing the mean of their positions.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Spearman rank correlation. `None` for fewer than two points or a
/// constant input.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    pearson(&ranks(a), &ranks(b))
}

/// Collects trace rows as a [`LayerObserver`] on a reference run.
pub struct SimilarityTracer {
    prompt_len: usize,
    previous: Vec<Option<LayerFeatures>>,
    trace: SimilarityTrace,
}

impl SimilarityTracer {
    pub fn new(num_layers: usize, prompt_len: usize) -> Self {
        Self {
            prompt_len,
            previous: vec![None; num_layers],
            trace: SimilarityTrace::default(),
        }
    }

    pub fn into_trace(self) -> SimilarityTrace {
        self.trace
    }

    fn compare(&mut self, step: usize, layer: usize, prev: &LayerFeatures, cur: &LayerFeatures) {
        let sim = |a: &crate::tensor::Matrix, b: &crate::tensor::Matrix, t: usize| {
            cosine_similarity(a.row(t), b.row(t)).expect("equal widths")
        };
        let first = self.trace.rows.len();
        for t in 0..cur.rows() {
            self.trace.rows.push(TraceRow {
                step,
                layer,
                token: t,
                sim_k: sim(&prev.k, &cur.k, t),
                sim_v: sim(&prev.v, &cur.v, t),
                sim_attn: sim(&prev.attn_out, &cur.attn_out, t),
                sim_ffn: sim(&prev.ffn_out, &cur.ffn_out, t),
            });
        }
        let response = &self.trace.rows[first + self.prompt_len..];
        let pick = |key: fn(&TraceRow) -> f64, other: fn(&TraceRow) -> f64| {
            let scores: Vec<f64> = response.iter().map(key).collect();
            let idx = select_update_indices(&scores, DISSIMILAR_FRACTION, SimilarityMetric::Cosine);
            let a: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let b: Vec<f64> = idx.iter().map(|&i| other(&response[i])).collect();
            spearman(&a, &b)
        };
        let record = CorrelationRecord {
            step,
            layer,
            k_attn: pick(|r| r.sim_k, |r| r.sim_attn),
            k_ffn: pick(|r| r.sim_k, |r| r.sim_ffn),
            v_attn: pick(|r| r.sim_v, |r| r.sim_attn),
            v_ffn: pick(|r| r.sim_v, |r| r.sim_ffn),
        };
        self.trace.correlations.push(record);
    }
}

impl LayerObserver for SimilarityTracer {
    fn observe(&mut self, step: usize, layer: usize, features: &LayerFeatures) {
        if let Some(prev) = self.previous[layer].take() {
            self.compare(step, layer, &prev, features);
        }
        self.previous[layer] = Some(features.clone());
    }
}

/// Reference run with tracing attached.
pub fn similarity_trace(params: &ModelParams, gen: &GenConfig) -> Result<(GenerationOutput, SimilarityTrace)> {
    let mut tracer = SimilarityTracer::new(params.config().num_layers, gen.prompt.len());
    let out = reference_generate_observed(params, gen, Some(&mut tracer))?;
    Ok((out, tracer.into_trace()))
}
