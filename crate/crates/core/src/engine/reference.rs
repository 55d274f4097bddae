//! Uncached forward pass and generation loop. This is the correctness
//! oracle for the cached engine and the FLOPs baseline.

use crate::cache::LayerFeatures;
use crate::error::Result;
use crate::metrics::{FlopCounter, RunMetrics, StepRecord};
use crate::model::{ModelParams, NORM_EPS};
use crate::policy::LayerCase;
use crate::tensor::{add, layer_norm, Matrix};

use super::schedule::{GenConfig, SequenceState, UnmaskSchedule};
use super::GenerationOutput;

/// Receives the fresh features of every layer at every step of a
/// reference run.
pub trait LayerObserver {
    fn observe(&mut self, step: usize, layer: usize, features: &LayerFeatures);
}

/// One transformer layer over the full sequence. Returns the layer output
/// and the four features the cache would store.
pub fn layer_forward(
    params: &ModelParams,
    layer: usize,
    x_in: &Matrix,
    flops: &mut FlopCounter,
) -> Result<(Matrix, LayerFeatures)> {
    let x_norm = layer_norm(x_in, NORM_EPS);
    let (q, k, v) = params.qkv_project(layer, &x_norm, flops)?;
    let attn_out = params.attention(layer, &q, &k, &v, flops)?;
    let h = add(x_in, &attn_out)?;
    let ffn_out = params.ffn(layer, &layer_norm(&h, NORM_EPS), flops)?;
    let out = add(&h, &ffn_out)?;
    Ok((
        out,
        LayerFeatures {
            k,
            v,
            attn_out,
            ffn_out,
        },
    ))
}

pub fn reference_generate(params: &ModelParams, gen: &GenConfig) -> Result<GenerationOutput> {
    reference_generate_observed(params, gen, None)
}

pub fn reference_generate_observed(
    params: &ModelParams,
    gen: &GenConfig,
    mut observer: Option<&mut dyn LayerObserver>,
) -> Result<GenerationOutput> {
    let cfg = params.config();
    gen.validate(cfg)?;
    let schedule = UnmaskSchedule::new(gen)?;
    let mut state = SequenceState::new(gen.prompt.clone(), gen.gen_len, cfg.mask_token_id);
    let mut metrics = RunMetrics::default();
    let total_rows = gen.prompt.len() + gen.gen_len;
    let mut hidden = Matrix::zeros(total_rows, cfg.hidden_dim);

    for k in (1..=gen.steps).rev() {
        state.set_step(k);
        let mut flops = FlopCounter::default();
        let mut x = params.embed(&state.tokens())?;
        for layer in 0..cfg.num_layers {
            let (out, feats) = layer_forward(params, layer, &x, &mut flops)?;
            if let Some(obs) = observer.as_deref_mut() {
                obs.observe(k, layer, &feats);
            }
            x = out;
        }
        let decoded = params.decode_greedy(&x, &state, &mut flops)?;
        schedule.transition(&mut state, &decoded, k)?;
        hidden = x;
        metrics.push_step(StepRecord {
            step: k,
            cases: vec![LayerCase::Uncached; cfg.num_layers],
            flops: flops.total(),
            tokens_recomputed: total_rows * cfg.num_layers,
            cache_elements: 0,
        });
    }
    state.check_invariants()?;
    Ok(GenerationOutput {
        prompt: gen.prompt.clone(),
        tokens: state.response().to_vec(),
        hidden,
        metrics,
    })
}
