//! Denoising loop with per-layer cache dispatch.
//!
//! Step `K` runs a full forward pass that populates every cache entry.
//! Steps `K-1 … 1` consult the refresh flags per layer and run one of the
//! four cases. Every step ends with greedy decoding and a transition that
//! commits the most confident predictions of the active block.

mod layers;
mod reference;
mod schedule;

pub use layers::{adaptive, full_refresh, prompt_only, response_only, LayerOutcome, LayerStep};
pub use reference::{layer_forward, reference_generate, reference_generate_observed, LayerObserver};
pub use schedule::{GenConfig, SequenceState, UnmaskSchedule};

use crate::cache::{DualCache, Side};
use crate::error::{Error, Result};
use crate::metrics::{FlopCounter, RunMetrics, StepRecord};
use crate::model::{ModelParams, TokenId};
use crate::policy::{refresh_flags, CachePolicy, LayerCase};
use crate::tensor::Matrix;

/// Result of one generation run.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationOutput {
    pub prompt: Vec<TokenId>,
    /// Final response tokens, fully unmasked.
    pub tokens: Vec<TokenId>,
    /// Last layer output of the final step, full sequence.
    pub hidden: Matrix,
    pub metrics: RunMetrics,
}

/// Runs the cached engine, or the reference loop when the policy is
/// disabled.
pub fn generate(params: &ModelParams, gen: &GenConfig, policy: &CachePolicy) -> Result<GenerationOutput> {
    if !policy.enabled {
        return reference_generate(params, gen);
    }
    Generation::new(params, gen, policy)?.run()
}

/// A cached generation run driven one step at a time.
pub struct Generation<'a> {
    params: &'a ModelParams,
    gen: GenConfig,
    policy: CachePolicy,
    schedule: UnmaskSchedule,
    state: SequenceState,
    cache: DualCache,
    metrics: RunMetrics,
    hidden: Option<Matrix>,
    next_step: usize,
}

impl<'a> Generation<'a> {
    pub fn new(params: &'a ModelParams, gen: &GenConfig, policy: &CachePolicy) -> Result<Self> {
        let cfg = params.config();
        gen.validate(cfg)?;
        policy.validate()?;
        let schedule = UnmaskSchedule::new(gen)?;
        let cache = DualCache::new(cfg.num_layers, gen.prompt.len(), gen.gen_len, cfg.hidden_dim)?;
        let mut state = SequenceState::new(gen.prompt.clone(), gen.gen_len, cfg.mask_token_id);
        state.set_step(gen.steps);
        Ok(Self {
            params,
            gen: gen.clone(),
            policy: policy.clone(),
            schedule,
            state,
            metrics: RunMetrics {
                cache_elements: cache.memory_elements(),
                ..RunMetrics::default()
            },
            cache,
            hidden: None,
            next_step: gen.steps,
        })
    }

    pub fn state(&self) -> &SequenceState {
        &self.state
    }

    pub fn cache(&self) -> &DualCache {
        &self.cache
    }

    pub fn cache_mut(&mut self) -> &mut DualCache {
        &mut self.cache
    }

    pub fn metrics(&self) -> &RunMetrics {
        &self.metrics
    }

    pub fn is_done(&self) -> bool {
        self.next_step == 0
    }

    /// Swaps the policy between steps. Disabling drops the cache contents,
    /// so a later re-enable starts from a full refresh.
    pub fn set_policy(&mut self, policy: &CachePolicy) -> Result<()> {
        policy.validate()?;
        if !policy.enabled {
            self.cache.invalidate();
        }
        self.policy = policy.clone();
        Ok(())
    }

    fn choose_case(&self, k: usize, layer: usize) -> LayerCase {
        if k == self.gen.steps {
            return LayerCase::Init;
        }
        let case = refresh_flags(k, &self.policy).case(self.policy.update_ratio);
        let prompt_warm = self.cache.is_warm(layer, Side::Prompt);
        let response_warm = self.cache.is_warm(layer, Side::Response);
        let ready = match case {
            LayerCase::PromptOnly => response_warm,
            LayerCase::ResponseOnly => prompt_warm,
            LayerCase::Adaptive | LayerCase::Reuse => prompt_warm && response_warm,
            _ => true,
        };
        if ready {
            case
        } else {
            LayerCase::Full
        }
    }

    /// Runs step `k` and returns whether more steps remain.
    pub fn step(&mut self) -> Result<bool> {
        let k = self.next_step;
        if k == 0 {
            return Ok(false);
        }
        let cfg = self.params.config();
        let mut flops = FlopCounter::default();
        let mut cases = Vec::with_capacity(cfg.num_layers);
        let mut recomputed = 0;
        let mut x = self.params.embed(&self.state.tokens())?;

        for layer in 0..cfg.num_layers {
            let at = LayerStep {
                params: self.params,
                layer,
                step: k,
            };
            let (case, outcome) = if self.policy.enabled {
                let case = self.choose_case(k, layer);
                let cache = &mut self.cache;
                let outcome = match case {
                    LayerCase::Init | LayerCase::Full => full_refresh(at, &x, cache, &mut flops)?,
                    LayerCase::PromptOnly => prompt_only(at, &x, cache, &mut flops)?,
                    LayerCase::ResponseOnly => response_only(at, &x, cache, &mut flops)?,
                    LayerCase::Adaptive | LayerCase::Reuse => {
                        adaptive(at, &x, cache, self.policy.update_ratio, self.policy.metric, &mut flops)?
                    }
                    LayerCase::Uncached => unreachable!("uncached layers only run with the policy disabled"),
                };
                (case, outcome)
            } else {
                let (out, _) = layer_forward(self.params, layer, &x, &mut flops)?;
                let recomputed = x.rows();
                (LayerCase::Uncached, LayerOutcome { out, recomputed })
            };
            cases.push(case);
            recomputed += outcome.recomputed;
            x = outcome.out;
        }

        let decoded = self.params.decode_greedy(&x, &self.state, &mut flops)?;
        self.schedule.transition(&mut self.state, &decoded, k)?;
        if self.policy.enabled {
            self.metrics.observe_staleness(
                self.cache.max_age(Side::Prompt, k),
                self.cache.max_age(Side::Response, k),
            );
        }
        let cache_elements = self.cache.memory_elements();
        if cache_elements != self.metrics.cache_elements {
            return Err(Error::Schedule(format!(
                "cache footprint changed from {} to {cache_elements} elements",
                self.metrics.cache_elements
            )));
        }
        self.metrics.push_step(StepRecord {
            step: k,
            cases,
            flops: flops.total(),
            tokens_recomputed: recomputed,
            cache_elements,
        });
        self.hidden = Some(x);
        self.next_step = k - 1;
        Ok(self.next_step > 0)
    }

    pub fn run(mut self) -> Result<GenerationOutput> {
        while self.step()? {}
        self.finish()
    }

    pub fn finish(self) -> Result<GenerationOutput> {
        if self.next_step != 0 {
            return Err(Error::Schedule(format!(
                "run stopped with {} steps left",
                self.next_step
            )));
        }
        self.state.check_invariants()?;
        if self.state.masked_count() != 0 {
            return Err(Error::Schedule(format!(
                "{} positions still masked after the last step",
                self.state.masked_count()
            )));
        }
        Ok(GenerationOutput {
            prompt: self.gen.prompt,
            tokens: self.state.response().to_vec(),
            hidden: self.hidden.expect("at least one step ran"),
            metrics: self.metrics,
        })
    }
}
