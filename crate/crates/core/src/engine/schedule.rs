use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Decoded, ModelConfig, TokenId};

/// Generation settings: step count `K`, response length and block length.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub steps: usize,
    pub gen_len: usize,
    pub block_len: usize,
    pub prompt: Vec<TokenId>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            steps: 64,
            gen_len: 64,
            block_len: 8,
            prompt: Vec::new(),
        }
    }
}

impl GenConfig {
    pub fn num_blocks(&self) -> usize {
        self.gen_len.div_ceil(self.block_len.max(1))
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.steps == 0 || self.gen_len == 0 || self.block_len == 0 {
            return Err(Error::Config(format!(
                "steps, gen_len and block_len must be at least 1 (got {}, {}, {})",
                self.steps, self.gen_len, self.block_len
            )));
        }
        if self.steps < self.num_blocks() {
            return Err(Error::Config(format!(
                "{} steps cannot cover {} blocks",
                self.steps,
                self.num_blocks()
            )));
        }
        for &t in &self.prompt {
            if t as usize >= model.vocab_size {
                return Err(Error::Config(format!(
                    "prompt token {t} outside vocabulary of {}",
                    model.vocab_size
                )));
            }
            if t == model.mask_token_id {
                return Err(Error::Config("prompt contains the mask token".into()));
            }
        }
        Ok(())
    }
}

/// Prompt plus the partially unmasked response.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceState {
    prompt: Vec<TokenId>,
    response: Vec<TokenId>,
    masked: Vec<bool>,
    mask_token: TokenId,
    step: usize,
    block_cursor: usize,
}

impl SequenceState {
    /// Fully masked response of `gen_len` positions.
    pub fn new(prompt: Vec<TokenId>, gen_len: usize, mask_token: TokenId) -> Self {
        Self {
            prompt,
            response: vec![mask_token; gen_len],
            masked: vec![true; gen_len],
            mask_token,
            step: 0,
            block_cursor: 0,
        }
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.prompt
    }

    pub fn response(&self) -> &[TokenId] {
        &self.response
    }

    pub fn is_masked(&self, j: usize) -> bool {
        self.masked[j]
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    /// The step `k` the state is waiting for.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn block_cursor(&self) -> usize {
        self.block_cursor
    }

    /// `[prompt ; response]`, the model input.
    pub fn tokens(&self) -> Vec<TokenId> {
        let mut t = Vec::with_capacity(self.prompt.len() + self.response.len());
        t.extend_from_slice(&self.prompt);
        t.extend_from_slice(&self.response);
        t
    }

    pub(crate) fn set_step(&mut self, k: usize) {
        self.step = k;
    }

    pub fn check_invariants(&self) -> Result<()> {
        for (j, (&t, &m)) in self.response.iter().zip(&self.masked).enumerate() {
            if (t == self.mask_token) != m {
                return Err(Error::Schedule(format!(
                    "position {j}: mask flag disagrees with token {t}"
                )));
            }
        }
        if self.prompt.contains(&self.mask_token) {
            return Err(Error::Schedule("prompt contains the mask token".into()));
        }
        Ok(())
    }
}

/// Which block is active and how many tokens it commits, for every step.
///
/// Steps are shared evenly between blocks, earlier blocks taking the
/// remainder; within a block the block's tokens are shared evenly between
/// its steps, earlier steps taking the remainder. The last block may be
/// shorter than `block_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnmaskSchedule {
    steps: usize,
    gen_len: usize,
    block_len: usize,
    /// Indexed by `K - k`: (block, commits, last step of its block).
    plan: Vec<(usize, usize, bool)>,
}

impl UnmaskSchedule {
    pub fn new(gen: &GenConfig) -> Result<Self> {
        if gen.steps == 0 || gen.gen_len == 0 || gen.block_len == 0 || gen.steps < gen.num_blocks() {
            return Err(Error::Config(format!(
                "no schedule for {} steps over {} tokens in blocks of {}",
                gen.steps, gen.gen_len, gen.block_len
            )));
        }
        let blocks = gen.num_blocks();
        let mut plan = Vec::with_capacity(gen.steps);
        for b in 0..blocks {
            let block_steps = gen.steps / blocks + usize::from(b < gen.steps % blocks);
            let size = gen.block_len.min(gen.gen_len - b * gen.block_len);
            for s in 0..block_steps {
                let commits = size / block_steps + usize::from(s < size % block_steps);
                plan.push((b, commits, s + 1 == block_steps));
            }
        }
        debug_assert_eq!(plan.len(), gen.steps);
        Ok(Self {
            steps: gen.steps,
            gen_len: gen.gen_len,
            block_len: gen.block_len,
            plan,
        })
    }

    pub fn block_range(&self, block: usize) -> Range<usize> {
        let start = block * self.block_len;
        start..(start + self.block_len).min(self.gen_len)
    }

    fn entry(&self, k: usize) -> Result<(usize, usize, bool)> {
        if k == 0 || k > self.steps {
            return Err(Error::Schedule(format!("step {k} outside 1..={}", self.steps)));
        }
        Ok(self.plan[self.steps - k])
    }

    /// Active block and number of tokens to commit at step `k`.
    pub fn at(&self, k: usize) -> Result<(usize, usize)> {
        self.entry(k).map(|(b, n, _)| (b, n))
    }

    /// Commits the `n_k` most confident masked positions of the active
    /// block. Committed positions are never masked again.
    pub fn transition(&self, state: &mut SequenceState, decoded: &Decoded, k: usize) -> Result<()> {
        if decoded.tokens.len() != state.response.len() || decoded.confidence.len() != state.response.len() {
            return Err(Error::Contract(format!(
                "predictions cover {} positions, response has {}",
                decoded.tokens.len(),
                state.response.len()
            )));
        }
        let (block, commits, last) = self.entry(k)?;
        let range = self.block_range(block);
        let mut candidates: Vec<usize> = range.clone().filter(|&j| state.masked[j]).collect();
        if commits > candidates.len() {
            return Err(Error::Schedule(format!(
                "step {k} must commit {commits} tokens but block {block} has {} masked",
                candidates.len()
            )));
        }
        candidates.sort_by(|&a, &b| decoded.confidence[b].total_cmp(&decoded.confidence[a]).then(a.cmp(&b)));
        for &j in &candidates[..commits] {
            let tok = decoded.tokens[j];
            if tok == state.mask_token {
                return Err(Error::Schedule(format!(
                    "prediction for position {j} is the mask token"
                )));
            }
            state.response[j] = tok;
            state.masked[j] = false;
        }
        let remaining = range.clone().filter(|&j| state.masked[j]).count();
        if remaining == 0 {
            state.block_cursor = block + 1;
        } else if last {
            return Err(Error::Schedule(format!(
                "block {block} still has {remaining} masked positions after its last step"
            )));
        }
        state.step = k - 1;
        Ok(())
    }
}
