//! Experiment configuration files.
//!
//! A config is one JSON object. Every section is optional and falls back to
//! the desk profile:
//!
//! ```json
//! {
//!   "model":  { "num_layers": 4, "hidden_dim": 64, "num_heads": 4, "ffn_dim": 256,
//!               "vocab_size": 258, "mask_token_id": 256, "seed": 0 },
//!   "gen":    { "steps": 64, "gen_len": 64, "block_len": 8 },
//!   "prompt": { "text": "Question: 2+2=" },
//!   "policy": { "prompt_interval": 16, "response_interval": 8, "update_ratio": 0.25,
//!               "metric": "cosine", "enabled": true },
//!   "sweep":  { "prompt_intervals": [16], "response_intervals": [1, 2, 4, 8],
//!               "update_ratios": [0.25] },
//!   "output_dir": "out",
//!   "trace": false
//! }
//! ```
//!
//! `prompt` is one of `{"tokens": [..]}`, `{"text": ".."}` or
//! `{"file": "path"}`. Relative paths resolve against the config file's
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use dllm_cache::{CachePolicy, GenConfig, ModelConfig, TokenId};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::tokenizer::{tokenize_bytes, MIN_VOCAB};

/// Environment variable that replaces `model.seed`.
pub const SEED_ENV: &str = "DCACHE_SEED";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSettings {
    pub steps: usize,
    pub gen_len: usize,
    pub block_len: usize,
}

impl Default for GenSettings {
    fn default() -> Self {
        let g = GenConfig::default();
        Self {
            steps: g.steps,
            gen_len: g.gen_len,
            block_len: g.block_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum PromptSource {
    Tokens(Vec<TokenId>),
    Text(String),
    File(PathBuf),
}

impl Default for PromptSource {
    fn default() -> Self {
        PromptSource::Tokens(Vec::new())
    }
}

/// Grid for `sweep`. A missing axis holds the base policy's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub prompt_intervals: Option<Vec<usize>>,
    pub response_intervals: Option<Vec<usize>>,
    pub update_ratios: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub gen: GenSettings,
    pub prompt: PromptSource,
    pub policy: CachePolicy,
    pub sweep: Option<SweepGrid>,
    pub output_dir: PathBuf,
    pub trace: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            gen: GenSettings::default(),
            prompt: PromptSource::default(),
            policy: CachePolicy::default(),
            sweep: None,
            output_dir: PathBuf::from("out"),
            trace: false,
        }
    }
}

/// A parsed config with the prompt resolved to tokens and every section
/// validated.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub gen: GenConfig,
    /// Directory the config's relative paths resolve against.
    pub base_dir: PathBuf,
}

impl Experiment {
    pub fn output_dir(&self) -> PathBuf {
        self.base_dir.join(&self.config.output_dir)
    }

    /// The sweep grid with missing axes filled from the base policy.
    pub fn sweep_axes(&self) -> Result<(Vec<usize>, Vec<usize>, Vec<f64>)> {
        let grid = self
            .config
            .sweep
            .as_ref()
            .ok_or_else(|| CliError::Config("sweep needs a \"sweep\" section".into()))?;
        let p = &self.config.policy;
        let axes = (
            grid.prompt_intervals.clone().unwrap_or_else(|| vec![p.prompt_interval]),
            grid.response_intervals
                .clone()
                .unwrap_or_else(|| vec![p.response_interval]),
            grid.update_ratios.clone().unwrap_or_else(|| vec![p.update_ratio]),
        );
        if axes.0.is_empty() || axes.1.is_empty() || axes.2.is_empty() {
            return Err(CliError::Config("sweep grids must not be empty".into()));
        }
        for &kp in &axes.0 {
            CachePolicy::new(kp, 1, 0.0).validate()?;
        }
        for &kr in &axes.1 {
            CachePolicy::new(1, kr, 0.0).validate()?;
        }
        for &rho in &axes.2 {
            CachePolicy::new(1, 1, rho).validate()?;
        }
        Ok(axes)
    }
}

/// Reads, validates and resolves a config file. `seed_override` is the raw
/// value of [`SEED_ENV`], if set.
pub fn load(path: &Path, seed_override: Option<&str>) -> Result<Experiment> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse(&text, base_dir, seed_override)
}

pub fn parse(text: &str, base_dir: PathBuf, seed_override: Option<&str>) -> Result<Experiment> {
    let mut config: ExperimentConfig =
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
    if let Some(raw) = seed_override {
        config.model.seed = raw
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
    }
    config.model.validate()?;
    config.policy.validate()?;

    let prompt = match &config.prompt {
        PromptSource::Tokens(t) => t.clone(),
        PromptSource::Text(s) => text_prompt(s, &config.model)?,
        PromptSource::File(p) => {
            let full = base_dir.join(p);
            let s = fs::read_to_string(&full)
                .map_err(|e| CliError::Config(format!("cannot read prompt file {}: {e}", full.display())))?;
            text_prompt(&s, &config.model)?
        }
    };
    let gen = GenConfig {
        steps: config.gen.steps,
        gen_len: config.gen.gen_len,
        block_len: config.gen.block_len,
        prompt,
    };
    gen.validate(&config.model)?;
    Ok(Experiment { config, gen, base_dir })
}

fn text_prompt(s: &str, model: &ModelConfig) -> Result<Vec<TokenId>> {
    if model.vocab_size < MIN_VOCAB {
        return Err(CliError::Config(format!(
            "text prompts need vocab_size >= {MIN_VOCAB} (got {})",
            model.vocab_size
        )));
    }
    Ok(tokenize_bytes(s))
}
