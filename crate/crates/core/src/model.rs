//! Toy bidirectional transformer used as the mask predictor.
//!
//! Pre-norm residual layers (`h = x + Attn(LN(x))`, `out = h + FFN(LN(h))`),
//! no biases, no dropout, fixed sinusoidal positions, and an untied logit
//! head behind a final norm. Weights are seeded Gaussian draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::engine::SequenceState;
use crate::error::{contract, Error, Result};
use crate::metrics::FlopCounter;
use crate::tensor::{self, layer_norm, softmax_in_place, Matrix, PackedRhs};

pub type TokenId = u32;

/// Variance floor used by every layer norm in the model.
pub const NORM_EPS: f64 = 1e-5;

/// Standard deviation of the initial weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Includes the mask token.
    pub vocab_size: usize,
    pub mask_token_id: TokenId,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            vocab_size: 258,
            mask_token_id: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.mask_token_id as usize >= self.vocab_size {
            return Err(Error::Config(format!(
                "mask_token_id {} outside vocabulary of {}",
                self.mask_token_id, self.vocab_size
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocabulary needs at least one non-mask token".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Bias-free linear map `x ↦ x·W` with `W` of shape `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    weight: Matrix,
    packed: PackedRhs,
}

impl Linear {
    fn new(weight: Matrix) -> Self {
        let packed = PackedRhs::new(&weight);
        Self { weight, packed }
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn forward(&self, x: &Matrix, flops: &mut FlopCounter) -> Result<Matrix> {
        let out = self.packed.left_mul(x)?;
        flops.add_matmul(x.rows(), x.cols(), self.packed.cols());
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    Query,
    Key,
    Value,
}

/// Immutable model weights. Construction is a pure function of the config.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    cfg: ModelConfig,
    embedding: Matrix,
    layers: Vec<LayerWeights>,
    head: Linear,
}

/// Greedy decoding result over the response positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<TokenId>,
    pub confidence: Vec<f64>,
}

/// Argmax over `logits` skipping `exclude`, lowest id on ties. Returns the
/// chosen id and its softmax probability over the full row.
pub fn greedy_pick(logits: &[f32], exclude: Option<usize>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f32)> = None;
    for (id, &l) in logits.iter().enumerate() {
        if Some(id) == exclude {
            continue;
        }
        if best.is_none_or(|(_, b)| l > b) {
            best = Some((id, l));
        }
    }
    let (id, _) = best?;
    let mut probs: Vec<f64> = logits.iter().map(|&l| f64::from(l)).collect();
    softmax_in_place(&mut probs);
    Some((id, probs[id]))
}

/// Sinusoidal position code for `pos` at feature `i` of a `dim`-wide row.
fn position_code(pos: usize, i: usize, dim: usize) -> f32 {
    let pair = (i / 2) as f64;
    let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
    if i.is_multiple_of(2) {
        angle.sin() as f32
    } else {
        angle.cos() as f32
    }
}

impl ModelParams {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");
        let mut draw = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| normal.sample(&mut rng) as f32).collect();
            Matrix::from_vec(rows, cols, data).expect("sized buffer")
        };
        let (d, f) = (cfg.hidden_dim, cfg.ffn_dim);
        let embedding = draw(cfg.vocab_size, d);
        let layers = (0..cfg.num_layers)
            .map(|_| LayerWeights {
                q: Linear::new(draw(d, d)),
                k: Linear::new(draw(d, d)),
                v: Linear::new(draw(d, d)),
                out: Linear::new(draw(d, d)),
                up: Linear::new(draw(d, f)),
                down: Linear::new(draw(f, d)),
            })
            .collect();
        let head = Linear::new(draw(d, cfg.vocab_size));
        Ok(Self {
            cfg: cfg.clone(),
            embedding,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embedding
    }

    pub fn layer(&self, layer: usize) -> Result<&LayerWeights> {
        self.layers
            .get(layer)
            .ok_or_else(|| Error::Contract(format!("layer {layer} out of range for {} layers", self.layers.len())))
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// Token embeddings plus sinusoidal positions; row `t` sits at position `t`.
    pub fn embed(&self, tokens: &[TokenId]) -> Result<Matrix> {
        let d = self.cfg.hidden_dim;
        let mut out = Matrix::zeros(tokens.len(), d);
        for (pos, &tok) in tokens.iter().enumerate() {
            contract!(
                (tok as usize) < self.cfg.vocab_size,
                "token id {tok} outside vocabulary of {}",
                self.cfg.vocab_size
            );
            let src = self.embedding.row(tok as usize);
            for (i, (dst, &e)) in out.row_mut(pos).iter_mut().zip(src).enumerate() {
                *dst = e + position_code(pos, i, d);
            }
        }
        Ok(out)
    }

    pub fn project(&self, layer: usize, which: Projection, x_norm: &Matrix, flops: &mut FlopCounter) -> Result<Matrix> {
        let w = self.layer(layer)?;
        let lin = match which {
            Projection::Query => &w.q,
            Projection::Key => &w.k,
            Projection::Value => &w.v,
        };
        lin.forward(x_norm, flops)
    }

    pub fn qkv_project(
        &self,
        layer: usize,
        x_norm: &Matrix,
        flops: &mut FlopCounter,
    ) -> Result<(Matrix, Matrix, Matrix)> {
        Ok((
            self.project(layer, Projection::Query, x_norm, flops)?,
            self.project(layer, Projection::Key, x_norm, flops)?,
            self.project(layer, Projection::Value, x_norm, flops)?,
        ))
    }

    /// Multi-head scaled dot-product attention without a causal mask,
    /// followed by the output projection. `q` may cover any subset of the
    /// tokens whose keys and values are in `k`/`v`; each query row is
    /// computed independently.
    pub fn attention(
        &self,
        layer: usize,
        q: &Matrix,
        k: &Matrix,
        v: &Matrix,
        flops: &mut FlopCounter,
    ) -> Result<Matrix> {
        let d = self.cfg.hidden_dim;
        contract!(
            q.cols() == d && k.cols() == d && v.cols() == d,
            "attention operands must be {d} wide (q {}, k {}, v {})",
            q.cols(),
            k.cols(),
            v.cols()
        );
        contract!(
            k.rows() == v.rows(),
            "attention has {} keys but {} values",
            k.rows(),
            v.rows()
        );
        let w = self.layer(layer)?;
        let mixed = tensor::attend(q, k, v, self.cfg.num_heads)?;
        let n = k.rows();
        // QKᵀ and PV.
        flops.add_matmul(q.rows(), d, n);
        flops.add_matmul(q.rows(), n, d);
        w.out.forward(&mixed, flops)
    }

    pub fn ffn(&self, layer: usize, h_norm: &Matrix, flops: &mut FlopCounter) -> Result<Matrix> {
        let w = self.layer(layer)?;
        let mut hidden = w.up.forward(h_norm, flops)?;
        for i in 0..hidden.rows() {
            for x in hidden.row_mut(i) {
                *x = tensor::gelu(*x);
            }
        }
        w.down.forward(&hidden, flops)
    }

    /// Logits for the response rows of `hidden` (full-sequence final layer
    /// output), after the final norm.
    pub fn response_logits(&self, hidden: &Matrix, prompt_len: usize, flops: &mut FlopCounter) -> Result<Matrix> {
        let response = hidden.slice_rows(prompt_len, hidden.rows())?;
        self.head.forward(&layer_norm(&response, NORM_EPS), flops)
    }

    /// Per-position greedy prediction for every still-masked response
    /// position. The mask token never wins the argmax. Positions that are
    /// already committed keep their token with confidence 1.
    pub fn decode_greedy(&self, hidden: &Matrix, state: &SequenceState, flops: &mut FlopCounter) -> Result<Decoded> {
        let m = state.prompt().len();
        contract!(
            hidden.rows() == m + state.response().len(),
            "hidden state has {} rows, sequence has {}",
            hidden.rows(),
            m + state.response().len()
        );
        let logits = self.response_logits(hidden, m, flops)?;
        let mask = self.cfg.mask_token_id as usize;
        let mut tokens = Vec::with_capacity(logits.rows());
        let mut confidence = Vec::with_capacity(logits.rows());
        for (j, row) in logits.iter_rows().enumerate() {
            if state.is_masked(j) {
                let (id, conf) = greedy_pick(row, Some(mask)).expect("vocabulary has a non-mask token");
                tokens.push(id as TokenId);
                confidence.push(conf);
            } else {
                tokens.push(state.response()[j]);
                confidence.push(1.0);
            }
        }
        Ok(Decoded { tokens, confidence })
    }
}
