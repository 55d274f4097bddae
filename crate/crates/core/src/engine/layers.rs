//! The four per-layer cache cases.
//!
//! Each takes the layer input over the full `[prompt ; response]` sequence,
//! updates the caches it owns, and returns the layer output. Prompt rows
//! come first; `M = cache.prompt_len()` splits the two sides.

use crate::cache::{DualCache, Feature, LayerFeatures, Side};
use crate::error::Result;
use crate::metrics::FlopCounter;
use crate::model::{ModelParams, Projection, NORM_EPS};
use crate::policy::{score_tokens, select_update_indices, SimilarityMetric};
use crate::tensor::{add, concat_rows, gather_rows, layer_norm, Matrix};

use super::reference::layer_forward;

/// Where a layer call runs: which weights, which layer, which step.
#[derive(Clone, Copy)]
pub struct LayerStep<'a> {
    pub params: &'a ModelParams,
    pub layer: usize,
    /// Denoising step `k`, recorded on every cache write.
    pub step: usize,
}

/// Layer output plus the number of token rows whose features were
/// recomputed.
#[derive(Clone, Debug)]
pub struct LayerOutcome {
    pub out: Matrix,
    pub recomputed: usize,
}

/// Case 1 (and the step-`K` initialization): everything recomputed, all
/// eight cache matrices replaced.
pub fn full_refresh(
    at: LayerStep<'_>,
    x_in: &Matrix,
    cache: &mut DualCache,
    flops: &mut FlopCounter,
) -> Result<LayerOutcome> {
    let m = cache.prompt_len();
    let (out, feats) = layer_forward(at.params, at.layer, x_in, flops)?;
    let (k_p, k_r) = feats.k.split_rows(m)?;
    let (v_p, v_r) = feats.v.split_rows(m)?;
    let (a_p, a_r) = feats.attn_out.split_rows(m)?;
    let (f_p, f_r) = feats.ffn_out.split_rows(m)?;
    cache.replace_segment(
        at.layer,
        Side::Prompt,
        LayerFeatures {
            k: k_p,
            v: v_p,
            attn_out: a_p,
            ffn_out: f_p,
        },
        at.step,
    )?;
    cache.replace_segment(
        at.layer,
        Side::Response,
        LayerFeatures {
            k: k_r,
            v: v_r,
            attn_out: a_r,
            ffn_out: f_r,
        },
        at.step,
    )?;
    Ok(LayerOutcome {
        out,
        recomputed: x_in.rows(),
    })
}

/// Recomputes one side against the other side's cached keys and values,
/// reusing the other side's cached attention and FFN outputs.
fn refresh_one_side(
    at: LayerStep<'_>,
    x_in: &Matrix,
    cache: &mut DualCache,
    fresh: Side,
    flops: &mut FlopCounter,
) -> Result<LayerOutcome> {
    let m = cache.prompt_len();
    let (x_p, x_r) = x_in.split_rows(m)?;
    let (x_fresh, stale) = match fresh {
        Side::Prompt => (x_p, Side::Response),
        Side::Response => (x_r, Side::Prompt),
    };
    let other = cache.read(at.layer, stale)?.clone();

    let x_norm = layer_norm(&x_fresh, NORM_EPS);
    let (q, k, v) = at.params.qkv_project(at.layer, &x_norm, flops)?;
    let (keys, values) = match fresh {
        Side::Prompt => (concat_rows(&k, &other.k)?, concat_rows(&v, &other.v)?),
        Side::Response => (concat_rows(&other.k, &k)?, concat_rows(&other.v, &v)?),
    };
    let attn = at.params.attention(at.layer, &q, &keys, &values, flops)?;
    let attn_all = match fresh {
        Side::Prompt => concat_rows(&attn, &other.attn_out)?,
        Side::Response => concat_rows(&other.attn_out, &attn)?,
    };
    let h = add(x_in, &attn_all)?;
    let (h_p, h_r) = h.split_rows(m)?;
    let h_fresh = match fresh {
        Side::Prompt => h_p,
        Side::Response => h_r,
    };
    let ffn = at.params.ffn(at.layer, &layer_norm(&h_fresh, NORM_EPS), flops)?;
    let ffn_all = match fresh {
        Side::Prompt => concat_rows(&ffn, &other.ffn_out)?,
        Side::Response => concat_rows(&other.ffn_out, &ffn)?,
    };
    let out = add(&h, &ffn_all)?;
    let recomputed = x_fresh.rows();
    cache.replace_segment(
        at.layer,
        fresh,
        LayerFeatures {
            k,
            v,
            attn_out: attn,
            ffn_out: ffn,
        },
        at.step,
    )?;
    Ok(LayerOutcome { out, recomputed })
}

/// Case 2: fresh prompt features; response keys, values and outputs from
/// the cache.
pub fn prompt_only(
    at: LayerStep<'_>,
    x_in: &Matrix,
    cache: &mut DualCache,
    flops: &mut FlopCounter,
) -> Result<LayerOutcome> {
    refresh_one_side(at, x_in, cache, Side::Prompt, flops)
}

/// Case 3: fresh response features; prompt keys, values and outputs from
/// the cache.
pub fn response_only(
    at: LayerStep<'_>,
    x_in: &Matrix,
    cache: &mut DualCache,
    flops: &mut FlopCounter,
) -> Result<LayerOutcome> {
    refresh_one_side(at, x_in, cache, Side::Response, flops)
}

/// Case 4: no refresh due.
///
/// With `ratio > 0` the response values are recomputed in full and
/// compared against the cache; the `⌊ratio·L⌋` most-changed tokens get
/// fresh queries, keys, attention and FFN outputs, scattered into the
/// cache. The value cache is replaced wholesale. Unselected tokens keep
/// their cached attention output even though the values underneath it
/// moved.
///
/// With `ratio == 0` the layer is pure cache retrieval and costs nothing.
pub fn adaptive(
    at: LayerStep<'_>,
    x_in: &Matrix,
    cache: &mut DualCache,
    ratio: f64,
    metric: SimilarityMetric,
    flops: &mut FlopCounter,
) -> Result<LayerOutcome> {
    let m = cache.prompt_len();
    let prompt = cache.read(at.layer, Side::Prompt)?.clone();

    if ratio <= 0.0 {
        let resp = cache.read(at.layer, Side::Response)?;
        let h = add(x_in, &concat_rows(&prompt.attn_out, &resp.attn_out)?)?;
        let out = add(&h, &concat_rows(&prompt.ffn_out, &resp.ffn_out)?)?;
        return Ok(LayerOutcome { out, recomputed: 0 });
    }

    let (_, x_r) = x_in.split_rows(m)?;
    let x_norm = layer_norm(&x_r, NORM_EPS);
    let v_new = at.params.project(at.layer, Projection::Value, &x_norm, flops)?;
    let scores = score_tokens(&v_new, &cache.read(at.layer, Side::Response)?.v, metric)?;
    let idx = select_update_indices(&scores, ratio, metric);

    let x_sel = gather_rows(&x_norm, &idx)?;
    let q_sel = at.params.project(at.layer, Projection::Query, &x_sel, flops)?;
    let k_sel = at.params.project(at.layer, Projection::Key, &x_sel, flops)?;
    cache.scatter_update_segment(at.layer, Side::Response, &idx, &[(Feature::Key, &k_sel)], at.step)?;
    cache.replace_feature(at.layer, Side::Response, Feature::Value, v_new, at.step)?;

    let attn_sel = {
        let resp = cache.read(at.layer, Side::Response)?;
        let keys = concat_rows(&prompt.k, &resp.k)?;
        let values = concat_rows(&prompt.v, &resp.v)?;
        at.params.attention(at.layer, &q_sel, &keys, &values, flops)?
    };
    cache.scatter_update_segment(
        at.layer,
        Side::Response,
        &idx,
        &[(Feature::AttnOut, &attn_sel)],
        at.step,
    )?;

    let h = add(
        x_in,
        &concat_rows(&prompt.attn_out, &cache.read(at.layer, Side::Response)?.attn_out)?,
    )?;
    let (_, h_r) = h.split_rows(m)?;
    let h_sel = gather_rows(&h_r, &idx)?;
    let ffn_sel = at.params.ffn(at.layer, &layer_norm(&h_sel, NORM_EPS), flops)?;
    cache.scatter_update_segment(at.layer, Side::Response, &idx, &[(Feature::FfnOut, &ffn_sel)], at.step)?;

    let out = add(
        &h,
        &concat_rows(&prompt.ffn_out, &cache.read(at.layer, Side::Response)?.ffn_out)?,
    )?;
    Ok(LayerOutcome {
        out,
        recomputed: idx.len(),
    })
}
