//! Tape-free inference with a per-layer key/value cache.
//!
//! The same block routine serves the prompt pass (many query rows) and
//! single-token decode steps. Pruning is decided once, during the prompt
//! pass; a pruned token's keys and values are never created for later
//! layers, so decode steps cannot attend to it there.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use super::config::{TokenId, TokenLayout};
use super::forward::{validate_request, ForwardOptions, LN_EPS};
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::numerics::{gelu, layer_norm, masked_row_softmax, matmul, matmul_nt, Mask, Matrix};
use crate::perturb::{Intervention, TOP_K};
use crate::prune::{self, PruneSchedule};

#[derive(Clone, Debug, Default)]
struct LayerCache {
    positions: Vec<usize>,
    keys: Matrix,
    values: Matrix,
}

/// Keys and values of every processed token that survives at each layer.
#[derive(Clone, Debug)]
pub struct KvCache {
    layers: Vec<LayerCache>,
    next_position: usize,
    keep_map: Vec<Vec<usize>>,
}

impl KvCache {
    /// Original positions cached at block `layer`.
    pub fn positions(&self, layer: usize) -> &[usize] {
        &self.layers[layer].positions
    }

    /// Positions that entered each block during the prompt pass.
    pub fn keep_map(&self) -> &[Vec<usize>] {
        &self.keep_map
    }
}

struct Blocking<'a> {
    layout: &'a TokenLayout,
    receivers: BTreeSet<usize>,
    iv: &'a Intervention,
}

/// Runs block `l` for `x` (rows at `rows_pos`), appending their keys/values
/// to `cache` first. Returns the block output and per-head attention.
fn block(
    params: &ModelParams,
    l: usize,
    x: &Matrix,
    rows_pos: &[usize],
    cache: &mut LayerCache,
    blocking: Option<&Blocking<'_>>,
) -> Result<(Matrix, Vec<Matrix>)> {
    let cfg = &params.config;
    let lp = &params.layers[l];
    let (heads, dh) = (cfg.heads, cfg.head_dim());
    let scale = 1.0 / libm::sqrt(dh as f64);

    let (h, _) = layer_norm(x, &lp.ln1_gain, &lp.ln1_bias, LN_EPS)?;
    let q = matmul(&h, &lp.wq)?;
    let k = matmul(&h, &lp.wk)?;
    let v = matmul(&h, &lp.wv)?;
    cache.keys.append_rows(&k)?;
    cache.values.append_rows(&v)?;
    cache.positions.extend_from_slice(rows_pos);

    let cpos = &cache.positions;
    let mask = Mask::from_fn(rows_pos.len(), cpos.len(), |r, c| cpos[c] <= rows_pos[r]);
    let blocked: Vec<(usize, usize)> = match blocking {
        Some(b) if b.iv.targets(l) => {
            let mut out = Vec::new();
            for (r, p) in rows_pos.iter().enumerate() {
                if b.receivers.contains(p) {
                    for (c, &cp) in cpos.iter().enumerate() {
                        if cp <= *p && b.layout.is_image(cp) {
                            out.push((r, c));
                        }
                    }
                }
            }
            out
        }
        _ => Vec::new(),
    };

    let mut attn = Vec::with_capacity(heads);
    let mut outs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = q.slice_cols(hd * dh, dh)?;
        let kh = cache.keys.slice_cols(hd * dh, dh)?;
        let vh = cache.values.slice_cols(hd * dh, dh)?;
        let s = matmul_nt(&qh, &kh)?.scale(scale);
        let mut a = masked_row_softmax(&s, &mask)?;
        for &(r, c) in &blocked {
            a.set(r, c, 0.0);
        }
        outs.push(matmul(&a, &vh)?);
        attn.push(a);
    }
    let refs: Vec<&Matrix> = outs.iter().collect();
    let o = matmul(&Matrix::concat_cols(&refs)?, &lp.wo)?;
    let x = x.add(&o)?;
    let (h2, _) = layer_norm(&x, &lp.ln2_gain, &lp.ln2_bias, LN_EPS)?;
    let f = matmul(&gelu(&matmul(&h2, &lp.ffn_up)?), &lp.ffn_down)?;
    Ok((x.add(&f)?, attn))
}

fn embed(params: &ModelParams, tokens: &[TokenId], start: usize) -> Result<Matrix> {
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let pos: Vec<usize> = (start..start + tokens.len()).collect();
    params
        .token_embed
        .select_rows(&ids)?
        .add(&params.pos_embed.select_rows(&pos)?)
}

fn head_logits(params: &ModelParams, x: &Matrix) -> Result<Matrix> {
    let (h, _) = layer_norm(x, &params.final_gain, &params.final_bias, LN_EPS)?;
    let logits = matmul(&h, &params.head)?;
    if !logits.all_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(logits)
}

/// Prompt pass. Returns the logits of the last prompt position and the cache.
pub(crate) fn prefill(
    params: &ModelParams,
    prompt: &[TokenId],
    layout: &TokenLayout,
    intervention: Option<&Intervention>,
    schedule: Option<&PruneSchedule>,
) -> Result<(Vec<f64>, KvCache)> {
    let opts = ForwardOptions {
        intervention,
        schedule,
        ..Default::default()
    };
    validate_request(params, prompt, layout, &opts)?;
    let blocking = intervention.map(|iv| Blocking {
        layout,
        receivers: iv.receivers(layout),
        iv,
    });
    let mut cache = KvCache {
        layers: (0..params.config.layers).map(|_| LayerCache::default()).collect(),
        next_position: prompt.len(),
        keep_map: Vec::with_capacity(params.config.layers),
    };
    let mut x = embed(params, prompt, 0)?;
    let mut positions: Vec<usize> = (0..prompt.len()).collect();
    for l in 0..params.config.layers {
        cache.keep_map.push(positions.clone());
        let (out, attn) = block(params, l, &x, &positions, &mut cache.layers[l], blocking.as_ref())?;
        x = out;
        if let Some(stage) = schedule.and_then(|s| s.stage_after_block(l)) {
            let (survivors, _) = prune::apply_stage(&attn, &positions, layout, stage)?;
            if survivors.len() != positions.len() {
                let local: Vec<usize> = survivors
                    .iter()
                    .map(|p| positions.binary_search(p).expect("survivors are a subset"))
                    .collect();
                x = x.select_rows(&local)?;
                positions = survivors;
            }
        }
    }
    let logits = head_logits(params, &x)?;
    Ok((logits.row(logits.rows() - 1).to_vec(), cache))
}

/// One decode step for `token` at the next position.
fn decode_step(params: &ModelParams, token: TokenId, cache: &mut KvCache) -> Result<Vec<f64>> {
    let pos = cache.next_position;
    if pos >= params.config.max_seq {
        return Err(Error::Overflow {
            len: pos + 1,
            max: params.config.max_seq,
        });
    }
    let mut x = embed(params, &[token], pos)?;
    for l in 0..params.config.layers {
        let (out, _) = block(params, l, &x, &[pos], &mut cache.layers[l], None)?;
        x = out;
    }
    cache.next_position += 1;
    Ok(head_logits(params, &x)?.row(0).to_vec())
}

/// Index of the largest logit; ties go to the lower token id.
pub fn argmax(logits: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// The `k` largest logits, ordered by descending logit then ascending id.
pub fn top_k(logits: &[f64], k: usize) -> Vec<TokenId> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| i as TokenId).collect()
}

/// Greedy next-token prediction at the end of a prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub token: TokenId,
    pub top5: [TokenId; TOP_K],
    pub logits: Vec<f64>,
}

/// Predicts the token following `prompt`.
pub fn predict(
    params: &ModelParams,
    prompt: &[TokenId],
    layout: &TokenLayout,
    intervention: Option<&Intervention>,
    schedule: Option<&PruneSchedule>,
) -> Result<Prediction> {
    if params.config.vocab < TOP_K {
        return Err(Error::Config("vocabulary smaller than the top-5 set".into()));
    }
    let (logits, _) = prefill(params, prompt, layout, intervention, schedule)?;
    let mut top5 = [0; TOP_K];
    top5.copy_from_slice(&top_k(&logits, TOP_K));
    Ok(Prediction {
        token: argmax(&logits),
        top5,
        logits,
    })
}

/// Greedy decoding of up to `max_new` tokens after `prompt`.
pub fn generate(
    params: &ModelParams,
    prompt: &[TokenId],
    layout: &TokenLayout,
    max_new: usize,
    schedule: Option<&PruneSchedule>,
) -> Result<Vec<TokenId>> {
    generate_with_cache(params, prompt, layout, max_new, schedule).map(|(tokens, _)| tokens)
}

/// Generation that also returns the cache (for inspection in tests and tools).
pub fn generate_with_cache(
    params: &ModelParams,
    prompt: &[TokenId],
    layout: &TokenLayout,
    max_new: usize,
    schedule: Option<&PruneSchedule>,
) -> Result<(Vec<TokenId>, KvCache)> {
    let total = prompt.len() + max_new;
    if total > params.config.max_seq {
        return Err(Error::Overflow {
            len: total,
            max: params.config.max_seq,
        });
    }
    let (mut logits, mut cache) = prefill(params, prompt, layout, None, schedule)?;
    let mut out = Vec::with_capacity(max_new);
    while out.len() < max_new {
        let next = argmax(&logits);
        out.push(next);
        if out.len() < max_new {
            logits = decode_step(params, next, &mut cache)?;
        }
    }
    Ok((out, cache))
}
