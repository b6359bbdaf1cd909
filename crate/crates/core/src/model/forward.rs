//! Tape-recorded forward pass with attention capture.

use alloc::vec::Vec;

use super::config::{TokenId, TokenLayout};
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::numerics::{Gradients, Mask, Matrix, Tape, Var};
use crate::perturb::Intervention;
use crate::prune::{self, ImportanceScores, PruneSchedule};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Cross-entropy target: predict `token` from the hidden state at `position`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTarget {
    pub position: usize,
    pub token: TokenId,
}

/// Additive perturbation of one recorded attention matrix, applied after any
/// intervention. Used to differentiate the loss numerically with respect to
/// `A_{h,l}`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionDelta<'a> {
    pub layer: usize,
    pub head: usize,
    pub delta: &'a Matrix,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub intervention: Option<&'a Intervention>,
    pub schedule: Option<&'a PruneSchedule>,
    pub want_grads: bool,
    pub loss_target: Option<LossTarget>,
    pub attention_delta: Option<AttentionDelta<'a>>,
}

/// Scores and survivors of one executed pruning stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageRecord {
    /// Block (0-based) whose attention was ranked.
    pub block: usize,
    pub scores: ImportanceScores,
    pub kept: Vec<usize>,
}

/// Everything a forward pass records.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `attention[l][h]`: the matrix actually used for value mixing, indexed by
    /// the positions in `keep_map[l]`.
    pub attention: Vec<Vec<Matrix>>,
    /// `∂ℒ/∂A` for every entry of `attention`, when requested.
    pub attention_grad: Option<Vec<Vec<Matrix>>>,
    /// Logits for every position surviving the last block, rows ordered as
    /// `keep_map.last()`.
    pub logits: Matrix,
    /// Original positions entering each block.
    pub keep_map: Vec<Vec<usize>>,
    pub loss: Option<f64>,
    pub stages: Vec<StageRecord>,
}

impl ForwardTrace {
    /// Logit row of original position `position`, if it survived.
    pub fn logits_at(&self, position: usize) -> Option<&[f64]> {
        let last = self.keep_map.last()?;
        let row = last.binary_search(&position).ok()?;
        Some(self.logits.row(row))
    }

    pub fn layers(&self) -> usize {
        self.attention.len()
    }
}

pub(crate) struct Graph {
    pub tape: Tape,
    pub params: Vec<Var>,
    pub attention: Vec<Vec<Var>>,
    pub logits: Var,
    pub loss: Option<Var>,
    pub keep_map: Vec<Vec<usize>>,
    pub stages: Vec<StageRecord>,
}

struct LayerVars {
    ln1_gain: Var,
    ln1_bias: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    ffn_up: Var,
    ffn_down: Var,
}

pub(crate) fn validate_request(
    params: &ModelParams,
    tokens: &[TokenId],
    layout: &TokenLayout,
    opts: &ForwardOptions<'_>,
) -> Result<()> {
    let cfg = &params.config;
    if tokens.is_empty() {
        return Err(Error::Layout("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq {
        return Err(Error::Overflow {
            len: tokens.len(),
            max: cfg.max_seq,
        });
    }
    layout.check_len(tokens.len())?;
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(Error::Index {
            what: "token id",
            index: t as usize,
            limit: cfg.vocab,
        });
    }
    if let Some(iv) = opts.intervention {
        iv.validate(cfg.layers)?;
    }
    if let Some(s) = opts.schedule {
        s.validate(Some(cfg.layers))?;
        if opts.want_grads && !s.is_empty() {
            return Err(Error::Unsupported(
                "gradients requested with pruning active; saliency is defined on the unpruned model",
            ));
        }
        if opts.intervention.is_some() && !s.is_empty() {
            return Err(Error::Unsupported(
                "pruning criteria are evaluated on intervention-free attention",
            ));
        }
    }
    if let Some(t) = opts.loss_target {
        if t.position >= tokens.len() {
            return Err(Error::Index {
                what: "loss target position",
                index: t.position,
                limit: tokens.len(),
            });
        }
        if t.token as usize >= cfg.vocab {
            return Err(Error::Index {
                what: "loss target token",
                index: t.token as usize,
                limit: cfg.vocab,
            });
        }
    } else if opts.want_grads {
        return Err(Error::MissingState("loss target required for gradients"));
    }
    if let Some(d) = opts.attention_delta {
        if d.layer >= cfg.layers || d.head >= cfg.heads {
            return Err(Error::Index {
                what: "attention delta layer/head",
                index: d.layer.max(d.head),
                limit: cfg.layers,
            });
        }
    }
    Ok(())
}

/// Records the full forward computation on a fresh tape.
pub(crate) fn build_graph(
    params: &ModelParams,
    tokens: &[TokenId],
    layout: &TokenLayout,
    opts: &ForwardOptions<'_>,
) -> Result<Graph> {
    validate_request(params, tokens, layout, opts)?;
    let cfg = &params.config;
    let (heads, dh) = (cfg.heads, cfg.head_dim());
    let scale = 1.0 / libm::sqrt(dh as f64);

    let mut tape = Tape::new();
    let param_vars: Vec<Var> = params
        .tensors()
        .into_iter()
        .map(|t| tape.leaf(t.clone()))
        .collect();
    let token_embed = param_vars[0];
    let pos_embed = param_vars[1];
    let layer_vars: Vec<LayerVars> = param_vars[2..2 + 10 * cfg.layers]
        .chunks(10)
        .map(|c| LayerVars {
            ln1_gain: c[0],
            ln1_bias: c[1],
            wq: c[2],
            wk: c[3],
            wv: c[4],
            wo: c[5],
            ln2_gain: c[6],
            ln2_bias: c[7],
            ffn_up: c[8],
            ffn_down: c[9],
        })
        .collect();
    let tail = 2 + 10 * cfg.layers;
    let (final_gain, final_bias, head_w) = (param_vars[tail], param_vars[tail + 1], param_vars[tail + 2]);

    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let mut positions: Vec<usize> = (0..tokens.len()).collect();
    let tok = tape.gather_rows(token_embed, &ids)?;
    let pos = tape.gather_rows(pos_embed, &positions)?;
    let mut x = tape.add(tok, pos)?;

    let mut keep_map = Vec::with_capacity(cfg.layers);
    let mut attention = Vec::with_capacity(cfg.layers);
    let mut stages = Vec::new();
    let mut mask = Mask::causal(positions.len());

    for (l, lv) in layer_vars.iter().enumerate() {
        keep_map.push(positions.clone());
        let h = tape.layer_norm(x, lv.ln1_gain, lv.ln1_bias, LN_EPS)?;
        let q = tape.matmul(h, lv.wq)?;
        let k = tape.matmul(h, lv.wk)?;
        let v = tape.matmul(h, lv.wv)?;
        let blocked = match opts.intervention {
            Some(iv) if iv.targets(l) => iv.blocked_entries(layout, &positions),
            _ => Vec::new(),
        };
        let mut layer_attn = Vec::with_capacity(heads);
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = tape.slice_cols(q, hd * dh, dh)?;
            let kh = tape.slice_cols(k, hd * dh, dh)?;
            let vh = tape.slice_cols(v, hd * dh, dh)?;
            let s = tape.matmul_nt(qh, kh)?;
            let s = tape.scale(s, scale);
            let mut a = tape.masked_softmax(s, &mask)?;
            if !blocked.is_empty() {
                a = tape.zero_entries(a, &blocked);
            }
            if let Some(d) = opts.attention_delta.filter(|d| d.layer == l && d.head == hd) {
                let c = tape.leaf(d.delta.clone());
                a = tape.add(a, c)?;
            }
            layer_attn.push(a);
            outs.push(tape.matmul(a, vh)?);
        }
        let o = tape.concat_cols(&outs)?;
        let o = tape.matmul(o, lv.wo)?;
        x = tape.add(x, o)?;
        let h2 = tape.layer_norm(x, lv.ln2_gain, lv.ln2_bias, LN_EPS)?;
        let up = tape.matmul(h2, lv.ffn_up)?;
        let act = tape.gelu(up);
        let down = tape.matmul(act, lv.ffn_down)?;
        x = tape.add(x, down)?;

        if let Some(stage) = opts.schedule.and_then(|s| s.stage_after_block(l)) {
            let mats: Vec<Matrix> = layer_attn.iter().map(|&a| tape.value(a).clone()).collect();
            let (survivors, scores) = prune::apply_stage(&mats, &positions, layout, stage)?;
            let local: Vec<usize> = survivors
                .iter()
                .map(|p| positions.binary_search(p).expect("survivors are a subset"))
                .collect();
            stages.push(StageRecord {
                block: l,
                kept: survivors.iter().copied().filter(|&p| layout.is_image(p)).collect(),
                scores,
            });
            if survivors.len() != positions.len() {
                x = tape.gather_rows(x, &local)?;
                positions = survivors;
                mask = Mask::causal(positions.len());
            }
        }
        attention.push(layer_attn);
    }

    let hf = tape.layer_norm(x, final_gain, final_bias, LN_EPS)?;
    let logits = tape.matmul(hf, head_w)?;
    let loss = match opts.loss_target {
        Some(t) => {
            let row = positions.binary_search(&t.position).map_err(|_| Error::Index {
                what: "loss target position (pruned)",
                index: t.position,
                limit: tokens.len(),
            })?;
            Some(tape.cross_entropy(logits, row, t.token as usize)?)
        }
        None => None,
    };
    Ok(Graph {
        tape,
        params: param_vars,
        attention,
        logits,
        loss,
        keep_map,
        stages,
    })
}

/// Runs the decoder over `tokens` and records its attention.
///
/// With `want_grads`, the cross-entropy at `loss_target` is backpropagated and
/// `∂ℒ/∂A_{h,l}` stored for every layer and head.
pub fn forward(
    params: &ModelParams,
    tokens: &[TokenId],
    layout: &TokenLayout,
    opts: &ForwardOptions<'_>,
) -> Result<ForwardTrace> {
    let mut g = build_graph(params, tokens, layout, opts)?;
    let grads: Option<Gradients> = match (opts.want_grads, g.loss) {
        (true, Some(loss)) => Some(g.tape.backward(loss)?),
        _ => None,
    };
    let attention_grad = grads.map(|mut gr| {
        g.attention
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|&a| {
                        let (r, c) = g.tape.value(a).shape();
                        gr.take(a).unwrap_or_else(|| Matrix::zeros(r, c))
                    })
                    .collect()
            })
            .collect()
    });
    let logits = g.tape.value(g.logits).clone();
    if !logits.all_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(ForwardTrace {
        attention: g
            .attention
            .iter()
            .map(|layer| layer.iter().map(|&a| g.tape.value(a).clone()).collect())
            .collect(),
        attention_grad,
        logits,
        keep_map: g.keep_map,
        loss: g.loss.map(|l| g.tape.value(l).get(0, 0)),
        stages: g.stages,
    })
}
