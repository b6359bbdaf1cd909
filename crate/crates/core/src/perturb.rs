//! Attention-flow interventions and the metrics that measure their effect.
//!
//! Interventions zero entries of the post-softmax attention matrix of the
//! targeted layers and do not renormalise: a blocked row keeps only the mass
//! it had on unblocked entries.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, ModelParams, Prediction, TokenId, TokenLayout};
use crate::numerics::Matrix;
use crate::rng;
use crate::task::SyntheticExample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    /// Instruction rows stop reading image columns.
    VtBlock,
    /// Image rows stop reading image columns.
    VvBlock,
    /// A seeded random set of `|ℐ|` non-image rows stops reading image columns.
    VRandomBlock,
}

impl InterventionKind {
    pub fn name(self) -> &'static str {
        match self {
            InterventionKind::VtBlock => "vt",
            InterventionKind::VvBlock => "vv",
            InterventionKind::VRandomBlock => "random",
        }
    }
}

impl FromStr for InterventionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vt" | "vt_block" => Ok(Self::VtBlock),
            "vv" | "vv_block" => Ok(Self::VvBlock),
            "random" | "v_random_block" => Ok(Self::VRandomBlock),
            _ => Err(Error::Unsupported("unknown intervention kind")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intervention {
    pub kind: InterventionKind,
    /// Targeted blocks (0-based).
    pub layers: BTreeSet<usize>,
    #[serde(default)]
    pub random_seed: u64,
}

impl Intervention {
    pub fn new(kind: InterventionKind, layers: impl IntoIterator<Item = usize>) -> Self {
        Self {
            kind,
            layers: layers.into_iter().collect(),
            random_seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.random_seed = seed;
        self
    }

    pub fn targets(&self, layer: usize) -> bool {
        self.layers.contains(&layer)
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        match self.layers.iter().next_back() {
            Some(&l) if l >= layers => Err(Error::Index {
                what: "intervention layer",
                index: l,
                limit: layers,
            }),
            _ => Ok(()),
        }
    }

    /// Rows whose reads of image columns are blocked, as original indices.
    pub fn receivers(&self, layout: &TokenLayout) -> BTreeSet<usize> {
        match self.kind {
            InterventionKind::VtBlock => layout.ins_range().collect(),
            InterventionKind::VvBlock => layout.img_range().collect(),
            InterventionKind::VRandomBlock => {
                let pool: Vec<usize> = layout.sys_range().chain(layout.ins_range()).collect();
                let amount = layout.ins.min(pool.len());
                let mut r = rng::seeded(self.random_seed);
                rand::seq::index::sample(&mut r, pool.len(), amount)
                    .into_iter()
                    .map(|k| pool[k])
                    .collect()
            }
        }
    }

    /// Causally visible `(row, col)` entries to zero, in local indices of a
    /// matrix whose rows/columns are the original `positions`.
    pub fn blocked_entries(&self, layout: &TokenLayout, positions: &[usize]) -> Vec<(usize, usize)> {
        let receivers = self.receivers(layout);
        let mut out = Vec::new();
        for (r, &i) in positions.iter().enumerate() {
            if !receivers.contains(&i) {
                continue;
            }
            for (c, &j) in positions.iter().enumerate().take(r + 1) {
                if layout.is_image(j) {
                    out.push((r, c));
                }
            }
        }
        out
    }
}

/// Zeroes the blocked entries of the layer-`layer` attention `attn` (indexed by
/// full sequence positions). Leaves `attn` untouched when the layer is not
/// targeted.
pub fn apply_intervention(
    attn: &Matrix,
    layout: &TokenLayout,
    iv: &Intervention,
    layer: usize,
) -> Matrix {
    let mut out = attn.clone();
    if !iv.targets(layer) {
        return out;
    }
    let positions: Vec<usize> = (0..attn.rows()).collect();
    for (r, c) in iv.blocked_entries(layout, &positions) {
        out.set(r, c, 0.0);
    }
    out
}

/// Fraction of examples whose first predicted token is unchanged.
pub fn label_consistency(base: &[TokenId], pert: &[TokenId]) -> Result<f64> {
    if base.len() != pert.len() {
        return Err(Error::LengthMismatch {
            left: base.len(),
            right: pert.len(),
        });
    }
    if base.is_empty() {
        return Err(Error::EmptySegment("examples"));
    }
    let same = base.iter().zip(pert).filter(|(a, b)| a == b).count();
    Ok(same as f64 / base.len() as f64)
}

/// Fraction of examples whose whole generated sequence is unchanged.
pub fn sequence_label_consistency(base: &[Vec<TokenId>], pert: &[Vec<TokenId>]) -> Result<f64> {
    if base.len() != pert.len() {
        return Err(Error::LengthMismatch {
            left: base.len(),
            right: pert.len(),
        });
    }
    if base.is_empty() {
        return Err(Error::EmptySegment("examples"));
    }
    let same = base.iter().zip(pert).filter(|(a, b)| a == b).count();
    Ok(same as f64 / base.len() as f64)
}

pub const TOP_K: usize = 5;

fn check_set(set: &[TokenId]) -> Result<()> {
    let distinct: BTreeSet<_> = set.iter().collect();
    if set.len() != TOP_K || distinct.len() != TOP_K {
        return Err(Error::SetSize {
            expected: TOP_K,
            got: distinct.len().min(set.len()),
        });
    }
    Ok(())
}

/// Mean Jaccard similarity of per-example top-5 token sets.
pub fn score_consistency(base: &[Vec<TokenId>], pert: &[Vec<TokenId>]) -> Result<f64> {
    if base.len() != pert.len() {
        return Err(Error::LengthMismatch {
            left: base.len(),
            right: pert.len(),
        });
    }
    if base.is_empty() {
        return Err(Error::EmptySegment("examples"));
    }
    let mut total = 0.0;
    for (a, b) in base.iter().zip(pert) {
        check_set(a)?;
        check_set(b)?;
        let inter = a.iter().filter(|t| b.contains(t)).count();
        let union = 2 * TOP_K - inter;
        total += inter as f64 / union as f64;
    }
    Ok(total / base.len() as f64)
}

/// `E = C_base − C_pert`; negative values are kept.
pub fn prediction_bias(c_base: f64, c_pert: f64) -> f64 {
    c_base - c_pert
}

/// Biases at or below this are treated as zero by [`bias_ratio`].
pub const BIAS_FLOOR: f64 = 1e-9;

/// `D = ln(E_vv / E_vt)`, or `None` when either bias is not positive.
pub fn bias_ratio(e_vv: f64, e_vt: f64) -> Option<f64> {
    (e_vv > BIAS_FLOOR && e_vt > BIAS_FLOOR).then(|| libm::log(e_vv / e_vt))
}

/// Which consistency measure feeds the prediction bias.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasSource {
    #[default]
    Score,
    Label,
}

/// Inclusive block range `[start, end]`; `None` is the empty window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerWindow {
    pub start: usize,
    pub end: usize,
}

impl LayerWindow {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> {
        self.start..=self.end
    }
}

/// Parses `first2`, `last2`, `every2`, `3-5`, `4` (comma separated) into
/// windows over a model of depth `layers`.
pub fn parse_windows(text: &str, layers: usize) -> Result<Vec<LayerWindow>> {
    let bad = |part: &str| Error::Schedule(format!("cannot parse window `{part}`"));
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some(n) = part.strip_prefix("first") {
            let n: usize = n.parse().map_err(|_| bad(part))?;
            if n == 0 || n > layers {
                return Err(bad(part));
            }
            out.push(LayerWindow::new(0, n - 1));
        } else if let Some(n) = part.strip_prefix("last") {
            let n: usize = n.parse().map_err(|_| bad(part))?;
            if n == 0 || n > layers {
                return Err(bad(part));
            }
            out.push(LayerWindow::new(layers - n, layers - 1));
        } else if let Some(n) = part.strip_prefix("every") {
            let n: usize = n.parse().map_err(|_| bad(part))?;
            if n == 0 {
                return Err(bad(part));
            }
            let mut s = 0;
            while s < layers {
                out.push(LayerWindow::new(s, (s + n - 1).min(layers - 1)));
                s += n;
            }
        } else if let Some((a, b)) = part.split_once('-') {
            let a: usize = a.parse().map_err(|_| bad(part))?;
            let b: usize = b.parse().map_err(|_| bad(part))?;
            if a > b || b >= layers {
                return Err(bad(part));
            }
            out.push(LayerWindow::new(a, b));
        } else {
            let a: usize = part.parse().map_err(|_| bad(part))?;
            if a >= layers {
                return Err(bad(part));
            }
            out.push(LayerWindow::new(a, a));
        }
    }
    Ok(out)
}

/// Consistency of one perturbed run against the baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub window: Option<LayerWindow>,
    pub kind: InterventionKind,
    pub c_label: f64,
    pub c_score: f64,
    pub n_examples: usize,
    /// Prediction bias relative to the unperturbed consistency (which is 1).
    pub bias: f64,
}

/// Per-window bias pair for a paired vv/vt sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub window: LayerWindow,
    pub e_vt: f64,
    pub e_vv: f64,
    pub d: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<ConsistencyReport>,
    pub bias: Vec<BiasRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOptions {
    /// Kinds run for every window. Passing both `VvBlock` and `VtBlock`
    /// additionally fills [`SweepReport::bias`].
    pub kinds: Vec<InterventionKind>,
    pub random_seed: u64,
    pub bias_source: BiasSource,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            kinds: alloc::vec![InterventionKind::VtBlock],
            random_seed: 0,
            bias_source: BiasSource::Score,
        }
    }
}

fn predictions(
    params: &ModelParams,
    dataset: &[SyntheticExample],
    iv: Option<&Intervention>,
) -> Result<Vec<Prediction>> {
    dataset
        .iter()
        .enumerate()
        .map(|(k, ex)| {
            model::predict(params, ex.prompt(), &ex.layout, iv, None).map_err(|e| e.at_example(k))
        })
        .collect()
}

fn compare(base: &[Prediction], pert: &[Prediction]) -> Result<(f64, f64)> {
    let bl: Vec<TokenId> = base.iter().map(|p| p.token).collect();
    let pl: Vec<TokenId> = pert.iter().map(|p| p.token).collect();
    let bt: Vec<Vec<TokenId>> = base.iter().map(|p| p.top5.to_vec()).collect();
    let pt: Vec<Vec<TokenId>> = pert.iter().map(|p| p.top5.to_vec()).collect();
    Ok((label_consistency(&bl, &pl)?, score_consistency(&bt, &pt)?))
}

/// Runs the unperturbed model once, then one perturbed pass per window and
/// kind. Empty `windows` entries (`None`) reproduce the baseline.
pub fn layer_sweep(
    params: &ModelParams,
    dataset: &[SyntheticExample],
    windows: &[Option<LayerWindow>],
    opts: &SweepOptions,
) -> Result<SweepReport> {
    if dataset.is_empty() {
        return Err(Error::EmptySegment("dataset"));
    }
    let layers = params.config.layers;
    let base = predictions(params, dataset, None)?;
    let mut report = SweepReport::default();
    for window in windows {
        if let Some(w) = window {
            if w.start > w.end || w.end >= layers {
                return Err(Error::Index {
                    what: "sweep window",
                    index: w.end,
                    limit: layers,
                });
            }
        }
        let mut by_kind = Vec::new();
        for &kind in &opts.kinds {
            let layer_set: Vec<usize> = window.map(|w| w.layers().collect()).unwrap_or_default();
            let iv = Intervention::new(kind, layer_set).with_seed(opts.random_seed);
            let pert = predictions(params, dataset, Some(&iv))?;
            let (c_label, c_score) = compare(&base, &pert)?;
            let c = match opts.bias_source {
                BiasSource::Score => c_score,
                BiasSource::Label => c_label,
            };
            let row = ConsistencyReport {
                window: *window,
                kind,
                c_label,
                c_score,
                n_examples: dataset.len(),
                bias: prediction_bias(1.0, c),
            };
            by_kind.push(row.clone());
            report.rows.push(row);
        }
        let find = |k| by_kind.iter().find(|r: &&ConsistencyReport| r.kind == k);
        if let (Some(w), Some(vv), Some(vt)) = (
            window,
            find(InterventionKind::VvBlock),
            find(InterventionKind::VtBlock),
        ) {
            report.bias.push(BiasRow {
                window: *w,
                e_vt: vt.bias,
                e_vv: vv.bias,
                d: bias_ratio(vv.bias, vt.bias),
            });
        }
    }
    Ok(report)
}

/// Human-readable label for a window, `"-"` when empty.
pub fn window_label(w: Option<LayerWindow>) -> String {
    match w {
        Some(w) => format!("{}-{}", w.start, w.end),
        None => String::from("-"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn uniform_causal(n: usize) -> Matrix {
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                a.set(i, j, 1.0 / (i + 1) as f64);
            }
        }
        a
    }

    #[test]
    fn untargeted_layer_is_untouched() {
        let layout = TokenLayout::new(1, 3, 2);
        let a = uniform_causal(6);
        let iv = Intervention::new(InterventionKind::VtBlock, [3]);
        assert_eq!(apply_intervention(&a, &layout, &iv, 0), a);
    }

    #[test]
    fn vt_block_on_toy_layout() {
        let layout = TokenLayout::new(1, 3, 2);
        let a = uniform_causal(6);
        let iv = Intervention::new(InterventionKind::VtBlock, [0]);
        let out = apply_intervention(&a, &layout, &iv, 0);
        for i in layout.ins_range() {
            let img: f64 = layout.img_range().map(|j| out.get(i, j)).sum();
            assert_eq!(img, 0.0);
            // row i sees i+1 tokens of which 3 are image tokens
            let lost = 3.0 / (i + 1) as f64;
            let row: f64 = out.row(i).iter().sum();
            assert!((row - (1.0 - lost)).abs() < 1e-15);
        }
        for i in 0..4 {
            assert_eq!(out.row(i), a.row(i));
        }
    }

    #[test]
    fn vv_block_zeroes_image_block_only() {
        let layout = TokenLayout::new(1, 3, 2);
        let a = uniform_causal(6);
        let iv = Intervention::new(InterventionKind::VvBlock, [1]);
        let out = apply_intervention(&a, &layout, &iv, 1);
        for i in 0..6 {
            for j in 0..6 {
                if layout.is_image(i) && layout.is_image(j) {
                    assert_eq!(out.get(i, j), 0.0);
                } else {
                    assert_eq!(out.get(i, j).to_bits(), a.get(i, j).to_bits());
                }
            }
        }
    }

    #[test]
    fn random_receivers_avoid_image_tokens() {
        let layout = TokenLayout::new(4, 36, 6);
        for seed in 0..50 {
            let iv = Intervention::new(InterventionKind::VRandomBlock, [0]).with_seed(seed);
            let r = iv.receivers(&layout);
            assert_eq!(r.len(), 6);
            assert!(r.iter().all(|&i| !layout.is_image(i)));
            assert_eq!(r, iv.receivers(&layout));
        }
    }

    #[test]
    fn label_consistency_examples() {
        assert_eq!(label_consistency(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(label_consistency(&[1, 2, 3], &[4, 5, 6]).unwrap(), 0.0);
        assert_eq!(label_consistency(&[1, 2, 3], &[1, 9, 3]).unwrap(), 2.0 / 3.0);
        assert!(label_consistency(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn score_consistency_examples() {
        let a = vec![vec![1, 2, 3, 4, 5]];
        assert_eq!(score_consistency(&a, &a).unwrap(), 1.0);
        assert_eq!(
            score_consistency(&a, &[vec![6, 7, 8, 9, 10]]).unwrap(),
            0.0
        );
        assert_eq!(
            score_consistency(&a, &[vec![1, 2, 3, 8, 9]]).unwrap(),
            3.0 / 7.0
        );
        assert!(matches!(
            score_consistency(&[vec![1, 2, 3, 4]], &[vec![1, 2, 3, 4]]),
            Err(Error::SetSize { .. })
        ));
        assert!(score_consistency(&[vec![1, 1, 2, 3, 4]], &a).is_err());
    }

    #[test]
    fn bias_examples() {
        assert_eq!(prediction_bias(0.7, 0.7), 0.0);
        assert_eq!(prediction_bias(1.0, 0.0), 1.0);
        assert!((prediction_bias(0.9, 0.65) - 0.25).abs() < 1e-15);
        assert_eq!(bias_ratio(0.2, 0.2), Some(0.0));
        let d = bias_ratio(0.33, 0.10).unwrap();
        assert!((d - 3.3f64.ln()).abs() < 1e-15);
        assert!((d - 1.1939).abs() < 1e-4);
        assert_eq!(bias_ratio(0.10, 0.33), Some(-d));
        assert_eq!(bias_ratio(0.0, 0.3), None);
        assert_eq!(bias_ratio(0.3, -0.1), None);
    }

    #[test]
    fn window_parsing() {
        assert_eq!(
            parse_windows("first2,last2", 8).unwrap(),
            vec![LayerWindow::new(0, 1), LayerWindow::new(6, 7)]
        );
        assert_eq!(parse_windows("every2", 5).unwrap().len(), 3);
        assert_eq!(parse_windows("2-4,7", 8).unwrap()[1], LayerWindow::new(7, 7));
        assert!(parse_windows("9", 8).is_err());
        assert!(parse_windows("first9", 8).is_err());
    }
}
