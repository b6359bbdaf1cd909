//! Hierarchical modality-aware pruning of image tokens.
//!
//! A [`PruneSchedule`] holds up to two [`PruneStage`]s. A stage with filter
//! layer `K` ranks the surviving image tokens using the head-mean attention of
//! the `K`-th layer (1-based, i.e. block index `K − 1`) and removes the bottom
//! `R%` from the sequence entering every later layer. Layers `1..=K` therefore
//! see the full set, which is what the FLOPs model in [`crate::cost`] charges.
//!
//! Attention matrices passed to the criteria are indexed locally; `positions`
//! maps each local row/column to its original sequence index.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenLayout;
use crate::numerics::Matrix;

/// Image-token importance criterion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Attention each image token receives from the instruction tokens.
    PhiSh,
    /// Attention mass an image token places on the surviving image tokens.
    PhiDp,
    /// Mean attention received from all later tokens (FastV baseline).
    PhiAttn,
}

impl Criterion {
    pub fn name(self) -> &'static str {
        match self {
            Criterion::PhiSh => "phi_sh",
            Criterion::PhiDp => "phi_dp",
            Criterion::PhiAttn => "phi_attn",
        }
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phi_sh" => Ok(Criterion::PhiSh),
            "phi_dp" => Ok(Criterion::PhiDp),
            "phi_attn" => Ok(Criterion::PhiAttn),
            other => Err(Error::Schedule(format!("unknown criterion `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneStage {
    /// Number of leading layers that see the unpruned set (`K`).
    pub filter_layer: usize,
    /// Percentage of the current image tokens to drop (`R`).
    pub filter_ratio: f64,
    pub criterion: Criterion,
}

impl PruneStage {
    pub fn new(filter_layer: usize, filter_ratio: f64, criterion: Criterion) -> Self {
        Self {
            filter_layer,
            filter_ratio,
            criterion,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub stages: Vec<PruneStage>,
}

impl PruneSchedule {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(stages: Vec<PruneStage>) -> Self {
        Self { stages }
    }

    /// `K₁=2, R₁=50%` (φ_sh), `K₂=8, R₂=75%` (φ_dp).
    pub fn aggressive() -> Self {
        Self::two_stage(2, 50.0, 8, 75.0)
    }

    /// `K₁=2, R₁=50%` (φ_sh), `K₂=15, R₂=75%` (φ_dp).
    pub fn conservative() -> Self {
        Self::two_stage(2, 50.0, 15, 75.0)
    }

    /// Aggressive analogue for the 8-layer laboratory model.
    pub fn toy_aggressive() -> Self {
        Self::two_stage(2, 50.0, 4, 75.0)
    }

    pub fn two_stage(k1: usize, r1: f64, k2: usize, r2: f64) -> Self {
        Self::new(alloc::vec![
            PruneStage::new(k1, r1, Criterion::PhiSh),
            PruneStage::new(k2, r2, Criterion::PhiDp),
        ])
    }

    /// Single stage ranked by the FastV criterion.
    pub fn fastv(k: usize, r: f64) -> Self {
        Self::new(alloc::vec![PruneStage::new(k, r, Criterion::PhiAttn)])
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "none" | "empty" => Some(Self::empty()),
            "aggressive" => Some(Self::aggressive()),
            "conservative" => Some(Self::conservative()),
            "toy-aggressive" => Some(Self::toy_aggressive()),
            _ => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Checks ordering and ranges; `layers` is the model depth when known.
    pub fn validate(&self, layers: Option<usize>) -> Result<()> {
        if self.stages.len() > 2 {
            return Err(Error::Schedule(format!(
                "{} stages (at most 2)",
                self.stages.len()
            )));
        }
        let mut prev = 0;
        for (i, s) in self.stages.iter().enumerate() {
            if !(0.0..=100.0).contains(&s.filter_ratio) {
                return Err(Error::Schedule(format!(
                    "stage {i}: ratio {} outside [0, 100]",
                    s.filter_ratio
                )));
            }
            if s.filter_layer == 0 {
                return Err(Error::Schedule(format!("stage {i}: filter layer must be >= 1")));
            }
            if i > 0 && s.filter_layer <= prev {
                return Err(Error::Schedule(format!(
                    "stage {i}: filter layer {} not after {prev}",
                    s.filter_layer
                )));
            }
            if let Some(l) = layers {
                if s.filter_layer >= l {
                    return Err(Error::Schedule(format!(
                        "stage {i}: filter layer {} >= depth {l}",
                        s.filter_layer
                    )));
                }
            }
            prev = s.filter_layer;
        }
        Ok(())
    }

    /// Stage whose ranking runs after block `block` (0-based).
    pub fn stage_after_block(&self, block: usize) -> Option<&PruneStage> {
        self.stages.iter().find(|s| s.filter_layer == block + 1)
    }

    /// Image-token count entering each block (0-based) for `n_image` tokens.
    pub fn image_counts(&self, n_image: usize, layers: usize) -> Vec<usize> {
        let mut n = n_image;
        let mut out = Vec::with_capacity(layers);
        for block in 0..layers {
            out.push(n);
            if let Some(stage) = self.stage_after_block(block) {
                n = kept_count(n, stage.filter_ratio);
            }
        }
        out
    }
}

/// Importance per surviving image token, ordered by original index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    entries: Vec<(usize, f64)>,
}

impl ImportanceScores {
    /// Builds scores from `(original index, score)` pairs; indices must be
    /// distinct.
    pub fn new(mut entries: Vec<(usize, f64)>) -> Self {
        entries.sort_by_key(|e| e.0);
        Self { entries }
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<f64> {
        self.entries
            .binary_search_by_key(&index, |e| e.0)
            .ok()
            .map(|i| self.entries[i].1)
    }
}

/// Arithmetic mean of the per-head attention matrices.
pub fn head_mean_attention(heads: &[Matrix]) -> Result<Matrix> {
    let first = heads.first().ok_or(Error::MissingState("attention heads"))?;
    let mut acc = first.clone();
    for h in &heads[1..] {
        acc.add_assign(h)?;
    }
    let inv = 1.0 / heads.len() as f64;
    Ok(acc.map(|v| v * inv))
}

fn check_positions(attn: &Matrix, positions: &[usize]) -> Result<()> {
    if attn.rows() != positions.len() || attn.cols() != positions.len() {
        return Err(Error::Shape {
            op: "prune criterion",
            lhs: attn.shape(),
            rhs: (positions.len(), positions.len()),
        });
    }
    Ok(())
}

fn image_locals(positions: &[usize], layout: &TokenLayout) -> Vec<usize> {
    (0..positions.len())
        .filter(|&k| layout.is_image(positions[k]))
        .collect()
}

/// `φ_sh(v) = Σ_{i∈ℐ} A(i, v)` for every surviving image token `v`.
pub fn phi_sh(attn: &Matrix, positions: &[usize], layout: &TokenLayout) -> Result<ImportanceScores> {
    check_positions(attn, positions)?;
    let ins: Vec<usize> = (0..positions.len())
        .filter(|&k| layout.is_instruction(positions[k]))
        .collect();
    if ins.is_empty() {
        return Err(Error::EmptySegment("instruction"));
    }
    let entries = image_locals(positions, layout)
        .into_iter()
        .map(|v| {
            let s: f64 = ins.iter().map(|&i| attn.get(i, v)).sum();
            (positions[v], s)
        })
        .collect();
    Ok(ImportanceScores::new(entries))
}

/// `φ_dp(v) = Σ_{i∈V'} A(v, i)` over the surviving image tokens `V'`.
pub fn phi_dp(attn: &Matrix, positions: &[usize], layout: &TokenLayout) -> Result<ImportanceScores> {
    check_positions(attn, positions)?;
    let img = image_locals(positions, layout);
    if img.is_empty() {
        return Err(Error::EmptySegment("surviving image"));
    }
    let entries = img
        .iter()
        .map(|&v| {
            let s: f64 = img.iter().map(|&i| attn.get(v, i)).sum();
            (positions[v], s)
        })
        .collect();
    Ok(ImportanceScores::new(entries))
}

/// Mean attention each image token receives from the later tokens that can
/// see it (FastV's criterion).
pub fn phi_attn(
    attn: &Matrix,
    positions: &[usize],
    layout: &TokenLayout,
) -> Result<ImportanceScores> {
    check_positions(attn, positions)?;
    let n = positions.len();
    let entries = image_locals(positions, layout)
        .into_iter()
        .map(|v| {
            let receivers = n - v - 1;
            let s: f64 = (v + 1..n).map(|i| attn.get(i, v)).sum();
            let mean = if receivers == 0 {
                0.0
            } else {
                s / receivers as f64
            };
            (positions[v], mean)
        })
        .collect();
    Ok(ImportanceScores::new(entries))
}

pub fn score(
    criterion: Criterion,
    attn: &Matrix,
    positions: &[usize],
    layout: &TokenLayout,
) -> Result<ImportanceScores> {
    match criterion {
        Criterion::PhiSh => phi_sh(attn, positions, layout),
        Criterion::PhiDp => phi_dp(attn, positions, layout),
        Criterion::PhiAttn => phi_attn(attn, positions, layout),
    }
}

/// `floor(n · R / 100)`, the number of tokens a stage removes.
pub fn pruned_count(n: usize, ratio: f64) -> usize {
    // the 1e-9 slack absorbs representation error in n·R/100 (e.g. R = 57.00000000001)
    let raw = libm::floor(n as f64 * ratio / 100.0 + 1e-9);
    if raw <= 0.0 {
        0
    } else {
        (raw as usize).min(n)
    }
}

pub fn kept_count(n: usize, ratio: f64) -> usize {
    n - pruned_count(n, ratio)
}

/// Keeps the top `n − floor(n·R/100)` tokens by score; ties keep the lower
/// original index. Returns kept indices in ascending order.
pub fn select_kept(scores: &ImportanceScores, ratio: f64) -> Vec<usize> {
    let keep = kept_count(scores.len(), ratio);
    let mut ranked: Vec<(usize, f64)> = scores.entries.clone();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept: Vec<usize> = ranked.into_iter().take(keep).map(|e| e.0).collect();
    kept.sort_unstable();
    kept
}

/// Runs one stage on a layer's per-head attention. Returns the surviving
/// original positions (non-image positions always survive) and the scores.
pub fn apply_stage(
    heads: &[Matrix],
    positions: &[usize],
    layout: &TokenLayout,
    stage: &PruneStage,
) -> Result<(Vec<usize>, ImportanceScores)> {
    let mean = head_mean_attention(heads)?;
    let scores = score(stage.criterion, &mean, positions, layout)?;
    let kept = select_kept(&scores, stage.filter_ratio);
    let survivors = positions
        .iter()
        .copied()
        .filter(|&p| !layout.is_image(p) || kept.binary_search(&p).is_ok())
        .collect();
    Ok((survivors, scores))
}

/// Parses a preset name or a compact `K1:R1[:crit],K2:R2[:crit]` description.
pub fn parse_schedule(text: &str) -> Result<PruneSchedule> {
    if let Some(p) = PruneSchedule::preset(text) {
        return Ok(p);
    }
    let mut stages = Vec::new();
    for (i, part) in text.split(',').enumerate() {
        let fields: Vec<&str> = part.split(':').collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(Error::Schedule(format!("cannot parse stage `{part}`")));
        }
        let k = fields[0]
            .trim()
            .parse::<usize>()
            .map_err(|e| Error::Schedule(format!("{part}: {e}")))?;
        let r = fields[1]
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::Schedule(format!("{part}: {e}")))?;
        let c = match fields.get(2) {
            Some(c) => c.trim().parse()?,
            None if i == 0 => Criterion::PhiSh,
            None => Criterion::PhiDp,
        };
        stages.push(PruneStage::new(k, r, c));
    }
    let s = PruneSchedule::new(stages);
    s.validate(None)?;
    Ok(s)
}

impl core::fmt::Display for PruneSchedule {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let parts: Vec<String> = self
            .stages
            .iter()
            .map(|s| format!("{}:{}:{}", s.filter_layer, s.filter_ratio, s.criterion.name()))
            .collect();
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn identity_positions(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn head_mean_examples() {
        let a = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
        assert_eq!(head_mean_attention(&[a.clone()]).unwrap(), a);
        assert_eq!(head_mean_attention(&[a.clone(), a.clone()]).unwrap(), a);
        assert_eq!(
            head_mean_attention(&[a, b]).unwrap().data(),
            &[0.5, 0.5]
        );
    }

    #[test]
    fn phi_sh_uniform_and_point_mass() {
        // layout: 1 sys, 3 img, 2 ins; instruction rows uniform over all 6 columns
        let layout = TokenLayout::new(1, 3, 2);
        let pos = identity_positions(6);
        let mut a = Matrix::zeros(6, 6);
        for i in 4..6 {
            for j in 0..6 {
                a.set(i, j, 1.0 / 6.0);
            }
        }
        let s = phi_sh(&a, &pos, &layout).unwrap();
        for &(_, v) in s.entries() {
            assert!((v - 2.0 / 6.0).abs() < 1e-15);
        }

        let mut a = Matrix::zeros(6, 6);
        a.set(4, 2, 1.0);
        a.set(5, 2, 1.0);
        let s = phi_sh(&a, &pos, &layout).unwrap();
        assert_eq!(s.entries(), &[(1, 0.0), (2, 2.0), (3, 0.0)]);

        let no_ins = TokenLayout::new(1, 5, 0);
        assert_eq!(
            phi_sh(&a, &pos, &no_ins).unwrap_err(),
            Error::EmptySegment("instruction")
        );
    }

    #[test]
    fn phi_dp_examples() {
        let layout = TokenLayout::new(1, 3, 2);
        // only image token 1 survives
        let pos = vec![0, 1, 4, 5];
        let mut a = Matrix::zeros(4, 4);
        a.set(1, 0, 0.3);
        a.set(1, 1, 0.7);
        let s = phi_dp(&a, &pos, &layout).unwrap();
        assert_eq!(s.entries(), &[(1, 0.7)]);

        // row v uniform over its visible tokens
        let pos = identity_positions(6);
        let mut a = Matrix::zeros(6, 6);
        for j in 0..=3 {
            a.set(3, j, 0.25);
        }
        let s = phi_dp(&a, &pos, &layout).unwrap();
        assert_eq!(s.get(3), Some(0.75));
    }

    #[test]
    fn phi_attn_examples() {
        let layout = TokenLayout::new(1, 3, 2);
        let pos = identity_positions(6);
        let mut a = Matrix::zeros(6, 6);
        for i in 0..6 {
            for j in 0..=i {
                a.set(i, j, 1.0 / (i + 1) as f64);
            }
        }
        let s = phi_attn(&a, &pos, &layout).unwrap();
        let expect = |v: usize| (v + 1..6).map(|i| 1.0 / (i + 1) as f64).sum::<f64>() / (5 - v) as f64;
        for &(v, x) in s.entries() {
            assert!((x - expect(v)).abs() < 1e-15);
        }
        // a column nobody attends to
        for i in 3..6 {
            a.set(i, 2, 0.0);
        }
        assert_eq!(phi_attn(&a, &pos, &layout).unwrap().get(2), Some(0.0));
    }

    #[test]
    fn select_kept_examples() {
        let flat = ImportanceScores::new((0..576).map(|i| (i, 1.0)).collect());
        assert_eq!(select_kept(&flat, 50.0).len(), 288);
        assert_eq!(kept_count(288, 75.0), 72);

        let ties = ImportanceScores::new(vec![(3, 1.0), (1, 1.0), (2, 1.0), (0, 1.0)]);
        assert_eq!(select_kept(&ties, 50.0), vec![0, 1]);

        let s = ImportanceScores::new(vec![(5, 0.1), (9, 0.9), (11, 0.5)]);
        assert_eq!(select_kept(&s, 33.0), vec![5, 9, 11]);
        assert_eq!(select_kept(&s, 34.0), vec![9, 11]);
        assert_eq!(select_kept(&s, 0.0), vec![5, 9, 11]);
        assert!(select_kept(&s, 100.0).is_empty());
    }

    #[test]
    fn image_counts_follow_floor_rule() {
        let counts = PruneSchedule::toy_aggressive().image_counts(36, 8);
        assert_eq!(counts, vec![36, 36, 18, 18, 5, 5, 5, 5]);
        let counts = PruneSchedule::aggressive().image_counts(36, 10);
        assert_eq!(&counts[2..8], &[18; 6]);
        assert_eq!(&counts[8..], &[5, 5]);
    }

    #[test]
    fn schedule_validation() {
        assert!(PruneSchedule::aggressive().validate(Some(32)).is_ok());
        assert!(PruneSchedule::aggressive().validate(Some(8)).is_err());
        assert!(PruneSchedule::two_stage(4, 50.0, 4, 50.0).validate(None).is_err());
        assert!(PruneSchedule::two_stage(0, 50.0, 4, 50.0).validate(None).is_err());
        assert!(PruneSchedule::two_stage(1, 150.0, 4, 50.0).validate(None).is_err());
    }

    #[test]
    fn parse_schedule_forms() {
        assert_eq!(parse_schedule("aggressive").unwrap(), PruneSchedule::aggressive());
        assert_eq!(
            parse_schedule("2:50,4:75").unwrap(),
            PruneSchedule::toy_aggressive()
        );
        assert_eq!(
            parse_schedule("3:50:phi_attn").unwrap(),
            PruneSchedule::fastv(3, 50.0)
        );
        assert!(parse_schedule("bogus").is_err());
        let s = PruneSchedule::toy_aggressive();
        assert_eq!(parse_schedule(&alloc::format!("{s}")).unwrap(), s);
    }
}
