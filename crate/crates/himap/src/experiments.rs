//! Experiment drivers shared by the CLI and the acceptance suite.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use himap_core::cost::{toy_model_cost, CostProfile};
use himap_core::model::{build_model, forward, predict, train, ForwardOptions, ModelParams, TrainReport};
use himap_core::perturb::{layer_sweep, LayerWindow, SweepOptions, SweepReport};
use himap_core::prune::{Criterion, PruneSchedule, PruneStage};
use himap_core::saliency::{dataset_flow_profile, LayerFlow};
use himap_core::task::{gen_dataset, SyntheticExample, EVAL_SPLIT, TRAIN_SPLIT};
use serde::Serialize;

use crate::config::ExperimentConfig;

pub fn train_reference(cfg: &ExperimentConfig) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    let data = gen_dataset(&cfg.task, cfg.train_examples, TRAIN_SPLIT)?;
    let mut params = build_model(&cfg.model)?;
    let report = train(&mut params, &data, &cfg.train)?;
    Ok((params, report))
}

pub fn eval_dataset(cfg: &ExperimentConfig) -> Result<Vec<SyntheticExample>> {
    Ok(gen_dataset(&cfg.task, cfg.eval_examples, EVAL_SPLIT)?)
}

/// Fraction of examples whose greedy answer equals the gold token.
pub fn accuracy(
    params: &ModelParams,
    data: &[SyntheticExample],
    schedule: Option<&PruneSchedule>,
) -> Result<f64> {
    if data.is_empty() {
        bail!("accuracy of an empty dataset");
    }
    let mut hits = 0usize;
    for (k, ex) in data.iter().enumerate() {
        let p = predict(params, ex.prompt(), &ex.layout, None, schedule)
            .with_context(|| format!("example {k}"))?;
        hits += usize::from(p.token == ex.gold);
    }
    Ok(hits as f64 / data.len() as f64)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("cannot create {}", path.display()))
}

pub fn write_loss_csv(path: &Path, report: &TrainReport) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        step: usize,
        loss: f64,
    }
    let mut w = csv_writer(path)?;
    for (step, &loss) in report.losses.iter().enumerate() {
        w.serialize(Row { step, loss })?;
    }
    w.flush()?;
    Ok(())
}

pub fn saliency_profile(params: &ModelParams, data: &[SyntheticExample]) -> Result<Vec<LayerFlow>> {
    Ok(dataset_flow_profile(params, data)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SaliencyRow {
    pub layer: usize,
    pub s_sys: f64,
    pub s_img: f64,
    pub s_ins: f64,
    pub s_vv: f64,
    pub s_vt: f64,
    pub s_vt_recv: f64,
}

impl From<&LayerFlow> for SaliencyRow {
    fn from(f: &LayerFlow) -> Self {
        Self {
            layer: f.layer,
            s_sys: f.modality.s_sys,
            s_img: f.modality.s_img,
            s_ins: f.modality.s_ins,
            s_vv: f.flow.s_vv,
            s_vt: f.flow.s_vt,
            s_vt_recv: f.flow.s_vt_recv,
        }
    }
}

pub fn write_saliency_csv(path: &Path, profile: &[LayerFlow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for f in profile {
        w.serialize(SaliencyRow::from(f))?;
    }
    w.flush()?;
    Ok(())
}

/// First layer at which the sign of `S_vt′ − S_vv` differs from layer 0.
pub fn crossover_layer(profile: &[LayerFlow]) -> Option<usize> {
    let sign = |f: &LayerFlow| f.flow.s_vt_recv > f.flow.s_vv;
    let first = sign(profile.first()?);
    profile.iter().position(|f| sign(f) != first)
}

pub fn perturb_sweep(
    params: &ModelParams,
    data: &[SyntheticExample],
    windows: &[LayerWindow],
    opts: &SweepOptions,
) -> Result<SweepReport> {
    let windows: Vec<Option<LayerWindow>> = windows.iter().copied().map(Some).collect();
    Ok(layer_sweep(params, data, &windows, opts)?)
}

pub fn write_consistency_csv(path: &Path, report: &SweepReport) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        window_start: Option<usize>,
        window_end: Option<usize>,
        kind: &'static str,
        c_label: f64,
        c_score: f64,
        e: f64,
        n_examples: usize,
    }
    let mut w = csv_writer(path)?;
    for r in &report.rows {
        w.serialize(Row {
            window_start: r.window.map(|w| w.start),
            window_end: r.window.map(|w| w.end),
            kind: r.kind.name(),
            c_label: r.c_label,
            c_score: r.c_score,
            e: r.bias,
            n_examples: r.n_examples,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_bias_csv(path: &Path, report: &SweepReport) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        window_start: usize,
        window_end: usize,
        e_vt: f64,
        e_vv: f64,
        d: Option<f64>,
    }
    let mut w = csv_writer(path)?;
    for r in &report.bias {
        w.serialize(Row {
            window_start: r.window.start,
            window_end: r.window.end,
            e_vt: r.e_vt,
            e_vv: r.e_vv,
            d: r.d,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PruneEvalReport {
    pub schedule: String,
    pub n_examples: usize,
    pub accuracy_unpruned: f64,
    pub accuracy_pruned: f64,
    /// `(unpruned − pruned) · 100`.
    pub drop_points: f64,
    /// Image tokens entering each block.
    pub image_counts: Vec<usize>,
    pub cost: CostProfile,
}

pub fn prune_eval(
    params: &ModelParams,
    data: &[SyntheticExample],
    schedule: &PruneSchedule,
) -> Result<PruneEvalReport> {
    let first = data.first().context("empty dataset")?;
    let n_image = first.layout.img;
    let plain = accuracy(params, data, None)?;
    let pruned = accuracy(params, data, Some(schedule))?;
    Ok(PruneEvalReport {
        schedule: schedule.to_string(),
        n_examples: data.len(),
        accuracy_unpruned: plain,
        accuracy_pruned: pruned,
        drop_points: (plain - pruned) * 100.0,
        image_counts: schedule.image_counts(n_image, params.config.layers),
        cost: toy_model_cost(&params.config, n_image, schedule)?,
    })
}

/// Per-example surviving positions entering each block, one JSON object per line.
pub fn write_keep_maps(
    path: &Path,
    params: &ModelParams,
    data: &[SyntheticExample],
    schedule: &PruneSchedule,
) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        example: usize,
        keep_map: &'a [Vec<usize>],
    }
    let mut out = String::new();
    for (k, ex) in data.iter().enumerate() {
        let opts = ForwardOptions {
            schedule: Some(schedule),
            ..Default::default()
        };
        let trace = forward(params, ex.prompt(), &ex.layout, &opts)
            .with_context(|| format!("example {k}"))?;
        out.push_str(&serde_json::to_string(&Line {
            example: k,
            keep_map: &trace.keep_map,
        })?);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("cannot write {}", path.display()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub filter_layer: usize,
    pub filter_ratio: f64,
    pub criterion: &'static str,
    pub accuracy: f64,
    pub drop_points: f64,
    pub eta: f64,
}

/// Single-stage schedules over the `ks × rs` grid.
pub fn ablate(
    params: &ModelParams,
    data: &[SyntheticExample],
    ks: &[usize],
    rs: &[f64],
    criterion: Criterion,
) -> Result<Vec<AblationRow>> {
    let first = data.first().context("empty dataset")?;
    let plain = accuracy(params, data, None)?;
    let mut rows = Vec::with_capacity(ks.len() * rs.len());
    for &k in ks {
        for &r in rs {
            let s = PruneSchedule::new(vec![PruneStage::new(k, r, criterion)]);
            s.validate(Some(params.config.layers))
                .with_context(|| format!("grid point K={k} R={r}"))?;
            let acc = accuracy(params, data, Some(&s))?;
            rows.push(AblationRow {
                filter_layer: k,
                filter_ratio: r,
                criterion: criterion.name(),
                accuracy: acc,
                drop_points: (plain - acc) * 100.0,
                eta: toy_model_cost(&params.config, first.layout.img, &s)?.eta,
            });
        }
    }
    Ok(rows)
}

pub fn write_ablation_csv<W: std::io::Write>(out: W, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
