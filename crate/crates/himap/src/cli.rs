//! Command-line interface. Every subcommand writes deterministic artifacts.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use himap_core::cost::{schedule_cost, ArchDims, CostProfile};
use himap_core::perturb::{parse_windows, BiasSource, InterventionKind, SweepOptions};
use himap_core::prune::{parse_schedule, Criterion, PruneSchedule};
use himap_core::task::{gen_dataset, SyntheticTaskSpec, EVAL_SPLIT, TRAIN_SPLIT};
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::ExperimentConfig;
use crate::dataset::{read_jsonl, write_jsonl};
use crate::experiments::{self as ex};

#[derive(Debug, Parser)]
#[command(name = "himap", version, about = "Attention-flow and image-token pruning laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BiasFrom {
    Score,
    Label,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset as JSON lines (`<out>/<split>.jsonl`).
    GenData {
        /// Task spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
    },
    /// Train a model from an experiment config; writes `model.hmap`, `loss.csv`, `summary.json`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer saliency scores (`<out>/saliency.csv`).
    Saliency {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Intervention sweep; writes `consistency.csv` and `bias.csv`.
    Perturb {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated kinds: vt, vv, random.
        #[arg(long, default_value = "vt")]
        kind: String,
        /// Comma-separated windows: firstN, lastN, everyN, a-b, a.
        #[arg(long)]
        windows: String,
        #[arg(long)]
        out: PathBuf,
        /// Seed for the random-receiver intervention.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, value_enum, default_value = "score")]
        bias_source: BiasFrom,
    },
    /// Accuracy with and without pruning, keep maps and toy-scale cost.
    PruneEval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Preset name, `K:R[:crit],...`, or a JSON schedule file.
        #[arg(long)]
        schedule: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Image-token FLOPs of a schedule on a named architecture (JSON).
    Cost {
        /// llava-7b or llava-13b.
        #[arg(long)]
        arch: String,
        #[arg(long)]
        n_image: usize,
        #[arg(long)]
        schedule: String,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Single-stage (K, R) sweep as CSV.
    Ablate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `K-list:R-list`, e.g. `1,2,3:25,50,75`.
        #[arg(long)]
        grid: String,
        #[arg(long, default_value = "phi_sh")]
        criterion: String,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// A preset, the compact form, or a path to a JSON [`PruneSchedule`].
pub fn resolve_schedule(text: &str) -> Result<PruneSchedule> {
    let path = Path::new(text);
    if path.is_file() {
        let raw = fs::read_to_string(path)?;
        let s: PruneSchedule = serde_json::from_str(&raw)
            .with_context(|| format!("malformed schedule file {}", path.display()))?;
        s.validate(None)?;
        return Ok(s);
    }
    parse_schedule(text).with_context(|| format!("`{text}` is neither a schedule file, preset nor K:R list"))
}

pub fn parse_grid(text: &str) -> Result<(Vec<usize>, Vec<f64>)> {
    let (ks, rs) = text
        .split_once(':')
        .with_context(|| format!("grid `{text}` must look like `K1,K2:R1,R2`"))?;
    let ks = ks
        .split(',')
        .map(|k| k.trim().parse::<usize>().with_context(|| format!("bad K `{k}`")))
        .collect::<Result<Vec<_>>>()?;
    let rs = rs
        .split(',')
        .map(|r| r.trim().parse::<f64>().with_context(|| format!("bad R `{r}`")))
        .collect::<Result<Vec<_>>>()?;
    Ok((ks, rs))
}

#[derive(Serialize)]
struct CostOutput<'a> {
    arch: &'a str,
    schedule: String,
    #[serde(flatten)]
    profile: CostProfile,
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    final_loss: f64,
    train_accuracy: f64,
    eval_accuracy: f64,
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            spec,
            count,
            out,
            split,
        } => {
            let text = fs::read_to_string(&spec)
                .with_context(|| format!("cannot read task spec {}", spec.display()))?;
            let task: SyntheticTaskSpec = serde_json::from_str(&text)
                .with_context(|| format!("malformed task spec {}", spec.display()))?;
            let (label, seed) = match split {
                Split::Train => ("train", TRAIN_SPLIT),
                Split::Eval => ("eval", EVAL_SPLIT),
            };
            let data = gen_dataset(&task, count, seed)?;
            ensure_dir(&out)?;
            write_jsonl(&out.join(format!("{label}.jsonl")), &data)
        }
        Command::Train { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (params, report) = ex::train_reference(&cfg)?;
            ensure_dir(&out)?;
            save_checkpoint(&params, &out.join("model.hmap"))?;
            ex::write_loss_csv(&out.join("loss.csv"), &report)?;
            let train_set = gen_dataset(&cfg.task, cfg.train_examples, TRAIN_SPLIT)?;
            let summary = TrainSummary {
                steps: report.losses.len(),
                final_loss: *report.losses.last().expect("steps >= 1"),
                train_accuracy: ex::accuracy(&params, &train_set, None)?,
                eval_accuracy: ex::accuracy(&params, &ex::eval_dataset(&cfg)?, None)?,
            };
            write_json(&out.join("summary.json"), &summary)
        }
        Command::Saliency { ckpt, data, out } => {
            let params = load_checkpoint(&ckpt)?;
            let data = read_jsonl(&data)?;
            let profile = ex::saliency_profile(&params, &data)?;
            ensure_dir(&out)?;
            ex::write_saliency_csv(&out.join("saliency.csv"), &profile)
        }
        Command::Perturb {
            ckpt,
            data,
            kind,
            windows,
            out,
            seed,
            bias_source,
        } => {
            let params = load_checkpoint(&ckpt)?;
            let data = read_jsonl(&data)?;
            let kinds = kind
                .split(',')
                .map(|k| k.trim().parse::<InterventionKind>().with_context(|| format!("kind `{k}`")))
                .collect::<Result<Vec<_>>>()?;
            let windows = parse_windows(&windows, params.config.layers)?;
            if windows.is_empty() {
                bail!("no layer windows given");
            }
            let opts = SweepOptions {
                kinds,
                random_seed: seed,
                bias_source: match bias_source {
                    BiasFrom::Score => BiasSource::Score,
                    BiasFrom::Label => BiasSource::Label,
                },
            };
            let report = ex::perturb_sweep(&params, &data, &windows, &opts)?;
            ensure_dir(&out)?;
            ex::write_consistency_csv(&out.join("consistency.csv"), &report)?;
            ex::write_bias_csv(&out.join("bias.csv"), &report)
        }
        Command::PruneEval {
            ckpt,
            data,
            schedule,
            out,
        } => {
            let params = load_checkpoint(&ckpt)?;
            let data = read_jsonl(&data)?;
            let schedule = resolve_schedule(&schedule)?;
            schedule.validate(Some(params.config.layers))?;
            let report = ex::prune_eval(&params, &data, &schedule)?;
            ensure_dir(&out)?;
            write_json(&out.join("prune_eval.json"), &report)?;
            ex::write_keep_maps(&out.join("keep_map.jsonl"), &params, &data, &schedule)
        }
        Command::Cost {
            arch,
            n_image,
            schedule,
            out,
        } => {
            let dims = ArchDims::preset(&arch)
                .with_context(|| format!("unknown architecture `{arch}` (known: llava-7b, llava-13b)"))?;
            let schedule = resolve_schedule(&schedule)?;
            let output = CostOutput {
                arch: &arch,
                schedule: schedule.to_string(),
                profile: schedule_cost(&dims, n_image, &schedule)?,
            };
            match out {
                Some(path) => write_json(&path, &output),
                None => {
                    let mut text = serde_json::to_string_pretty(&output)?;
                    text.push('\n');
                    std::io::stdout().write_all(text.as_bytes())?;
                    Ok(())
                }
            }
        }
        Command::Ablate {
            ckpt,
            data,
            grid,
            criterion,
            out,
        } => {
            let params = load_checkpoint(&ckpt)?;
            let data = read_jsonl(&data)?;
            let (ks, rs) = parse_grid(&grid)?;
            let criterion: Criterion = criterion.parse()?;
            let rows = ex::ablate(&params, &data, &ks, &rs, criterion)?;
            match out {
                Some(path) => {
                    let f = fs::File::create(&path)
                        .with_context(|| format!("cannot create {}", path.display()))?;
                    ex::write_ablation_csv(f, &rows)
                }
                None => ex::write_ablation_csv(std::io::stdout().lock(), &rows),
            }
        }
    }
}

/// Parses `args` and runs the command. Returns the process exit code; all
/// failures are reported as a single line on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", line.trim());
            return 2;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            1
        }
    }
}
