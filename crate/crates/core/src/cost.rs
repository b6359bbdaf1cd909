//! Analytical FLOPs model for image tokens.
//!
//! One decoder layer processing `n` image tokens costs
//! `Ω(n) = 4·n·d² + 2·n²·d + 2·n·d·m`. A pruning schedule charges `Ω` of the
//! surviving count to every layer, and `η = 1 − pruned / baseline`.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::prune::{kept_count, PruneSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDims {
    pub layers: usize,
    pub hidden: usize,
    pub ffn: usize,
}

impl ArchDims {
    pub fn new(layers: usize, hidden: usize, ffn: usize) -> Result<Self> {
        if layers == 0 || hidden == 0 || ffn == 0 {
            return Err(Error::Config(format!(
                "architecture dims must be positive: L={layers} d={hidden} m={ffn}"
            )));
        }
        Ok(Self {
            layers,
            hidden,
            ffn,
        })
    }

    /// 32 layers, d = 4096, m = 11008.
    pub fn llava_7b() -> Self {
        Self {
            layers: 32,
            hidden: 4096,
            ffn: 11008,
        }
    }

    /// 40 layers, d = 5120, m = 13824.
    pub fn llava_13b() -> Self {
        Self {
            layers: 40,
            hidden: 5120,
            ffn: 13824,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "llava-7b" => Some(Self::llava_7b()),
            "llava-13b" => Some(Self::llava_13b()),
            _ => None,
        }
    }

    pub fn from_config(config: &ModelConfig) -> Self {
        Self {
            layers: config.layers,
            hidden: config.hidden,
            ffn: config.ffn,
        }
    }
}

/// `Ω(n)` for one layer.
pub fn layer_flops(n: usize, dims: &ArchDims) -> f64 {
    let n = n as f64;
    let d = dims.hidden as f64;
    let m = dims.ffn as f64;
    4.0 * n * d * d + 2.0 * n * n * d + 2.0 * n * d * m
}

/// A run of consecutive layers (1-based, inclusive) with the same token count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSegment {
    pub first_layer: usize,
    pub last_layer: usize,
    pub image_tokens: usize,
    pub layer_flops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    pub dims: ArchDims,
    pub n_image: usize,
    pub baseline_flops: f64,
    pub pruned_flops: f64,
    pub eta: f64,
    pub baseline_tflops: f64,
    pub pruned_tflops: f64,
    /// `pruned / baseline`.
    pub flops_ratio: f64,
    pub segments: Vec<CostSegment>,
}

/// Baseline and schedule-aware image-token FLOPs.
pub fn schedule_cost(dims: &ArchDims, n_image: usize, schedule: &PruneSchedule) -> Result<CostProfile> {
    let _ = ArchDims::new(dims.layers, dims.hidden, dims.ffn)?;
    schedule.validate(Some(dims.layers))?;
    let full = layer_flops(n_image, dims);
    let baseline = dims.layers as f64 * full;

    let mut segments = Vec::new();
    let mut start = 1;
    let mut n = n_image;
    for stage in &schedule.stages {
        let end = stage.filter_layer;
        segments.push(CostSegment {
            first_layer: start,
            last_layer: end,
            image_tokens: n,
            layer_flops: layer_flops(n, dims),
        });
        n = kept_count(n, stage.filter_ratio);
        start = end + 1;
    }
    segments.push(CostSegment {
        first_layer: start,
        last_layer: dims.layers,
        image_tokens: n,
        layer_flops: layer_flops(n, dims),
    });

    let mut pruned = 0.0;
    for s in &segments {
        pruned += (s.last_layer + 1 - s.first_layer) as f64 * s.layer_flops;
    }
    let ratio = if baseline > 0.0 { pruned / baseline } else { 1.0 };
    Ok(CostProfile {
        dims: *dims,
        n_image,
        baseline_flops: baseline,
        pruned_flops: pruned,
        eta: 1.0 - ratio,
        baseline_tflops: baseline / 1e12,
        pruned_tflops: pruned / 1e12,
        flops_ratio: ratio,
        segments,
    })
}

/// [`schedule_cost`] for the laboratory model's own dimensions.
pub fn toy_model_cost(
    config: &ModelConfig,
    n_image: usize,
    schedule: &PruneSchedule,
) -> Result<CostProfile> {
    schedule_cost(&ArchDims::from_config(config), n_image, schedule)
}
