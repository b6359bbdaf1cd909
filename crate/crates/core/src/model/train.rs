//! Adam training on the answer-token cross-entropy.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::forward::{build_graph, ForwardOptions, LossTarget};
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng;
use crate::task::SyntheticExample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl TrainSpec {
    /// Settings used by the reference pipeline.
    pub fn reference() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            learning_rate: 2e-3,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        use alloc::format;
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config(format!(
                "steps {} / batch {} must be positive",
                self.steps, self.batch
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::Config("adam eps must be > 0 and grad clip >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

/// Loss and parameter gradients for one example, in canonical tensor order.
pub(crate) fn example_gradients(
    params: &ModelParams,
    ex: &SyntheticExample,
) -> Result<(f64, Vec<Matrix>)> {
    let prompt = ex.prompt();
    let opts = ForwardOptions {
        loss_target: Some(LossTarget {
            position: prompt.len() - 1,
            token: ex.gold,
        }),
        ..Default::default()
    };
    let mut g = build_graph(params, prompt, &ex.layout, &opts)?;
    let loss_var = g.loss.ok_or(Error::MissingState("loss"))?;
    let loss = g.tape.value(loss_var).get(0, 0);
    let mut grads = g.tape.backward(loss_var)?;
    let out = g
        .params
        .iter()
        .map(|&v| {
            let (r, c) = g.tape.value(v).shape();
            grads.take(v).unwrap_or_else(|| Matrix::zeros(r, c))
        })
        .collect();
    Ok((loss, out))
}

/// Trains `params` in place with Adam. Batch composition is drawn from
/// `spec.seed` (reshuffled every epoch); within a step examples are
/// accumulated in ascending dataset order.
pub fn train(
    params: &mut ModelParams,
    dataset: &[SyntheticExample],
    spec: &TrainSpec,
) -> Result<TrainReport> {
    spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptySegment("dataset"));
    }
    for (k, ex) in dataset.iter().enumerate() {
        if ex.tokens.len() > params.config.max_seq {
            return Err(Error::Overflow {
                len: ex.tokens.len(),
                max: params.config.max_seq,
            }
            .at_example(k));
        }
    }
    let mut rng = rng::seeded(spec.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();

    let shapes: Vec<(usize, usize)> = params.tensors().iter().map(|t| t.shape()).collect();
    let mut m: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
    let mut v = m.clone();
    let mut losses = Vec::with_capacity(spec.steps);

    for step in 0..spec.steps {
        let mut batch = Vec::with_capacity(spec.batch);
        while batch.len() < spec.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        batch.sort_unstable();

        let mut acc: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        let mut loss_sum = 0.0;
        for &k in &batch {
            let (loss, grads) =
                example_gradients(params, &dataset[k]).map_err(|e| e.at_example(k))?;
            loss_sum += loss;
            for (a, g) in acc.iter_mut().zip(&grads) {
                a.add_assign(g)?;
            }
        }
        let loss = loss_sum / batch.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);

        let inv = 1.0 / batch.len() as f64;
        let mut norm_sq = 0.0;
        for a in acc.iter_mut() {
            for x in a.data_mut() {
                *x *= inv;
                norm_sq += *x * *x;
            }
        }
        let norm = libm::sqrt(norm_sq);
        let clip = if spec.grad_clip > 0.0 && norm > spec.grad_clip {
            spec.grad_clip / norm
        } else {
            1.0
        };

        let t = (step + 1) as i32;
        let bc1 = 1.0 - libm::pow(spec.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(spec.beta2, t as f64);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(&acc)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let p = p.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i] * clip;
                m[i] = spec.beta1 * m[i] + (1.0 - spec.beta1) * gi;
                v[i] = spec.beta2 * v[i] + (1.0 - spec.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= spec.learning_rate * mh / (libm::sqrt(vh) + spec.adam_eps);
            }
        }
        if !params.all_finite() {
            return Err(Error::Diverged { step, loss });
        }
    }
    Ok(TrainReport { losses })
}
