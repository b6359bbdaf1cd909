use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng;

/// Weights of one transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub ffn_up: Matrix,
    pub ffn_down: Matrix,
}

/// All model weights. Tensor order (see [`ModelParams::tensors`]) is the
/// canonical order used for initialisation, optimiser state and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub token_embed: Matrix,
    pub pos_embed: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_gain: Matrix,
    pub final_bias: Matrix,
    pub head: Matrix,
}

const LAYER_TENSORS: [&str; 10] = [
    "ln1.gain",
    "ln1.bias",
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "ln2.gain",
    "ln2.bias",
    "ffn.up",
    "ffn.down",
];

impl LayerParams {
    fn zeros(c: &ModelConfig) -> Self {
        let d = c.hidden;
        Self {
            ln1_gain: Matrix::zeros(1, d),
            ln1_bias: Matrix::zeros(1, d),
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            ln2_gain: Matrix::zeros(1, d),
            ln2_bias: Matrix::zeros(1, d),
            ffn_up: Matrix::zeros(d, c.ffn),
            ffn_down: Matrix::zeros(c.ffn, d),
        }
    }

    fn tensors(&self) -> [&Matrix; 10] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.ffn_up,
            &self.ffn_down,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 10] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.ffn_up,
            &mut self.ffn_down,
        ]
    }
}

impl ModelParams {
    /// Correctly shaped, all-zero parameters.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        Ok(Self {
            config: config.clone(),
            token_embed: Matrix::zeros(config.vocab, d),
            pos_embed: Matrix::zeros(config.max_seq, d),
            layers: (0..config.layers).map(|_| LayerParams::zeros(config)).collect(),
            final_gain: Matrix::zeros(1, d),
            final_bias: Matrix::zeros(1, d),
            head: Matrix::zeros(d, config.vocab),
        })
    }

    /// Canonical tensor names, in canonical order.
    pub fn tensor_names(config: &ModelConfig) -> Vec<String> {
        let mut names = Vec::new();
        names.push("token_embed".into());
        names.push("pos_embed".into());
        for l in 0..config.layers {
            for t in LAYER_TENSORS {
                names.push(format!("layers.{l}.{t}"));
            }
        }
        names.push("final_ln.gain".into());
        names.push("final_ln.bias".into());
        names.push("head".into());
        names
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = Vec::with_capacity(5 + 10 * self.layers.len());
        out.push(&self.token_embed);
        out.push(&self.pos_embed);
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.push(&self.final_gain);
        out.push(&self.final_bias);
        out.push(&self.head);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::with_capacity(5 + 10 * self.layers.len());
        out.push(&mut self.token_embed);
        out.push(&mut self.pos_embed);
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out.push(&mut self.head);
        out
    }

    /// Named tensors in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        Self::tensor_names(&self.config)
            .into_iter()
            .zip(self.tensors())
            .collect()
    }

    /// Rebuilds parameters from tensors given in canonical order.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Matrix>) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let slots = params.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::LengthMismatch {
                left: slots.len(),
                right: tensors.len(),
            });
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            slot.check_same(&t, "from_tensors")?;
            *slot = t;
        }
        Ok(params)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }
}

/// Seeded initialisation: every weight ~ N(0, init_std²) in canonical tensor
/// order, layer-norm gains 1 and biases 0.
pub fn build_model(config: &ModelConfig) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(config)?;
    let names = ModelParams::tensor_names(config);
    let mut rng = rng::seeded(config.init_seed);
    let std = config.init_std;
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        if name.ends_with(".gain") {
            t.data_mut().fill(1.0);
        } else if name.ends_with(".bias") {
            continue;
        } else {
            for v in t.data_mut() {
                *v = std * rng::normal(&mut rng);
            }
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            hidden: 16,
            ffn: 32,
            vocab: 32,
            max_seq: 16,
            init_seed: 7,
            init_std: 0.02,
        }
    }

    #[test]
    fn build_is_deterministic() {
        assert_eq!(build_model(&small()).unwrap(), build_model(&small()).unwrap());
    }

    #[test]
    fn zero_std_zeroes_weights() {
        let mut c = small();
        c.init_std = 0.0;
        let p = build_model(&c).unwrap();
        for (name, t) in p.named_tensors() {
            let expect = if name.ends_with(".gain") { 1.0 } else { 0.0 };
            assert!(t.data().iter().all(|&v| v == expect), "{name}");
        }
    }

    #[test]
    fn names_match_tensors() {
        let p = build_model(&small()).unwrap();
        assert_eq!(ModelParams::tensor_names(&p.config).len(), p.tensors().len());
        assert_eq!(p.tensors().len(), 5 + 10 * 2);
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = small();
        c.hidden = 15;
        assert!(matches!(build_model(&c), Err(Error::Config(_))));
    }
}
