//! Attention saliency `I_l = |Σ_h A_{h,l} ⊙ ∂ℒ/∂A_{h,l}|` and the scores
//! built from it.
//!
//! `I_l(i, j)` is the importance of the edge along which row `i` reads
//! token `j`, so column sums measure what a token *sends*.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, ForwardOptions, ForwardTrace, LossTarget, ModelParams, TokenLayout};
use crate::numerics::Matrix;
use crate::task::SyntheticExample;

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMatrix {
    pub layer: usize,
    pub values: Matrix,
}

/// Sender-side importance per segment (column sums divided by segment size).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModalityScores {
    pub s_sys: f64,
    pub s_img: f64,
    pub s_ins: f64,
}

/// Image-centred flow scores.
///
/// `s_vt` follows the index placement `Σ_{j∈ℐ} Σ_{i∈𝒱} I(i, j)` literally;
/// with a causal mask and the system < image < instruction order that block
/// is structurally zero. `s_vt_recv` sums `I(i, j)` for instruction rows `i`
/// reading image columns `j`, which is the image → instruction flow.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VisualFlowScores {
    pub s_vv: f64,
    pub s_vt: f64,
    pub s_vt_recv: f64,
}

pub fn saliency_matrix(trace: &ForwardTrace, layer: usize) -> Result<SaliencyMatrix> {
    let grads = trace
        .attention_grad
        .as_ref()
        .ok_or(Error::MissingState("attention gradients not recorded"))?;
    let heads = trace.attention.get(layer).ok_or(Error::Index {
        what: "saliency layer",
        index: layer,
        limit: trace.attention.len(),
    })?;
    let head_grads = &grads[layer];
    let (r, c) = heads[0].shape();
    let mut acc = Matrix::zeros(r, c);
    for (a, g) in heads.iter().zip(head_grads) {
        acc.add_assign(&a.hadamard(g)?)?;
    }
    Ok(SaliencyMatrix {
        layer,
        values: acc.map(libm::fabs),
    })
}

fn check_dims(sal: &SaliencyMatrix, layout: &TokenLayout) -> Result<()> {
    let n = layout.len();
    if sal.values.shape() != (n, n) {
        return Err(Error::Shape {
            op: "saliency scores",
            lhs: sal.values.shape(),
            rhs: (n, n),
        });
    }
    Ok(())
}

fn block_sum(
    values: &Matrix,
    rows: core::ops::Range<usize>,
    cols: core::ops::Range<usize>,
) -> f64 {
    let mut s = 0.0;
    for i in rows {
        for j in cols.clone() {
            s += values.get(i, j);
        }
    }
    s
}

pub fn modality_scores(sal: &SaliencyMatrix, layout: &TokenLayout) -> Result<ModalityScores> {
    check_dims(sal, layout)?;
    let all = 0..layout.len();
    let per = |cols: core::ops::Range<usize>, name| -> Result<f64> {
        if cols.is_empty() {
            return Err(Error::EmptySegment(name));
        }
        let size = cols.len() as f64;
        Ok(block_sum(&sal.values, all.clone(), cols) / size)
    };
    Ok(ModalityScores {
        s_sys: per(layout.sys_range(), "system")?,
        s_img: per(layout.img_range(), "image")?,
        s_ins: per(layout.ins_range(), "instruction")?,
    })
}

pub fn visual_flow_scores(sal: &SaliencyMatrix, layout: &TokenLayout) -> Result<VisualFlowScores> {
    check_dims(sal, layout)?;
    if layout.img == 0 {
        return Err(Error::EmptySegment("image"));
    }
    let nv = layout.img as f64;
    let v = &sal.values;
    // Outer sums run over j, inner over i, as the scores are written.
    let column_major = |cols: core::ops::Range<usize>, rows: core::ops::Range<usize>| {
        let mut s = 0.0;
        for j in cols {
            for i in rows.clone() {
                s += v.get(i, j);
            }
        }
        s
    };
    Ok(VisualFlowScores {
        s_vv: column_major(layout.img_range(), layout.img_range()) / nv,
        s_vt: column_major(layout.ins_range(), layout.img_range()) / nv,
        s_vt_recv: block_sum(v, layout.ins_range(), layout.img_range()) / nv,
    })
}

/// All scores of one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerFlow {
    pub layer: usize,
    pub modality: ModalityScores,
    pub flow: VisualFlowScores,
}

impl LayerFlow {
    /// `(name, value)` pairs in a fixed order for tabular output.
    pub fn metrics(&self) -> [(&'static str, f64); 6] {
        [
            ("s_sys", self.modality.s_sys),
            ("s_img", self.modality.s_img),
            ("s_ins", self.modality.s_ins),
            ("s_vv", self.flow.s_vv),
            ("s_vt", self.flow.s_vt),
            ("s_vt_recv", self.flow.s_vt_recv),
        ]
    }
}

/// Per-layer scores of a single example, using the gold-answer loss at the
/// final prompt position.
pub fn example_flow(params: &ModelParams, ex: &SyntheticExample) -> Result<Vec<LayerFlow>> {
    let opts = ForwardOptions {
        want_grads: true,
        loss_target: Some(LossTarget {
            position: ex.answer_position(),
            token: ex.gold,
        }),
        ..Default::default()
    };
    let trace = forward(params, ex.prompt(), &ex.layout, &opts)?;
    (0..trace.layers())
        .map(|l| {
            let sal = saliency_matrix(&trace, l)?;
            Ok(LayerFlow {
                layer: l,
                modality: modality_scores(&sal, &ex.layout)?,
                flow: visual_flow_scores(&sal, &ex.layout)?,
            })
        })
        .collect()
}

/// Arithmetic mean of [`example_flow`] over `dataset`, reduced in example
/// order.
pub fn dataset_flow_profile(
    params: &ModelParams,
    dataset: &[SyntheticExample],
) -> Result<Vec<LayerFlow>> {
    if dataset.is_empty() {
        return Err(Error::EmptySegment("dataset"));
    }
    let layers = params.config.layers;
    let mut acc: Vec<LayerFlow> = (0..layers)
        .map(|layer| LayerFlow {
            layer,
            ..Default::default()
        })
        .collect();
    for (k, ex) in dataset.iter().enumerate() {
        let rows = example_flow(params, ex).map_err(|e| e.at_example(k))?;
        for (a, r) in acc.iter_mut().zip(&rows) {
            a.modality.s_sys += r.modality.s_sys;
            a.modality.s_img += r.modality.s_img;
            a.modality.s_ins += r.modality.s_ins;
            a.flow.s_vv += r.flow.s_vv;
            a.flow.s_vt += r.flow.s_vt;
            a.flow.s_vt_recv += r.flow.s_vt_recv;
        }
    }
    let n = dataset.len() as f64;
    for a in acc.iter_mut() {
        a.modality.s_sys /= n;
        a.modality.s_img /= n;
        a.modality.s_ins /= n;
        a.flow.s_vv /= n;
        a.flow.s_vt /= n;
        a.flow.s_vt_recv /= n;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn trace_with(attn: Vec<Matrix>, grads: Vec<Matrix>) -> ForwardTrace {
        let n = attn[0].rows();
        ForwardTrace {
            attention: vec![attn],
            attention_grad: Some(vec![grads]),
            logits: Matrix::zeros(n, 1),
            keep_map: vec![(0..n).collect()],
            loss: None,
            stages: Vec::new(),
        }
    }

    fn lower_ones(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                m.set(i, j, 1.0);
            }
        }
        m
    }

    #[test]
    fn zero_gradients_give_zero_saliency() {
        let t = trace_with(vec![lower_ones(3)], vec![Matrix::zeros(3, 3)]);
        assert_eq!(saliency_matrix(&t, 0).unwrap().values, Matrix::zeros(3, 3));
    }

    #[test]
    fn single_head_is_abs_product() {
        let a = Matrix::from_rows(&[[1.0, 0.0], [0.25, 0.75]]).unwrap();
        let g = Matrix::from_rows(&[[-2.0, 5.0], [4.0, -1.0]]).unwrap();
        let s = saliency_matrix(&trace_with(vec![a], vec![g]), 0).unwrap();
        assert_eq!(s.values.data(), &[2.0, 0.0, 1.0, 0.75]);
    }

    #[test]
    fn abs_is_applied_after_head_sum() {
        let a = Matrix::from_rows(&[[1.0, 0.0], [0.5, 0.5]]).unwrap();
        let g1 = Matrix::from_rows(&[[3.0, 0.0], [-2.0, 1.0]]).unwrap();
        let g2 = g1.scale(-1.0);
        let s = saliency_matrix(&trace_with(vec![a.clone(), a], vec![g1, g2]), 0).unwrap();
        assert_eq!(s.values, Matrix::zeros(2, 2));
    }

    #[test]
    fn missing_gradients_is_an_error() {
        let mut t = trace_with(vec![lower_ones(2)], vec![Matrix::zeros(2, 2)]);
        t.attention_grad = None;
        assert!(matches!(saliency_matrix(&t, 0), Err(Error::MissingState(_))));
    }

    #[test]
    fn modality_examples() {
        let layout = TokenLayout::new(1, 3, 2);
        let zero = SaliencyMatrix {
            layer: 0,
            values: Matrix::zeros(6, 6),
        };
        assert_eq!(modality_scores(&zero, &layout).unwrap(), ModalityScores::default());

        let ones = SaliencyMatrix {
            layer: 0,
            values: lower_ones(6),
        };
        let m = modality_scores(&ones, &layout).unwrap();
        assert_eq!(m.s_sys, 6.0);
        // image columns 1,2,3 have 5,4,3 visible rows
        assert_eq!(m.s_img, 12.0 / 3.0);
        assert_eq!(m.s_ins, 3.0 / 2.0);

        let tripled = SaliencyMatrix {
            layer: 0,
            values: lower_ones(6).scale(3.0),
        };
        let t = modality_scores(&tripled, &layout).unwrap();
        assert_eq!(t.s_sys, 3.0 * m.s_sys);
        assert_eq!(t.s_img, 3.0 * m.s_img);

        let no_sys = TokenLayout::new(0, 4, 2);
        assert_eq!(
            modality_scores(&ones, &no_sys).unwrap_err(),
            Error::EmptySegment("system")
        );
    }

    #[test]
    fn visual_flow_examples() {
        let layout = TokenLayout::new(1, 3, 2);
        let zero = SaliencyMatrix {
            layer: 0,
            values: Matrix::zeros(6, 6),
        };
        assert_eq!(visual_flow_scores(&zero, &layout).unwrap(), VisualFlowScores::default());

        let mut vv = Matrix::zeros(6, 6);
        for i in 1..4 {
            for j in 1..=i {
                vv.set(i, j, 0.5);
            }
        }
        let s = visual_flow_scores(&SaliencyMatrix { layer: 0, values: vv }, &layout).unwrap();
        assert_eq!(s.s_vt, 0.0);
        assert_eq!(s.s_vt_recv, 0.0);
        assert_eq!(s.s_vv, 3.0 / 3.0);

        let ones = SaliencyMatrix {
            layer: 0,
            values: lower_ones(6),
        };
        let s = visual_flow_scores(&ones, &layout).unwrap();
        assert_eq!(s.s_vt, 0.0);
        assert_eq!(s.s_vt_recv, 6.0 / 3.0);

        let no_img = TokenLayout::new(3, 0, 3);
        assert!(visual_flow_scores(&ones, &no_img).is_err());
    }
}
