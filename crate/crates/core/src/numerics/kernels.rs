//! Forward kernels and their exact vector-Jacobian products.
//!
//! Every kernel here is deterministic: the summation order is fixed by the
//! loop structure, so identical inputs give bit-identical outputs.

use alloc::vec;
use alloc::vec::Vec;

use super::matrix::{Mask, Matrix};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let (p, q, r) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(p, r);
    let bd = b.data();
    let od = out.data_mut();
    for i in 0..p {
        let arow = &a.data()[i * q..(i + 1) * q];
        let orow = &mut od[i * r..(i + 1) * r];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &bd[k * r..(k + 1) * r];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::Shape {
            op: "matmul_nt",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    matmul(a, &b.transpose())
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::Shape {
            op: "matmul_tn",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let (q, p, r) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(p, r);
    let od = out.data_mut();
    for k in 0..q {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &aki) in arow.iter().enumerate() {
            let orow = &mut od[i * r..(i + 1) * r];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

/// Row softmax over the entries allowed by `mask`; disallowed entries are
/// exactly zero. Rows are stabilised by subtracting the row maximum.
pub fn masked_row_softmax(scores: &Matrix, mask: &Mask) -> Result<Matrix> {
    if scores.shape() != mask.shape() {
        return Err(Error::Shape {
            op: "masked_row_softmax",
            lhs: scores.shape(),
            rhs: mask.shape(),
        });
    }
    let mut out = Matrix::zeros(scores.rows(), scores.cols());
    for r in 0..scores.rows() {
        let s = scores.row(r);
        let allowed = mask.row(r);
        let mut max = f64::NEG_INFINITY;
        for (&v, &ok) in s.iter().zip(allowed) {
            if ok && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: r });
        }
        let o = out.row_mut(r);
        let mut total = 0.0;
        for ((dst, &v), &ok) in o.iter_mut().zip(s).zip(allowed) {
            if ok {
                let e = libm::exp(v - max);
                *dst = e;
                total += e;
            }
        }
        for v in o.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// Softmax VJP given the softmax output `probs`: `p ⊙ (g − Σ p·g)` per row.
/// Entries outside the mask carry zero probability and so receive zero.
pub fn masked_row_softmax_backward(probs: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    probs.check_same(upstream, "masked_row_softmax_backward")?;
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let g = upstream.row(r);
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((o, &pv), &gv) in out.row_mut(r).iter_mut().zip(p).zip(g) {
            *o = pv * (gv - dot);
        }
    }
    Ok(out)
}

/// Saved statistics of a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

/// Row-wise layer normalisation with affine `gain` / `bias` (both `1×d`).
pub fn layer_norm(
    x: &Matrix,
    gain: &Matrix,
    bias: &Matrix,
    eps: f64,
) -> Result<(Matrix, LayerNormCache)> {
    let d = x.cols();
    if gain.shape() != (1, d) || bias.shape() != (1, d) {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: x.shape(),
            rhs: gain.shape(),
        });
    }
    let mut normalized = Matrix::zeros(x.rows(), d);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    let g = gain.data();
    let b = bias.data();
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / libm::sqrt(var + eps);
        inv_std.push(is);
        let n = normalized.row_mut(r);
        for (dst, &v) in n.iter_mut().zip(row) {
            *dst = (v - mean) * is;
        }
        let o = out.row_mut(r);
        for j in 0..d {
            o[j] = normalized.get(r, j) * g[j] + b[j];
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Layer-norm VJP. Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Matrix,
    upstream: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    cache.normalized.check_same(upstream, "layer_norm_backward")?;
    let (rows, d) = upstream.shape();
    let g = gain.data();
    let mut dx = Matrix::zeros(rows, d);
    let mut dgain = Matrix::zeros(1, d);
    let mut dbias = Matrix::zeros(1, d);
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let up = upstream.row(r);
        let xh = cache.normalized.row(r);
        for j in 0..d {
            dxhat[j] = up[j] * g[j];
            dgain.data_mut()[j] += up[j] * xh[j];
            dbias.data_mut()[j] += up[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[r];
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = is * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    Ok((dx, dgain, dbias))
}

#[inline]
fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + GELU_A * x * x * x)))
}

#[inline]
fn gelu_derivative(x: f64) -> f64 {
    let t = libm::tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Tanh-approximation GELU, elementwise.
pub fn gelu(x: &Matrix) -> Matrix {
    x.map(gelu_scalar)
}

/// GELU VJP with respect to the pre-activation `x`.
pub fn gelu_backward(x: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    x.check_same(upstream, "gelu_backward")?;
    let mut out = upstream.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
        *o *= gelu_derivative(v);
    }
    Ok(out)
}

/// `−log softmax(logits)[target]`, together with the softmax probabilities.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::Index {
            what: "cross_entropy target",
            index: target,
            limit: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("cross_entropy logits".into()));
    }
    let mut probs: Vec<f64> = logits.iter().map(|&v| libm::exp(v - max)).collect();
    let total: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= total;
    }
    let loss = libm::log(total) - (logits[target] - max);
    Ok((loss, probs))
}

/// Cross-entropy gradient with respect to the logits: `softmax − onehot`.
pub fn cross_entropy_backward(probs: &[f64], target: usize) -> Vec<f64> {
    let mut g = probs.to_vec();
    g[target] -= 1.0;
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
        assert_eq!(matmul(&a, &Matrix::zeros(2, 2)).unwrap(), Matrix::zeros(2, 2));
        let b = m(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(
            matmul(&a, &b).unwrap(),
            m(&[&[19.0, 22.0], &[43.0, 50.0]])
        );
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert_eq!(
            err,
            Error::Shape {
                op: "matmul",
                lhs: (2, 3),
                rhs: (2, 3)
            }
        );
    }

    #[test]
    fn transposed_products_agree_with_plain() {
        let a = m(&[&[1.0, -2.0, 0.5], &[3.0, 4.0, -1.0]]);
        let b = m(&[&[0.1, 0.2, 0.3], &[-1.0, 2.0, 0.0]]);
        assert_eq!(matmul_nt(&a, &b).unwrap(), matmul(&a, &b.transpose()).unwrap());
        assert_eq!(matmul_tn(&a, &b).unwrap(), matmul(&a.transpose(), &b).unwrap());
    }

    #[test]
    fn softmax_examples() {
        let out = masked_row_softmax(&m(&[&[0.0, 0.0]]), &Mask::all(1, 2)).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);

        let mask = Mask::from_fn(1, 2, |_, j| j == 0);
        let out = masked_row_softmax(&m(&[&[3.7, 1e6]]), &mask).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0]);

        let out = masked_row_softmax(&m(&[&[1.0, 2.0, 3.0]]), &Mask::all(1, 3)).unwrap();
        let expected = [0.090_030_57, 0.244_728_47, 0.665_240_96];
        for (a, b) in out.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rejects_fully_masked_row() {
        let mask = Mask::from_fn(2, 2, |i, _| i == 0);
        let err = masked_row_softmax(&Matrix::zeros(2, 2), &mask).unwrap_err();
        assert_eq!(err, Error::DegenerateRow { row: 1 });
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Matrix::filled(1, 3, 1.0);
        let zeros = Matrix::zeros(1, 3);
        let (out, _) = layer_norm(&Matrix::filled(1, 3, 4.2), &ones, &zeros, 1e-5).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let (out, _) = layer_norm(
            &m(&[&[1.0, -1.0]]),
            &Matrix::filled(1, 2, 1.0),
            &Matrix::zeros(1, 2),
            1e-300,
        )
        .unwrap();
        assert_eq!(out.data(), &[1.0, -1.0]);

        let (out, _) = layer_norm(&m(&[&[1.0, 2.0, 3.0]]), &ones, &zeros, 1e-5).unwrap();
        for (a, b) in out.data().iter().zip([-1.22474, 0.0, 1.22474]) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_normalises_rows() {
        let x = m(&[&[0.3, -2.0, 5.0, 1.0], &[10.0, 11.0, 9.5, 10.25]]);
        let (out, _) =
            layer_norm(&x, &Matrix::filled(1, 4, 1.0), &Matrix::zeros(1, 4), 1e-12).unwrap();
        for r in 0..2 {
            let row = out.row(r);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu(&Matrix::zeros(1, 1)).data(), &[0.0]);
        let big = gelu(&Matrix::filled(1, 1, 12.0)).data()[0];
        assert!((big - 12.0).abs() / 12.0 < 1e-6);
        let one = gelu(&Matrix::filled(1, 1, 1.0)).data()[0];
        assert!((one - 0.841_192).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, _) = cross_entropy(&[0.3; 4], 1).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        let (loss, _) = cross_entropy(&[0.0, 0.0, 800.0], 2).unwrap();
        assert!(loss.abs() < 1e-300);
        let (loss, probs) = cross_entropy(&[1.0, 2.0, 3.0], 2).unwrap();
        assert!((loss - 0.407_606).abs() < 1e-5);
        let g = cross_entropy_backward(&probs, 2);
        assert!((g.iter().sum::<f64>()).abs() < 1e-15);
        assert!(cross_entropy(&[0.0; 3], 3).is_err());
    }
}
