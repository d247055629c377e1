//! InfoNCE over a query batch, its positive keys and a shared negative set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorgraph::{Graph, GraphTensor, Matrix};

const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: 0.05 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config("loss.temperature", "must be positive"));
        }
        Ok(())
    }
}

fn check_unit_rows(what: &str, rows: impl Iterator<Item = impl AsRef<[f64]>>) -> Result<()> {
    for (i, row) in rows.enumerate() {
        let norm = row.as_ref().iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::contract("info_nce", format!("{what} row {i} has norm {norm}, expected 1")));
        }
    }
    Ok(())
}

/// Mean over the batch of `-log(exp(q.k/t) / (exp(q.k/t) + sum_l exp(q.l/t)))`.
///
/// Only `q` lives on the graph; keys and negatives are plain matrices, so no
/// gradient can reach them.
pub fn info_nce(g: &mut Graph, q: GraphTensor, k: &Matrix, negatives: &Matrix, tau: f64) -> Result<GraphTensor> {
    if !(tau > 0.0) {
        return Err(Error::contract("info_nce", format!("temperature {tau} must be positive")));
    }
    let shape = g.shape(q).to_vec();
    if shape.len() != 2 || shape[0] != k.rows() || shape[1] != k.cols() {
        return Err(Error::contract("info_nce", format!("query shape {shape:?} vs key shape {:?}", k.shape())));
    }
    let d = shape[1];
    if negatives.rows() > 0 && negatives.cols() != d {
        return Err(Error::contract("info_nce", format!("negatives have dim {}, queries {d}", negatives.cols())));
    }
    let qd = g.value(q).to_vec();
    check_unit_rows("query", qd.chunks_exact(d.max(1)))?;
    check_unit_rows("key", k.row_iter())?;
    check_unit_rows("negative", negatives.row_iter())?;

    let keys = g.constant_matrix(k);
    let prod = g.mul(q, keys)?;
    let pos = g.sum_cols(prod);
    let logits = if negatives.rows() == 0 {
        pos
    } else {
        let m = negatives.rows();
        let mut nt = vec![0.0; d * m];
        for (j, row) in negatives.row_iter().enumerate() {
            for (i, &v) in row.iter().enumerate() {
                nt[i * m + j] = v;
            }
        }
        let nt = g.constant(&[d, m], nt)?;
        let neg = g.matmul(q, nt)?;
        g.concat_cols(&[pos, neg])?
    };
    let logits = g.scale(logits, 1.0 / tau);
    let lse = g.logsumexp_rows(logits);
    let pos_scaled = g.slice(logits, 0..shape[0], 0..1)?;
    let per_row = g.sub(lse, pos_scaled)?;
    Ok(g.mean(per_row))
}

/// Loss value only, for plain matrices.
pub fn info_nce_value(q: &Matrix, k: &Matrix, negatives: &Matrix, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let qt = g.constant_matrix(q);
    let loss = info_nce(&mut g, qt, k, negatives, tau)?;
    Ok(g.scalar(loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn positive_only_identical_pair_is_zero() {
        let q = m(&[&[0.6, 0.8], &[1.0, 0.0]]);
        let empty = Matrix::zeros(0, 2);
        assert_eq!(info_nce_value(&q, &q, &empty, 0.05).unwrap(), 0.0);
    }

    #[test]
    fn scalar_oracle() {
        let q = m(&[&[1.0, 0.0]]);
        let neg = m(&[&[0.0, 1.0]]);
        let loss = info_nce_value(&q, &q, &neg, 1.0).unwrap();
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - want).abs() < 1e-15);
        assert!((loss - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn rejects_unnormalized_rows() {
        let q = m(&[&[1.0, 1.0]]);
        let k = m(&[&[1.0, 0.0]]);
        assert!(matches!(info_nce_value(&q, &k, &Matrix::zeros(0, 2), 1.0), Err(Error::Contract { .. })));
        let q = m(&[&[1.0, 0.0]]);
        assert!(info_nce_value(&q, &k, &m(&[&[0.5, 0.5]]), 1.0).is_err());
        assert!(info_nce_value(&q, &k, &Matrix::zeros(0, 2), 0.0).is_err());
    }

    #[test]
    fn large_logits_stay_finite() {
        let q = m(&[&[1.0, 0.0]]);
        let neg = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let loss = info_nce_value(&q, &q, &neg, 1e-4).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_only_reaches_queries() {
        let mut g = Graph::new();
        let q = g.leaf(&[1, 2], vec![0.6, 0.8], true).unwrap();
        let k = m(&[&[1.0, 0.0]]);
        let loss = info_nce(&mut g, q, &k, &m(&[&[0.0, 1.0]]), 0.5).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.len(), 1);
        assert!(grads.contains(q));
    }
}
