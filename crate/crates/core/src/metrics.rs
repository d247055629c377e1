//! Embedding-quality measurements and the per-step metrics record.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorgraph::Matrix;

/// One logged training step. Column order is the metrics CSV layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub eta: f64,
    pub mtd: f64,
    pub alignment: f64,
    pub uniformity: f64,
    /// NaN on steps without an evaluation.
    pub eval_spearman: f64,
    pub collapse_score: f64,
}

/// Maximum traceable distance, `1 / (1 - eta) + queue_size / batch_size`.
pub fn mtd(eta: f64, queue_size: usize, batch_size: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::domain("mtd", format!("eta {eta} outside [0, 1)")));
    }
    if batch_size == 0 {
        return Err(Error::domain("mtd", "batch size is zero"));
    }
    Ok(1.0 / (1.0 - eta) + queue_size as f64 / batch_size as f64)
}

fn sq_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Mean squared distance between positive pairs (row `i` of `u` with row `i`
/// of `v`).
pub fn alignment(u: &Matrix, v: &Matrix) -> Result<f64> {
    if u.rows() == 0 {
        return Err(Error::contract("alignment", "no pairs"));
    }
    if u.shape() != v.shape() {
        return Err(Error::contract("alignment", format!("{:?} vs {:?}", u.shape(), v.shape())));
    }
    let total: f64 = u.row_iter().zip(v.row_iter()).map(|(a, b)| sq_dist(a, b)).sum();
    Ok(total / u.rows() as f64)
}

/// `log mean_{i<j} exp(-2 |x_i - x_j|^2)`.
pub fn uniformity(points: &Matrix) -> Result<f64> {
    let n = points.rows();
    if n < 2 {
        return Err(Error::contract("uniformity", format!("need at least 2 points, got {n}")));
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += (-2.0 * sq_dist(points.row(i), points.row(j))).exp();
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok((sum / pairs).ln())
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of two rank vectors. Ranks are half-integers, so
/// doubling them gives integers and every sum below is exact; only the final
/// square root and division round.
fn rank_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as i128;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0i128, 0i128, 0i128, 0i128, 0i128);
    for (a, b) in x.iter().zip(y) {
        let (a, b) = ((2.0 * a) as i128, (2.0 * b) as i128);
        sx += a;
        sy += b;
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    let num = n * sxy - sx * sy;
    let vx = n * sxx - sx * sx;
    let vy = n * syy - sy * sy;
    if vx == 0 || vy == 0 {
        return None;
    }
    Some((num as f64 / ((vx as f64) * (vy as f64)).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::contract("spearman", format!("lengths {} and {} (need equal, >= 2)", x.len(), y.len())));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::domain("spearman", "NaN input"));
    }
    rank_pearson(&average_ranks(x), &average_ranks(y))
        .ok_or_else(|| Error::domain("spearman", "constant input has no rank correlation"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Centering {
    /// Subtract the mean row before decomposing.
    MeanCentered,
    Raw,
}

/// Singular values in descending order.
pub fn singular_spectrum(embeddings: &Matrix, centering: Centering) -> Vec<f64> {
    let (n, d) = (embeddings.rows(), embeddings.cols());
    if n == 0 || d == 0 {
        return Vec::new();
    }
    let mut data = embeddings.data().to_vec();
    if centering == Centering::MeanCentered {
        for j in 0..d {
            let mean = (0..n).map(|i| data[i * d + j]).sum::<f64>() / n as f64;
            (0..n).for_each(|i| data[i * d + j] -= mean);
        }
    }
    let m = DMatrix::from_row_slice(n, d, &data);
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Mean pairwise cosine similarity of the rows, mapped to `[0, 1]` by
/// `(c + 1) / 2`. Near 1 means every embedding points the same way.
pub fn collapse_score(embeddings: &Matrix) -> Result<f64> {
    let n = embeddings.rows();
    if n < 2 {
        return Err(Error::contract("collapse_score", format!("need at least 2 rows, got {n}")));
    }
    let unit = embeddings.normalized_rows();
    // sum_{i != j} u_i.u_j = |sum u|^2 - sum |u_i|^2
    let mut total = vec![0.0; unit.cols()];
    let mut self_dots = 0.0;
    for row in unit.row_iter() {
        for (t, v) in total.iter_mut().zip(row) {
            *t += v;
        }
        self_dots += row.iter().map(|v| v * v).sum::<f64>();
    }
    let cross = total.iter().map(|v| v * v).sum::<f64>() - self_dots;
    let mean_cos = cross / (n * (n - 1)) as f64;
    Ok(((mean_cos + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// Tracks runs of consecutive collapse scores above a threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollapseMonitor {
    pub threshold: f64,
    pub patience: usize,
    streak: usize,
}

impl Default for CollapseMonitor {
    fn default() -> Self {
        Self::new(0.99, 50)
    }
}

impl CollapseMonitor {
    pub fn new(threshold: f64, patience: usize) -> Self {
        Self { threshold, patience, streak: 0 }
    }

    /// Records a score; returns true once the streak reaches `patience`.
    pub fn observe(&mut self, score: f64) -> bool {
        if score > self.threshold {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        self.collapsed()
    }

    pub fn streak(&self) -> usize {
        self.streak
    }

    pub fn collapsed(&self) -> bool {
        self.streak >= self.patience
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(r: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn mtd_examples() {
        assert!((mtd(0.85, 512, 64).unwrap() - 14.67).abs() < 0.01);
        assert_eq!(mtd(0.5, 0, 7).unwrap(), 2.0);
        assert!((mtd(0.9, 1024, 256).unwrap() - 14.0).abs() < 1e-12);
        assert!(mtd(1.0, 1, 1).is_err());
        assert!(mtd(0.5, 1, 0).is_err());
    }

    #[test]
    fn alignment_examples() {
        let u = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(alignment(&u, &u).unwrap(), 0.0);
        let a = rows(&[&[0.6, 0.8]]);
        let b = rows(&[&[-0.6, -0.8]]);
        assert!((alignment(&a, &b).unwrap() - 4.0).abs() < 1e-15);
        assert!(alignment(&Matrix::zeros(0, 2), &Matrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn uniformity_examples() {
        let same = rows(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        assert_eq!(uniformity(&same).unwrap(), 0.0);
        let anti = rows(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        assert!((uniformity(&anti).unwrap() + 8.0).abs() < 1e-12);
        assert!(uniformity(&rows(&[&[1.0]])).is_err());
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v| v * v * v + 1.0).collect();
        assert_eq!(spearman(&x, &y).unwrap(), 1.0);
        let r: Vec<f64> = x.iter().rev().copied().collect();
        assert_eq!(spearman(&x, &r).unwrap(), -1.0);
        assert!(matches!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::Domain { .. })));
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn spectrum_examples() {
        let sv = singular_spectrum(&Matrix::identity(3), Centering::Raw);
        assert!(sv.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let rank1 = rows(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0], &[-1.0, -2.0, -3.0]]);
        let sv = singular_spectrum(&rank1, Centering::Raw);
        assert!(sv[0] > 1.0);
        assert!(sv[1..].iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn collapse_examples() {
        let same = rows(&[&[0.3, 0.4], &[0.3, 0.4], &[3.0, 4.0]]);
        assert!((collapse_score(&same).unwrap() - 1.0).abs() < 1e-12);
        let ortho = Matrix::identity(4);
        assert!((collapse_score(&ortho).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn monitor_needs_consecutive_scores() {
        let mut m = CollapseMonitor::new(0.99, 3);
        assert!(!m.observe(0.995));
        assert!(!m.observe(0.995));
        assert!(!m.observe(0.5));
        assert!(!m.observe(0.995));
        assert!(!m.observe(0.995));
        assert!(m.observe(0.995));
    }
}
