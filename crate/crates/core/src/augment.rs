//! Augmentations that turn one batch into two views.
//!
//! Token-level augmentations (position shuffle, token dropout) act on ids
//! before embedding. Feature dropout and FGSM act on the embedded input.
//! Encoder dropout is not configured here: each view simply gets its own
//! dropout seed.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensorgraph::{Graph, GraphTensor};
use crate::tokens::{TokenBatch, MASK_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// FGSM step on the online view; 0 disables the extra pass.
    pub fgsm_epsilon: f64,
    pub position_shuffle: bool,
    pub token_dropout_prob: f64,
    pub feature_dropout_prob: f64,
    /// Which views receive shuffle / token dropout / feature dropout.
    pub on_view_a: bool,
    pub on_view_b: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            fgsm_epsilon: 5e-9,
            position_shuffle: false,
            token_dropout_prob: 0.0,
            feature_dropout_prob: 0.0,
            on_view_a: true,
            on_view_b: true,
        }
    }
}

impl AugmentConfig {
    /// Everything off: views differ by encoder dropout only.
    pub fn dropout_only() -> Self {
        Self { fgsm_epsilon: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fgsm_epsilon >= 0.0) || !self.fgsm_epsilon.is_finite() {
            return Err(Error::config("augment.fgsm_epsilon", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.token_dropout_prob) {
            return Err(Error::config("augment.token_dropout_prob", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.feature_dropout_prob) {
            return Err(Error::config("augment.feature_dropout_prob", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// `x + epsilon * sign(grad)` with `sign(0) = 0`.
///
/// The result is rounded toward `x` where needed so that
/// `|x'[i] - x[i]| <= epsilon` holds in floating point.
pub fn fgsm_perturb(x: &[f64], grad: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if x.len() != grad.len() {
        return Err(Error::contract("fgsm_perturb", format!("input has {} values, gradient {}", x.len(), grad.len())));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::contract("fgsm_perturb", "epsilon must be >= 0"));
    }
    Ok(x.iter()
        .zip(grad)
        .map(|(&xi, &gi)| {
            let step = epsilon * sign(gi);
            let mut out = xi + step;
            while (out - xi).abs() > epsilon {
                out = if out > xi { out.next_down() } else { out.next_up() };
            }
            out
        })
        .collect())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Permutes the content tokens of each row. The CLS slot and padding stay put.
pub fn position_shuffle(tokens: &TokenBatch, seed: u64) -> TokenBatch {
    let mut rng = seed::rng(seed);
    let lengths = tokens.lengths();
    let mut out = tokens.clone();
    for (i, &len) in lengths.iter().enumerate() {
        if len > 2 {
            out.row_mut(i)[1..len].shuffle(&mut rng);
        }
    }
    out
}

/// Replaces each content token by `mask_id` with probability `prob`.
pub fn token_dropout(tokens: &TokenBatch, prob: f64, seed: u64, mask_id: u32) -> Result<TokenBatch> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::contract("token_dropout", format!("probability {prob} outside [0, 1]")));
    }
    let mut rng = seed::rng(seed);
    let lengths = tokens.lengths();
    let mut out = tokens.clone();
    for (i, &len) in lengths.iter().enumerate() {
        for t in out.row_mut(i).iter_mut().take(len).skip(1) {
            if rng.random::<f64>() < prob {
                *t = mask_id;
            }
        }
    }
    Ok(out)
}

/// Zeroes embedded features with probability `prob`. No rescaling.
pub fn feature_dropout(g: &mut Graph, embedded: GraphTensor, prob: f64, seed: u64) -> Result<GraphTensor> {
    if !(0.0..1.0).contains(&prob) {
        return Err(Error::contract("feature_dropout", format!("probability {prob} outside [0, 1)")));
    }
    if prob == 0.0 {
        return Ok(embedded);
    }
    let mut rng = seed::rng(seed);
    let mask: Vec<f64> =
        (0..g.value(embedded).len()).map(|_| if rng.random::<f64>() < prob { 0.0 } else { 1.0 }).collect();
    let shape = g.shape(embedded).to_vec();
    let m = g.constant(&shape, mask)?;
    Ok(g.mul(embedded, m)?)
}

/// One augmented view of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub tokens: TokenBatch,
    /// `(probability, seed)` of feature dropout on the embedded input.
    pub feature_dropout: Option<(f64, u64)>,
    /// FGSM step to apply inside the training step, online view only.
    pub fgsm_epsilon: Option<f64>,
    pub dropout_seed: u64,
}

impl View {
    /// Applies the feature-level part of the view to an embedded batch.
    pub fn apply_features(&self, g: &mut Graph, embedded: GraphTensor) -> Result<GraphTensor> {
        match self.feature_dropout {
            Some((p, s)) => feature_dropout(g, embedded, p, s),
            None => Ok(embedded),
        }
    }
}

/// Builds the online view (`a`) and target view (`b`) with independent
/// seeds derived from `step_seed`.
pub fn make_views(tokens: &TokenBatch, config: &AugmentConfig, step_seed: u64) -> Result<(View, View)> {
    config.validate()?;
    let build = |role: u64, enabled: bool, fgsm: Option<f64>| -> Result<View> {
        let base = seed::derive(step_seed, &[role]);
        let mut t = tokens.clone();
        let mut feature = None;
        if enabled {
            if config.position_shuffle {
                t = position_shuffle(&t, seed::derive(base, &[1]));
            }
            if config.token_dropout_prob > 0.0 {
                t = token_dropout(&t, config.token_dropout_prob, seed::derive(base, &[2]), MASK_ID)?;
            }
            if config.feature_dropout_prob > 0.0 {
                feature = Some((config.feature_dropout_prob, seed::derive(base, &[3])));
            }
        }
        Ok(View { tokens: t, feature_dropout: feature, fgsm_epsilon: fgsm, dropout_seed: seed::derive(base, &[4]) })
    };
    let fgsm = (config.fgsm_epsilon > 0.0).then_some(config.fgsm_epsilon);
    let a = build(seed::role::VIEW_A, config.on_view_a, fgsm)?;
    let b = build(seed::role::VIEW_B, config.on_view_b, None)?;
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::CLS_ID;

    fn sample_batch(rows: usize, len: usize) -> TokenBatch {
        let sentences: Vec<Vec<u32>> =
            (0..rows).map(|r| (0..len).map(|i| 10 + ((r * 7 + i * 3) % 50) as u32).collect()).collect();
        TokenBatch::from_sentences(&sentences)
    }

    #[test]
    fn fgsm_examples() {
        assert_eq!(fgsm_perturb(&[1.0, -2.0], &[3.0, -1.0], 0.0).unwrap(), vec![1.0, -2.0]);
        assert_eq!(fgsm_perturb(&[0.0, 0.0, 0.0], &[2.0, -3.0, 0.0], 0.1).unwrap(), vec![0.1, -0.1, 0.0]);
        assert!(fgsm_perturb(&[0.0], &[1.0, 2.0], 0.1).is_err());
        assert_eq!(AugmentConfig::default().fgsm_epsilon, 5e-9);
    }

    #[test]
    fn fgsm_never_exceeds_epsilon() {
        let x: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.7137).sin() * 3.0).collect();
        let g: Vec<f64> = (0..1000).map(|i| (i as f64 * 1.31).cos()).collect();
        for eps in [1e-3, 5e-9, 0.37] {
            let out = fgsm_perturb(&x, &g, eps).unwrap();
            assert!(out.iter().zip(&x).all(|(a, b)| (a - b).abs() <= eps));
        }
    }

    #[test]
    fn shuffle_is_a_seeded_permutation() {
        let b = sample_batch(4, 6);
        let s = position_shuffle(&b, 9);
        assert_eq!(s, position_shuffle(&b, 9));
        for (orig, shuf) in b.rows().zip(s.rows()) {
            assert_eq!(shuf[0], CLS_ID);
            let mut x = orig.to_vec();
            let mut y = shuf.to_vec();
            x.sort();
            y.sort();
            assert_eq!(x, y);
        }
        let single = TokenBatch::from_sentences(&[vec![17]]);
        assert_eq!(position_shuffle(&single, 3), single);
    }

    #[test]
    fn token_dropout_extremes() {
        let b = sample_batch(3, 5);
        assert_eq!(token_dropout(&b, 0.0, 1, MASK_ID).unwrap(), b);
        let all = token_dropout(&b, 1.0, 1, MASK_ID).unwrap();
        for row in all.rows() {
            assert_eq!(row[0], CLS_ID);
            assert!(row[1..].iter().all(|&t| t == MASK_ID));
        }
    }

    #[test]
    fn token_dropout_rate_monte_carlo() {
        let b = sample_batch(1000, 100);
        let out = token_dropout(&b, 0.1, 42, MASK_ID).unwrap();
        let masked = out.rows().flat_map(|r| &r[1..]).filter(|&&t| t == MASK_ID).count();
        let rate = masked as f64 / 100_000.0;
        assert!((rate - 0.1).abs() < 0.01, "{rate}");
    }

    #[test]
    fn feature_dropout_rate_and_determinism() {
        let mut g = Graph::new();
        let x = g.constant(&[1000, 100], vec![1.0; 100_000]).unwrap();
        let y = feature_dropout(&mut g, x, 0.01, 5).unwrap();
        let z = feature_dropout(&mut g, x, 0.01, 5).unwrap();
        assert_eq!(g.value(y), g.value(z));
        let zeroed = g.value(y).iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!((zeroed - 0.01).abs() < 0.01, "{zeroed}");
        assert!(g.value(y).iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(feature_dropout(&mut g, x, 0.0, 5).unwrap(), x);
    }

    #[test]
    fn views_with_everything_off_differ_only_in_dropout_seed() {
        let b = sample_batch(3, 4);
        let (a, v) = make_views(&b, &AugmentConfig::dropout_only(), 77).unwrap();
        assert_eq!(a.tokens, b);
        assert_eq!(v.tokens, b);
        assert_eq!(a.feature_dropout, None);
        assert_eq!(a.fgsm_epsilon, None);
        assert_ne!(a.dropout_seed, v.dropout_seed);
        assert_eq!(make_views(&b, &AugmentConfig::dropout_only(), 77).unwrap(), (a, v));
    }

    #[test]
    fn fgsm_flag_only_on_online_view() {
        let b = sample_batch(2, 4);
        let cfg = AugmentConfig { position_shuffle: true, feature_dropout_prob: 0.01, ..AugmentConfig::default() };
        let (a, v) = make_views(&b, &cfg, 1).unwrap();
        assert_eq!(a.fgsm_epsilon, Some(5e-9));
        assert_eq!(v.fgsm_epsilon, None);
        assert!(a.feature_dropout.is_some() && v.feature_dropout.is_some());
        assert_ne!(a.feature_dropout, v.feature_dropout);
    }
}
