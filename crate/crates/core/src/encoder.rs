//! Small transformer sentence encoder.
//!
//! One branch is: token + position embedding, `num_blocks` pre-norm
//! self-attention blocks, a final layer norm on the CLS slot, a `tanh`
//! pooler, a projection stack, and (online branch only) a prediction stack.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensorgraph::{Graph, GraphTensor, Matrix};
use crate::tokens::TokenBatch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub model_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub proj_layers: usize,
    pub pred_layers: usize,
    /// Hidden width of the prediction stack. The last predictor layer maps
    /// back to `model_dim` so queries and keys share a space.
    pub pred_dim: usize,
    pub dropout_prob: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 128,
            max_seq_len: 32,
            model_dim: 64,
            num_blocks: 2,
            num_heads: 2,
            ff_dim: 128,
            proj_layers: 1,
            pred_layers: 2,
            pred_dim: 64,
            dropout_prob: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, with_predictor: bool) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ff_dim", self.ff_dim),
            ("pred_dim", self.pred_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.vocab_size <= crate::tokens::FIRST_WORD_ID as usize {
            return Err(Error::config("vocab_size", "must exceed the reserved ids"));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::config(
                "model_dim",
                format!("{} is not divisible by num_heads {}", self.model_dim, self.num_heads),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::config("dropout_prob", "must lie in [0, 1)"));
        }
        if with_predictor {
            if self.pred_layers == 0 {
                return Err(Error::config("pred_layers", "online branch needs at least one prediction layer"));
            }
            if self.pred_layers == 1 && self.pred_dim != self.model_dim {
                return Err(Error::config(
                    "pred_dim",
                    "a single prediction layer must map back to model_dim; use pred_layers >= 2 to change the width",
                ));
            }
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Input/output widths of each prediction layer.
    fn pred_widths(&self) -> Vec<(usize, usize)> {
        let (d, p, n) = (self.model_dim, self.pred_dim, self.pred_layers);
        (0..n)
            .map(|j| {
                let fan_in = if j == 0 { d } else { p };
                let fan_out = if j + 1 == n { d } else { p };
                (fan_in, fan_out)
            })
            .collect()
    }
}

/// One named weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Full weight set of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    config: EncoderConfig,
    params: Vec<Param>,
    index: HashMap<String, usize>,
    has_predictor: bool,
}

pub const PREDICTOR_PREFIX: &str = "pred";

/// Position rows start at a tenth of the token scale. Every sentence shares
/// them, so at full scale they dominate the CLS state and an untrained
/// encoder maps all sentences to nearly the same direction.
const POSITION_INIT_SCALE: f64 = 0.1;

enum Init {
    Uniform(f64),
    Const(f64),
}

impl BranchParams {
    /// Draws a fresh branch. Shared components come first in the draw order,
    /// so the same seed with and without a predictor yields identical shared
    /// weights.
    pub fn init(config: &EncoderConfig, seed: u64, with_predictor: bool) -> Result<Self> {
        config.validate(with_predictor)?;
        let mut rng = seed::rng(seed);
        let (v, l, d, f) = (config.vocab_size, config.max_seq_len, config.model_dim, config.ff_dim);
        let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
        let lin = |specs: &mut Vec<(String, Vec<usize>, Init)>, name: &str, fan_in: usize, fan_out: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            specs.push((format!("{name}.w"), vec![fan_in, fan_out], Init::Uniform(bound)));
            specs.push((format!("{name}.b"), vec![fan_out], Init::Const(0.0)));
        };
        let norm = |specs: &mut Vec<(String, Vec<usize>, Init)>, name: &str| {
            specs.push((format!("{name}.gain"), vec![d], Init::Const(1.0)));
            specs.push((format!("{name}.bias"), vec![d], Init::Const(0.0)));
        };
        let emb_bound = 1.0 / (d as f64).sqrt();
        specs.push(("embed.token".into(), vec![v, d], Init::Uniform(emb_bound)));
        specs.push(("embed.position".into(), vec![l, d], Init::Uniform(POSITION_INIT_SCALE * emb_bound)));
        for b in 0..config.num_blocks {
            for m in ["q", "k", "v", "o"] {
                lin(&mut specs, &format!("block{b}.attn.{m}"), d, d);
            }
            norm(&mut specs, &format!("block{b}.ln1"));
            lin(&mut specs, &format!("block{b}.ff1"), d, f);
            lin(&mut specs, &format!("block{b}.ff2"), f, d);
            norm(&mut specs, &format!("block{b}.ln2"));
        }
        norm(&mut specs, "final.ln");
        lin(&mut specs, "pooler", d, d);
        for j in 0..config.proj_layers {
            lin(&mut specs, &format!("proj{j}"), d, d);
        }
        if with_predictor {
            for (j, (fi, fo)) in config.pred_widths().into_iter().enumerate() {
                lin(&mut specs, &format!("{PREDICTOR_PREFIX}{j}"), fi, fo);
            }
        }
        let params = specs
            .into_iter()
            .map(|(name, shape, init)| {
                let n = shape.iter().product();
                let values = match init {
                    Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..b)).collect(),
                    Init::Const(c) => vec![c; n],
                };
                Param { name, shape, values }
            })
            .collect();
        Ok(Self::from_parts(config.clone(), params, with_predictor))
    }

    pub(crate) fn from_parts(config: EncoderConfig, params: Vec<Param>, has_predictor: bool) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Self { config, params, index, has_predictor }
    }

    /// Rebuilds a branch from loaded tensors, checking them against the
    /// layout `config` implies.
    pub fn from_named(config: &EncoderConfig, with_predictor: bool, tensors: Vec<Param>) -> Result<Self> {
        let template = Self::init(config, 0, with_predictor)?;
        if template.params.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                template.params.len(),
                tensors.len()
            )));
        }
        for (want, got) in template.params.iter().zip(&tensors) {
            if want.name != got.name || want.shape != got.shape {
                return Err(Error::Format(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    got.name, got.shape, want.name, want.shape
                )));
            }
        }
        Ok(Self::from_parts(config.clone(), tensors, with_predictor))
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn has_predictor(&self) -> bool {
        self.has_predictor
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Copy of this branch without the prediction stack.
    pub fn without_predictor(&self) -> Self {
        let params = self.params.iter().filter(|p| !is_predictor(&p.name)).cloned().collect();
        Self::from_parts(self.config.clone(), params, false)
    }

    /// Places every weight on `graph`. With `trainable` the weights are
    /// gradient leaves.
    pub fn bind<'a>(&'a self, graph: &mut Graph, trainable: bool) -> Bound<'a> {
        let vars = self
            .params
            .iter()
            .map(|p| graph.leaf(&p.shape, p.values.clone(), trainable).expect("param shape is consistent"))
            .collect();
        Bound { params: self, vars }
    }

    /// Sentence embeddings (pooler output) with dropout disabled.
    pub fn embed_sentences(&self, tokens: &TokenBatch) -> Result<Matrix> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = b.embed(&mut g, tokens)?;
        let pooled = b.encode(&mut g, x, &tokens.lengths(), None)?;
        Ok(g.to_matrix(pooled))
    }
}

pub fn is_predictor(name: &str) -> bool {
    name.strip_prefix(PREDICTOR_PREFIX).is_some_and(|rest| rest.starts_with(|c: char| c.is_ascii_digit()))
}

/// A branch whose weights live on a particular graph.
pub struct Bound<'a> {
    params: &'a BranchParams,
    vars: Vec<GraphTensor>,
}

impl Bound<'_> {
    fn var(&self, name: &str) -> GraphTensor {
        self.vars[self.params.index[name]]
    }

    /// Graph handles of every weight, in parameter order.
    pub fn vars(&self) -> &[GraphTensor] {
        &self.vars
    }

    pub fn params(&self) -> &BranchParams {
        self.params
    }

    /// Token plus positional embeddings, shape `[batch, seq, dim]`. The result
    /// is registered for gradient reporting so input gradients can be read
    /// after backward.
    pub fn embed(&self, g: &mut Graph, tokens: &TokenBatch) -> Result<GraphTensor> {
        let cfg = &self.params.config;
        if tokens.seq() > cfg.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.seq(),
                cfg.max_seq_len
            )));
        }
        if let Some(pos) = tokens.ids().iter().position(|&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Input(format!(
                "token id {} at row {}, position {} is outside vocab of {}",
                tokens.ids()[pos],
                pos / tokens.seq(),
                pos % tokens.seq(),
                cfg.vocab_size
            )));
        }
        let ids: Vec<usize> = tokens.ids().iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..tokens.batch()).flat_map(|_| 0..tokens.seq()).collect();
        let tok = g.gather_rows(self.var("embed.token"), &ids)?;
        let pos = g.gather_rows(self.var("embed.position"), &positions)?;
        let sum = g.add(tok, pos)?;
        let x = g.reshape(sum, &[tokens.batch(), tokens.seq(), cfg.model_dim])?;
        Ok(g.watch(x))
    }

    fn linear(&self, g: &mut Graph, x: GraphTensor, name: &str) -> Result<GraphTensor> {
        let h = g.matmul(x, self.var(&format!("{name}.w")))?;
        Ok(g.add(h, self.var(&format!("{name}.b")))?)
    }

    fn norm(&self, g: &mut Graph, x: GraphTensor, name: &str) -> Result<GraphTensor> {
        let n = g.layer_norm_rows(x);
        let n = g.mul(n, self.var(&format!("{name}.gain")))?;
        Ok(g.add(n, self.var(&format!("{name}.bias")))?)
    }

    /// Transformer blocks, CLS pooling and the pooler layer. `dropout_seed`
    /// of `None` disables dropout.
    pub fn encode(
        &self,
        g: &mut Graph,
        embedded: GraphTensor,
        lengths: &[usize],
        dropout_seed: Option<u64>,
    ) -> Result<GraphTensor> {
        let cfg = &self.params.config;
        let shape = g.shape(embedded).to_vec();
        if shape.len() != 3 || shape[0] != lengths.len() || shape[2] != cfg.model_dim {
            return Err(Error::contract("encode", format!("embedded shape {shape:?} does not fit batch of {}", lengths.len())));
        }
        let (batch, seq) = (shape[0], shape[1]);
        if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > seq) {
            return Err(Error::contract("encode", format!("sentence length {bad} outside 1..={seq}")));
        }
        let mut dropout = Dropout::new(cfg.dropout_prob, dropout_seed);

        let flat = g.reshape(embedded, &[batch * seq, cfg.model_dim])?;
        let cls_rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
        let mut x = dropout.apply(g, flat)?;
        for blk in 0..cfg.num_blocks {
            let last = blk + 1 == cfg.num_blocks;
            let n = self.norm(g, x, &format!("block{blk}.ln1"))?;
            let attn = self.attention(g, n, blk, lengths, seq, last)?;
            let attn = dropout.apply(g, attn)?;
            // The last block only needs the CLS rows.
            let residual = if last { g.gather_rows(x, &cls_rows)? } else { x };
            let h = g.add(residual, attn)?;
            let n = self.norm(g, h, &format!("block{blk}.ln2"))?;
            let ff = self.linear(g, n, &format!("block{blk}.ff1"))?;
            let ff = g.gelu(ff);
            let ff = self.linear(g, ff, &format!("block{blk}.ff2"))?;
            let ff = dropout.apply(g, ff)?;
            x = g.add(h, ff)?;
        }
        if cfg.num_blocks == 0 {
            x = g.gather_rows(x, &cls_rows)?;
        }
        let x = self.norm(g, x, "final.ln")?;
        let pooled = self.linear(g, x, "pooler")?;
        Ok(g.tanh(pooled))
    }

    fn attention(
        &self,
        g: &mut Graph,
        x: GraphTensor,
        blk: usize,
        lengths: &[usize],
        seq: usize,
        cls_only: bool,
    ) -> Result<GraphTensor> {
        let cfg = &self.params.config;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.linear(g, x, &format!("block{blk}.attn.q"))?;
        let k = self.linear(g, x, &format!("block{blk}.attn.k"))?;
        let v = self.linear(g, x, &format!("block{blk}.attn.v"))?;
        let mut rows = Vec::with_capacity(lengths.len());
        for (b, &len) in lengths.iter().enumerate() {
            let start = b * seq;
            let q_rows = if cls_only { start..start + 1 } else { start..start + seq };
            let mut heads = Vec::with_capacity(cfg.num_heads);
            for h in 0..cfg.num_heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = g.slice(q, q_rows.clone(), cols.clone())?;
                // keys and values stop at the sentence length: padding is never attended
                let kh = g.slice(k, start..start + len, cols.clone())?;
                let vh = g.slice(v, start..start + len, cols)?;
                let kt = g.transpose(kh);
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, scale);
                let weights = g.softmax_rows(scores)?;
                heads.push(g.matmul(weights, vh)?);
            }
            rows.push(if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? });
        }
        let merged = g.concat_rows(&rows)?;
        self.linear(g, merged, &format!("block{blk}.attn.o"))
    }

    /// `proj_layers` fully connected layers with GELU between them.
    pub fn project(&self, g: &mut Graph, pooled: GraphTensor) -> Result<GraphTensor> {
        let n = self.params.config.proj_layers;
        let mut z = pooled;
        for j in 0..n {
            z = self.linear(g, z, &format!("proj{j}"))?;
            if j + 1 < n {
                z = g.gelu(z);
            }
        }
        Ok(z)
    }

    /// Prediction stack of the online branch.
    pub fn predict(&self, g: &mut Graph, z: GraphTensor) -> Result<GraphTensor> {
        if !self.params.has_predictor {
            return Err(Error::contract("predict", "branch has no prediction stack"));
        }
        let n = self.params.config.pred_layers;
        let mut p = z;
        for j in 0..n {
            p = self.linear(g, p, &format!("{PREDICTOR_PREFIX}{j}"))?;
            if j + 1 < n {
                p = g.gelu(p);
            }
        }
        Ok(p)
    }
}

/// Inverted dropout with masks drawn from one seeded stream in call order.
struct Dropout {
    prob: f64,
    rng: Option<rand_chacha::ChaCha8Rng>,
}

impl Dropout {
    fn new(prob: f64, seed: Option<u64>) -> Self {
        let rng = seed.filter(|_| prob > 0.0).map(seed::rng);
        Self { prob, rng }
    }

    fn apply(&mut self, g: &mut Graph, x: GraphTensor) -> Result<GraphTensor> {
        let Some(rng) = self.rng.as_mut() else { return Ok(x) };
        let keep = 1.0 / (1.0 - self.prob);
        let mask: Vec<f64> = (0..g.value(x).len())
            .map(|_| if rng.random::<f64>() < self.prob { 0.0 } else { keep })
            .collect();
        let shape = g.shape(x).to_vec();
        let m = g.constant(&shape, mask)?;
        Ok(g.mul(x, m)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 40,
            max_seq_len: 10,
            model_dim: 16,
            num_blocks: 1,
            num_heads: 2,
            ff_dim: 24,
            proj_layers: 1,
            pred_layers: 2,
            pred_dim: 16,
            dropout_prob: 0.1,
        }
    }

    fn batch() -> TokenBatch {
        TokenBatch::from_sentences(&[vec![5, 6, 7, 8], vec![9, 10]])
    }

    #[test]
    fn init_is_deterministic() {
        let a = BranchParams::init(&small(), 3, true).unwrap();
        let b = BranchParams::init(&small(), 3, true).unwrap();
        assert_eq!(a, b);
        let c = BranchParams::init(&small(), 4, true).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn target_has_no_predictor_and_shares_layout() {
        let online = BranchParams::init(&small(), 3, true).unwrap();
        let target = BranchParams::init(&small(), 3, false).unwrap();
        assert!(target.params().iter().all(|p| !is_predictor(&p.name)));
        assert_eq!(online.without_predictor(), target);
    }

    #[test]
    fn init_bounds_follow_fan_in() {
        let p = BranchParams::init(&small(), 1, true).unwrap();
        let ff2 = p.get("block0.ff2.w").unwrap();
        let bound = 1.0 / 24f64.sqrt();
        assert!(ff2.values.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn config_errors_name_the_field() {
        let mut cfg = small();
        cfg.num_heads = 3;
        match BranchParams::init(&cfg, 0, true) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "model_dim"),
            other => panic!("unexpected {other:?}"),
        }
        let mut cfg = small();
        cfg.pred_layers = 0;
        assert!(BranchParams::init(&cfg, 0, true).is_err());
        assert!(BranchParams::init(&cfg, 0, false).is_ok());
    }

    #[test]
    fn best_structural_config_instantiates() {
        let cfg = EncoderConfig { proj_layers: 1, pred_layers: 2, ..small() };
        let p = BranchParams::init(&cfg, 0, true).unwrap();
        assert!(p.get("proj0.w").is_some() && p.get("pred1.w").is_some());
        assert!(p.get("proj1.w").is_none());
    }

    #[test]
    fn embed_shape_and_zero_table() {
        let mut cfg = small();
        cfg.max_seq_len = 8;
        let mut p = BranchParams::init(&cfg, 0, false).unwrap();
        let tokens = TokenBatch::new(2, 8, vec![3; 16]).unwrap();
        {
            let mut g = Graph::new();
            let b = p.bind(&mut g, false);
            let x = b.embed(&mut g, &tokens).unwrap();
            assert_eq!(g.shape(x), &[2, 8, 16]);
        }
        p.get_mut("embed.token").unwrap().values.iter_mut().for_each(|v| *v = 0.0);
        let pos = p.get("embed.position").unwrap().values.clone();
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let x = b.embed(&mut g, &tokens).unwrap();
        assert_eq!(&g.value(x)[..128], &pos[..]);
        assert_eq!(&g.value(x)[128..], &pos[..]);
    }

    #[test]
    fn embed_rejects_out_of_range_token() {
        let p = BranchParams::init(&small(), 0, false).unwrap();
        let tokens = TokenBatch::from_sentences(&[vec![5, 40]]);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let err = b.embed(&mut g, &tokens).unwrap_err().to_string();
        assert!(err.contains("position 2"), "{err}");
    }

    fn pooled(p: &BranchParams, seed: Option<u64>) -> Vec<f64> {
        let tokens = batch();
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let x = b.embed(&mut g, &tokens).unwrap();
        let out = b.encode(&mut g, x, &tokens.lengths(), seed).unwrap();
        assert_eq!(g.shape(out), &[2, 16]);
        g.value(out).to_vec()
    }

    #[test]
    fn dropout_seed_controls_output() {
        let p = BranchParams::init(&small(), 0, true).unwrap();
        assert_eq!(pooled(&p, Some(1)), pooled(&p, Some(1)));
        assert_ne!(pooled(&p, Some(1)), pooled(&p, Some(2)));
        let mut cfg = small();
        cfg.dropout_prob = 0.0;
        let p = BranchParams::init(&cfg, 0, true).unwrap();
        assert_eq!(pooled(&p, Some(1)), pooled(&p, Some(2)));
        assert_eq!(pooled(&p, Some(1)), pooled(&p, None));
    }

    #[test]
    fn padding_does_not_leak_into_embedding() {
        let p = BranchParams::init(&small(), 0, false).unwrap();
        let short = p.embed_sentences(&TokenBatch::from_sentences(&[vec![9, 10]])).unwrap();
        let padded = p.embed_sentences(&batch()).unwrap();
        for (a, b) in short.row(0).iter().zip(padded.row(1)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_and_prediction_shapes() {
        let mut cfg = small();
        cfg.proj_layers = 0;
        cfg.pred_layers = 1;
        let p = BranchParams::init(&cfg, 0, true).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let z = g.constant(&[2, 16], (0..32).map(|i| i as f64 / 32.0).collect()).unwrap();
        assert_eq!(b.project(&mut g, z).unwrap(), z);

        // one predictor layer is exactly z W + b
        let out = b.predict(&mut g, z).unwrap();
        let w = &p.get("pred0.w").unwrap().values;
        let bias = &p.get("pred0.b").unwrap().values;
        let zv = g.value(z).to_vec();
        for i in 0..2 {
            for j in 0..16 {
                let want = bias[j] + (0..16).map(|k| zv[i * 16 + k] * w[k * 16 + j]).sum::<f64>();
                assert!((g.value(out)[i * 16 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pred_dim_ablation_keeps_output_width() {
        let cfg = EncoderConfig { pred_dim: 8, ..small() };
        let p = BranchParams::init(&cfg, 0, true).unwrap();
        assert_eq!(p.get("pred0.w").unwrap().shape, vec![16, 8]);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let z = g.constant(&[2, 16], vec![0.1; 32]).unwrap();
        let out = b.predict(&mut g, z).unwrap();
        assert_eq!(g.shape(out), &[2, 16]);
    }

    #[test]
    fn predict_on_target_is_contract_error() {
        let p = BranchParams::init(&small(), 0, false).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let z = g.constant(&[1, 16], vec![0.0; 16]).unwrap();
        assert!(matches!(b.predict(&mut g, z), Err(Error::Contract { .. })));
    }

    #[test]
    fn extreme_inputs_stay_finite() {
        let p = BranchParams::init(&small(), 0, true).unwrap();
        let zeros = TokenBatch::new(1, 4, vec![0; 4]).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let x = b.embed(&mut g, &zeros).unwrap();
        let out = b.encode(&mut g, x, &[4], None).unwrap();
        assert!(g.value(out).iter().all(|v| v.is_finite()));
        let maxed = TokenBatch::from_sentences(&[vec![39; 9]]);
        assert!(p.embed_sentences(&maxed).unwrap().data().iter().all(|v| v.is_finite()));
    }
}
