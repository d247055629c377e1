//! The training loop: two views, online and target forward passes, InfoNCE
//! against the negative queue, an Adam step on the online branch, an EMA
//! step on the target branch, then the keys join the queue.

mod checkpoint;
mod optim;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use optim::Adam;

use crate::augment::{self, AugmentConfig, View};
use crate::corpus::{self, Corpus, StsPair};
use crate::ema::{ema_update, EmaMode};
use crate::encoder::{BranchParams, EncoderConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, CollapseMonitor, MetricsRow};
use crate::negqueue::{NegativeQueue, SliceWindow};
use crate::objective::{info_nce, LossConfig};
use crate::seed;
use crate::tensorgraph::{Graph, GraphTensor, Matrix};
use crate::tokens::TokenBatch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueueConfig {
    pub capacity: usize,
    pub init_count: usize,
    /// Age window of negatives used in the loss; `None` uses all.
    pub slice: Option<SliceWindow>,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self { capacity: 256, init_count: 64, slice: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollapseConfig {
    pub threshold: f64,
    /// Consecutive evaluations above `threshold` that count as collapse.
    pub patience: usize,
    pub stop_on_collapse: bool,
}

impl Default for CollapseConfig {
    fn default() -> Self {
        Self { threshold: 0.99, patience: 50, stop_on_collapse: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    /// Whether the online branch carries a prediction stack. Turning it off
    /// gives the symmetric two-branch model.
    pub predictor: bool,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub ema: EmaMode,
    pub queue: QueueConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub eval_every: usize,
    pub learning_rate: f64,
    /// Steps of linear learning-rate ramp from `learning_rate / warmup_steps`.
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub master_seed: u64,
    pub collapse: CollapseConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Laptop-scale preset used throughout the test suite.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            predictor: true,
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            ema: EmaMode::default(),
            queue: QueueConfig::default(),
            batch_size: 32,
            steps: 500,
            eval_every: 5,
            learning_rate: 3e-3,
            warmup_steps: 50,
            weight_decay: 1e-6,
            master_seed: 0,
            collapse: CollapseConfig::default(),
        }
    }

    /// BERT-base-sized hyperparameters. Runs, but far too slowly on a CPU
    /// to be useful; kept for reference.
    pub fn base() -> Self {
        Self {
            encoder: EncoderConfig {
                vocab_size: 30522,
                max_seq_len: 64,
                model_dim: 768,
                num_blocks: 12,
                num_heads: 12,
                ff_dim: 3072,
                proj_layers: 1,
                pred_layers: 2,
                pred_dim: 768,
                dropout_prob: 0.1,
            },
            queue: QueueConfig { capacity: 512, init_count: 128, slice: None },
            batch_size: 64,
            steps: 15625,
            eval_every: 100,
            learning_rate: 3e-5,
            warmup_steps: 0,
            weight_decay: 1e-6,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate(self.predictor)?;
        self.augment.validate()?;
        self.loss.validate()?;
        self.ema.validate()?;
        if self.steps == 0 {
            return Err(Error::config("steps", "must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if self.queue.capacity == 0 {
            return Err(Error::config("queue.capacity", "must be positive"));
        }
        if self.batch_size > self.queue.capacity {
            return Err(Error::config(
                "batch_size",
                format!("{} exceeds queue capacity {}", self.batch_size, self.queue.capacity),
            ));
        }
        if self.queue.init_count > self.queue.capacity {
            return Err(Error::config("queue.init_count", "exceeds queue capacity"));
        }
        if let Some(w) = &self.queue.slice {
            if w.start >= w.end || w.end > self.queue.capacity {
                return Err(Error::config("queue.slice", format!("{w} does not fit capacity {}", self.queue.capacity)));
            }
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        Ok(())
    }

    /// Traceable distance of this configuration, using the final decay weight.
    pub fn mtd(&self) -> Result<f64> {
        traceable_distance(self.ema.nominal_eta(), self.queue.capacity, self.batch_size)
    }
}

/// Like [`metrics::mtd`] but a frozen target (`eta = 1`) reports infinity.
fn traceable_distance(eta: f64, capacity: usize, batch: usize) -> Result<f64> {
    if eta == 1.0 {
        return Ok(f64::INFINITY);
    }
    metrics::mtd(eta, capacity, batch)
}

/// Named stages of one training step, in the order they ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    MakeViews,
    OnlineForward,
    TargetForward,
    ReadNegatives,
    FgsmGradient,
    FgsmPerturb,
    OnlineReforward,
    InfoNce,
    OptimizerStep,
    EmaUpdate,
    Enqueue,
}

/// Everything that changes during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub online: BranchParams,
    pub target: BranchParams,
    pub queue: NegativeQueue,
    pub optimizer: Adam,
    /// Steps completed so far.
    pub step: usize,
    pub monitor: CollapseMonitor,
    trace: Option<Vec<Stage>>,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let init_seed = seed::derive(config.master_seed, &[seed::role::INIT]);
        let online = BranchParams::init(&config.encoder, init_seed, config.predictor)?;
        let target = online.without_predictor();
        let queue = NegativeQueue::new(
            config.queue.capacity,
            config.queue.init_count,
            config.encoder.model_dim,
            seed::derive(config.master_seed, &[seed::role::QUEUE]),
        )?;
        let optimizer = Adam::new(&online, config.learning_rate, config.weight_decay);
        Ok(Self {
            config: config.clone(),
            online,
            target,
            queue,
            optimizer,
            step: 0,
            monitor: CollapseMonitor::new(config.collapse.threshold, config.collapse.patience),
            trace: None,
        })
    }

    /// Records the stage sequence of subsequent steps.
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<Stage> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn mark(&mut self, stage: Stage) {
        if let Some(t) = self.trace.as_mut() {
            t.push(stage);
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { config: self.config.encoder.clone(), online: self.online.clone(), target: self.target.clone() }
    }
}

/// Online forward pass on a view, optionally with an additive perturbation
/// of the embedded input. Returns the normalized queries and the embedded
/// input handle.
struct OnlinePass {
    graph: Graph,
    vars: Vec<GraphTensor>,
    embedded: GraphTensor,
    pooled: GraphTensor,
    queries: GraphTensor,
}

fn online_pass(online: &BranchParams, view: &View, delta: Option<&[f64]>) -> Result<OnlinePass> {
    let mut g = Graph::new();
    let bound = online.bind(&mut g, true);
    let mut x = bound.embed(&mut g, &view.tokens)?;
    let embedded = x;
    if let Some(d) = delta {
        let shape = g.shape(x).to_vec();
        let d = g.constant(&shape, d.to_vec())?;
        x = g.add(x, d)?;
    }
    let x = view.apply_features(&mut g, x)?;
    let pooled = bound.encode(&mut g, x, &view.tokens.lengths(), Some(view.dropout_seed))?;
    let z = bound.project(&mut g, pooled)?;
    let p = if online.has_predictor() { bound.predict(&mut g, z)? } else { z };
    let queries = g.l2_normalize_rows(p)?;
    let vars = bound.vars().to_vec();
    Ok(OnlinePass { graph: g, vars, embedded, pooled, queries })
}

fn target_keys(target: &BranchParams, view: &View) -> Result<Matrix> {
    let mut g = Graph::new();
    let bound = target.bind(&mut g, false);
    let x = bound.embed(&mut g, &view.tokens)?;
    let x = view.apply_features(&mut g, x)?;
    let pooled = bound.encode(&mut g, x, &view.tokens.lengths(), Some(view.dropout_seed))?;
    let z = bound.project(&mut g, pooled)?;
    let k = g.l2_normalize_rows(z)?;
    Ok(g.to_matrix(k))
}

/// Runs one training step on `batch` and returns its metrics (with
/// `eval_spearman` left as NaN).
pub fn train_step(state: &mut TrainState, batch: &TokenBatch) -> Result<MetricsRow> {
    let cfg = state.config.clone();
    let step = state.step;
    let fail = |detail: String| Error::NonFinite { step, detail };

    let step_seed = seed::derive(cfg.master_seed, &[step as u64]);
    let (view_a, view_b) = augment::make_views(batch, &cfg.augment, step_seed)?;
    state.mark(Stage::MakeViews);

    let mut pass = online_pass(&state.online, &view_a, None)?;
    state.mark(Stage::OnlineForward);
    let keys = target_keys(&state.target, &view_b)?;
    state.mark(Stage::TargetForward);
    let negatives = state.queue.negatives(cfg.queue.slice.as_ref())?;
    state.mark(Stage::ReadNegatives);

    if let Some(eps) = view_a.fgsm_epsilon {
        let loss = info_nce(&mut pass.graph, pass.queries, &keys, &negatives, cfg.loss.temperature)?;
        let grads = pass.graph.backward(loss)?;
        let x = pass.graph.value(pass.embedded).to_vec();
        let gx = grads.get(pass.embedded).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
        state.mark(Stage::FgsmGradient);
        let perturbed = augment::fgsm_perturb(&x, &gx, eps)?;
        let delta: Vec<f64> = perturbed.iter().zip(&x).map(|(p, x)| p - x).collect();
        state.mark(Stage::FgsmPerturb);
        pass = online_pass(&state.online, &view_a, Some(&delta))?;
        state.mark(Stage::OnlineReforward);
    }

    let loss = info_nce(&mut pass.graph, pass.queries, &keys, &negatives, cfg.loss.temperature)?;
    let loss_value = pass.graph.scalar(loss);
    state.mark(Stage::InfoNce);
    if !loss_value.is_finite() {
        return Err(fail(format!("loss is {loss_value}")));
    }
    let grads = pass.graph.backward(loss)?;
    let lr_scale = if step < cfg.warmup_steps { (step + 1) as f64 / cfg.warmup_steps as f64 } else { 1.0 };
    state.optimizer.step_scaled(&mut state.online, &pass.vars, &grads, lr_scale);
    state.mark(Stage::OptimizerStep);

    let eta = cfg.ema.eta_at(step, cfg.steps)?;
    ema_update(&mut state.target, &state.online, eta)?;
    state.mark(Stage::EmaUpdate);

    state.queue.push_batch(&keys)?;
    state.mark(Stage::Enqueue);
    state.step += 1;

    let queries = pass.graph.to_matrix(pass.queries);
    let pooled = pass.graph.to_matrix(pass.pooled);
    Ok(MetricsRow {
        step: state.step,
        loss: loss_value,
        eta,
        mtd: traceable_distance(eta, cfg.queue.capacity, cfg.batch_size)?,
        alignment: metrics::alignment(&queries, &keys)?,
        uniformity: metrics::uniformity(&queries)?,
        eval_spearman: f64::NAN,
        collapse_score: metrics::collapse_score(&pooled)?,
    })
}

/// Outcome of evaluating a branch on STS pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// NaN when the predictions are constant.
    pub spearman: f64,
    pub collapse_score: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Pairwise cosine similarities of the sentence embeddings, dropout off.
pub fn predict_similarities(params: &BranchParams, pairs: &[StsPair]) -> Result<(Vec<f64>, Matrix)> {
    let a: Vec<&[u32]> = pairs.iter().map(|p| p.tokens_a.as_slice()).collect();
    let b: Vec<&[u32]> = pairs.iter().map(|p| p.tokens_b.as_slice()).collect();
    let ea = params.embed_sentences(&TokenBatch::from_sentences(&a))?;
    let eb = params.embed_sentences(&TokenBatch::from_sentences(&b))?;
    let sims = ea.row_iter().zip(eb.row_iter()).map(|(x, y)| cosine(x, y)).collect();
    let mut all = ea.into_data();
    all.extend(eb.into_data());
    let stacked = Matrix::new(2 * pairs.len(), params.config().model_dim, all)?;
    Ok((sims, stacked))
}

/// Spearman correlation between embedding cosine and gold score.
pub fn evaluate(params: &BranchParams, pairs: &[StsPair]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::contract("evaluate", "need at least 2 pairs"));
    }
    let (sims, _) = predict_similarities(params, pairs)?;
    let gold: Vec<f64> = pairs.iter().map(|p| p.gold).collect();
    metrics::spearman(&sims, &gold)
}

/// Spearman plus collapse score of the embeddings; a constant prediction
/// yields NaN instead of an error.
pub fn evaluate_full(params: &BranchParams, pairs: &[StsPair]) -> Result<Evaluation> {
    if pairs.len() < 2 {
        return Err(Error::contract("evaluate", "need at least 2 pairs"));
    }
    let (sims, stacked) = predict_similarities(params, pairs)?;
    let gold: Vec<f64> = pairs.iter().map(|p| p.gold).collect();
    let spearman = match metrics::spearman(&sims, &gold) {
        Ok(v) => v,
        Err(Error::Domain { .. }) => f64::NAN,
        Err(e) => return Err(e),
    };
    Ok(Evaluation { spearman, collapse_score: metrics::collapse_score(&stacked)? })
}

/// Training sentences and held-out evaluation pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Vec<u32>>,
    pub eval_pairs: Vec<StsPair>,
}

impl Dataset {
    /// Holds out the last `holdout` sentences and draws `num_pairs`
    /// evaluation pairs from them.
    pub fn split(corpus: &Corpus, holdout: usize, num_pairs: usize, seed: u64) -> Result<Self> {
        if holdout >= corpus.len() {
            return Err(Error::config("holdout", format!("{holdout} leaves no training sentences")));
        }
        let cut = corpus.len() - holdout;
        let held = Corpus { sentences: corpus.sentences[cut..].to_vec(), latents: corpus.latents[cut..].to_vec() };
        let eval_pairs = corpus::gen_sts_pairs(&held, num_pairs, seed::derive(seed, &[seed::role::EVAL_PAIRS]))?;
        Ok(Self { train: corpus.sentences[..cut].to_vec(), eval_pairs })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    /// One row per evaluation, ordered by step.
    pub rows: Vec<MetricsRow>,
    pub best_eval: f64,
    pub collapsed: bool,
    pub collapse_step: Option<usize>,
    pub steps_run: usize,
    /// Evaluations whose predictions were constant.
    pub eval_errors: usize,
    pub mtd: f64,
}

/// Shuffled batches, reshuffled each epoch, dropping the ragged tail.
struct Batcher<'a> {
    sentences: &'a [Vec<u32>],
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> Batcher<'a> {
    fn new(sentences: &'a [Vec<u32>], batch: usize, seed: u64) -> Self {
        let mut b = Self { sentences, batch, seed, epoch: 0, order: Vec::new(), cursor: 0 };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        use rand::seq::SliceRandom;
        self.order = (0..self.sentences.len()).collect();
        self.order.shuffle(&mut seed::rng(seed::derive(self.seed, &[seed::role::SHUFFLE, self.epoch])));
        self.cursor = 0;
    }

    fn next_batch(&mut self) -> TokenBatch {
        if self.cursor + self.batch > self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let idx = &self.order[self.cursor..self.cursor + self.batch];
        self.cursor += self.batch;
        let rows: Vec<&[u32]> = idx.iter().map(|&i| self.sentences[i].as_slice()).collect();
        TokenBatch::from_sentences(&rows)
    }
}

/// Runs a full training job. Evaluates every `eval_every` steps and on the
/// last step; stops early once collapse is detected (if configured).
pub fn train(config: &TrainConfig, data: &Dataset) -> Result<(TrainReport, TrainState)> {
    config.validate()?;
    if data.train.len() < config.batch_size {
        return Err(Error::config(
            "batch_size",
            format!("{} exceeds the {} training sentences", config.batch_size, data.train.len()),
        ));
    }
    if data.eval_pairs.len() < 2 {
        return Err(Error::config("eval_pairs", "need at least 2 evaluation pairs"));
    }
    let longest = data.train.iter().chain(data.eval_pairs.iter().flat_map(|p| [&p.tokens_a, &p.tokens_b])).map(Vec::len).max();
    if longest.unwrap_or(0) + 1 > config.encoder.max_seq_len {
        return Err(Error::config("encoder.max_seq_len", "too short for the longest sentence plus CLS"));
    }

    let mut state = TrainState::new(config)?;
    let mut batcher = Batcher::new(&data.train, config.batch_size, config.master_seed);
    let mut rows = Vec::new();
    let mut eval_errors = 0;
    let mut collapse_step = None;
    while state.step < config.steps {
        let batch = batcher.next_batch();
        let mut row = train_step(&mut state, &batch)?;
        if state.step % config.eval_every == 0 || state.step == config.steps {
            let ev = evaluate_full(&state.online, &data.eval_pairs)?;
            if ev.spearman.is_nan() {
                eval_errors += 1;
            }
            row.eval_spearman = ev.spearman;
            row.collapse_score = ev.collapse_score;
            rows.push(row);
            if state.monitor.observe(ev.collapse_score) && collapse_step.is_none() {
                collapse_step = Some(state.step);
                if config.collapse.stop_on_collapse {
                    break;
                }
            }
        }
    }
    let best_eval = rows.iter().map(|r| r.eval_spearman).filter(|v| !v.is_nan()).fold(f64::NAN, f64::max);
    let report = TrainReport {
        best_eval,
        collapsed: collapse_step.is_some(),
        collapse_step,
        steps_run: state.step,
        eval_errors,
        mtd: config.mtd()?,
        rows,
    };
    Ok((report, state))
}
