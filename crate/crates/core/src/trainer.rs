//! Alternating min-max training.
//!
//! Each epoch runs one minimization pass over the shuffled train pairs with
//! the hardness model frozen. Every `t_adv_interval` epochs, until
//! `e_adv_max` adversarial epochs have run, a full adversarial pass follows
//! with the encoder frozen: gradient ascent on the hardness parameters for
//! [`HardnessStrategy::Adv`], descent for [`HardnessStrategy::Reverse`].
//!
//! Per-pair gradients are computed in parallel over fixed-size chunks of a
//! batch and merged in chunk order, so results do not depend on the thread
//! count.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::dataio::{sample_negatives, InteractionSet, Split};
use crate::encoder::{score_backward_with, score_with, Encoder, EncoderKind, Representations, SideGrads};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricReport};
use crate::loss::{
    advinfonce_backward, advinfonce_forward, hardness_backward, hardness_forward, HardnessKind, HardnessModel,
    MLP_LATENT_DIM,
};
use crate::numkit::AdamHyper;
use crate::rng::{substream, Rng};

/// Pairs per parallel work unit.
pub const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HardnessStrategy {
    /// Learned hardness, adversarial ascent.
    Adv,
    /// Learned hardness, descent.
    Reverse,
    /// Fresh uniform hardness in `[-0.5, 0.5]` per negative per step.
    Rand,
    /// Zero hardness: plain InfoNCE.
    None,
}

impl HardnessStrategy {
    pub fn name(self) -> &'static str {
        match self {
            HardnessStrategy::Adv => "adv",
            HardnessStrategy::Reverse => "reverse",
            HardnessStrategy::Rand => "rand",
            HardnessStrategy::None => "none",
        }
    }

    fn learned(self) -> bool {
        matches!(self, HardnessStrategy::Adv | HardnessStrategy::Reverse)
    }
}

impl std::str::FromStr for HardnessStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adv" => Ok(HardnessStrategy::Adv),
            "reverse" => Ok(HardnessStrategy::Reverse),
            "rand" => Ok(HardnessStrategy::Rand),
            "none" => Ok(HardnessStrategy::None),
            other => Err(Error::BadParam(format!("unknown hardness strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub encoder: EncoderKind,
    pub dim: usize,
    pub layers: usize,
    pub tau: f64,
    pub hardness_model: HardnessKind,
    pub strategy: HardnessStrategy,
    pub lr: f64,
    pub lr_adv: f64,
    pub batch_size: usize,
    pub n_negatives: usize,
    pub k_weight: usize,
    pub e_adv_max: usize,
    pub t_adv_interval: usize,
    pub max_epochs: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub k_eval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            encoder: EncoderKind::LightGcn,
            dim: 64,
            layers: 2,
            tau: 0.09,
            hardness_model: HardnessKind::Embed,
            strategy: HardnessStrategy::Adv,
            lr: 1e-3,
            lr_adv: 5e-5,
            batch_size: 2048,
            n_negatives: 128,
            k_weight: 64,
            e_adv_max: 7,
            t_adv_interval: 5,
            max_epochs: 200,
            eval_every: 1,
            patience: 20,
            k_eval: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("batch_size", self.batch_size),
            ("n_negatives", self.n_negatives),
            ("k_weight", self.k_weight),
            ("t_adv_interval", self.t_adv_interval),
            ("max_epochs", self.max_epochs),
            ("eval_every", self.eval_every),
            ("patience", self.patience),
            ("k_eval", self.k_eval),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::BadParam(format!("{name} must be >= 1")));
            }
        }
        for (name, v) in [("lr", self.lr), ("lr_adv", self.lr_adv), ("tau", self.tau)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::BadParam(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Observed pairs of one step with their sampled negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBatch {
    pub pairs: Vec<(usize, usize)>,
    pub negatives: Vec<Vec<usize>>,
}

impl LossBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Draws `n` fresh negatives for every pair.
pub fn sample_batch(set: &InteractionSet, pairs: &[(usize, usize)], n: usize, rng: &mut Rng) -> Result<LossBatch> {
    let negatives = pairs
        .iter()
        .map(|&(u, _)| Ok(sample_negatives(set, u, n, rng)?.items))
        .collect::<Result<_>>()?;
    Ok(LossBatch {
        pairs: pairs.to_vec(),
        negatives,
    })
}

/// Mean loss and hardness diagnostics of one step or epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Mean `KL(P0 || P)` over the step's hardness batches (learned strategies only).
    pub kl_mean: Option<f64>,
    /// Largest `|p_j - 1/N|` seen (learned strategies only).
    pub eps_proxy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdvOutcome {
    Stepped(StepStats),
    /// The adversarial budget is spent or the strategy has nothing to learn.
    Skipped,
}

/// One validation record of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub k: usize,
    pub hr: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub loss: f64,
    pub kl_mean: Option<f64>,
    pub eps_proxy: Option<f64>,
    pub e_adv: usize,
}

impl MetricsRecord {
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("epoch".into(), json!(self.epoch));
        m.insert("split".into(), json!(self.split.name()));
        m.insert(format!("hr@{}", self.k), json!(self.hr));
        m.insert(format!("recall@{}", self.k), json!(self.recall));
        m.insert(format!("ndcg@{}", self.k), json!(self.ndcg));
        m.insert("loss".into(), json!(self.loss));
        m.insert("kl_mean".into(), json!(self.kl_mean));
        m.insert("eps_proxy".into(), json!(self.eps_proxy));
        m.insert("e_adv".into(), json!(self.e_adv));
        Value::Object(m)
    }

    pub fn to_line(&self) -> String {
        self.to_json().to_string()
    }
}

/// Stops after `patience` evaluations without a strict improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            since: 0,
        }
    }

    /// Records a validation value; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, value: f64) -> (bool, bool) {
        if value > self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.since = 0;
            (true, false)
        } else {
            self.since += 1;
            (false, self.since >= self.patience)
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Everything the training loop mutates.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub encoder: Encoder,
    pub hardness: HardnessModel,
    pub epoch: usize,
    pub e_adv: usize,
    pub stopper: EarlyStopper,
    pub history: Vec<MetricsRecord>,
    shuffle_rng: Rng,
    sample_rng: Rng,
    rand_rng: Rng,
}

impl TrainState {
    pub fn new(set: &InteractionSet, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = substream(cfg.seed, "init.encoder");
        let encoder = match cfg.encoder {
            EncoderKind::Mf => Encoder::mf(set.n_users(), set.n_items(), cfg.dim, cfg.tau, &mut init)?,
            EncoderKind::LightGcn => Encoder::light_gcn(set, cfg.dim, cfg.layers, cfg.tau, &mut init)?,
        };
        let mut init = substream(cfg.seed, "init.hardness");
        let hardness = match cfg.hardness_model {
            HardnessKind::Embed => HardnessModel::embed(set.n_users(), set.n_items(), cfg.dim, &mut init),
            HardnessKind::Mlp => HardnessModel::mlp(cfg.dim, MLP_LATENT_DIM, &mut init),
        };
        Ok(Self::from_models(encoder, hardness, cfg))
    }

    /// Wraps existing models with fresh loop state.
    pub fn from_models(encoder: Encoder, hardness: HardnessModel, cfg: &TrainConfig) -> Self {
        TrainState {
            encoder,
            hardness,
            epoch: 0,
            e_adv: 0,
            stopper: EarlyStopper::new(cfg.patience),
            history: Vec::new(),
            shuffle_rng: substream(cfg.seed, "train.shuffle"),
            sample_rng: substream(cfg.seed, "train.negatives"),
            rand_rng: substream(cfg.seed, "train.rand"),
        }
    }

    /// Negatives for `pairs` from the loop's sampling stream.
    pub fn sample(&mut self, set: &InteractionSet, pairs: &[(usize, usize)], cfg: &TrainConfig) -> Result<LossBatch> {
        sample_batch(set, pairs, cfg.n_negatives, &mut self.sample_rng)
    }
}

struct Ctx<'a> {
    reps: &'a Representations<'a>,
    tau: f64,
    k: f64,
    hardness: &'a HardnessModel,
    strategy: HardnessStrategy,
}

#[derive(Default)]
struct Partial {
    grads: SideGrads,
    loss: f64,
    kl: f64,
    eps: f64,
}

impl Partial {
    fn absorb(&mut self, other: Partial) {
        self.grads.merge(&other.grads, 1.0);
        self.loss += other.loss;
        self.kl += other.kl;
        self.eps = self.eps.max(other.eps);
    }
}

fn scored_items(i: usize, negatives: &[usize]) -> Vec<usize> {
    let mut items = Vec::with_capacity(negatives.len() + 1);
    items.push(i);
    items.extend_from_slice(negatives);
    items
}

impl Ctx<'_> {
    /// Hardness of one pair's negatives under the frozen model or the strategy's substitute.
    fn deltas(&self, u: usize, negatives: &[usize], rand: Option<&[f64]>, out: &mut Partial) -> Result<Vec<f64>> {
        match self.strategy {
            HardnessStrategy::Adv | HardnessStrategy::Reverse => {
                let hb = hardness_forward(self.hardness, u, negatives, Some(self.reps))?;
                out.kl += hb.kl_from_uniform();
                out.eps = out.eps.max(hb.max_deviation());
                Ok(hb.deltas)
            }
            HardnessStrategy::Rand => Ok(rand.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; negatives.len()])),
            HardnessStrategy::None => Ok(vec![0.0; negatives.len()]),
        }
    }

    fn min_pair(
        &self,
        u: usize,
        i: usize,
        negatives: &[usize],
        rand: Option<&[f64]>,
        scale: f64,
        out: &mut Partial,
    ) -> Result<()> {
        let items = scored_items(i, negatives);
        let s = score_with(self.reps, self.tau, u, &items)?;
        let deltas = self.deltas(u, negatives, rand, out)?;
        let lg = advinfonce_backward(s[0], &s[1..], &deltas, self.k)?;
        let upstream: Vec<f64> = std::iter::once(lg.d_pos).chain(lg.d_negs).map(|g| g * scale).collect();
        score_backward_with(self.reps, self.tau, u, &items, &upstream, &mut out.grads)?;
        out.loss += lg.loss;
        Ok(())
    }

    fn adv_pair(&self, u: usize, i: usize, negatives: &[usize], scale: f64, out: &mut Partial) -> Result<()> {
        let items = scored_items(i, negatives);
        let s = score_with(self.reps, self.tau, u, &items)?;
        let hb = hardness_forward(self.hardness, u, negatives, Some(self.reps))?;
        let lg = advinfonce_backward(s[0], &s[1..], &hb.deltas, self.k)?;
        let upstream: Vec<f64> = lg.d_deltas.iter().map(|g| g * scale).collect();
        let g = hardness_backward(self.hardness, &hb, &upstream, u, negatives, Some(self.reps))?;
        out.grads.merge(&g, 1.0);
        out.loss += lg.loss;
        out.kl += hb.kl_from_uniform();
        out.eps = out.eps.max(hb.max_deviation());
        Ok(())
    }

    fn loss_pair(&self, u: usize, i: usize, negatives: &[usize]) -> Result<f64> {
        let s = score_with(self.reps, self.tau, u, &scored_items(i, negatives))?;
        let deltas = match self.strategy {
            HardnessStrategy::Adv | HardnessStrategy::Reverse => {
                hardness_forward(self.hardness, u, negatives, Some(self.reps))?.deltas
            }
            _ => vec![0.0; negatives.len()],
        };
        advinfonce_forward(s[0], &s[1..], &deltas, self.k)
    }
}

/// Runs `f` over chunks of the batch in parallel and merges in chunk order.
fn fan_out<F>(batch: &LossBatch, f: F) -> Result<Partial>
where
    F: Fn(usize, &mut Partial) -> Result<()> + Sync,
{
    let parts: Vec<Partial> = (0..batch.len())
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|idx| {
            let mut p = Partial::default();
            for &k in idx {
                f(k, &mut p)?;
            }
            Ok(p)
        })
        .collect::<Result<_>>()?;
    let mut total = Partial::default();
    for p in parts {
        total.absorb(p);
    }
    Ok(total)
}

fn stats(strategy: HardnessStrategy, total: &Partial, n: usize) -> StepStats {
    let n = n as f64;
    let learned = strategy.learned();
    StepStats {
        loss: total.loss / n,
        kl_mean: learned.then(|| total.kl / n),
        eps_proxy: learned.then_some(total.eps),
    }
}

/// One minimization step on the encoder; the hardness model is read only.
pub fn min_step(state: &mut TrainState, batch: &LossBatch, cfg: &TrainConfig) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::EmptySplit);
    }
    let rand: Option<Vec<Vec<f64>>> = (cfg.strategy == HardnessStrategy::Rand).then(|| {
        batch
            .negatives
            .iter()
            .map(|negs| negs.iter().map(|_| state.rand_rng.random_range(-0.5..=0.5)).collect())
            .collect()
    });
    let scale = 1.0 / batch.len() as f64;
    let (grads, out) = {
        let reps = state.encoder.representations()?;
        let ctx = Ctx {
            reps: &reps,
            tau: state.encoder.tau(),
            k: cfg.k_weight as f64,
            hardness: &state.hardness,
            strategy: cfg.strategy,
        };
        let total = fan_out(batch, |k, p| {
            let (u, i) = batch.pairs[k];
            ctx.min_pair(
                u,
                i,
                &batch.negatives[k],
                rand.as_ref().map(|r| r[k].as_slice()),
                scale,
                p,
            )
        })?;
        (
            state.encoder.backward(&total.grads)?,
            stats(cfg.strategy, &total, batch.len()),
        )
    };
    state.encoder.apply(&grads, &AdamHyper::with_lr(cfg.lr))?;
    Ok(out)
}

/// One adversarial step on the hardness model; the encoder is read only.
pub fn adv_step(state: &mut TrainState, batch: &LossBatch, cfg: &TrainConfig) -> Result<AdvOutcome> {
    if state.e_adv >= cfg.e_adv_max || !cfg.strategy.learned() {
        return Ok(AdvOutcome::Skipped);
    }
    if batch.is_empty() {
        return Err(Error::EmptySplit);
    }
    let scale = 1.0 / batch.len() as f64;
    let reps = state.encoder.representations()?;
    let ctx = Ctx {
        reps: &reps,
        tau: state.encoder.tau(),
        k: cfg.k_weight as f64,
        hardness: &state.hardness,
        strategy: cfg.strategy,
    };
    let mut total = fan_out(batch, |k, p| {
        let (u, i) = batch.pairs[k];
        ctx.adv_pair(u, i, &batch.negatives[k], scale, p)
    })?;
    drop(reps);
    if cfg.strategy == HardnessStrategy::Adv {
        for g in total.grads.users.values_mut().chain(total.grads.items.values_mut()) {
            g.iter_mut().for_each(|x| *x = -*x);
        }
    }
    let out = stats(cfg.strategy, &total, batch.len());
    state.hardness.apply(&total.grads, &AdamHyper::with_lr(cfg.lr_adv))?;
    Ok(AdvOutcome::Stepped(out))
}

/// Mean loss of `batch` under the current models, without updating anything.
pub fn batch_loss(state: &TrainState, batch: &LossBatch, cfg: &TrainConfig) -> Result<f64> {
    let reps = state.encoder.representations()?;
    let ctx = Ctx {
        reps: &reps,
        tau: state.encoder.tau(),
        k: cfg.k_weight as f64,
        hardness: &state.hardness,
        strategy: cfg.strategy,
    };
    let losses: Vec<f64> = batch
        .pairs
        .par_iter()
        .zip(&batch.negatives)
        .map(|(&(u, i), negs)| ctx.loss_pair(u, i, negs))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

fn shuffled_pairs(state: &mut TrainState, set: &InteractionSet) -> Result<Vec<(usize, usize)>> {
    let mut pairs = set.pairs(Split::Train);
    if pairs.is_empty() {
        return Err(Error::EmptySplit);
    }
    pairs.shuffle(&mut state.shuffle_rng);
    Ok(pairs)
}

fn weighted_mean(acc: &mut (f64, f64, f64, usize), s: StepStats, n: usize) {
    acc.0 += s.loss * n as f64;
    acc.1 += s.kl_mean.unwrap_or(0.0) * n as f64;
    acc.2 = acc.2.max(s.eps_proxy.unwrap_or(0.0));
    acc.3 += n;
}

fn finish(strategy: HardnessStrategy, acc: (f64, f64, f64, usize)) -> StepStats {
    let n = acc.3 as f64;
    StepStats {
        loss: acc.0 / n,
        kl_mean: strategy.learned().then(|| acc.1 / n),
        eps_proxy: strategy.learned().then_some(acc.2),
    }
}

/// One minimization pass over the shuffled train pairs.
pub fn min_epoch(state: &mut TrainState, set: &InteractionSet, cfg: &TrainConfig) -> Result<StepStats> {
    let pairs = shuffled_pairs(state, set)?;
    let mut acc = (0.0, 0.0, 0.0, 0);
    for chunk in pairs.chunks(cfg.batch_size) {
        let batch = state.sample(set, chunk, cfg)?;
        let s = min_step(state, &batch, cfg)?;
        weighted_mean(&mut acc, s, chunk.len());
    }
    Ok(finish(cfg.strategy, acc))
}

/// One adversarial pass over the shuffled train pairs; counts against the budget.
pub fn adv_epoch(state: &mut TrainState, set: &InteractionSet, cfg: &TrainConfig) -> Result<AdvOutcome> {
    if state.e_adv >= cfg.e_adv_max || !cfg.strategy.learned() {
        return Ok(AdvOutcome::Skipped);
    }
    let pairs = shuffled_pairs(state, set)?;
    let mut acc = (0.0, 0.0, 0.0, 0);
    for chunk in pairs.chunks(cfg.batch_size) {
        let batch = state.sample(set, chunk, cfg)?;
        if let AdvOutcome::Stepped(s) = adv_step(state, &batch, cfg)? {
            weighted_mean(&mut acc, s, chunk.len());
        }
    }
    state.e_adv += 1;
    Ok(AdvOutcome::Stepped(finish(cfg.strategy, acc)))
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub best_encoder: Encoder,
    pub best_hardness: HardnessModel,
    pub best_epoch: usize,
    /// Epochs after which an adversarial pass ran.
    pub adv_epochs: Vec<usize>,
}

/// Validation metrics of the current encoder.
pub fn validate(state: &TrainState, set: &InteractionSet, cfg: &TrainConfig) -> Result<MetricReport> {
    evaluate(&state.encoder, set, Split::Valid, cfg.k_eval, None)
}

/// Trains until `patience` evaluations pass without improving validation
/// recall or `max_epochs` is reached. The last epoch is always evaluated.
pub fn run_training(
    set: &InteractionSet,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    let state = TrainState::new(set, cfg)?;
    continue_training(state, set, cfg, observer)
}

/// Runs the loop from an existing state.
pub fn continue_training(
    mut state: TrainState,
    set: &InteractionSet,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut best = (state.encoder.clone(), state.hardness.clone(), state.epoch);
    let mut adv_epochs = Vec::new();
    while state.epoch < cfg.max_epochs {
        state.epoch += 1;
        let e = state.epoch;
        let stats = min_epoch(&mut state, set, cfg)?;
        if e.is_multiple_of(cfg.t_adv_interval) {
            if let AdvOutcome::Stepped(_) = adv_epoch(&mut state, set, cfg)? {
                adv_epochs.push(e);
            }
        }
        if !e.is_multiple_of(cfg.eval_every) && e != cfg.max_epochs {
            continue;
        }
        let report = validate(&state, set, cfg)?;
        let record = MetricsRecord {
            epoch: e,
            split: Split::Valid,
            k: cfg.k_eval,
            hr: report.hr,
            recall: report.recall,
            ndcg: report.ndcg,
            loss: stats.loss,
            kl_mean: stats.kl_mean,
            eps_proxy: stats.eps_proxy,
            e_adv: state.e_adv,
        };
        observer(&record);
        state.history.push(record);
        let (improved, stop) = state.stopper.observe(e, report.recall);
        if improved {
            best = (state.encoder.clone(), state.hardness.clone(), e);
        }
        if stop {
            break;
        }
    }
    Ok(TrainOutcome {
        best_encoder: best.0,
        best_hardness: best.1,
        best_epoch: best.2,
        adv_epochs,
        state,
    })
}
