//! SGD training over grayscale sets.
//!
//! Epochs `1..=pretrain_epochs` optimize `L_Ran` only; later epochs optimize
//! the configured objective. At the start of every post-pretraining epoch
//! that uses retrieval responses, each context's active retrieval set is
//! re-selected as the top-`m` pool members under a frozen snapshot of the
//! model. The parameters of the epoch with the best validation `R10@1` are
//! returned (earliest on ties).

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, Vocab};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EncodedGroup, MetricConfig, MetricsReport, RecallAt, TieMode};
use crate::grayscale::{adaptive_select, GrayscaleSet};
use crate::matcher::TrainableScorer;
use crate::objectives::{loss_bce, loss_flat, loss_gen, loss_ran, loss_ret, LossValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectiveMode {
    #[serde(rename = "bce")]
    Bce,
    #[serde(rename = "ran_only")]
    RanOnly,
    #[serde(rename = "ran+ret")]
    RanRet,
    #[serde(rename = "ran+gen")]
    RanGen,
    #[serde(rename = "uni")]
    Uni,
    #[serde(rename = "flat_negatives")]
    FlatNegatives,
}

impl ObjectiveMode {
    pub const ALL: [ObjectiveMode; 6] = [
        ObjectiveMode::Bce,
        ObjectiveMode::RanOnly,
        ObjectiveMode::RanRet,
        ObjectiveMode::RanGen,
        ObjectiveMode::Uni,
        ObjectiveMode::FlatNegatives,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveMode::Bce => "bce",
            ObjectiveMode::RanOnly => "ran_only",
            ObjectiveMode::RanRet => "ran+ret",
            ObjectiveMode::RanGen => "ran+gen",
            ObjectiveMode::Uni => "uni",
            ObjectiveMode::FlatNegatives => "flat_negatives",
        }
    }

    pub fn uses_retrieval(self) -> bool {
        matches!(
            self,
            ObjectiveMode::RanRet | ObjectiveMode::Uni | ObjectiveMode::FlatNegatives
        )
    }

    pub fn uses_generation(self) -> bool {
        matches!(
            self,
            ObjectiveMode::RanGen | ObjectiveMode::Uni | ObjectiveMode::FlatNegatives
        )
    }
}

impl fmt::Display for ObjectiveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectiveMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown objective mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: ObjectiveMode,
    /// Margin shared by every hinge pair.
    pub mu: f64,
    pub lr: f64,
    pub pretrain_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Active retrieval responses per context and epoch.
    pub m: usize,
    /// Record wall-clock time per epoch. Off by default so logs are
    /// reproducible byte for byte.
    pub log_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: ObjectiveMode::Uni,
            mu: 0.3,
            lr: 0.1,
            pretrain_epochs: 2,
            epochs: 20,
            batch_size: 32,
            seed: 1,
            m: 5,
            log_wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..1.0).contains(&self.mu) {
            return err(format!("margin mu must be in [0, 1), got {}", self.mu));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return err(format!("learning rate must be finite and >= 0, got {}", self.lr));
        }
        if self.epochs == 0 {
            return err("epochs must be >= 1".into());
        }
        if self.pretrain_epochs > self.epochs {
            return err(format!(
                "pretrain_epochs ({}) exceeds epochs ({})",
                self.pretrain_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 || self.m == 0 {
            return err("batch_size and m must be >= 1".into());
        }
        Ok(())
    }

    /// Objective in effect during `epoch` (1-based).
    pub fn objective_for(&self, epoch: usize) -> ObjectiveMode {
        if epoch <= self.pretrain_epochs {
            ObjectiveMode::RanOnly
        } else {
            self.mode
        }
    }
}

/// A grayscale set mapped to token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSet {
    pub context_id: usize,
    pub context: Vec<Vec<TokenId>>,
    pub ground_truth: Vec<TokenId>,
    pub pool: Vec<Vec<TokenId>>,
    pub generation: Vec<Vec<TokenId>>,
    pub random: Vec<Vec<TokenId>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub sets: Vec<EncodedSet>,
}

impl TrainingData {
    pub fn encode(vocab: &Vocab, sets: &[GrayscaleSet]) -> Result<Self> {
        let sets = sets
            .iter()
            .map(|s| {
                if s.random.is_empty() {
                    return Err(Error::InvalidInput(format!(
                        "context {} has no random responses",
                        s.context_id
                    )));
                }
                Ok(EncodedSet {
                    context_id: s.context_id,
                    context: vocab.encode_context(&s.context),
                    ground_truth: vocab.encode(&s.ground_truth),
                    pool: s.retrieval_pool.iter().map(|r| vocab.encode(&r.response)).collect(),
                    generation: s.generation.iter().map(|g| vocab.encode(&g.tokens)).collect(),
                    random: s.random.iter().map(|r| vocab.encode(r)).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingData { sets })
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

/// Loss terms computed for one context in one step. Terms outside the
/// active objective are `None`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTerms {
    pub ran: Option<LossValue>,
    pub ret: Option<LossValue>,
    pub gen: Option<LossValue>,
    pub flat: Option<LossValue>,
    pub bce: Option<LossValue>,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        [&self.ran, &self.ret, &self.gen, &self.flat, &self.bce]
            .into_iter()
            .flatten()
            .map(|l| l.value)
            .sum()
    }
}

/// Hooks into the training loop, used for instrumentation.
pub trait TrainObserver<S> {
    fn epoch_start(&mut self, _epoch: usize, _model: &S) {}
    /// `active[i]` holds the pool indices selected for set `i`.
    fn refreshed(&mut self, _epoch: usize, _snapshot: &S, _active: &[Vec<usize>]) {}
    fn context_step(&mut self, _epoch: usize, _context_id: usize, _terms: &LossTerms) {}
}

pub struct NoObserver;

impl<S> TrainObserver<S> for NoObserver {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub objective: ObjectiveMode,
    pub loss_total: f64,
    pub loss_ran: f64,
    pub loss_ret: f64,
    pub loss_gen: f64,
    /// `None` without a validation set.
    pub valid_r10_at_1: Option<f64>,
    /// Seconds since the Unix epoch; only with `log_wall_clock`.
    pub timestamp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
}

impl TrainLog {
    /// One JSON object per epoch, then a `{"selected_epoch": n}` line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<train log>", e);
        for record in &self.epochs {
            serde_json::to_writer(&mut w, record)?;
            w.write_all(b"\n").map_err(io)?;
        }
        serde_json::to_writer(&mut w, &serde_json::json!({ "selected_epoch": self.selected_epoch }))?;
        w.write_all(b"\n").map_err(io)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,loss_ran,loss_ret,loss_gen,valid_R10@1,selected")?;
        for r in &self.epochs {
            let valid = r.valid_r10_at_1.map(|v| format!("{v:.6}")).unwrap_or_default();
            writeln!(
                w,
                "{},{:.6},{:.6},{:.6},{},{}",
                r.epoch,
                r.loss_ran,
                r.loss_ret,
                r.loss_gen,
                valid,
                u8::from(r.epoch == self.selected_epoch)
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    /// Parameters of the selected epoch.
    pub model: S,
    pub log: TrainLog,
}

fn validation_r10_at_1<S: TrainableScorer>(model: &S, valid: &[EncodedGroup]) -> Result<Option<f64>> {
    if valid.is_empty() {
        return Ok(None);
    }
    let r10_1 = RecallAt { n: Some(10), k: 1 };
    let config = MetricConfig {
        recalls: vec![r10_1],
        tie: TieMode::Index,
    };
    Ok(evaluate(model, valid, &config)?.recall(r10_1))
}

/// Forward, loss and backward for one context. Gradients are scaled by
/// `scale` and added into `grads`.
#[allow(clippy::too_many_arguments)]
fn context_step<S: TrainableScorer>(
    model: &S,
    set: &EncodedSet,
    active: &[usize],
    random_index: usize,
    objective: ObjectiveMode,
    mu: f64,
    scale: f64,
    grads: &mut S::Gradients,
) -> Result<LossTerms> {
    let use_ret = objective.uses_retrieval();
    let use_gen = objective.uses_generation();
    let mut responses: Vec<&[TokenId]> = vec![&set.ground_truth];
    if use_ret {
        responses.extend(active.iter().map(|&i| set.pool[i].as_slice()));
    }
    let n_ret = responses.len() - 1;
    if use_gen {
        responses.extend(set.generation.iter().map(Vec::as_slice));
    }
    let n_gen = responses.len() - 1 - n_ret;
    responses.push(&set.random[random_index]);

    let caches = model.forward_many(&set.context, &responses);
    let scores: Vec<f64> = caches.iter().map(S::cached_score).collect();
    let s_r = scores[0];
    let s_e = &scores[1..1 + n_ret];
    let s_g = &scores[1 + n_ret..1 + n_ret + n_gen];
    let s_rand = scores[scores.len() - 1];

    let mut terms = LossTerms::default();
    // Partial derivative per response, in `responses` order.
    let mut partials = vec![0.0; responses.len()];
    let last = partials.len() - 1;
    let add = |loss: &LossValue, partials: &mut Vec<f64>| {
        partials[0] += loss.d_positive;
        for (i, d) in loss.d_retrieval.iter().enumerate() {
            partials[1 + i] += d;
        }
        for (i, d) in loss.d_generation.iter().enumerate() {
            partials[1 + n_ret + i] += d;
        }
        if let Some(d) = loss.d_negatives.first() {
            partials[last] += d;
        }
    };

    match objective {
        ObjectiveMode::Bce => {
            let l = loss_bce(s_r, &[s_rand]);
            add(&l, &mut partials);
            terms.bce = Some(l);
        }
        ObjectiveMode::FlatNegatives => {
            let l = loss_flat(mu, s_r, &scores[1..]);
            partials[0] += l.d_positive;
            for (p, d) in partials[1..].iter_mut().zip(&l.d_negatives) {
                *p += d;
            }
            terms.flat = Some(l);
        }
        _ => {
            let ran = loss_ran(mu, s_r, s_rand);
            add(&ran, &mut partials);
            terms.ran = Some(ran);
            if use_ret {
                let ret = loss_ret(mu, s_r, s_e, s_rand);
                add(&ret, &mut partials);
                terms.ret = Some(ret);
            }
            if use_gen {
                let gen = loss_gen(mu, s_r, s_g, s_rand);
                add(&gen, &mut partials);
                terms.gen = Some(gen);
            }
        }
    }

    for (cache, &d) in caches.iter().zip(&partials) {
        if d != 0.0 {
            model.backward_into(cache, d * scale, grads)?;
        }
    }
    Ok(terms)
}

/// Re-selects every context's active retrieval set with a frozen snapshot.
pub fn refresh_active<S: TrainableScorer>(snapshot: &S, data: &TrainingData, m: usize) -> Vec<Vec<usize>> {
    data.sets
        .par_iter()
        .map(|set| {
            if set.pool.is_empty() {
                return Vec::new();
            }
            let scores = snapshot.score_many(&set.context, &set.pool);
            adaptive_select(&scores, m)
        })
        .collect()
}

pub fn train<S: TrainableScorer>(
    config: &TrainConfig,
    data: &TrainingData,
    valid: &[EncodedGroup],
    initial: S,
) -> Result<TrainOutcome<S>> {
    train_observed(config, data, valid, initial, &mut NoObserver)
}

pub fn train_observed<S: TrainableScorer, O: TrainObserver<S>>(
    config: &TrainConfig,
    data: &TrainingData,
    valid: &[EncodedGroup],
    initial: S,
    observer: &mut O,
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("training data is empty".into()));
    }
    if let Some(set) = data.sets.iter().find(|s| s.random.is_empty()) {
        return Err(Error::InvalidInput(format!(
            "context {} has no random responses",
            set.context_id
        )));
    }

    let mut model = initial;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut active: Vec<Vec<usize>> = data
        .sets
        .iter()
        .map(|s| (0..s.pool.len().min(config.m)).collect())
        .collect();
    let mut order: Vec<usize> = (0..data.len()).collect();

    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, S)> = None;

    for epoch in 1..=config.epochs {
        observer.epoch_start(epoch, &model);
        let objective = config.objective_for(epoch);
        if epoch > config.pretrain_epochs && objective.uses_retrieval() {
            let snapshot = model.snapshot();
            active = refresh_active(&snapshot, data, config.m);
            observer.refreshed(epoch, &snapshot, &active);
        }

        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut grads = model.zero_gradients();
            for &i in batch {
                let set = &data.sets[i];
                let random_index = (epoch - 1) % set.random.len();
                let terms = context_step(
                    &model,
                    set,
                    &active[i],
                    random_index,
                    objective,
                    config.mu,
                    scale,
                    &mut grads,
                )?;
                sums[0] += terms.total();
                sums[1] += terms.ran.as_ref().map_or(0.0, |l| l.value);
                sums[2] += terms.ret.as_ref().map_or(0.0, |l| l.value);
                sums[3] += terms.gen.as_ref().map_or(0.0, |l| l.value);
                observer.context_step(epoch, set.context_id, &terms);
            }
            model.apply(&grads, config.lr);
        }

        let n = data.len() as f64;
        let valid_r10_at_1 = validation_r10_at_1(&model, valid)?;
        let timestamp = config.log_wall_clock.then(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0)
        });
        records.push(EpochRecord {
            epoch,
            objective,
            loss_total: sums[0] / n,
            loss_ran: sums[1] / n,
            loss_ret: sums[2] / n,
            loss_gen: sums[3] / n,
            valid_r10_at_1,
            timestamp,
        });

        let metric = valid_r10_at_1.unwrap_or(f64::NEG_INFINITY);
        let improved = match &best {
            None => true,
            Some((_, b, _)) => metric > *b || valid_r10_at_1.is_none(),
        };
        if improved {
            best = Some((epoch, metric, model.snapshot()));
        }
    }

    let (selected_epoch, _, model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        log: TrainLog {
            epochs: records,
            selected_epoch,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub mode: ObjectiveMode,
    pub report: MetricsReport,
    pub selected_epoch: usize,
}

/// Trains one model per mode with otherwise identical settings and evaluates
/// each on the same held-out groups.
pub fn run_ablation_grid<S, F>(
    base: &TrainConfig,
    modes: &[ObjectiveMode],
    data: &TrainingData,
    valid: &[EncodedGroup],
    test: &[EncodedGroup],
    metrics: &MetricConfig,
    init: F,
) -> Result<Vec<AblationRow>>
where
    S: TrainableScorer,
    F: Fn(&TrainConfig) -> Result<S>,
{
    if modes.is_empty() {
        return Err(Error::InvalidConfig("ablation grid needs at least one mode".into()));
    }
    modes
        .iter()
        .map(|&mode| {
            let config = TrainConfig { mode, ..base.clone() };
            let outcome = train(&config, data, valid, init(&config)?)?;
            Ok(AblationRow {
                mode,
                report: evaluate(&outcome.model, test, metrics)?,
                selected_epoch: outcome.log.selected_epoch,
            })
        })
        .collect()
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], mut w: W) -> std::io::Result<()> {
    if let Some(first) = rows.first() {
        writeln!(w, "mode,{},selected_epoch", first.report.csv_header())?;
    }
    for row in rows {
        writeln!(w, "{},{},{}", row.mode, row.report.csv_row(), row.selected_epoch)?;
    }
    Ok(())
}
