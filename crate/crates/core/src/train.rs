//! Training: data splits, the epoch loop with early stopping, and the run
//! manifest.
//!
//! Hierarchical models consume [`QueueBatcher`] batches and carry each row's
//! high-level state from one batch to the next (as a constant: gradients stop
//! at batch boundaries). Single-level models consume [`FullHistoryBatcher`]
//! batches. Every random draw comes from a stream derived from the seed,
//! epoch and step, so a run resumed from an epoch checkpoint continues
//! exactly as if it had not stopped.

use std::collections::HashSet;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Event, FullHistoryBatcher, ItemMatrix, MiniBatch, QueueBatcher, UserTimeline};
use crate::error::{Error, Result};
use crate::eval::{EvalUser, MetricsReport};
use crate::model::{derived_rng, Checkpoint, HighState, Model, ModelBuffers, ModelConfig, TrainSpec, UserRun};
use crate::nn::{adam_step, AdamConfig, AdamState};
use crate::objectives::{objective_loss, NegativeSource, ObjectiveConfig, ObjectiveKind, TrainingTriple};
use crate::parallel::Exec;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Users are disjoint across train, validation and test.
    #[default]
    Cold,
    /// One timeline per user, cut by time.
    Warm,
}

impl SplitMode {
    pub fn name(self) -> &'static str {
        match self {
            SplitMode::Cold => "cold",
            SplitMode::Warm => "warm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    /// Adam; lr 0.001, β 0.9/0.999 by default.
    pub adam: AdamConfig,
    /// Default 32.
    pub batch_size: usize,
    /// Default 20.
    pub max_epochs: usize,
    /// Epochs without sufficient validation improvement before stopping. Default 3.
    pub patience: usize,
    /// Relative validation-loss drop that counts as improvement. Default 1e-4.
    pub min_improvement: f64,
    pub split: SplitMode,
    /// Cold split: fraction of users held out for validation. Default 0.1.
    pub validation_fraction: f64,
    /// Cold split: fraction of users held out for testing. Default 0.1.
    pub test_fraction: f64,
    /// Warm split: fraction of the time span (at the end) used for testing.
    /// Default 1/3. Validation takes `validation_fraction` of the span just
    /// before it.
    pub warm_test_fraction: f64,
    /// Sessions per queue per batch for hierarchical models. Default 4.
    pub max_unroll_sessions: usize,
    /// Optional cap on padded session length (longer sessions are cut).
    pub max_session_len: Option<usize>,
    /// Optional cap on optimizer steps per epoch.
    pub max_steps_per_epoch: Option<usize>,
    /// Recurrent dropout rate. Default 0.
    pub dropout: f64,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            objective: ObjectiveConfig::default(),
            adam: AdamConfig::default(),
            batch_size: 32,
            max_epochs: 20,
            patience: 3,
            min_improvement: 1e-4,
            split: SplitMode::Cold,
            validation_fraction: 0.1,
            test_fraction: 0.1,
            warm_test_fraction: 1.0 / 3.0,
            max_unroll_sessions: 4,
            max_session_len: None,
            max_steps_per_epoch: None,
            dropout: 0.0,
            seed: 0,
            exec: Exec::Parallel,
        }
    }
}

fn in_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must lie in (0, 1), got {v}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.objective.validate()?;
        in_unit("validation_fraction", self.validation_fraction)?;
        in_unit("test_fraction", self.test_fraction)?;
        in_unit("warm_test_fraction", self.warm_test_fraction)?;
        if self.validation_fraction + self.test_fraction >= 1.0 {
            return Err(Error::config("validation and test fractions leave no training users"));
        }
        if self.validation_fraction + self.warm_test_fraction >= 1.0 {
            return Err(Error::config("validation and warm test spans leave no training period"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if self.batch_size == 0 || self.max_unroll_sessions == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch size, unroll length and epoch budget must be positive"));
        }
        if !(self.min_improvement >= 0.0) {
            return Err(Error::config("min_improvement must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        let a = &self.adam;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::config("invalid Adam hyperparameters"));
        }
        Ok(())
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct DataSplit {
    pub mode: SplitMode,
    pub train: Vec<UserTimeline>,
    pub validation: Vec<EvalUser>,
    pub test: Vec<EvalUser>,
}

fn check_users_disjoint(split: &DataSplit) -> Result<()> {
    let train: HashSet<u64> = split.train.iter().map(|u| u.user_id).collect();
    let val: HashSet<u64> = split.validation.iter().map(|u| u.timeline.user_id).collect();
    let test: HashSet<u64> = split.test.iter().map(|u| u.timeline.user_id).collect();
    if !train.is_disjoint(&val) || !train.is_disjoint(&test) || !val.is_disjoint(&test) {
        return Err(Error::data("cold split assigns a user to more than one part"));
    }
    Ok(())
}

/// Shuffles users with `seed` and holds out whole users for validation and
/// test.
pub fn cold_split(mut users: Vec<UserTimeline>, validation_fraction: f64, test_fraction: f64, seed: u64) -> Result<DataSplit> {
    users.sort_by_key(|u| u.user_id);
    if users.windows(2).any(|w| w[0].user_id == w[1].user_id) {
        return Err(Error::data("duplicate user timeline"));
    }
    users.shuffle(&mut derived_rng(seed, 0, 20));
    let n = users.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    let n_val = (n as f64 * validation_fraction).round() as usize;
    if n_test + n_val >= n {
        return Err(Error::data(format!("{n} users are too few to split")));
    }
    let test: Vec<EvalUser> = users.drain(..n_test).map(EvalUser::cold).collect();
    let validation: Vec<EvalUser> = users.drain(..n_val).map(EvalUser::cold).collect();
    let split = DataSplit { mode: SplitMode::Cold, train: users, validation, test };
    check_users_disjoint(&split)?;
    Ok(split)
}

fn truncate_before(user: &UserTimeline, cutoff: i64) -> UserTimeline {
    let sessions = user
        .sessions
        .iter()
        .map(|s| s.iter().filter(|e| e.timestamp < cutoff).cloned().collect::<Vec<Event>>())
        .filter(|s| !s.is_empty())
        .collect();
    UserTimeline { user_id: user.user_id, sessions }
}

/// Splits every timeline by time: training sees events before the
/// validation cut, validation scores events up to the test cut, and the
/// test scores the remainder with the earlier events as history.
pub fn warm_split(users: Vec<UserTimeline>, validation_fraction: f64, test_fraction: f64) -> Result<DataSplit> {
    let stamps = users.iter().flat_map(|u| u.events().map(|e| e.timestamp));
    let (lo, hi) = stamps.fold((i64::MAX, i64::MIN), |(a, b), t| (a.min(t), b.max(t)));
    if lo >= hi {
        return Err(Error::data("warm split needs events spanning a time range"));
    }
    let span = (hi - lo) as f64;
    let t_test = lo + (span * (1.0 - test_fraction)).round() as i64;
    let t_val = lo + (span * (1.0 - test_fraction - validation_fraction)).round() as i64;
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    for u in users {
        let before_val = u.events().filter(|e| e.timestamp < t_val).count();
        let before_test = u.events().filter(|e| e.timestamp < t_test).count();
        if before_val > 0 {
            train.push(truncate_before(&u, t_val));
        }
        if before_test > before_val {
            validation.push(EvalUser { timeline: truncate_before(&u, t_test), first_scored: before_val });
        }
        if u.num_events() > before_test {
            test.push(EvalUser { timeline: u, first_scored: before_test });
        }
    }
    let split = DataSplit { mode: SplitMode::Warm, train, validation, test };
    let train_max = split.train.iter().flat_map(|u| u.events().map(|e| e.timestamp)).max();
    let scored = |part: &[EvalUser]| -> Vec<i64> {
        part.iter().flat_map(|u| u.timeline.events().skip(u.first_scored).map(|e| e.timestamp).collect::<Vec<_>>()).collect()
    };
    let (val_t, test_t) = (scored(&split.validation), scored(&split.test));
    let ordered = train_max.is_none_or(|m| m < t_val)
        && val_t.iter().all(|&t| (t_val..t_test).contains(&t))
        && test_t.iter().all(|&t| t >= t_test);
    if !ordered {
        return Err(Error::data("warm split periods overlap"));
    }
    Ok(split)
}

pub fn split_users(users: Vec<UserTimeline>, cfg: &TrainConfig) -> Result<DataSplit> {
    match cfg.split {
        SplitMode::Cold => cold_split(users, cfg.validation_fraction, cfg.test_fraction, cfg.seed),
        SplitMode::Warm => warm_split(users, cfg.validation_fraction, cfg.warm_test_fraction),
    }
}

/// Row indices of the negatives for one target.
fn negative_rows<T: Real>(cfg: &ObjectiveConfig, ev: &Event, pos_row: usize, items: &ItemMatrix<T>, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if cfg.kind == ObjectiveKind::L2 {
        return Ok(Vec::new());
    }
    if cfg.source == NegativeSource::Impressions {
        let mut shown = Vec::new();
        for &id in ev.impressions.iter().filter(|&&id| id != ev.item_id) {
            shown.push(items.row_of(id).ok_or(Error::MissingItem(id))?);
        }
        if !shown.is_empty() {
            if shown.len() > cfg.negatives {
                shown.shuffle(rng);
                shown.truncate(cfg.negatives);
            }
            return Ok(shown);
        }
    }
    if items.len() < 2 {
        return Err(Error::data("catalog too small to draw negatives"));
    }
    let mut out = Vec::with_capacity(cfg.negatives);
    while out.len() < cfg.negatives {
        let r = rng.random_range(0..items.len());
        if r != pos_row {
            out.push(r);
        }
    }
    Ok(out)
}

/// Objective value and `∂loss/∂u` for one prediction.
pub fn target_loss<T: Real>(
    cfg: &ObjectiveConfig,
    u: ndarray::ArrayView1<T>,
    ev: &Event,
    items: &ItemMatrix<T>,
    rng: &mut ChaCha8Rng,
) -> Result<(T, Array1<T>)> {
    let pos_row = items.row_of(ev.item_id).ok_or(Error::MissingItem(ev.item_id))?;
    let positive = items.rows.row(pos_row);
    if cfg.kind == ObjectiveKind::CrossEntropy {
        let mask: Vec<bool> = (0..items.len()).map(|r| r != pos_row).collect();
        let t = TrainingTriple { u, positive, negatives: items.rows.view(), mask: Some(&mask) };
        return objective_loss(cfg, &t);
    }
    let rows = negative_rows(cfg, ev, pos_row, items, rng)?;
    let negatives = items.rows.select(Axis(0), &rows);
    objective_loss(cfg, &TrainingTriple { u, positive, negatives: negatives.view(), mask: None })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: f64,
    pub validation_loss: f64,
    /// Wall-clock seconds spent in optimizer steps.
    pub seconds: f64,
    pub peak_input_bytes: usize,
    pub improved: bool,
}

/// Early-stopping bookkeeping; persisted alongside checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    /// Epochs completed.
    pub epoch: usize,
    pub step: u64,
    pub best_validation: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_without_improvement: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainerState {
    fn new() -> Self {
        TrainerState { epoch: 0, step: 0, best_validation: None, best_epoch: None, epochs_without_improvement: 0, history: Vec::new() }
    }
}

pub struct Trainer<'a, T: Real> {
    pub cfg: TrainConfig,
    pub items: &'a ItemMatrix<T>,
    pub model: Model<T>,
    pub buffers: ModelBuffers<T>,
    pub optimizer: AdamState<T>,
    pub state: TrainerState,
    best: Option<(Model<T>, ModelBuffers<T>)>,
    carry: Vec<Option<HighState<T>>>,
}

struct RunTargets<'b> {
    events: Vec<&'b [Event]>,
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(cfg: TrainConfig, items: &'a ItemMatrix<T>) -> Result<Self> {
        cfg.validate()?;
        if cfg.model.embedding_dim != items.dim() {
            return Err(Error::config(format!(
                "model expects {}-dimensional items, table has {}",
                cfg.model.embedding_dim,
                items.dim()
            )));
        }
        if items.rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("item table holds non-finite values"));
        }
        let model = Model::new(&cfg.model, cfg.seed)?;
        let buffers = model.new_buffers();
        let optimizer = AdamState::new(&model);
        Ok(Trainer { cfg, items, model, buffers, optimizer, state: TrainerState::new(), best: None, carry: Vec::new() })
    }

    /// Continues from a checkpoint holding optimizer state and the
    /// bookkeeping written with it.
    pub fn resume(cfg: TrainConfig, items: &'a ItemMatrix<T>, ckpt: Checkpoint<T>, state: TrainerState, best: Option<Checkpoint<T>>) -> Result<Self> {
        let mut t = Trainer::new(cfg, items)?;
        if ckpt.model.config != t.cfg.model {
            return Err(Error::config("checkpoint model config differs from the training config"));
        }
        t.optimizer = ckpt.optimizer.ok_or_else(|| Error::Format("checkpoint has no optimizer state".into()))?;
        t.model = ckpt.model;
        t.buffers = ckpt.buffers;
        t.best = best.map(|b| (b.model, b.buffers));
        t.state = state;
        Ok(t)
    }

    /// Current weights with optimizer state.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint { model: self.model.clone(), buffers: self.buffers.clone(), optimizer: Some(self.optimizer.clone()) }
    }

    /// Weights of the best validation epoch so far (current weights before
    /// any epoch has been validated).
    pub fn best_checkpoint(&self) -> Checkpoint<T> {
        match &self.best {
            Some((m, b)) => Checkpoint::new(m.clone(), b.clone()),
            None => Checkpoint::new(self.model.clone(), self.buffers.clone()),
        }
    }

    fn train_spec(&self) -> TrainSpec {
        TrainSpec { seed: self.cfg.seed ^ self.state.step.wrapping_mul(0x9E37_79B9_7F4A_7C15), dropout: self.cfg.dropout }
    }

    /// One optimizer step on a batch; returns the mean objective value.
    pub fn step(&mut self, batch: &MiniBatch<T>) -> Result<f64> {
        let hier = self.cfg.model.architecture.is_hierarchical();
        if self.carry.len() < batch.rows.len() {
            self.carry.resize(batch.rows.len(), None);
        }
        let mut runs = Vec::new();
        let mut targets = Vec::new();
        let mut run_rows = Vec::new();
        for row in 0..batch.rows.len() {
            for (a, b, reset) in batch.runs(row) {
                let init = if !hier || reset {
                    None
                } else {
                    let carried = self.carry[row].clone();
                    Some(carried.ok_or_else(|| Error::data("continued user has no carried state"))?)
                };
                let sessions = (a..b).map(|k| batch.session(row, k)).collect();
                runs.push(UserRun { sessions, init });
                targets.push(RunTargets { events: batch.rows[row][a..b].iter().map(|s| s.events.as_slice()).collect() });
                run_rows.push(row);
            }
        }
        if runs.is_empty() {
            return Ok(0.0);
        }
        let spec = self.train_spec();
        let fwd = self.model.forward_batch(&runs, Some(&self.buffers), Some(spec), self.cfg.exec)?;
        let step = self.state.step;
        let seed = self.cfg.seed;
        let items = self.items;
        let obj = &self.cfg.objective;
        let per_run = self.cfg.exec.map_indexed(&fwd.outputs, |r, out| -> Result<(f64, usize, Vec<Array2<T>>)> {
            let mut rng = derived_rng(seed ^ 0xA5A5_5A5A, step, r as u64);
            let mut total = 0.0;
            let mut count = 0;
            let mut grads = Vec::with_capacity(out.predictions.len());
            for (pred, evs) in out.predictions.iter().zip(&targets[r].events) {
                let mut g = Array2::zeros(pred.dim());
                if pred.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite prediction at step {step}")));
                }
                for (t, ev) in evs.iter().enumerate() {
                    let (l, du) = target_loss(obj, pred.row(t), ev, items, &mut rng)?;
                    total += l.as_f64();
                    count += 1;
                    g.row_mut(t).assign(&du);
                }
                grads.push(g);
            }
            Ok((total, count, grads))
        });
        let mut loss = 0.0;
        let mut count = 0usize;
        let mut d_pred = Vec::with_capacity(per_run.len());
        for r in per_run {
            let (l, c, g) = r?;
            loss += l;
            count += c;
            d_pred.push(g);
        }
        let mean = loss / count.max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric(format!(
                "training loss is {mean} at epoch {} step {}",
                self.state.epoch + 1,
                self.state.step
            )));
        }
        let scale = T::of(1.0 / count.max(1) as f64);
        for g in d_pred.iter_mut().flatten() {
            g.mapv_inplace(|v| v * scale);
        }
        let grads = self.model.backward_batch(&fwd, &d_pred, self.cfg.exec)?;
        adam_step(&mut self.model, &grads, &mut self.optimizer, &self.cfg.adam)?;
        self.buffers.update(&fwd.bn_stats);
        if hier {
            for (out, &row) in fwd.outputs.iter().zip(&run_rows) {
                self.carry[row] = out.final_state.clone();
            }
        }
        self.state.step += 1;
        Ok(mean)
    }

    fn epoch_order(&self, users: &[UserTimeline]) -> Vec<UserTimeline> {
        let mut order = users.to_vec();
        order.shuffle(&mut derived_rng(self.cfg.seed, self.state.epoch as u64, 21));
        order
    }

    /// One pass over `users`; returns the mean batch loss, seconds spent and
    /// the peak bytes of materialized inputs.
    pub fn train_epoch(&mut self, users: &[UserTimeline]) -> Result<(f64, f64, usize)> {
        let order = self.epoch_order(users);
        self.carry.clear();
        let limit = self.cfg.max_steps_per_epoch.unwrap_or(usize::MAX);
        let mut losses = Vec::new();
        let start = Instant::now();
        let peak;
        if self.cfg.model.architecture.is_hierarchical() {
            let mut batcher = QueueBatcher::new(order.into_iter(), self.items, self.cfg.batch_size, self.cfg.max_unroll_sessions)?
                .with_max_session_len(self.cfg.max_session_len);
            while losses.len() < limit {
                let Some(batch) = batcher.next() else { break };
                losses.push(self.step(&batch?)?);
            }
            peak = batcher.counter().peak;
            if batcher.split_sessions > 0 {
                log::info!("split {} over-long sessions", batcher.split_sessions);
            }
        } else {
            let mut batcher = FullHistoryBatcher::new(order.into_iter(), self.items, self.cfg.batch_size)?;
            while losses.len() < limit {
                let Some(batch) = batcher.next() else { break };
                losses.push(self.step(&batch?)?);
            }
            peak = batcher.counter().peak;
        }
        let seconds = start.elapsed().as_secs_f64();
        let mean = if losses.is_empty() { 0.0 } else { losses.iter().sum::<f64>() / losses.len() as f64 };
        Ok((mean, seconds, peak))
    }

    /// Mean objective over the scored events of `users`, with negatives drawn
    /// from a fixed stream so values are comparable across epochs.
    pub fn validation_loss(&self, users: &[EvalUser]) -> Result<f64> {
        let per_user = self.cfg.exec.map_indexed(users, |i, u| -> Result<(f64, usize)> {
            let sessions = u
                .timeline
                .sessions
                .iter()
                .map(|s| self.items.lookup(&s.iter().map(|e| e.item_id).collect::<Vec<_>>()))
                .collect::<Result<Vec<_>>>()?;
            let preds = self.model.forward_user(&sessions, Some(&self.buffers))?;
            let mut rng = derived_rng(self.cfg.seed, u64::MAX, i as u64);
            let rows = preds.iter().flat_map(|p| p.rows().into_iter());
            let mut total = 0.0;
            let mut count = 0;
            for (k, (u_t, ev)) in rows.zip(u.timeline.events()).enumerate() {
                if k < u.first_scored {
                    continue;
                }
                total += target_loss(&self.cfg.objective, u_t, ev, self.items, &mut rng)?.0.as_f64();
                count += 1;
            }
            Ok((total, count))
        });
        let mut total = 0.0;
        let mut count = 0;
        for r in per_user {
            let (t, c) = r?;
            total += t;
            count += c;
        }
        if count == 0 {
            return Err(Error::data("validation set has no scored events"));
        }
        let mean = total / count as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric(format!("validation loss is {mean}")));
        }
        Ok(mean)
    }

    /// Trains one epoch, validates and updates early-stopping state.
    pub fn run_epoch(&mut self, split: &DataSplit) -> Result<EpochRecord> {
        let (train_loss, seconds, peak) = self.train_epoch(&split.train)?;
        let validation_loss = self.validation_loss(&split.validation)?;
        self.state.epoch += 1;
        let improved = match self.state.best_validation {
            None => true,
            Some(best) => best - validation_loss > self.cfg.min_improvement * best.abs(),
        };
        if improved {
            self.state.best_validation = Some(validation_loss);
            self.state.best_epoch = Some(self.state.epoch);
            self.state.epochs_without_improvement = 0;
            self.best = Some((self.model.clone(), self.buffers.clone()));
        } else {
            self.state.epochs_without_improvement += 1;
        }
        let rec = EpochRecord {
            epoch: self.state.epoch,
            steps: self.state.step,
            train_loss,
            validation_loss,
            seconds,
            peak_input_bytes: peak,
            improved,
        };
        self.state.history.push(rec.clone());
        Ok(rec)
    }

    pub fn should_stop(&self) -> bool {
        self.state.epoch >= self.cfg.max_epochs || self.state.epochs_without_improvement >= self.cfg.patience
    }

    /// Runs epochs until the budget is spent or validation plateaus. The
    /// callback sees every finished epoch (checkpointing, logging).
    pub fn fit<F>(&mut self, split: &DataSplit, mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&Trainer<'a, T>, &EpochRecord) -> Result<()>,
    {
        while !self.should_stop() {
            let rec = self.run_epoch(split)?;
            log::info!(
                "epoch {} train {:.5} validation {:.5}{}",
                rec.epoch,
                rec.train_loss,
                rec.validation_loss,
                if rec.improved { " *" } else { "" }
            );
            on_epoch(self, &rec)?;
        }
        Ok(())
    }
}

/// Everything needed to reproduce and audit one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub config_hash: String,
    pub dataset_hash: String,
    pub config: TrainConfig,
    pub best_checkpoint: String,
    pub last_checkpoint: String,
    pub state: TrainerState,
    pub report: Option<MetricsReport>,
}

pub const MANIFEST_VERSION: u32 = 1;

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: RunManifest = serde_json::from_str(text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }
}
