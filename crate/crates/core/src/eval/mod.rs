//! Offline evaluation: candidate pools, model and rule-based scorers, and
//! metric reports with per-segment breakdowns.

pub mod metrics;

use std::collections::VecDeque;
use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ItemMatrix, UserTimeline};
use crate::error::{Error, Result};
use crate::model::{derived_rng, score, Model, ModelBuffers};
use crate::parallel::Exec;
use crate::real::Real;

pub use metrics::{pessimistic_rank, pow2_bucket, Breakdown, Metrics, Tally};

/// Default size of the recent-item pool of the rule-based baselines.
pub const RECENT_POOL_SIZE: usize = 20;

/// The last `k` interacted item embeddings, oldest first.
#[derive(Debug, Clone)]
pub struct RecentPool<T: Real> {
    k: usize,
    items: VecDeque<Array1<T>>,
}

impl<T: Real> RecentPool<T> {
    pub fn new(k: usize) -> Self {
        RecentPool { k: k.max(1), items: VecDeque::new() }
    }

    pub fn push(&mut self, e: ArrayView1<T>) {
        if self.items.len() == self.k {
            self.items.pop_front();
        }
        self.items.push_back(e.to_owned());
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Array1<T>> {
        self.items.iter()
    }
}

/// Mean of the pooled embeddings; `None` for an empty pool.
pub fn mv_predict<T: Real>(pool: &RecentPool<T>) -> Option<Array1<T>> {
    let first = pool.items.front()?;
    let mut sum = Array1::zeros(first.len());
    for e in &pool.items {
        sum += e;
    }
    let n = T::of(pool.len() as f64);
    Some(sum.mapv(|v| v / n))
}

/// Largest dot product between `candidate` and a pooled embedding; `None`
/// for an empty pool.
pub fn maxitem_score<T: Real>(candidate: ArrayView1<T>, pool: &RecentPool<T>) -> Option<T> {
    pool.items.iter().map(|e| score(candidate, e.view())).reduce(T::max)
}

/// Candidate pool per test event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PoolStrategy {
    Impressions,
    FullCatalog,
    UniformSample { size: usize, seed: u64 },
}

impl PoolStrategy {
    pub fn name(&self) -> String {
        match self {
            PoolStrategy::Impressions => "impressions".into(),
            PoolStrategy::FullCatalog => "full_catalog".into(),
            PoolStrategy::UniformSample { size, .. } => format!("uniform_sample_{size}"),
        }
    }
}

/// A user to evaluate: events before flat index `first_scored` are history
/// only.
#[derive(Debug, Clone)]
pub struct EvalUser {
    pub timeline: UserTimeline,
    pub first_scored: usize,
}

impl EvalUser {
    pub fn cold(timeline: UserTimeline) -> Self {
        EvalUser { timeline, first_scored: 0 }
    }
}

/// Scores produced for one user: per flat event index, the candidate scores
/// (`None` where no pool was requested).
#[derive(Debug, Clone)]
pub struct UserScores<T> {
    pub scores: Vec<Option<Vec<T>>>,
    /// Events scored through a cold-start fallback (empty recent pool).
    pub fallbacks: u64,
}

pub trait Scorer<T: Real>: Sync {
    fn name(&self) -> String;

    fn score_user(&self, user: &UserTimeline, items: &ItemMatrix<T>, pools: &[Option<Vec<u64>>]) -> Result<UserScores<T>>;
}

fn embed_sessions<T: Real>(user: &UserTimeline, items: &ItemMatrix<T>) -> Result<Vec<Array2<T>>> {
    user.sessions
        .iter()
        .map(|s| items.lookup(&s.iter().map(|e| e.item_id).collect::<Vec<_>>()))
        .collect()
}

fn dot_scores<T: Real>(u: ArrayView1<T>, pool: &[u64], items: &ItemMatrix<T>) -> Result<Vec<T>> {
    pool.iter().map(|&id| items.get(id).map(|e| score(u, e)).ok_or(Error::MissingItem(id))).collect()
}

/// A trained sequence model.
pub struct ModelScorer<'a, T: Real> {
    pub model: &'a Model<T>,
    pub buffers: Option<&'a ModelBuffers<T>>,
}

impl<T: Real> Scorer<T> for ModelScorer<'_, T> {
    fn name(&self) -> String {
        self.model.config.architecture.name().to_string()
    }

    fn score_user(&self, user: &UserTimeline, items: &ItemMatrix<T>, pools: &[Option<Vec<u64>>]) -> Result<UserScores<T>> {
        let preds = self.model.forward_user(&embed_sessions(user, items)?, self.buffers)?;
        let rows = preds.iter().flat_map(|p| p.rows().into_iter());
        let scores = rows
            .zip(pools)
            .map(|(u, pool)| pool.as_ref().map(|p| dot_scores(u, p, items)).transpose())
            .collect::<Result<_>>()?;
        Ok(UserScores { scores, fallbacks: 0 })
    }
}

/// Rule-based baselines over the recent-item pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleScorer {
    /// Mean vector of the pool.
    MeanVector { k: usize },
    /// Best dot product with any pooled item.
    MaxItem { k: usize },
}

impl<T: Real> Scorer<T> for RuleScorer {
    fn name(&self) -> String {
        match self {
            RuleScorer::MeanVector { .. } => "MV".into(),
            RuleScorer::MaxItem { .. } => "MaxItem".into(),
        }
    }

    fn score_user(&self, user: &UserTimeline, items: &ItemMatrix<T>, pools: &[Option<Vec<u64>>]) -> Result<UserScores<T>> {
        let k = match *self {
            RuleScorer::MeanVector { k } | RuleScorer::MaxItem { k } => k,
        };
        let mut recent = RecentPool::new(k);
        let mut out = Vec::with_capacity(pools.len());
        let mut fallbacks = 0;
        for (e, pool) in user.events().zip(pools) {
            let scored = match pool {
                None => None,
                Some(p) => {
                    if recent.is_empty() {
                        fallbacks += 1;
                    }
                    Some(match self {
                        RuleScorer::MeanVector { .. } => {
                            let u = mv_predict(&recent).unwrap_or_else(|| Array1::zeros(items.dim()));
                            dot_scores(u.view(), p, items)?
                        }
                        RuleScorer::MaxItem { .. } => p
                            .iter()
                            .map(|&id| {
                                let c = items.get(id).ok_or(Error::MissingItem(id))?;
                                Ok(maxitem_score(c, &recent).unwrap_or(T::zero()))
                            })
                            .collect::<Result<_>>()?,
                    })
                }
            };
            out.push(scored);
            recent.push(items.get(e.item_id).ok_or(Error::MissingItem(e.item_id))?);
        }
        Ok(UserScores { scores: out, fallbacks })
    }
}

/// Reference scorers used to validate the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceScorer {
    /// Uniform random scores, seeded per user.
    Random { seed: u64 },
    /// Predicts exactly the interacted item's embedding.
    Oracle,
    /// Scores everything zero.
    Constant,
}

impl<T: Real> Scorer<T> for ReferenceScorer {
    fn name(&self) -> String {
        match self {
            ReferenceScorer::Random { .. } => "random".into(),
            ReferenceScorer::Oracle => "oracle".into(),
            ReferenceScorer::Constant => "constant".into(),
        }
    }

    fn score_user(&self, user: &UserTimeline, items: &ItemMatrix<T>, pools: &[Option<Vec<u64>>]) -> Result<UserScores<T>> {
        let mut rng = derived_rng(match self {
            ReferenceScorer::Random { seed } => *seed,
            _ => 0,
        }, user.user_id, 7);
        let scores = user
            .events()
            .zip(pools)
            .map(|(e, pool)| {
                pool.as_ref()
                    .map(|p| match self {
                        ReferenceScorer::Random { .. } => Ok(p.iter().map(|_| T::of(rng.random::<f64>())).collect()),
                        ReferenceScorer::Oracle => {
                            let u = items.get(e.item_id).ok_or(Error::MissingItem(e.item_id))?;
                            dot_scores(u, p, items)
                        }
                        ReferenceScorer::Constant => Ok(vec![T::zero(); p.len()]),
                    })
                    .transpose()
            })
            .collect::<Result<_>>()?;
        Ok(UserScores { scores, fallbacks: 0 })
    }
}

fn build_pool<T: Real>(
    strategy: PoolStrategy,
    user_id: u64,
    index: usize,
    positive: u64,
    impressions: &[u64],
    items: &ItemMatrix<T>,
) -> Option<Vec<u64>> {
    match strategy {
        PoolStrategy::Impressions => (!impressions.is_empty()).then(|| {
            let mut p = impressions.to_vec();
            if !p.contains(&positive) {
                p.push(positive);
            }
            p
        }),
        PoolStrategy::FullCatalog => Some(items.ids.clone()),
        PoolStrategy::UniformSample { size, seed } => {
            let mut rng = derived_rng(seed, user_id, index as u64);
            let others = items.len().saturating_sub(1);
            let want = size.saturating_sub(1).min(others);
            let pos_row = items.row_of(positive);
            let mut p = vec![positive];
            for i in sample(&mut rng, others, want) {
                // skip over the positive's row
                let row = match pos_row {
                    Some(r) if i >= r => i + 1,
                    _ => i,
                };
                p.push(items.ids[row.min(items.len() - 1)]);
            }
            Some(p)
        }
    }
}

/// One row of a breakdown table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// Inclusive lower bound of the bucket.
    pub from: u64,
    #[serde(flatten)]
    pub metrics: Metrics,
}

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub model: String,
    /// `cold` (unseen users) or `warm` (later activity of known users).
    pub mode: String,
    pub pool: String,
    pub users: u64,
    pub overall: Metrics,
    /// Events without a usable candidate pool.
    pub skipped: u64,
    /// Events scored through a cold-start fallback.
    pub fallbacks: u64,
    /// Buckets of prior interactions: 0, 1, 2–3, 4–7, ...
    pub by_history_length: Vec<Segment>,
    /// 1-based position within the session, capped at 16.
    pub by_session_position: Vec<Segment>,
    /// Whole hours since the previous session (events of later sessions
    /// only), capped at 48.
    pub by_session_gap_hours: Vec<Segment>,
}

pub const POSITION_CAP: u32 = 16;
pub const GAP_CAP_HOURS: u32 = 48;

#[derive(Default)]
struct Acc {
    overall: Tally,
    history: Breakdown,
    position: Breakdown,
    gap: Breakdown,
    skipped: u64,
    fallbacks: u64,
}

impl Acc {
    fn merge(&mut self, o: &Acc) {
        self.overall.merge(&o.overall);
        self.history.merge(&o.history);
        self.position.merge(&o.position);
        self.gap.merge(&o.gap);
        self.skipped += o.skipped;
        self.fallbacks += o.fallbacks;
    }
}

fn evaluate_user<T: Real, S: Scorer<T> + ?Sized>(
    scorer: &S,
    user: &EvalUser,
    items: &ItemMatrix<T>,
    strategy: PoolStrategy,
) -> Result<Acc> {
    let tl = &user.timeline;
    let mut acc = Acc::default();
    let mut pools = Vec::with_capacity(tl.num_events());
    for (i, e) in tl.events().enumerate() {
        if i < user.first_scored {
            pools.push(None);
            continue;
        }
        let p = build_pool(strategy, tl.user_id, i, e.item_id, &e.impressions, items);
        if p.is_none() {
            acc.skipped += 1;
        }
        pools.push(p);
    }
    let scored = scorer.score_user(tl, items, &pools)?;
    if scored.scores.len() != pools.len() {
        return Err(Error::Shape("scorer returned the wrong number of events".into()));
    }
    acc.fallbacks = scored.fallbacks;
    let mut flat = 0;
    let mut prev_ts: Option<i64> = None;
    for (k, sess) in tl.sessions.iter().enumerate() {
        let gap_hours = match (k, prev_ts, sess.first()) {
            (0, _, _) => None,
            (_, Some(p), Some(e)) => Some((((e.timestamp - p).max(0)) / 3600).min(GAP_CAP_HOURS as i64) as u32),
            _ => None,
        };
        for (pos, e) in sess.iter().enumerate() {
            if let (Some(pool), Some(scores)) = (&pools[flat], &scored.scores[flat]) {
                if scores.len() != pool.len() {
                    return Err(Error::Shape("scorer returned the wrong pool size".into()));
                }
                let target = pool.iter().position(|&c| c == e.item_id).expect("pool holds the positive");
                let rank = pessimistic_rank(scores, target);
                acc.overall.add(rank, pool.len());
                acc.history.add(pow2_bucket(flat), rank, pool.len());
                acc.position.add((pos as u32 + 1).min(POSITION_CAP), rank, pool.len());
                if let Some(g) = gap_hours {
                    acc.gap.add(g, rank, pool.len());
                }
            }
            flat += 1;
        }
        prev_ts = sess.last().map(|e| e.timestamp);
    }
    Ok(acc)
}

fn segments(b: &Breakdown, label: impl Fn(u32) -> u64) -> Vec<Segment> {
    b.buckets.iter().map(|(&k, t)| Segment { from: label(k), metrics: t.metrics() }).collect()
}

/// Scores every selected event of every user exactly once.
pub fn evaluate<T: Real, S: Scorer<T> + ?Sized>(
    scorer: &S,
    users: &[EvalUser],
    items: &ItemMatrix<T>,
    strategy: PoolStrategy,
    mode: &str,
    exec: Exec,
) -> Result<MetricsReport> {
    let per_user = exec.map(users, |u| evaluate_user(scorer, u, items, strategy));
    let mut acc = Acc::default();
    for a in per_user {
        acc.merge(&a?);
    }
    Ok(MetricsReport {
        version: REPORT_VERSION,
        model: scorer.name(),
        mode: mode.to_string(),
        pool: strategy.name(),
        users: users.len() as u64,
        overall: acc.overall.metrics(),
        skipped: acc.skipped,
        fallbacks: acc.fallbacks,
        by_history_length: segments(&acc.history, metrics::pow2_label),
        by_session_position: segments(&acc.position, u64::from),
        by_session_gap_hours: segments(&acc.gap, u64::from),
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: MetricsReport = serde_json::from_str(text)?;
        if r.version != REPORT_VERSION {
            return Err(Error::Format(format!("unsupported report version {}", r.version)));
        }
        Ok(r)
    }

    /// Aligned plain-text summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model {}  mode {}  pool {}  users {}", self.model, self.mode, self.pool, self.users);
        let _ = writeln!(s, "{:<22}{:>9}{:>10}{:>10}{:>10}{:>9}{:>9}", "segment", "count", "recall@1", "recall@5", "recall@10", "mrr", "mrp");
        let mut line = |name: String, m: &Metrics| {
            let _ = writeln!(
                s,
                "{:<22}{:>9}{:>10.4}{:>10.4}{:>10.4}{:>9.4}{:>9.4}",
                name, m.count, m.recall_at_1, m.recall_at_5, m.recall_at_10, m.mrr, m.mrp
            );
        };
        line("overall".into(), &self.overall);
        for seg in &self.by_history_length {
            line(format!("history>={}", seg.from), &seg.metrics);
        }
        for seg in &self.by_session_position {
            line(format!("position={}", seg.from), &seg.metrics);
        }
        for seg in &self.by_session_gap_hours {
            line(format!("gap_hours={}", seg.from), &seg.metrics);
        }
        let _ = writeln!(s, "skipped {}  fallbacks {}", self.skipped, self.fallbacks);
        s
    }

    /// Breakdown rows as CSV: `segment,from,count,recall_at_1,...`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["segment", "from", "count", "recall_at_1", "recall_at_5", "recall_at_10", "mrr", "mrp"])?;
        let overall = [Segment { from: 0, metrics: self.overall }];
        for (name, segs) in [
            ("overall", &overall[..]),
            ("history_length", &self.by_history_length[..]),
            ("session_position", &self.by_session_position[..]),
            ("session_gap_hours", &self.by_session_gap_hours[..]),
        ] {
            for seg in segs {
                let m = &seg.metrics;
                w.write_record([
                    name.to_string(),
                    seg.from.to_string(),
                    m.count.to_string(),
                    m.recall_at_1.to_string(),
                    m.recall_at_5.to_string(),
                    m.recall_at_10.to_string(),
                    m.mrr.to_string(),
                    m.mrp.to_string(),
                ])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
