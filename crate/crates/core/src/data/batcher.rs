//! Mini-batch generators.
//!
//! [`QueueBatcher`] keeps B session queues. Whole users are appended to the
//! least-loaded queue while any queue holds fewer than `max_unroll_sessions`
//! pending sessions; each batch then takes up to `max_unroll_sessions`
//! sessions from the front of every queue. Queues hold item IDs only;
//! embeddings are looked up when a batch is materialized, so raw inputs never
//! exceed one batch of B × `max_unroll_sessions` sessions.
//!
//! [`FullHistoryBatcher`] is the single-level counterpart: every row carries
//! one user's entire history.

use std::collections::VecDeque;

use ndarray::{s, Array2, Array3};

use super::embeddings::ItemMatrix;
use super::{Event, UserTimeline};
use crate::error::{Error, Result};
use crate::real::Real;

/// Tracks bytes of materialized input tensors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InputCounter {
    /// Bytes of the most recent batch.
    pub current: usize,
    /// Largest single batch so far.
    pub peak: usize,
    /// Sum over all batches.
    pub total: usize,
    pub batches: usize,
}

impl InputCounter {
    pub fn record(&mut self, bytes: usize) {
        self.current = bytes;
        self.peak = self.peak.max(bytes);
        self.total += bytes;
        self.batches += 1;
    }
}

/// One session placed in a batch row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowSlot {
    pub user_id: u64,
    /// Index of the session within the user's timeline.
    pub session_index: usize,
    /// True on the first emitted session of a user in this row: the consumer
    /// must start that user from the zero high-level state.
    pub reset: bool,
    /// First input position of the session in the row.
    pub offset: usize,
    /// Targets (and their impressions) of the session, one per position.
    pub events: Vec<Event>,
}

impl RowSlot {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// A padded batch: `inputs[b, p]` is the embedding of the item at position
/// `p` of row `b` (zero where `mask` is false).
#[derive(Debug, Clone)]
pub struct MiniBatch<T: Real> {
    pub inputs: Array3<T>,
    pub mask: Array2<bool>,
    pub rows: Vec<Vec<RowSlot>>,
}

impl<T: Real> MiniBatch<T> {
    pub fn input_bytes(&self) -> usize {
        self.inputs.len() * std::mem::size_of::<T>()
    }

    /// Item embeddings of one slot.
    pub fn session(&self, row: usize, slot: usize) -> Array2<T> {
        let sl = &self.rows[row][slot];
        self.inputs.slice(s![row, sl.offset..sl.offset + sl.len(), ..]).to_owned()
    }

    /// Splits a row into runs of consecutive slots of one user; returns
    /// `(first slot, end slot, reset)` for each run.
    pub fn runs(&self, row: usize) -> Vec<(usize, usize, bool)> {
        let slots = &self.rows[row];
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=slots.len() {
            if i == slots.len() || slots[i].user_id != slots[start].user_id || slots[i].reset {
                out.push((start, i, slots[start].reset));
                start = i;
            }
        }
        out
    }

    pub fn num_targets(&self) -> usize {
        self.rows.iter().flatten().map(RowSlot::len).sum()
    }
}

#[derive(Debug, Clone)]
struct Queued {
    user_id: u64,
    session_index: usize,
    first: bool,
    events: Vec<Event>,
}

/// Queue-based generator over a stream of users.
pub struct QueueBatcher<'a, T: Real, I: Iterator<Item = UserTimeline>> {
    users: I,
    items: &'a ItemMatrix<T>,
    queues: Vec<VecDeque<Queued>>,
    max_unroll: usize,
    max_session_len: Option<usize>,
    counter: InputCounter,
    /// Number of sessions split because they exceeded `max_session_len`.
    pub split_sessions: usize,
}

impl<'a, T: Real, I: Iterator<Item = UserTimeline>> QueueBatcher<'a, T, I> {
    pub fn new(users: I, items: &'a ItemMatrix<T>, batch_size: usize, max_unroll_sessions: usize) -> Result<Self> {
        if batch_size == 0 || max_unroll_sessions == 0 {
            return Err(Error::config("batch size and max_unroll_sessions must be positive"));
        }
        Ok(QueueBatcher {
            users,
            items,
            queues: vec![VecDeque::new(); batch_size],
            max_unroll: max_unroll_sessions,
            max_session_len: None,
            counter: InputCounter::default(),
            split_sessions: 0,
        })
    }

    /// Caps the padded session length; longer sessions are cut into
    /// consecutive pieces that the consumer treats as separate sessions.
    pub fn with_max_session_len(mut self, limit: Option<usize>) -> Self {
        self.max_session_len = limit.filter(|&l| l > 0);
        self
    }

    pub fn counter(&self) -> InputCounter {
        self.counter
    }

    /// Pending sessions per queue.
    pub fn queue_lengths(&self) -> Vec<usize> {
        self.queues.iter().map(VecDeque::len).collect()
    }

    fn least_loaded(&self) -> usize {
        let mut best = 0;
        for (i, q) in self.queues.iter().enumerate() {
            if q.len() < self.queues[best].len() {
                best = i;
            }
        }
        best
    }

    /// Enqueues one user onto the least-loaded queue; returns the queue index.
    pub fn enqueue(&mut self, user: UserTimeline) -> usize {
        let q = self.least_loaded();
        let mut first = true;
        for (k, sess) in user.sessions.into_iter().enumerate() {
            let pieces: Vec<Vec<Event>> = match self.max_session_len {
                Some(limit) if sess.len() > limit => {
                    self.split_sessions += 1;
                    log::warn!("user {}: session {k} of {} events split at {limit}", user.user_id, sess.len());
                    sess.chunks(limit).map(<[Event]>::to_vec).collect()
                }
                _ => vec![sess],
            };
            for events in pieces.into_iter().filter(|e| !e.is_empty()) {
                self.queues[q].push_back(Queued { user_id: user.user_id, session_index: k, first, events });
                first = false;
            }
        }
        q
    }

    fn fill(&mut self) {
        while self.queues.iter().any(|q| q.len() < self.max_unroll) {
            match self.users.next() {
                Some(u) => {
                    self.enqueue(u);
                }
                None => break,
            }
        }
    }

    fn next_batch(&mut self) -> Result<Option<MiniBatch<T>>> {
        self.fill();
        if self.queues.iter().all(VecDeque::is_empty) {
            return Ok(None);
        }
        let taken: Vec<Vec<Queued>> = self
            .queues
            .iter_mut()
            .map(|q| {
                let n = q.len().min(self.max_unroll);
                q.drain(..n).collect()
            })
            .collect();
        let pad = taken.iter().flatten().map(|s| s.events.len()).max().unwrap_or(0);
        let width = self.max_unroll * pad;
        let d = self.items.dim();
        let mut inputs = Array3::zeros((taken.len(), width, d));
        let mut mask = Array2::from_elem((taken.len(), width), false);
        let mut rows = Vec::with_capacity(taken.len());
        for (b, sessions) in taken.into_iter().enumerate() {
            let mut slots = Vec::with_capacity(sessions.len());
            for (k, s) in sessions.into_iter().enumerate() {
                let offset = k * pad;
                for (p, e) in s.events.iter().enumerate() {
                    let row = self.items.get(e.item_id).ok_or(Error::MissingItem(e.item_id))?;
                    inputs.slice_mut(s![b, offset + p, ..]).assign(&row);
                    mask[[b, offset + p]] = true;
                }
                slots.push(RowSlot { user_id: s.user_id, session_index: s.session_index, reset: s.first, offset, events: s.events });
            }
            rows.push(slots);
        }
        let batch = MiniBatch { inputs, mask, rows };
        self.counter.record(batch.input_bytes());
        Ok(Some(batch))
    }
}

impl<T: Real, I: Iterator<Item = UserTimeline>> Iterator for QueueBatcher<'_, T, I> {
    type Item = Result<MiniBatch<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_batch().transpose()
    }
}

/// One user per row, whole history, padded to the longest history in the
/// batch.
pub struct FullHistoryBatcher<'a, T: Real, I: Iterator<Item = UserTimeline>> {
    users: I,
    items: &'a ItemMatrix<T>,
    batch_size: usize,
    counter: InputCounter,
}

impl<'a, T: Real, I: Iterator<Item = UserTimeline>> FullHistoryBatcher<'a, T, I> {
    pub fn new(users: I, items: &'a ItemMatrix<T>, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(FullHistoryBatcher { users, items, batch_size, counter: InputCounter::default() })
    }

    pub fn counter(&self) -> InputCounter {
        self.counter
    }

    fn next_batch(&mut self) -> Result<Option<MiniBatch<T>>> {
        let users: Vec<UserTimeline> = self.users.by_ref().take(self.batch_size).collect();
        if users.is_empty() {
            return Ok(None);
        }
        let pad = users.iter().map(UserTimeline::num_events).max().unwrap_or(0);
        let d = self.items.dim();
        let mut inputs = Array3::zeros((users.len(), pad, d));
        let mut mask = Array2::from_elem((users.len(), pad), false);
        let mut rows = Vec::with_capacity(users.len());
        for (b, u) in users.into_iter().enumerate() {
            let mut at = 0;
            let mut slots = Vec::with_capacity(u.sessions.len());
            for (k, sess) in u.sessions.into_iter().enumerate() {
                for (p, e) in sess.iter().enumerate() {
                    let row = self.items.get(e.item_id).ok_or(Error::MissingItem(e.item_id))?;
                    inputs.slice_mut(s![b, at + p, ..]).assign(&row);
                    mask[[b, at + p]] = true;
                }
                let len = sess.len();
                slots.push(RowSlot { user_id: u.user_id, session_index: k, reset: k == 0, offset: at, events: sess });
                at += len;
            }
            rows.push(slots);
        }
        let batch = MiniBatch { inputs, mask, rows };
        self.counter.record(batch.input_bytes());
        Ok(Some(batch))
    }
}

impl<T: Real, I: Iterator<Item = UserTimeline>> Iterator for FullHistoryBatcher<'_, T, I> {
    type Item = Result<MiniBatch<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_batch().transpose()
    }
}
