//! Interaction records, session segmentation, the item-embedding table, the
//! mini-batch generators and the synthetic data generator.

pub mod batcher;
pub mod embeddings;
pub mod log;
pub mod synthetic;

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batcher::{FullHistoryBatcher, InputCounter, MiniBatch, QueueBatcher, RowSlot};
pub use embeddings::{EmbeddingTable, ItemMatrix};
pub use log::{read_log, write_log};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticData};

/// Default idle gap (seconds) that separates sessions.
pub const IDLE_THRESHOLD_SECS: i64 = 1800;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Interaction,
    Impression,
}

/// One line of the interaction log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: u64,
    pub item_id: u64,
    pub timestamp: i64,
    pub kind: RecordKind,
    pub impression_group: Option<u64>,
}

/// A positive interaction with the items shown alongside it (including the
/// interacted item itself; empty when no impressions were logged).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub item_id: u64,
    pub timestamp: i64,
    pub impressions: Vec<u64>,
}

/// Session boundaries over one user's time-ordered interactions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionizedHistory {
    pub user_id: u64,
    pub sessions: Vec<Range<usize>>,
    /// Session index of every interaction.
    pub q: Vec<usize>,
}

/// Splits sorted timestamps into sessions: a new session starts exactly when
/// the gap to the previous interaction exceeds `threshold`.
pub fn segment_sessions(user_id: u64, timestamps: &[i64], threshold: i64) -> Result<SessionizedHistory> {
    let mut sessions = Vec::new();
    let mut q = Vec::with_capacity(timestamps.len());
    let mut start = 0;
    for (i, &t) in timestamps.iter().enumerate() {
        if i > 0 {
            let gap = t - timestamps[i - 1];
            if gap < 0 {
                return Err(Error::data(format!("user {user_id}: timestamps not sorted at position {i}")));
            }
            if gap > threshold {
                sessions.push(start..i);
                start = i;
            }
        }
        q.push(sessions.len());
    }
    if !timestamps.is_empty() {
        sessions.push(start..timestamps.len());
    }
    Ok(SessionizedHistory { user_id, sessions, q })
}

/// All of one user's sessions in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserTimeline {
    pub user_id: u64,
    pub sessions: Vec<Vec<Event>>,
}

impl UserTimeline {
    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.sessions.iter().flatten()
    }

    pub fn num_events(&self) -> usize {
        self.sessions.iter().map(Vec::len).sum()
    }
}

/// Groups log records into per-user sessionized timelines, ordered by user
/// ID. Impression records are attached to the interaction sharing their
/// `(user, impression_group)`.
pub fn build_timelines(records: &[Interaction], threshold: i64) -> Result<Vec<UserTimeline>> {
    let mut events: BTreeMap<u64, Vec<(Event, Option<u64>)>> = BTreeMap::new();
    let mut shown: BTreeMap<(u64, u64), Vec<u64>> = BTreeMap::new();
    for r in records {
        match r.kind {
            RecordKind::Interaction => {
                let list = events.entry(r.user_id).or_default();
                if let Some((last, _)) = list.last() {
                    if r.timestamp < last.timestamp {
                        return Err(Error::data(format!(
                            "user {}: interaction at {} precedes {}",
                            r.user_id, r.timestamp, last.timestamp
                        )));
                    }
                }
                list.push((Event { item_id: r.item_id, timestamp: r.timestamp, impressions: Vec::new() }, r.impression_group));
            }
            RecordKind::Impression => {
                let g = r
                    .impression_group
                    .ok_or_else(|| Error::data(format!("impression of item {} has no group", r.item_id)))?;
                shown.entry((r.user_id, g)).or_default().push(r.item_id);
            }
        }
    }
    let mut out = Vec::with_capacity(events.len());
    for (user_id, list) in events {
        let ts: Vec<i64> = list.iter().map(|(e, _)| e.timestamp).collect();
        let seg = segment_sessions(user_id, &ts, threshold)?;
        let mut evs: Vec<Event> = Vec::with_capacity(list.len());
        for (mut e, g) in list {
            if let Some(items) = g.and_then(|g| shown.get(&(user_id, g))) {
                if !items.contains(&e.item_id) {
                    return Err(Error::data(format!(
                        "user {user_id}: item {} missing from its impression group",
                        e.item_id
                    )));
                }
                e.impressions = items.clone();
            }
            evs.push(e);
        }
        let sessions = seg.sessions.iter().map(|r| evs[r.clone()].to_vec()).collect();
        out.push(UserTimeline { user_id, sessions });
    }
    Ok(out)
}

/// Flattens timelines back to log records (interactions followed by their
/// impressions), numbering impression groups sequentially.
pub fn timelines_to_records(timelines: &[UserTimeline]) -> Vec<Interaction> {
    let mut out = Vec::new();
    let mut group = 0u64;
    for tl in timelines {
        for e in tl.events() {
            let g = (!e.impressions.is_empty()).then(|| {
                group += 1;
                group
            });
            out.push(Interaction {
                user_id: tl.user_id,
                item_id: e.item_id,
                timestamp: e.timestamp,
                kind: RecordKind::Interaction,
                impression_group: g,
            });
            for &item in &e.impressions {
                out.push(Interaction {
                    user_id: tl.user_id,
                    item_id: item,
                    timestamp: e.timestamp,
                    kind: RecordKind::Impression,
                    impression_group: g,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sessions(ts: &[i64]) -> Vec<Range<usize>> {
        segment_sessions(1, ts, IDLE_THRESHOLD_SECS).unwrap().sessions
    }

    #[test]
    fn segmentation_examples() {
        assert_eq!(sessions(&[0, 100, 1799]), vec![0..3]);
        assert_eq!(sessions(&[0, 1000, 4000]), vec![0..2, 2..3]);
        assert_eq!(sessions(&[0, 1800]), vec![0..2]);
        assert_eq!(sessions(&[0, 1801]), vec![0..1, 1..2]);
        assert!(sessions(&[]).is_empty());
        assert!(segment_sessions(1, &[5, 4], IDLE_THRESHOLD_SECS).is_err());
    }

    #[test]
    fn q_maps_steps_to_sessions() {
        let h = segment_sessions(1, &[0, 10, 5000, 5001, 9000], IDLE_THRESHOLD_SECS).unwrap();
        assert_eq!(h.q, vec![0, 0, 1, 1, 2]);
    }

    #[test]
    fn timelines_round_trip_through_records() {
        let tl = vec![UserTimeline {
            user_id: 4,
            sessions: vec![
                vec![Event { item_id: 1, timestamp: 0, impressions: vec![1, 2, 3] }],
                vec![
                    Event { item_id: 2, timestamp: 4000, impressions: vec![] },
                    Event { item_id: 3, timestamp: 4010, impressions: vec![5, 3] },
                ],
            ],
        }];
        let recs = timelines_to_records(&tl);
        assert_eq!(build_timelines(&recs, IDLE_THRESHOLD_SECS).unwrap(), tl);
    }

    #[test]
    fn positive_must_be_among_its_impressions() {
        let recs = vec![
            Interaction { user_id: 1, item_id: 9, timestamp: 0, kind: RecordKind::Interaction, impression_group: Some(1) },
            Interaction { user_id: 1, item_id: 2, timestamp: 0, kind: RecordKind::Impression, impression_group: Some(1) },
        ];
        assert!(build_timelines(&recs, IDLE_THRESHOLD_SECS).is_err());
    }
}
