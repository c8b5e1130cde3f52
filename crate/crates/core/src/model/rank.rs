//! Scoring and top-k ranking of candidate items.

use std::cmp::Ordering;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::linalg::dotv;
use crate::real::Real;

/// `⟨u, e⟩`.
pub fn score<T: Real>(u: ArrayView1<T>, item: ArrayView1<T>) -> T {
    dotv(u, item)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub item_id: u64,
    pub score: f64,
}

/// Top-`k` candidates by descending score; equal scores go to the smaller ID.
/// Duplicate candidate IDs are ranked once.
pub fn rank_candidates<'a, T: Real, F>(u: ArrayView1<T>, candidates: &[u64], lookup: F, k: usize) -> Result<Vec<Ranked>>
where
    F: Fn(u64) -> Option<ArrayView1<'a, T>>,
{
    let mut ids = candidates.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut scored = ids
        .into_iter()
        .map(|id| {
            let e = lookup(id).ok_or(Error::MissingItem(id))?;
            if e.len() != u.len() {
                return Err(Error::Shape(format!("item {id} has dimension {}, expected {}", e.len(), u.len())));
            }
            Ok(Ranked { item_id: id, score: score(u, e).as_f64() })
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then(a.item_id.cmp(&b.item_id)));
    scored.truncate(k);
    Ok(scored)
}
