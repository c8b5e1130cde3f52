//! Ranking metrics with pessimistic tie handling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::real::Real;

/// 1-indexed rank of `scores[target]`: one plus the number of other
/// candidates scoring at least as high (ties rank ahead of the target).
pub fn pessimistic_rank<T: Real>(scores: &[T], target: usize) -> usize {
    let s = scores[target];
    1 + scores.iter().enumerate().filter(|&(i, &v)| i != target && !(v < s)).count()
}

pub fn recall_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn reciprocal_rank(rank: usize) -> f64 {
    1.0 / rank as f64
}

/// `rank / pool_size`.
pub fn rank_percentile(rank: usize, pool_size: usize) -> f64 {
    rank as f64 / pool_size as f64
}

/// Running sums of per-event metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub count: u64,
    pub hits1: u64,
    pub hits5: u64,
    pub hits10: u64,
    pub rr: f64,
    pub rp: f64,
}

impl Tally {
    pub fn add(&mut self, rank: usize, pool_size: usize) {
        self.count += 1;
        self.hits1 += (rank <= 1) as u64;
        self.hits5 += (rank <= 5) as u64;
        self.hits10 += (rank <= 10) as u64;
        self.rr += reciprocal_rank(rank);
        self.rp += rank_percentile(rank, pool_size);
    }

    pub fn merge(&mut self, o: &Tally) {
        self.count += o.count;
        self.hits1 += o.hits1;
        self.hits5 += o.hits5;
        self.hits10 += o.hits10;
        self.rr += o.rr;
        self.rp += o.rp;
    }

    pub fn metrics(&self) -> Metrics {
        let n = self.count.max(1) as f64;
        Metrics {
            count: self.count,
            recall_at_1: self.hits1 as f64 / n,
            recall_at_5: self.hits5 as f64 / n,
            recall_at_10: self.hits10 as f64 / n,
            mrr: self.rr / n,
            mrp: self.rp / n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: u64,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub mrr: f64,
    pub mrp: f64,
}

/// Per-segment tallies keyed by bucket label order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Breakdown {
    pub buckets: BTreeMap<u32, Tally>,
}

impl Breakdown {
    pub fn add(&mut self, bucket: u32, rank: usize, pool: usize) {
        self.buckets.entry(bucket).or_default().add(rank, pool);
    }

    pub fn merge(&mut self, o: &Breakdown) {
        for (k, t) in &o.buckets {
            self.buckets.entry(*k).or_default().merge(t);
        }
    }
}

/// Bucket of a history length: 0 → 0, 1 → 1, 2–3 → 2, 4–7 → 3, ...
pub fn pow2_bucket(n: usize) -> u32 {
    if n == 0 {
        0
    } else {
        usize::BITS - n.leading_zeros()
    }
}

/// Label of a [`pow2_bucket`]: its lower bound.
pub fn pow2_label(b: u32) -> u64 {
    if b == 0 {
        0
    } else {
        1u64 << (b - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        assert_eq!(recall_at_k(3, 5), 1.0);
        assert_eq!(recall_at_k(6, 5), 0.0);
        assert_eq!(recall_at_k(5, 5), 1.0);
        assert_eq!(reciprocal_rank(1), 1.0);
        assert_eq!(reciprocal_rank(4), 0.25);
        let mut t = Tally::default();
        for r in [1, 2, 4] {
            t.add(r, 10);
        }
        assert!((t.metrics().mrr - 1.75 / 3.0).abs() < 1e-15);
        assert_eq!(rank_percentile(3, 10), 0.3);
        assert_eq!(rank_percentile(1, 1), 1.0);
    }

    #[test]
    fn ties_rank_pessimistically() {
        assert_eq!(pessimistic_rank(&[0.0f64; 10], 4), 10);
        assert_eq!(pessimistic_rank(&[0.5f64, 0.9, 0.1, 0.5], 0), 3);
        assert_eq!(pessimistic_rank(&[2.0f32, 1.0, 1.0], 0), 1);
    }

    #[test]
    fn pow2_buckets() {
        let got: Vec<u32> = [0, 1, 2, 3, 4, 7, 8].into_iter().map(pow2_bucket).collect();
        assert_eq!(got, vec![0, 1, 2, 2, 3, 3, 4]);
        assert_eq!(pow2_label(3), 4);
    }
}
