//! Synthetic multi-session interaction data.
//!
//! Each user has a long-term interest vector that moves between sessions as
//! a stationary AR(1) walk, `z_j = ρ z_{j−1} + √(1−ρ²) ε_j`. A session's
//! interest mixes it with fresh noise, `w_j = √(1−σ²) z_j + σ η_j`, and the
//! session's items are drawn from a softmax over the catalog around `w_j`.
//! Every event is shown with impressions: the positive plus negatives drawn
//! around unrelated interest directions.

use std::io::BufWriter;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use super::embeddings::EmbeddingTable;
use super::log::write_log;
use super::{timelines_to_records, Event, UserTimeline};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Number of users. Default 2000.
    pub users: usize,
    /// Catalog size. Default 1000.
    pub items: usize,
    /// Mean sessions per user (shifted geometric, ≥ 1). Default 3.9.
    pub sessions_mean: f64,
    /// Mean events per session (shifted geometric, ≥ 1). Default 2.4.
    pub events_mean: f64,
    /// Mean impressions per event including the positive. Default 9.8.
    pub impressions_mean: f64,
    /// Item embedding dimension. Default 16.
    pub embedding_dim: usize,
    /// Session-to-session persistence ρ of the long-term interest. Default 0.9.
    pub rho: f64,
    /// Weight σ of fresh per-session noise in the session interest. Default 0.5.
    pub short_term_noise: f64,
    /// Inverse softmax temperature of item choice around an interest. Default 8.
    pub selectivity: f64,
    /// Number of unrelated interest directions negatives are drawn around.
    /// Default 64.
    pub negative_interests: usize,
    /// Timestamp of the earliest possible activity. Default 1.5e9.
    pub start_time: i64,
    /// Users start uniformly within this many days. Default 30.
    pub start_spread_days: f64,
    /// Mean idle time between sessions beyond the 30-minute threshold, in
    /// hours. Default 48.
    pub session_gap_hours: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            users: 2000,
            items: 1000,
            sessions_mean: 3.9,
            events_mean: 2.4,
            impressions_mean: 9.8,
            embedding_dim: 16,
            rho: 0.9,
            short_term_noise: 0.5,
            selectivity: 8.0,
            negative_interests: 64,
            start_time: 1_500_000_000,
            start_spread_days: 30.0,
            session_gap_hours: 48.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.users == 0 || self.items < 2 || self.embedding_dim == 0 {
            return bad("need at least one user, two items and a positive embedding dimension");
        }
        for (name, v) in [
            ("sessions_mean", self.sessions_mean),
            ("events_mean", self.events_mean),
            ("impressions_mean", self.impressions_mean),
        ] {
            if !(v >= 1.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be a finite mean >= 1, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.short_term_noise) {
            return bad("short_term_noise must lie in [0, 1]");
        }
        if !(self.selectivity >= 0.0 && self.selectivity.is_finite()) {
            return bad("selectivity must be finite and >= 0");
        }
        if self.negative_interests == 0 || !(self.start_spread_days >= 0.0) || !(self.session_gap_hours > 0.0) {
            return bad("negative_interests, start_spread_days and session_gap_hours must be positive");
        }
        Ok(())
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Latent interests behind one user's sessions.
#[derive(Debug, Clone)]
pub struct UserLatent {
    pub long_term: Vec<Array1<f64>>,
    pub session: Vec<Array1<f64>>,
}

#[derive(Debug)]
pub struct SyntheticData {
    pub config: SyntheticConfig,
    pub table: EmbeddingTable,
    pub timelines: Vec<UserTimeline>,
    pub latent: Vec<UserLatent>,
}

/// `1 + Geometric(1/mean)`: support {1, 2, …} with the given mean.
fn shifted_geometric<R: Rng>(mean: f64, rng: &mut R) -> usize {
    if mean <= 1.0 {
        return 1;
    }
    let g = Geometric::new(1.0 / mean).expect("probability in (0, 1]");
    1 + g.sample(rng) as usize
}

fn normal_vec<R: Rng>(d: usize, rng: &mut R) -> Array1<f64> {
    Array1::from_shape_simple_fn(d, || rng.sample(StandardNormal))
}

/// Cumulative softmax weights of `selectivity · ⟨unit(w), e_v⟩` over items.
fn choice_cdf(items: &Array2<f64>, w: &Array1<f64>, selectivity: f64) -> Vec<f64> {
    let norm = w.dot(w).sqrt().max(1e-12);
    let logits: Vec<f64> = items.rows().into_iter().map(|e| selectivity * e.dot(w) / norm).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut acc = 0.0;
    logits
        .iter()
        .map(|z| {
            acc += (z - max).exp();
            acc
        })
        .collect()
}

fn sample_cdf<R: Rng>(cdf: &[f64], rng: &mut R) -> usize {
    let total = *cdf.last().expect("non-empty catalog");
    let u = rng.random::<f64>() * total;
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.embedding_dim;
    let mut items = Array2::<f64>::zeros((cfg.items, d));
    for mut row in items.rows_mut() {
        let v = normal_vec(d, &mut rng);
        let n = v.dot(&v).sqrt().max(1e-12);
        row.assign(&(v / n));
    }
    let ids: Vec<u64> = (1..=cfg.items as u64).collect();
    let neg_cdfs: Vec<Vec<f64>> =
        (0..cfg.negative_interests).map(|_| choice_cdf(&items, &normal_vec(d, &mut rng), cfg.selectivity)).collect();
    let gap = Exp::new(1.0 / (cfg.session_gap_hours * 3600.0)).expect("positive rate");
    let keep = (1.0 - cfg.rho * cfg.rho).sqrt();
    let sig = cfg.short_term_noise;
    let mix = (1.0 - sig * sig).sqrt();
    let max_impressions = cfg.items;

    let mut timelines = Vec::with_capacity(cfg.users);
    let mut latent = Vec::with_capacity(cfg.users);
    for u in 0..cfg.users {
        let n_sessions = shifted_geometric(cfg.sessions_mean, &mut rng);
        let mut t = cfg.start_time + (rng.random::<f64>() * cfg.start_spread_days * 86_400.0) as i64;
        let mut z = normal_vec(d, &mut rng);
        let mut lat = UserLatent { long_term: Vec::new(), session: Vec::new() };
        let mut sessions = Vec::with_capacity(n_sessions);
        for j in 0..n_sessions {
            if j > 0 {
                z = &z * cfg.rho + &(normal_vec(d, &mut rng) * keep);
                t += 1801 + gap.sample(&mut rng) as i64;
            }
            let w = &z * mix + &(normal_vec(d, &mut rng) * sig);
            let cdf = choice_cdf(&items, &w, cfg.selectivity);
            let n_events = shifted_geometric(cfg.events_mean, &mut rng);
            let mut events = Vec::with_capacity(n_events);
            for e in 0..n_events {
                if e > 0 {
                    t += rng.random_range(5..=1700);
                }
                let pos = sample_cdf(&cdf, &mut rng);
                let m = shifted_geometric(cfg.impressions_mean, &mut rng).min(max_impressions);
                let mut shown = vec![ids[pos]];
                let mut tries = 0;
                while shown.len() < m && tries < 50 * m {
                    tries += 1;
                    let k = rng.random_range(0..neg_cdfs.len());
                    let cand = ids[sample_cdf(&neg_cdfs[k], &mut rng)];
                    if !shown.contains(&cand) {
                        shown.push(cand);
                    }
                }
                shown[1..].sort_unstable();
                events.push(Event { item_id: ids[pos], timestamp: t, impressions: shown });
            }
            lat.long_term.push(z.clone());
            lat.session.push(w);
            sessions.push(events);
        }
        timelines.push(UserTimeline { user_id: u as u64 + 1, sessions });
        latent.push(lat);
    }
    let table = EmbeddingTable::from_rows(ids, &items.mapv(|v| v as f32))?;
    Ok(SyntheticData { config: cfg.clone(), table, timelines, latent })
}

pub const CONFIG_FILE: &str = "synthetic.json";
pub const ITEMS_FILE: &str = "items.emb";
pub const LOG_FILE: &str = "interactions.log";

impl SyntheticData {
    /// Writes `synthetic.json`, `items.emb` and `interactions.log` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), self.config.to_canonical_json())?;
        self.table.write(&dir.join(ITEMS_FILE))?;
        let f = std::fs::File::create(dir.join(LOG_FILE))?;
        write_log(BufWriter::new(f), &timelines_to_records(&self.timelines))?;
        Ok(())
    }
}
