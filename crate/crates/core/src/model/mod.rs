//! Sequence models: single-level TCN/GRU, HierGRU, HRNN and HierTCN.
//!
//! Every architecture maps a user's sessions of item embeddings to one
//! predicted user embedding per interaction, computed only from what was
//! observed before that interaction.

pub mod checkpoint;
pub mod config;
mod forward;
mod online;
pub mod rank;

use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{fingerprint, Checkpoint};
pub use config::{match_parameter_count, AggMode, Architecture, ConnectionMode, ModelConfig};
pub use forward::{BatchForward, RunOutput};
pub use rank::{rank_candidates, score, Ranked};

use crate::error::{Error, Result};
use crate::nn::batchnorm::BatchStats;
use crate::nn::params::prefixed;
use crate::nn::tcn::BlockStats;
use crate::nn::{GruStack, MlpHeadParams, Params, TcnStack};
use crate::real::Real;

/// The within-session network.
#[derive(Debug, Clone, PartialEq)]
pub enum LowNet<T: Real> {
    Tcn(TcnStack<T>),
    Gru(GruStack<T>),
}

/// All trainable weights of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub low: LowNet<T>,
    pub high: Option<GruStack<T>>,
    pub head: MlpHeadParams<T>,
}

/// Non-trainable state: running batch-norm statistics of the TCN blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBuffers<T: Real> {
    pub tcn: Vec<BlockStats<T>>,
}

impl<T: Real> ModelBuffers<T> {
    pub fn update(&mut self, batch: &[Option<[BatchStats<T>; 2]>]) {
        for (stats, b) in self.tcn.iter_mut().zip(batch) {
            if let Some([a, c]) = b {
                stats.first.update(a);
                stats.second.update(c);
            }
        }
    }

    /// Named running-statistic tensors (`mean`/`var` per normalization layer).
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut v = Vec::new();
        for (i, s) in self.tcn.iter().enumerate() {
            for (j, r) in [&s.first, &s.second].into_iter().enumerate() {
                v.push((format!("bn.b{i}.{j}.mean"), r.mean.view().into_dyn()));
                v.push((format!("bn.b{i}.{j}.var"), r.var.view().into_dyn()));
            }
        }
        v
    }

    pub fn set_tensor(&mut self, name: &str, value: Array2<T>) -> Result<()> {
        let bad = || Error::Format(format!("unknown buffer {name}"));
        let parts: Vec<&str> = name.split('.').collect();
        if parts.len() != 4 || parts[0] != "bn" {
            return Err(bad());
        }
        let i: usize = parts[1].trim_start_matches('b').parse().map_err(|_| bad())?;
        let stats = self.tcn.get_mut(i).ok_or_else(bad)?;
        let r = match parts[2] {
            "0" => &mut stats.first,
            "1" => &mut stats.second,
            _ => return Err(bad()),
        };
        if value.ncols() != r.dim() {
            return Err(Error::Format(format!("buffer {name} has wrong width")));
        }
        match parts[3] {
            "mean" => r.mean = value,
            "var" => r.var = value,
            _ => return Err(bad()),
        }
        Ok(())
    }
}

/// Per-user long-term state: one hidden vector per high-level GRU layer plus
/// the number of sessions folded in so far.
#[derive(Debug, Clone, PartialEq)]
pub struct HighState<T: Real> {
    pub layers: Vec<Array1<T>>,
    pub sessions: u64,
}

impl<T: Real> HighState<T> {
    /// The start state ŝ: all zeros.
    pub fn start(layers: usize, hidden: usize) -> Self {
        HighState { layers: vec![Array1::zeros(hidden); layers], sessions: 0 }
    }

    pub fn top(&self) -> &Array1<T> {
        self.layers.last().expect("at least one layer")
    }
}

/// A contiguous stretch of one user's sessions processed together. `init`
/// carries the high-level state from earlier sessions; `None` means the
/// user starts fresh from ŝ.
#[derive(Debug, Clone)]
pub struct UserRun<T: Real> {
    pub sessions: Vec<Array2<T>>,
    pub init: Option<HighState<T>>,
}

/// Training-time randomness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSpec {
    pub seed: u64,
    pub dropout: f64,
}

pub(crate) fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for stream `(a, b)` of `seed`.
pub fn derived_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, a, b))
}

/// Trainable-parameter count of a configuration.
pub fn param_count(cfg: &ModelConfig) -> usize {
    Model::<f32>::zeros(cfg).map(|m| m.param_count()).unwrap_or(0)
}

impl<T: Real> Model<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let low = if cfg.architecture.low_is_tcn() {
            LowNet::Tcn(TcnStack::random(
                cfg.low_input_dim(),
                cfg.channels,
                cfg.kernel_size,
                &cfg.dilations,
                cfg.batch_norm,
                &mut rng,
            ))
        } else {
            LowNet::Gru(GruStack::random(cfg.low_input_dim(), cfg.low_hidden, cfg.low_layers, cfg.gru_bias, &mut rng))
        };
        let high = cfg
            .architecture
            .is_hierarchical()
            .then(|| GruStack::random(cfg.high_input_dim(), cfg.high_hidden, cfg.high_layers, cfg.gru_bias, &mut rng));
        let head = MlpHeadParams::random(cfg.low_output_dim(), cfg.head_hidden, cfg.embedding_dim, &mut rng);
        Ok(Model { config: cfg.clone(), low, high, head })
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        m.fill_zero();
        if let LowNet::Tcn(t) = &mut m.low {
            for b in &mut t.blocks {
                if let Some(n) = &mut b.norm {
                    for p in n.iter_mut() {
                        p.gamma.fill(T::one());
                    }
                }
            }
        }
        Ok(m)
    }

    pub fn new_buffers(&self) -> ModelBuffers<T> {
        match &self.low {
            LowNet::Tcn(t) => ModelBuffers { tcn: t.new_stats() },
            LowNet::Gru(_) => ModelBuffers { tcn: Vec::new() },
        }
    }

    pub fn start_state(&self) -> Option<HighState<T>> {
        self.high.as_ref().map(|h| HighState::start(h.depth(), h.hidden_dim()))
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }
}

impl<T: Real> Params<T> for Model<T> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut v = match &self.low {
            LowNet::Tcn(t) => prefixed("low", t.tensors()),
            LowNet::Gru(g) => prefixed("low", g.tensors()),
        };
        if let Some(h) = &self.high {
            v.extend(prefixed("high", h.tensors()));
        }
        v.extend(prefixed("head", self.head.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut v = match &mut self.low {
            LowNet::Tcn(t) => prefixed("low", t.tensors_mut()),
            LowNet::Gru(g) => prefixed("low", g.tensors_mut()),
        };
        if let Some(h) = &mut self.high {
            v.extend(prefixed("high", h.tensors_mut()));
        }
        v.extend(prefixed("head", self.head.tensors_mut()));
        v
    }
}

/// Summary of one session for the high-level update.
pub fn session_aggregate<T: Real>(items: ArrayView2<T>, mask: Option<&[bool]>) -> Result<Array1<T>> {
    let mut sum = Array1::<T>::zeros(items.ncols());
    let mut count = 0usize;
    for (i, row) in items.rows().into_iter().enumerate() {
        if mask.is_none_or(|m| m[i]) {
            sum += &row;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::data("cannot aggregate an empty session"));
    }
    let n = T::of(count as f64);
    sum.mapv_inplace(|v| v / n);
    Ok(sum)
}
