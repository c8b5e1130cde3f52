use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Single-level TCN over the whole interaction stream.
    Tcn,
    /// Single-level GRU stack over the whole interaction stream.
    Gru,
    /// High-level GRU over sessions, low-level GRU within sessions.
    HierGru,
    /// High-level GRU over sessions, low-level TCN within sessions.
    HierTcn,
    /// Hierarchical GRU whose sessions are summarized by the low-level state.
    Hrnn,
}

impl Architecture {
    pub fn is_hierarchical(self) -> bool {
        matches!(self, Architecture::HierGru | Architecture::HierTcn | Architecture::Hrnn)
    }

    pub fn low_is_tcn(self) -> bool {
        matches!(self, Architecture::Tcn | Architecture::HierTcn)
    }

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Tcn => "TCN",
            Architecture::Gru => "GRU",
            Architecture::HierGru => "HierGRU",
            Architecture::HierTcn => "HierTCN",
            Architecture::Hrnn => "HRNN",
        }
    }
}

/// How the high-level state reaches the low-level model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectionMode {
    /// Only at the start of a session: initial GRU states, or the first token
    /// of a TCN.
    Init,
    /// Concatenated onto every in-session input.
    Full,
}

/// How a finished session is summarized for the high-level update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggMode {
    Mean,
    /// Final low-level GRU state after consuming the whole session.
    LastHidden,
}

/// Architecture and sizes. Fields irrelevant to the chosen architecture are
/// ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Item embedding dimension `d` (also the prediction dimension). Default 16.
    pub embedding_dim: usize,
    /// TCN filter width `k`. Default 5.
    pub kernel_size: usize,
    /// TCN channels per layer. Default 32.
    pub channels: usize,
    /// One dilation per residual block. Default 1, 2, 4, 8.
    pub dilations: Vec<usize>,
    /// Low-level GRU layers (single-level GRU too). Default 4.
    pub low_layers: usize,
    /// Low-level GRU hidden size. Default 32.
    pub low_hidden: usize,
    /// High-level GRU layers. Default 4.
    pub high_layers: usize,
    /// High-level GRU hidden size. Default 32.
    pub high_hidden: usize,
    pub connection: ConnectionMode,
    pub aggregation: AggMode,
    /// Hidden width of the prediction head. Default 32.
    pub head_hidden: usize,
    /// Per-gate GRU biases; off by default so the update matches the plain
    /// bias-free gate equations.
    pub gru_bias: bool,
    /// Per-timestep masked batch normalization inside TCN blocks. Default off.
    pub batch_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::HierTcn,
            embedding_dim: 16,
            kernel_size: 5,
            channels: 32,
            dilations: vec![1, 2, 4, 8],
            low_layers: 4,
            low_hidden: 32,
            high_layers: 4,
            high_hidden: 32,
            connection: ConnectionMode::Full,
            aggregation: AggMode::Mean,
            head_hidden: 32,
            gru_bias: false,
            batch_norm: false,
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset for an architecture. Shapes follow the reference
    /// baselines (6 dilated blocks for the flat TCN, 4 blocks under a 4-layer
    /// GRU for HierTCN, 4-layer GRU stacks elsewhere) with narrower widths.
    pub fn preset(architecture: Architecture, embedding_dim: usize) -> Self {
        let base = ModelConfig { architecture, embedding_dim, ..ModelConfig::default() };
        match architecture {
            Architecture::Tcn => ModelConfig { dilations: vec![1, 2, 4, 8, 16, 32], ..base },
            Architecture::Gru => ModelConfig { low_hidden: 48, ..base },
            Architecture::HierTcn => base,
            Architecture::HierGru => ModelConfig { connection: ConnectionMode::Full, aggregation: AggMode::Mean, ..base },
            Architecture::Hrnn => ModelConfig { connection: ConnectionMode::Init, aggregation: AggMode::LastHidden, ..base },
        }
    }

    /// Full-size reference shapes: 128 filters of width 5, 200-unit flat GRU,
    /// 128-unit hierarchical GRUs.
    pub fn reference(architecture: Architecture, embedding_dim: usize) -> Self {
        let p = Self::preset(architecture, embedding_dim);
        match architecture {
            Architecture::Gru => ModelConfig { low_hidden: 200, head_hidden: 128, ..p },
            _ => ModelConfig { channels: 128, low_hidden: 128, high_hidden: 128, head_hidden: 128, ..p },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.head_hidden == 0 {
            return Err(Error::config("embedding_dim and head_hidden must be positive"));
        }
        let arch = self.architecture;
        if arch.low_is_tcn() {
            if self.kernel_size == 0 {
                return Err(Error::config("kernel_size must be at least 1"));
            }
            if self.dilations.is_empty() || self.dilations.contains(&0) {
                return Err(Error::config("dilation schedule must be non-empty with entries >= 1"));
            }
            if self.channels == 0 {
                return Err(Error::config("channels must be positive"));
            }
        } else if self.low_layers == 0 || self.low_hidden == 0 {
            return Err(Error::config("low-level GRU needs at least one layer and unit"));
        }
        if arch.is_hierarchical() {
            if self.high_layers == 0 || self.high_hidden == 0 {
                return Err(Error::config("high-level GRU needs at least one layer and unit"));
            }
            if self.aggregation == AggMode::LastHidden && arch.low_is_tcn() {
                return Err(Error::config("last-hidden aggregation needs a recurrent low-level model"));
            }
            if !arch.low_is_tcn()
                && self.connection == ConnectionMode::Init
                && (self.low_layers != self.high_layers || self.low_hidden != self.high_hidden)
            {
                return Err(Error::config("init connection of GRU levels needs equal layer counts and widths"));
            }
        }
        if self.batch_norm && !arch.low_is_tcn() {
            return Err(Error::config("batch normalization is supported in TCN blocks only"));
        }
        Ok(())
    }

    /// Width of one low-level input token.
    pub fn low_input_dim(&self) -> usize {
        let d = self.embedding_dim;
        match self.architecture {
            Architecture::Tcn | Architecture::Gru => d + 1,
            Architecture::HierTcn => d + self.high_hidden,
            Architecture::HierGru | Architecture::Hrnn => match self.connection {
                ConnectionMode::Full => d + self.high_hidden,
                ConnectionMode::Init => d,
            },
        }
    }

    pub fn high_input_dim(&self) -> usize {
        match self.aggregation {
            AggMode::Mean => self.embedding_dim,
            AggMode::LastHidden => self.low_hidden,
        }
    }

    pub fn low_output_dim(&self) -> usize {
        if self.architecture.low_is_tcn() {
            self.channels
        } else {
            self.low_hidden
        }
    }

    /// Past in-sequence steps visible to the TCN (receptive field − 1).
    pub fn tcn_lookback(&self) -> usize {
        2 * self.kernel_size.saturating_sub(1) * self.dilations.iter().sum::<usize>()
    }

    /// Canonical JSON: fixed field order, no insignificant whitespace.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Resizes the width knob of `cfg` until its trainable-parameter count lies
/// within `tolerance` (relative) of `target`.
pub fn match_parameter_count(cfg: &ModelConfig, target: usize, tolerance: f64) -> Result<ModelConfig> {
    let apply = |w: usize| {
        let mut c = cfg.clone();
        match cfg.architecture {
            Architecture::Tcn | Architecture::HierTcn => c.channels = w,
            Architecture::Gru | Architecture::HierGru => c.low_hidden = w,
            Architecture::Hrnn => {
                c.low_hidden = w;
                if c.connection == ConnectionMode::Init {
                    c.high_hidden = w;
                }
            }
        }
        c
    };
    let count = |w: usize| super::param_count(&apply(w));
    let (mut lo, mut hi) = (1usize, 1usize);
    while count(hi) < target {
        hi *= 2;
        if hi > 1 << 14 {
            return Err(Error::config("target parameter count is out of reach"));
        }
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if count(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let best = [lo, hi]
        .into_iter()
        .min_by_key(|&w| (count(w) as i64 - target as i64).unsigned_abs())
        .expect("two candidates");
    let got = count(best);
    let rel = (got as f64 - target as f64).abs() / target as f64;
    if rel > tolerance {
        return Err(Error::config(format!(
            "closest width {best} gives {got} parameters, {:.1}% away from {target}",
            rel * 100.0
        )));
    }
    Ok(apply(best))
}
