//! The lead-lag detection network and its ablation variants.
//!
//! Pipeline per target stock and date: encode each stock's rolling feature
//! window, form a query from the target's last hidden state and per-lag
//! keys from each candidate's recent hidden states, score every
//! (candidate, lag) cell with a raw dot product, keep the k globally
//! largest cells, softmax their scores, aggregate the leaders' lag-aligned
//! vectors with those weights, and map the aggregate through an MLP to a
//! next-day ranking score.

pub mod attention;
pub mod forward;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::encoder;
use crate::tensor::params::xavier_uniform;
use crate::tensor::{Array, ParamSet};

pub use attention::{attention_scores, make_keys, make_query, softmax_slice, topk_positions};
pub use forward::{forward_cross_section, predict, CrossSectionOutput, SkipReason, TargetSkip};

/// Attention weight-matrix parameter names.
pub const ATT_QUERY: &str = "att.wq";
pub const ATT_KEY: &str = "att.wk";

pub fn mlp_weight_name(layer: usize) -> String {
    format!("mlp.w{layer}")
}

pub fn mlp_bias_name(layer: usize) -> String {
    format!("mlp.b{layer}")
}

/// Model variant; config/CLI string forms are lowercase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Cross-attention over all other stocks and lags 1..=max_lag.
    #[serde(rename = "deltalag")]
    DeltaLag,
    /// Cross-attention fixed at lag 1 (final-timestep keys only).
    #[serde(rename = "lag1net")]
    Lag1Net,
    /// Attention over the target's own history only, lags 1..=max_lag.
    #[serde(rename = "selflagnet")]
    SelfLagNet,
    /// No attention: the target's own day-t features feed the MLP.
    #[serde(rename = "selflag1")]
    SelfLag1,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::DeltaLag,
        Variant::Lag1Net,
        Variant::SelfLagNet,
        Variant::SelfLag1,
    ];

    pub fn uses_attention(self) -> bool {
        self != Variant::SelfLag1
    }

    /// Candidates are other stocks (cross) or the target itself (self).
    pub fn is_cross(self) -> bool {
        matches!(self, Variant::DeltaLag | Variant::Lag1Net)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Variant::DeltaLag => "deltalag",
            Variant::Lag1Net => "lag1net",
            Variant::SelfLagNet => "selflagnet",
            Variant::SelfLag1 => "selflag1",
        };
        f.write_str(name)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deltalag" => Ok(Variant::DeltaLag),
            "lag1net" => Ok(Variant::Lag1Net),
            "selflagnet" => Ok(Variant::SelfLagNet),
            "selflag1" => Ok(Variant::SelfLag1),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected deltalag|lag1net|selflagnet|selflag1)"
            ))),
        }
    }
}

/// What the attention weights aggregate: leaders' raw lagged features or
/// their encoder hidden states at the lagged timestep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    Raw,
    Embedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Rolling window length L fed to the encoder.
    pub window: usize,
    /// Largest representable lag; attention covers lags 1..=max_lag.
    pub max_lag: usize,
    /// Encoder hidden width N (also the query/key width).
    pub hidden: usize,
    /// Input feature count F.
    pub n_features: usize,
    /// Leaders kept per target.
    pub k: usize,
    pub variant: Variant,
    pub feature_mode: FeatureMode,
    /// Hidden layer widths of the prediction MLP (output is always 1).
    pub mlp_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            window: 30,
            max_lag: 10,
            hidden: 64,
            n_features: 6,
            k: 2,
            variant: Variant::DeltaLag,
            feature_mode: FeatureMode::Raw,
            mlp_hidden: vec![32],
        }
    }
}

impl ModelConfig {
    /// Lags the variant can express; 0 means no attention stage at all.
    pub fn lag_count(&self) -> usize {
        match self.variant {
            Variant::DeltaLag | Variant::SelfLagNet => self.max_lag,
            Variant::Lag1Net => 1,
            Variant::SelfLag1 => 0,
        }
    }

    /// Width of the aggregated signal entering the MLP.
    pub fn mlp_input_dim(&self) -> usize {
        if !self.variant.uses_attention() {
            return self.n_features; // selflag1 feeds raw day-t features
        }
        match self.feature_mode {
            FeatureMode::Raw => self.n_features,
            FeatureMode::Embedding => self.hidden,
        }
    }

    /// Score cells available to one target in a universe of `n_stocks`.
    pub fn selection_capacity(&self, n_stocks: usize) -> usize {
        match self.variant {
            Variant::DeltaLag => n_stocks.saturating_sub(1) * self.max_lag,
            Variant::Lag1Net => n_stocks.saturating_sub(1),
            Variant::SelfLagNet => self.max_lag,
            Variant::SelfLag1 => 0,
        }
    }

    pub fn validate(&self, n_stocks: usize) -> Result<()> {
        if self.window == 0 || self.hidden == 0 || self.n_features == 0 {
            return Err(Error::Config(
                "window, hidden, and n_features must be positive".into(),
            ));
        }
        if self.max_lag == 0 || self.max_lag > self.window {
            return Err(Error::Config(format!(
                "max_lag must be in 1..=window, got {} with window {}",
                self.max_lag, self.window
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.variant.is_cross() && n_stocks < 2 {
            return Err(Error::Config(format!(
                "{} needs at least 2 stocks, got {n_stocks}",
                self.variant
            )));
        }
        if self.variant.uses_attention() && self.k > self.selection_capacity(n_stocks) {
            return Err(Error::Config(format!(
                "k = {} exceeds the {} selectable (candidate, lag) cells of {} on {} stocks",
                self.k,
                self.selection_capacity(n_stocks),
                self.variant,
                n_stocks
            )));
        }
        Ok(())
    }

    /// Every parameter's name and shape, in a stable order. Only the
    /// configured variant's forward path is represented: the no-attention
    /// variant carries just the MLP, so its checkpoints stay minimal.
    pub fn param_shapes(&self) -> Vec<(String, usize, usize)> {
        let mut shapes: Vec<(String, usize, usize)> = Vec::new();
        if self.variant.uses_attention() {
            shapes.extend(
                encoder::encoder_shapes(self.n_features, self.hidden)
                    .into_iter()
                    .map(|(n, r, c)| (n.to_string(), r, c)),
            );
            shapes.push((ATT_QUERY.to_string(), self.hidden, self.hidden));
            shapes.push((ATT_KEY.to_string(), self.hidden, self.hidden));
        }
        let mut d = self.mlp_input_dim();
        for (i, &width) in self.mlp_hidden.iter().chain(&[1]).enumerate() {
            shapes.push((mlp_weight_name(i), d, width));
            shapes.push((mlp_bias_name(i), 1, width));
            d = width;
        }
        shapes
    }

    /// Fresh parameters for the configured variant's forward path.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        if self.variant.uses_attention() {
            encoder::init_encoder_params(&mut params, self.n_features, self.hidden, &mut rng);
            params.insert(ATT_QUERY, xavier_uniform(self.hidden, self.hidden, &mut rng));
            params.insert(ATT_KEY, xavier_uniform(self.hidden, self.hidden, &mut rng));
        }
        let mut d = self.mlp_input_dim();
        for (i, &width) in self.mlp_hidden.iter().chain(&[1]).enumerate() {
            params.insert(&mlp_weight_name(i), xavier_uniform(d, width, &mut rng));
            params.insert(&mlp_bias_name(i), Array::zeros(1, width));
            d = width;
        }
        params
    }

    /// Check a loaded parameter set against this config's layout.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let shapes = self.param_shapes();
        let borrowed: Vec<(&str, usize, usize)> = shapes
            .iter()
            .map(|(n, r, c)| (n.as_str(), *r, *c))
            .collect();
        params.validate_shapes(&borrowed)
    }
}

/// One target's raw attention scores on one date. Row i belongs to
/// `candidates[i]`; column j encodes lag `lag_count - j` (the rightmost
/// column is the most recent day).
#[derive(Clone, Debug)]
pub struct AttentionMatrix {
    pub target: usize,
    pub date_index: usize,
    pub candidates: Vec<usize>,
    pub lag_count: usize,
    pub scores: Array,
}

impl AttentionMatrix {
    /// Lag encoded by column `col`.
    pub fn lag_of_column(&self, col: usize) -> usize {
        self.lag_count - col
    }
}

/// One selected (leader, lag) cell with its raw score and softmax weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LeadLagPick {
    pub leader: usize,
    pub lag: usize,
    pub score: f64,
    pub weight: f64,
}

/// The k leaders chosen for one target on one date, strictly ordered by
/// (score descending, candidate row ascending, column ascending).
#[derive(Clone, Debug, PartialEq)]
pub struct LeadLagAssignment {
    pub target: usize,
    pub date_index: usize,
    pub picks: Vec<LeadLagPick>,
}
