//! Precomputed correlation-graph baselines: trailing lagged Pearson
//! correlation matrices, offline top-k leader selection, and prediction
//! through the shared aggregation/MLP pipeline with detection frozen.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::FeaturePanel;
use crate::error::{Error, Result};
use crate::model::forward::push_prediction;
use crate::model::{
    softmax_slice, CrossSectionOutput, LeadLagAssignment, LeadLagPick, ModelConfig, SkipReason,
    TargetSkip, Variant,
};
use crate::tensor::{Array, BoundParams, Graph, ParamSet};

/// Which correlation graph drives selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMode {
    /// Only the lag-1 matrix.
    Lag1,
    /// All lags 1..=max_lag.
    LagAll,
}

impl std::fmt::Display for BaselineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BaselineMode::Lag1 => "lag1",
            BaselineMode::LagAll => "lagall",
        })
    }
}

impl std::str::FromStr for BaselineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lag1" => Ok(BaselineMode::Lag1),
            "lagall" => Ok(BaselineMode::LagAll),
            other => Err(Error::Config(format!(
                "unknown baseline mode `{other}` (expected lag1 or lagall)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub mode: BaselineMode,
    /// Leaders selected per target.
    pub k: usize,
    /// Largest lag in the grid (lagall mode).
    pub max_lag: usize,
    /// Trailing correlation window W_c in trading days.
    pub window: usize,
    /// Recompute the graphs every this many evaluated dates.
    pub refresh: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            mode: BaselineMode::LagAll,
            k: 2,
            max_lag: 10,
            window: 250,
            refresh: 20,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.max_lag == 0 || self.window < 2 || self.refresh == 0 {
            return Err(Error::Config(format!(
                "baseline config needs k ≥ 1, max_lag ≥ 1, window ≥ 2, refresh ≥ 1; \
                 got k={}, max_lag={}, window={}, refresh={}",
                self.k, self.max_lag, self.window, self.refresh
            )));
        }
        Ok(())
    }

    pub fn lag_grid(&self) -> Vec<usize> {
        match self.mode {
            BaselineMode::Lag1 => vec![1],
            BaselineMode::LagAll => (1..=self.max_lag).collect(),
        }
    }
}

/// Per-lag |S| x |S| trailing Pearson correlation matrices as of one date.
/// Entry (leader v, lagger u) correlates v's returns against u's returns
/// `lag` days later; `None` marks pairs with incomplete data or zero
/// variance.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrGraph {
    pub as_of: usize,
    pub window: usize,
    pub lags: Vec<usize>,
    n_stocks: usize,
    matrices: BTreeMap<usize, Vec<Option<f64>>>,
}

impl CorrGraph {
    pub fn n_stocks(&self) -> usize {
        self.n_stocks
    }

    pub fn get(&self, lag: usize, leader: usize, lagger: usize) -> Option<f64> {
        self.matrices.get(&lag)?[leader * self.n_stocks + lagger]
    }

    /// Present entries as (lag, leader, lagger, corr).
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, usize, f64)> + '_ {
        let n = self.n_stocks;
        self.matrices.iter().flat_map(move |(&lag, m)| {
            m.iter().enumerate().filter_map(move |(i, c)| {
                c.map(|corr| (lag, i / n, i % n, corr))
            })
        })
    }
}

/// Trailing lagged Pearson correlations on raw daily returns.
///
/// The most recent return pair ends on day `as_of - 1`: lagger values are
/// the returns realized on days [as_of − W_c, as_of − 1], each matched to
/// the leader's return `lag` days earlier — so the matrix depends only on
/// data strictly before `as_of`.
pub fn lagged_corr(
    panel: &FeaturePanel,
    lag: usize,
    window: usize,
    as_of: usize,
) -> Vec<Option<f64>> {
    let n = panel.n_stocks();
    let mut out = vec![None; n * n];
    // Lagger rows s ∈ [as_of−1−W_c, as_of−2]; each needs row s−lag ≥ 0.
    if lag == 0 || window < 2 || as_of < window + lag + 1 || as_of > panel.n_dates() {
        return out;
    }
    let start = as_of - 1 - window;
    let rows: Vec<usize> = (start..as_of - 1).collect();

    // Gather each stock's return series once: leader values at s−lag,
    // lagger values at s. A None anywhere poisons just that pair.
    let series = |offset: usize| -> Vec<Vec<Option<f64>>> {
        (0..n)
            .map(|s| rows.iter().map(|&r| panel.next_return(r - offset, s)).collect())
            .collect()
    };
    let lagger_vals = series(0);
    let leader_vals = series(lag);

    for v in 0..n {
        for u in 0..n {
            out[v * n + u] = pearson(&leader_vals[v], &lagger_vals[u]);
        }
    }
    out
}

fn pearson(xs: &[Option<f64>], ys: &[Option<f64>]) -> Option<f64> {
    let n = xs.len() as f64;
    let mut sx = 0.0;
    let mut sy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sx += (*x)?;
        sy += (*y)?;
    }
    let (mx, my) = (sx / n, sy / n);
    let mut cov = 0.0;
    let mut ssx = 0.0;
    let mut ssy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x.unwrap() - mx;
        let dy = y.unwrap() - my;
        cov += dx * dy;
        ssx += dx * dx;
        ssy += dy * dy;
    }
    if ssx == 0.0 || ssy == 0.0 {
        return None;
    }
    Some((cov / (ssx * ssy).sqrt()).clamp(-1.0, 1.0))
}

/// Build the per-lag matrices as of one date.
pub fn build_graph(
    panel: &FeaturePanel,
    lags: &[usize],
    window: usize,
    as_of: usize,
) -> Result<CorrGraph> {
    if lags.is_empty() {
        return Err(Error::Config("empty lag grid".into()));
    }
    let mut matrices = BTreeMap::new();
    for &lag in lags {
        matrices.insert(lag, lagged_corr(panel, lag, window, as_of));
    }
    Ok(CorrGraph {
        as_of,
        window,
        lags: lags.to_vec(),
        n_stocks: panel.n_stocks(),
        matrices,
    })
}

/// Offline top-k selection for target `u` from a correlation graph.
///
/// Entries are ranked by correlation, ties broken like the learned
/// model's selection: earlier candidate (ascending stock index, target
/// excluded) first, then larger lag. Missing entries never qualify; fewer
/// than k present entries yield a short (possibly empty) assignment.
pub fn select_leaders_offline(graph: &CorrGraph, u: usize, k: usize) -> LeadLagAssignment {
    // (corr, candidate position, lag position) with lag positions ordered
    // descending, mirroring the learned score matrix's column layout.
    let mut entries: Vec<(f64, usize, usize)> = Vec::new();
    let mut lags_desc = graph.lags.clone();
    lags_desc.sort_unstable_by(|a, b| b.cmp(a));
    let candidates: Vec<usize> = (0..graph.n_stocks()).filter(|&v| v != u).collect();
    for (row, &v) in candidates.iter().enumerate() {
        for (col, &lag) in lags_desc.iter().enumerate() {
            if let Some(c) = graph.get(lag, v, u) {
                entries.push((c, row, col));
            }
        }
    }
    entries.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("correlations are finite")
            .then_with(|| a.1.cmp(&b.1))
            .then_with(|| a.2.cmp(&b.2))
    });
    entries.truncate(k);
    let scores: Vec<f64> = entries.iter().map(|e| e.0).collect();
    let weights = softmax_slice(&scores);
    LeadLagAssignment {
        target: u,
        date_index: graph.as_of,
        picks: entries
            .iter()
            .zip(&weights)
            .map(|(&(score, row, col), &weight)| LeadLagPick {
                leader: candidates[row],
                lag: lags_desc[col],
                score,
                weight,
            })
            .collect(),
    }
}

/// Frozen-detection assignments for a date range, refreshing the graph on
/// the configured cadence. `freeze_from` caps the as-of date: no graph is
/// computed at or beyond it, so later dates keep the last allowed graph.
pub struct BaselineAssignments {
    pub by_date: BTreeMap<usize, Vec<LeadLagAssignment>>,
    pub graphs: Vec<CorrGraph>,
}

pub fn assignments_for_dates(
    panel: &FeaturePanel,
    config: &BaselineConfig,
    dates: Range<usize>,
    freeze_from: Option<usize>,
) -> Result<BaselineAssignments> {
    config.validate()?;
    if dates.is_empty() || dates.end > panel.n_dates() {
        return Err(Error::Config(format!(
            "date range {dates:?} outside panel of {} dates",
            panel.n_dates()
        )));
    }
    let lags = config.lag_grid();
    let mut graphs: Vec<CorrGraph> = Vec::new();
    let mut by_date = BTreeMap::new();
    let mut picks_cache: Vec<LeadLagAssignment> = Vec::new();
    for (i, t) in dates.enumerate() {
        let as_of = match freeze_from {
            Some(f) => t.min(f),
            None => t,
        };
        let due = i % config.refresh == 0;
        let stale = graphs.last().map(|g| g.as_of) != Some(as_of);
        if graphs.is_empty() || (due && stale) {
            let graph = build_graph(panel, &lags, config.window, as_of)?;
            picks_cache = (0..panel.n_stocks())
                .map(|u| select_leaders_offline(&graph, u, config.k))
                .collect();
            graphs.push(graph);
        }
        let todays: Vec<LeadLagAssignment> = picks_cache
            .iter()
            .map(|a| LeadLagAssignment {
                date_index: t,
                ..a.clone()
            })
            .collect();
        by_date.insert(t, todays);
    }
    Ok(BaselineAssignments { by_date, graphs })
}

/// MLP-only parameter layout for baseline runs (raw-feature input).
/// Shares naming and initialization with the learned model's MLP.
pub fn baseline_params(n_features: usize, mlp_hidden: &[usize], seed: u64) -> ParamSet {
    mlp_only_config(n_features, mlp_hidden).init_params(seed)
}

pub fn check_baseline_params(
    n_features: usize,
    mlp_hidden: &[usize],
    params: &ParamSet,
) -> Result<()> {
    mlp_only_config(n_features, mlp_hidden).check_params(params)
}

fn mlp_only_config(n_features: usize, mlp_hidden: &[usize]) -> ModelConfig {
    ModelConfig {
        variant: Variant::SelfLag1,
        n_features,
        mlp_hidden: mlp_hidden.to_vec(),
        ..ModelConfig::default()
    }
}

/// Predict every assigned target on date `t` from its frozen selections:
/// z is the correlation-softmax-weighted sum of the leaders' lag-aligned
/// raw feature rows, pushed through the shared MLP. Selection carries no
/// gradient — only the MLP trains.
pub fn baseline_forward(
    graph: &mut Graph,
    bound: &BoundParams,
    mlp_hidden: &[usize],
    k: usize,
    panel: &FeaturePanel,
    t: usize,
    assignments: &[LeadLagAssignment],
) -> Result<CrossSectionOutput> {
    if t >= panel.n_dates() {
        return Err(Error::Contract(format!(
            "date index {t} outside panel of {} dates",
            panel.n_dates()
        )));
    }
    let f = panel.n_features();
    let mut out = CrossSectionOutput {
        date_index: t,
        targets: Vec::new(),
        prediction_nodes: Vec::new(),
        predictions: Vec::new(),
        pred_vector: None,
        assignments: Vec::new(),
        attention: Vec::new(),
        skips: Vec::new(),
    };
    let mut ordered: Vec<&LeadLagAssignment> = assignments.iter().collect();
    ordered.sort_by_key(|a| a.target);
    for a in ordered {
        if a.picks.is_empty() {
            out.skips.push(TargetSkip {
                date_index: t,
                target: a.target,
                reason: SkipReason::InsufficientCandidates {
                    available: 0,
                    needed: k,
                },
            });
            continue;
        }
        let mut z = vec![0.0; f];
        let mut missing = None;
        for p in &a.picks {
            if p.lag > t || !panel.valid(t + 1 - p.lag, p.leader) {
                missing = Some((p.leader, p.lag));
                break;
            }
            let row = panel.feature_row(t + 1 - p.lag, p.leader);
            for (zi, &xi) in z.iter_mut().zip(row) {
                *zi += p.weight * xi;
            }
        }
        if let Some((leader, lag)) = missing {
            out.skips.push(TargetSkip {
                date_index: t,
                target: a.target,
                reason: SkipReason::MissingLaggedFeature { leader, lag },
            });
            continue;
        }
        let zn = graph.constant(Array::from_vec(1, f, z));
        let pred = crate::model::predict(graph, bound, zn, mlp_hidden)?;
        out.assignments.push(LeadLagAssignment {
            date_index: t,
            ..a.clone()
        });
        push_prediction(graph, &mut out, a.target, pred)?;
    }
    out.pred_vector = if out.prediction_nodes.is_empty() {
        None
    } else {
        Some(graph.concat_rows(&out.prediction_nodes)?)
    };
    Ok(out)
}

/// Write computed graphs as `as_of,leader,lagger,lag,corr` (present
/// entries only; `as_of` is the panel date of the graph's as-of index).
pub fn write_graph_cache(
    path: &Path,
    graphs: &[CorrGraph],
    panel: &FeaturePanel,
) -> Result<()> {
    let display = path.display().to_string();
    let io_err = |e: csv::Error| match e.kind() {
        csv::ErrorKind::Io(_) => {
            Error::io(display.clone(), std::io::Error::other(e.to_string()))
        }
        _ => Error::Data(format!("{display}: {e}")),
    };
    let mut writer = csv::Writer::from_path(path).map_err(io_err)?;
    writer
        .write_record(["as_of", "leader", "lagger", "lag", "corr"])
        .map_err(io_err)?;
    for g in graphs {
        let as_of = panel.date(g.as_of).to_string();
        for (lag, v, u, corr) in g.entries() {
            writer
                .write_record([
                    as_of.clone(),
                    panel.ticker(v).to_string(),
                    panel.ticker(u).to_string(),
                    lag.to_string(),
                    corr.to_string(),
                ])
                .map_err(io_err)?;
        }
    }
    writer.flush().map_err(|e| Error::io(display, e))?;
    Ok(())
}

/// Reload a graph cache written by [`write_graph_cache`]. Entries absent
/// from the file stay missing.
pub fn load_graph_cache(
    path: &Path,
    panel: &FeaturePanel,
    lags: &[usize],
    window: usize,
) -> Result<Vec<CorrGraph>> {
    let display = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => {
            Error::io(display.clone(), std::io::Error::other(e.to_string()))
        }
        _ => Error::Data(format!("{display}: {e}")),
    })?;
    let n = panel.n_stocks();
    let date_index: BTreeMap<String, usize> = panel
        .dates()
        .iter()
        .enumerate()
        .map(|(i, d)| (d.to_string(), i))
        .collect();
    let mut by_as_of: BTreeMap<usize, BTreeMap<usize, Vec<Option<f64>>>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("{display}: {e}")))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let parse_err = |msg: String| Error::Parse {
            path: display.clone(),
            line,
            msg,
        };
        if record.len() != 5 {
            return Err(parse_err(format!("expected 5 fields, found {}", record.len())));
        }
        let as_of = *date_index
            .get(record[0].trim())
            .ok_or_else(|| parse_err(format!("as_of date `{}` not in panel", &record[0])))?;
        let v = panel
            .ticker_index(record[1].trim())
            .ok_or_else(|| parse_err(format!("unknown leader `{}`", &record[1])))?;
        let u = panel
            .ticker_index(record[2].trim())
            .ok_or_else(|| parse_err(format!("unknown lagger `{}`", &record[2])))?;
        let lag: usize = record[3]
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("bad lag `{}`: {e}", &record[3])))?;
        let corr: f64 = record[4]
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("bad corr `{}`: {e}", &record[4])))?;
        let graph = by_as_of.entry(as_of).or_insert_with(|| {
            lags.iter().map(|&l| (l, vec![None; n * n])).collect()
        });
        let matrix = graph
            .get_mut(&lag)
            .ok_or_else(|| parse_err(format!("lag {lag} not in the configured grid")))?;
        matrix[v * n + u] = Some(corr);
    }
    Ok(by_as_of
        .into_iter()
        .map(|(as_of, matrices)| CorrGraph {
            as_of,
            window,
            lags: lags.to_vec(),
            n_stocks: n,
            matrices,
        })
        .collect())
}
