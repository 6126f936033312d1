//! Cross-sectional training objectives.
//!
//! Each loss compares one date's predictions against that date's realized
//! returns. The ranking losses sum over all ordered pairs of targets,
//! including the i = j diagonal (which adds 0 to the hinge loss and
//! N·log 2 to the logistic loss — a constant that leaves gradients
//! untouched). Every loss exists both as a plain scalar function and as a
//! tape builder producing the same value differentiably.

use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Array, Graph, NodeId};

/// Objective selector; config key `loss`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Monotonic,
    Pairwise,
    Mse,
    Ic,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            LossKind::Monotonic => "monotonic",
            LossKind::Pairwise => "pairwise",
            LossKind::Mse => "mse",
            LossKind::Ic => "ic",
        };
        f.write_str(name)
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "monotonic" => Ok(LossKind::Monotonic),
            "pairwise" => Ok(LossKind::Pairwise),
            "mse" => Ok(LossKind::Mse),
            "ic" => Ok(LossKind::Ic),
            other => Err(Error::Config(format!(
                "unknown loss `{other}` (expected monotonic|pairwise|mse|ic)"
            ))),
        }
    }
}

/// One date's aligned predictions and realized returns.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossSectionBatch {
    pub date: NaiveDate,
    pub preds: Vec<f64>,
    pub actuals: Vec<f64>,
}

impl CrossSectionBatch {
    pub fn new(date: NaiveDate, preds: Vec<f64>, actuals: Vec<f64>) -> Result<Self> {
        if preds.len() != actuals.len() {
            return Err(Error::Data(format!(
                "{date}: {} predictions vs {} returns",
                preds.len(),
                actuals.len()
            )));
        }
        if preds.is_empty() {
            return Err(Error::Data(format!("{date}: empty cross-section")));
        }
        if preds.iter().chain(&actuals).any(|x| !x.is_finite()) {
            return Err(Error::Data(format!("{date}: non-finite entry")));
        }
        Ok(CrossSectionBatch {
            date,
            preds,
            actuals,
        })
    }

    pub fn len(&self) -> usize {
        self.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty batches
    }
}

/// log(1 + e^x) via max(x, 0) + log1p(e^{-|x|}).
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Hinge ranking loss: sum over ordered pairs of max(0, -(p_i - p_j)(r_i - r_j)).
pub fn pairwise_loss(batch: &CrossSectionBatch) -> f64 {
    let (p, r) = (&batch.preds, &batch.actuals);
    let mut total = 0.0;
    for i in 0..p.len() {
        for j in 0..p.len() {
            total += (-(p[i] - p[j]) * (r[i] - r[j])).max(0.0);
        }
    }
    total
}

/// Logistic ranking loss: sum over ordered pairs of
/// log(1 + exp(-tanh(p_i - p_j) * tanh(r_i - r_j))).
pub fn monotonic_loss(batch: &CrossSectionBatch) -> f64 {
    let (p, r) = (&batch.preds, &batch.actuals);
    let mut total = 0.0;
    for i in 0..p.len() {
        for j in 0..p.len() {
            total += softplus(-((p[i] - p[j]).tanh() * (r[i] - r[j]).tanh()));
        }
    }
    total
}

/// Mean of squared prediction errors.
pub fn mse_loss(batch: &CrossSectionBatch) -> f64 {
    let n = batch.len() as f64;
    batch
        .preds
        .iter()
        .zip(&batch.actuals)
        .map(|(p, r)| (p - r) * (p - r))
        .sum::<f64>()
        / n
}

/// Negative Pearson correlation, or `None` when either vector has zero
/// variance (the caller skips such dates and logs them).
pub fn ic_loss(batch: &CrossSectionBatch) -> Option<f64> {
    let n = batch.len() as f64;
    let mp = batch.preds.iter().sum::<f64>() / n;
    let mr = batch.actuals.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut ssp = 0.0;
    let mut ssr = 0.0;
    for (p, r) in batch.preds.iter().zip(&batch.actuals) {
        cov += (p - mp) * (r - mr);
        ssp += (p - mp) * (p - mp);
        ssr += (r - mr) * (r - mr);
    }
    if ssp == 0.0 || ssr == 0.0 {
        return None;
    }
    Some(-(cov / (ssp.sqrt() * ssr.sqrt())))
}

fn batch_dims(graph: &Graph, preds: NodeId, actuals: &[f64]) -> Result<usize> {
    let (rows, cols) = graph.value(preds).shape();
    if cols != 1 {
        return Err(Error::Dim(format!(
            "predictions must be a column vector, got {rows}x{cols}"
        )));
    }
    if rows != actuals.len() {
        return Err(Error::Dim(format!(
            "{rows} predictions vs {} returns",
            actuals.len()
        )));
    }
    if actuals.is_empty() {
        return Err(Error::Data("empty cross-section".into()));
    }
    if actuals.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data("non-finite realized return".into()));
    }
    Ok(rows)
}

/// D[i][j] = p_i - p_j as an n x n node.
fn pair_differences(graph: &mut Graph, preds: NodeId, n: usize) -> Result<NodeId> {
    let ones_row = graph.constant(Array::filled(1, n, 1.0));
    let ones_col = graph.constant(Array::filled(n, 1, 1.0));
    let by_row = graph.matmul(preds, ones_row)?;
    let pt = graph.transpose(preds);
    let by_col = graph.matmul(ones_col, pt)?;
    graph.sub(by_row, by_col)
}

/// Constant matrix m[i][j] = f(r_i, r_j).
fn pair_constant(
    graph: &mut Graph,
    actuals: &[f64],
    f: impl Fn(f64, f64) -> f64,
) -> NodeId {
    let n = actuals.len();
    let mut m = Array::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m.set(i, j, f(actuals[i], actuals[j]));
        }
    }
    graph.constant(m)
}

/// Tape version of [`pairwise_loss`]; realized returns enter as constants.
pub fn pairwise_loss_node(graph: &mut Graph, preds: NodeId, actuals: &[f64]) -> Result<NodeId> {
    let n = batch_dims(graph, preds, actuals)?;
    let d = pair_differences(graph, preds, n)?;
    let rdiff = pair_constant(graph, actuals, |ri, rj| ri - rj);
    let prod = graph.mul(d, rdiff)?;
    let neg = graph.scale(prod, -1.0);
    let hinge = graph.relu(neg);
    Ok(graph.reduce_sum(hinge))
}

/// Tape version of [`monotonic_loss`].
pub fn monotonic_loss_node(graph: &mut Graph, preds: NodeId, actuals: &[f64]) -> Result<NodeId> {
    let n = batch_dims(graph, preds, actuals)?;
    let d = pair_differences(graph, preds, n)?;
    let t = graph.tanh(d);
    let rtanh = pair_constant(graph, actuals, |ri, rj| (ri - rj).tanh());
    let prod = graph.mul(t, rtanh)?;
    let neg = graph.scale(prod, -1.0);
    let sp = graph.log1p_exp(neg);
    Ok(graph.reduce_sum(sp))
}

/// Tape version of [`mse_loss`].
pub fn mse_loss_node(graph: &mut Graph, preds: NodeId, actuals: &[f64]) -> Result<NodeId> {
    let n = batch_dims(graph, preds, actuals)?;
    let r = graph.constant(Array::from_vec(n, 1, actuals.to_vec()));
    let e = graph.sub(preds, r)?;
    let sq = graph.mul(e, e)?;
    Ok(graph.reduce_mean(sq))
}

/// Tape version of [`ic_loss`]. Zero variance on either side is a domain
/// error; callers decide whether that skips the date.
pub fn ic_loss_node(graph: &mut Graph, preds: NodeId, actuals: &[f64]) -> Result<NodeId> {
    let n = batch_dims(graph, preds, actuals)?;
    let mr = actuals.iter().sum::<f64>() / n as f64;
    let centered_r: Vec<f64> = actuals.iter().map(|r| r - mr).collect();
    let ssr: f64 = centered_r.iter().map(|r| r * r).sum();
    if ssr == 0.0 {
        return Err(Error::Domain("zero return variance in the cross-section".into()));
    }
    let averager = graph.constant(Array::filled(n, n, 1.0 / n as f64));
    let mean_vec = graph.matmul(averager, preds)?;
    let centered_p = graph.sub(preds, mean_vec)?;
    let rc = graph.constant(Array::from_vec(n, 1, centered_r));
    let covs = graph.mul(centered_p, rc)?;
    let cov = graph.reduce_sum(covs);
    let sq = graph.mul(centered_p, centered_p)?;
    let ssp = graph.reduce_sum(sq);
    if graph.value(ssp).as_scalar() <= 0.0 {
        return Err(Error::Domain(
            "zero prediction variance in the cross-section".into(),
        ));
    }
    let sdp = graph.sqrt(ssp)?;
    let denom = graph.scale(sdp, ssr.sqrt());
    let corr = graph.div(cov, denom)?;
    Ok(graph.scale(corr, -1.0))
}

/// Build the selected loss on the tape.
pub fn loss_node(
    graph: &mut Graph,
    kind: LossKind,
    preds: NodeId,
    actuals: &[f64],
) -> Result<NodeId> {
    match kind {
        LossKind::Monotonic => monotonic_loss_node(graph, preds, actuals),
        LossKind::Pairwise => pairwise_loss_node(graph, preds, actuals),
        LossKind::Mse => mse_loss_node(graph, preds, actuals),
        LossKind::Ic => ic_loss_node(graph, preds, actuals),
    }
}
