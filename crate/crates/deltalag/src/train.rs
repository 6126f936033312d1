//! Deterministic cross-sectional training with validation-IC early
//! stopping. One date's cross-section is one batch; the forward pass is
//! injected so learned variants and frozen-detection baselines share the
//! loop.

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeaturePanel, Splits};
use crate::error::{Error, Result};
use crate::eval::daily_ic;
use crate::losses::{loss_node, LossKind};
use crate::model::CrossSectionOutput;
use crate::tensor::{AdamConfig, AdamState, BoundParams, Graph, NodeId, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Hard cap on epochs; early stopping usually ends sooner.
    pub epochs: usize,
    /// Stop after this many epochs without a validation-IC improvement.
    pub patience: usize,
    pub loss: LossKind,
    /// Shuffle the training-date order each epoch.
    pub shuffle: bool,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            patience: 5,
            loss: LossKind::Monotonic,
            shuffle: true,
            seed: 42,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.patience == 0 {
            return Err(Error::Config(format!(
                "epochs and patience must be ≥ 1, got {} and {}",
                self.epochs, self.patience
            )));
        }
        let lr_positive = self.adam.lr > 0.0;
        if !lr_positive {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.adam.lr
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ic: f64,
    pub is_best: bool,
    pub finished_at: DateTime<Utc>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch holding the best validation IC.
    pub best_epoch: usize,
}

impl TrainHistory {
    /// `epoch,train_loss,val_ic,is_best` — timestamps stay out of the
    /// file so same-seed reruns are byte-identical.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let display = path.display().to_string();
        let io_err = |e: csv::Error| match e.kind() {
            csv::ErrorKind::Io(_) => {
                Error::io(display.clone(), std::io::Error::other(e.to_string()))
            }
            _ => Error::Data(format!("{display}: {e}")),
        };
        let mut writer = csv::Writer::from_path(path).map_err(io_err)?;
        writer
            .write_record(["epoch", "train_loss", "val_ic", "is_best"])
            .map_err(io_err)?;
        for r in &self.records {
            writer
                .write_record([
                    r.epoch.to_string(),
                    r.train_loss.to_string(),
                    r.val_ic.to_string(),
                    r.is_best.to_string(),
                ])
                .map_err(io_err)?;
        }
        writer.flush().map_err(|e| Error::io(display, e))?;
        Ok(())
    }
}

/// Early-stopping bookkeeping: strictly-greater validation IC resets the
/// stall counter; `patience` stalls in a row stop training.
#[derive(Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    stalls: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
            best_epoch: 0,
            stalls: 0,
        }
    }

    /// Feed one epoch's validation IC; returns (new best?, stop now?).
    pub fn observe(&mut self, epoch: usize, val_ic: f64) -> (bool, bool) {
        let improved = self.best.is_none_or(|b| val_ic > b);
        if improved {
            self.best = Some(val_ic);
            self.best_epoch = epoch;
            self.stalls = 0;
        } else {
            self.stalls += 1;
        }
        (improved, self.stalls >= self.patience)
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Result of a training run: parameters from the best-validation epoch.
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub history: TrainHistory,
    /// Date skips summed over all training epochs (too few labeled
    /// targets, or an IC loss with a degenerate cross-section).
    pub skipped_date_events: usize,
}

/// A date's forward output restricted to targets with labels.
pub struct LabeledBatch {
    pub targets: Vec<usize>,
    pub nodes: Vec<NodeId>,
    pub predictions: Vec<f64>,
    pub actuals: Vec<f64>,
}

pub fn labeled_batch(panel: &FeaturePanel, t: usize, out: &CrossSectionOutput) -> LabeledBatch {
    let mut batch = LabeledBatch {
        targets: Vec::new(),
        nodes: Vec::new(),
        predictions: Vec::new(),
        actuals: Vec::new(),
    };
    for (i, &u) in out.targets.iter().enumerate() {
        if let Some(r) = panel.next_return(t, u) {
            batch.targets.push(u);
            batch.nodes.push(out.prediction_nodes[i]);
            batch.predictions.push(out.predictions[i]);
            batch.actuals.push(r);
        }
    }
    batch
}

/// Train with per-date Adam steps and mean-validation-IC model selection.
/// `forward` runs one date's cross-section on a fresh graph; the learned
/// model and the frozen-detection baselines plug in here.
pub fn train(
    mut params: ParamSet,
    config: &TrainConfig,
    panel: &FeaturePanel,
    splits: &Splits,
    forward: impl Fn(&mut Graph, &BoundParams, usize) -> Result<CrossSectionOutput>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_dates: Vec<usize> = splits.train.clone().collect();
    if train_dates.is_empty() {
        return Err(Error::Train("no training dates in the split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(config.adam, &params);
    let mut stopper = EarlyStopper::new(config.patience);
    let mut history = TrainHistory::default();
    let mut best_params = params.clone();
    let mut skipped_date_events = 0usize;

    for epoch in 1..=config.epochs {
        let mut order = train_dates.clone();
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        let mut trained_dates = 0usize;
        for &t in &order {
            let mut graph = Graph::new();
            let bound = params.bind(&mut graph);
            let out = forward(&mut graph, &bound, t)?;
            let batch = labeled_batch(panel, t, &out);
            if batch.targets.len() < 2 {
                skipped_date_events += 1;
                continue;
            }
            if config.loss == LossKind::Ic && degenerate_for_ic(&batch) {
                skipped_date_events += 1;
                continue;
            }
            let preds = graph.concat_rows(&batch.nodes)?;
            let loss = loss_node(&mut graph, config.loss, preds, &batch.actuals)?;
            let value = graph.value(loss).as_scalar();
            if !value.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite {} loss on date index {t} (epoch {epoch})",
                    config.loss
                )));
            }
            let grads = graph.backward(loss)?;
            params.accumulate(&bound, &grads);
            adam.apply(&mut params);
            loss_sum += value;
            trained_dates += 1;
        }
        if trained_dates == 0 {
            return Err(Error::Train(format!(
                "every training date was skipped in epoch {epoch} \
                 (fewer than 2 labeled targets per date?)"
            )));
        }
        let train_loss = loss_sum / trained_dates as f64;
        let val_ic = validation_ic(&params, panel, splits.val.clone(), &forward)?;
        let (is_best, stop) = stopper.observe(epoch, val_ic);
        if is_best {
            best_params = params.clone();
        }
        history.records.push(EpochRecord {
            epoch,
            train_loss,
            val_ic,
            is_best,
            finished_at: Utc::now(),
        });
        if stop {
            break;
        }
    }
    history.best_epoch = stopper.best_epoch();
    Ok(TrainOutcome {
        params: best_params,
        history,
        skipped_date_events,
    })
}

fn degenerate_for_ic(batch: &LabeledBatch) -> bool {
    let constant = |xs: &[f64]| xs.iter().all(|&x| x == xs[0]);
    constant(&batch.predictions) || constant(&batch.actuals)
}

/// Mean Spearman IC over the given dates under the current parameters.
/// Dates with fewer than 2 labeled targets or an undefined correlation
/// are excluded; an empty mean is a training error.
pub fn validation_ic(
    params: &ParamSet,
    panel: &FeaturePanel,
    dates: std::ops::Range<usize>,
    forward: &impl Fn(&mut Graph, &BoundParams, usize) -> Result<CrossSectionOutput>,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in dates {
        let mut graph = Graph::new();
        let bound = params.bind(&mut graph);
        let out = forward(&mut graph, &bound, t)?;
        let batch = labeled_batch(panel, t, &out);
        if batch.targets.len() < 2 {
            continue;
        }
        if let Some(ic) = daily_ic(&batch.predictions, &batch.actuals)? {
            sum += ic;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Train(
            "no validation date produced a defined rank correlation".into(),
        ));
    }
    Ok(sum / count as f64)
}
