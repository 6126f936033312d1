//! Feature construction, cross-sectional normalization, windows, splits.

use std::collections::BTreeMap;
use std::ops::Range;

use chrono::NaiveDate;

use super::{Bar, FeaturePanel, FeatureSet};
use crate::error::{Error, Result};
use crate::tensor::Array;

/// Days of trailing volume used when shares outstanding are missing.
const TURNOVER_FALLBACK_DAYS: usize = 20;

/// A cross-sectional scale below this (relative) threshold counts as
/// degenerate and invalidates the day.
const MIN_SCALE: f64 = 1e-10;

/// Build the raw feature panel from per-ticker bar series.
///
/// The date grid is the union of all tickers' dates. A (date, stock) cell
/// is valid when the ticker has bars on both that grid date and the
/// previous one (so the daily return exists); the first date of each
/// ticker is therefore invalid. `next_return` is defined whenever bars
/// exist on the date and its grid successor.
pub fn compute_features(
    bars: &BTreeMap<String, Vec<Bar>>,
    set: FeatureSet,
) -> Result<FeaturePanel> {
    if bars.is_empty() {
        return Err(Error::Data("no tickers".into()));
    }
    let mut dates: Vec<NaiveDate> = bars
        .values()
        .flat_map(|series| series.iter().map(|b| b.date))
        .collect();
    dates.sort_unstable();
    dates.dedup();
    let date_index: BTreeMap<NaiveDate, usize> =
        dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();

    let tickers: Vec<String> = bars.keys().cloned().collect();
    let n_dates = dates.len();
    let mut panel = FeaturePanel::new(dates, tickers.clone(), set.width());

    for (s, ticker) in tickers.iter().enumerate() {
        let series = &bars[ticker];
        // Grid slot of each bar, bar index of each occupied grid slot.
        let mut slot_of_bar = Vec::with_capacity(series.len());
        let mut bar_at_slot: Vec<Option<usize>> = vec![None; n_dates];
        for (i, bar) in series.iter().enumerate() {
            let t = date_index[&bar.date];
            slot_of_bar.push(t);
            bar_at_slot[t] = Some(i);
        }

        for (i, bar) in series.iter().enumerate() {
            let t = slot_of_bar[i];
            // Labels only need this bar and the one on the next grid date.
            if t + 1 < n_dates {
                if let Some(j) = bar_at_slot[t + 1] {
                    panel.set_next_return(t, s, series[j].close / bar.close - 1.0);
                }
            }
            // Features additionally need the previous grid date's bar.
            let prev = match t.checked_sub(1).and_then(|p| bar_at_slot[p]) {
                Some(j) => &series[j],
                None => continue,
            };
            if prev.close <= 0.0 {
                return Err(Error::Data(format!(
                    "non-positive close for `{ticker}` on {}",
                    prev.date
                )));
            }
            let daily_return = bar.close / prev.close - 1.0;
            let row = panel.feature_row_mut(t, s);
            match set {
                FeatureSet::ReturnOnly => row[0] = daily_return,
                FeatureSet::Full => {
                    row[0] = bar.open / bar.close - 1.0;
                    row[1] = bar.high / bar.close - 1.0;
                    row[2] = bar.low / bar.close - 1.0;
                    row[3] = daily_return;
                    row[4] = (1.0 + bar.volume).ln();
                    row[5] = turnover(series, i);
                }
            }
            panel.set_valid(t, s, true);
        }
    }
    Ok(panel)
}

/// Turnover for bar `i`: volume over shares outstanding, falling back to
/// volume over its trailing mean volume (up to 20 bars, inclusive) when
/// shares are unavailable.
fn turnover(series: &[Bar], i: usize) -> f64 {
    let bar = &series[i];
    if let Some(shares) = bar.shares_outstanding {
        if shares > 0.0 {
            return bar.volume / shares;
        }
    }
    let start = i.saturating_sub(TURNOVER_FALLBACK_DAYS - 1);
    let window = &series[start..=i];
    let mean = window.iter().map(|b| b.volume).sum::<f64>() / window.len() as f64;
    if mean > 0.0 {
        bar.volume / mean
    } else {
        0.0
    }
}

/// Clip bound carried between fit and apply; the z-scoring itself is
/// recomputed per day from that day's cross-section.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub clip: f64,
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats { clip: 5.0 }
    }
}

/// Cross-sectional per-day per-feature z-scores with population standard
/// deviation, clipped to +-`clip`. A day with fewer than two valid stocks,
/// or with a degenerate scale on any feature, is marked entirely invalid.
pub fn normalize(
    mut panel: FeaturePanel,
    stats: Option<&NormStats>,
) -> (FeaturePanel, NormStats) {
    let stats = stats.copied().unwrap_or_default();
    let n_features = panel.n_features();
    let n_stocks = panel.n_stocks();
    for t in 0..panel.n_dates() {
        let members: Vec<usize> = (0..n_stocks).filter(|&s| panel.valid(t, s)).collect();
        if members.is_empty() {
            continue;
        }
        let mut day_ok = members.len() >= 2;
        let mut locs = vec![0.0; n_features];
        let mut scales = vec![0.0; n_features];
        if day_ok {
            for f in 0..n_features {
                let n = members.len() as f64;
                let mean = members
                    .iter()
                    .map(|&s| panel.feature(t, s, f))
                    .sum::<f64>()
                    / n;
                let var = members
                    .iter()
                    .map(|&s| {
                        let d = panel.feature(t, s, f) - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / n;
                let scale = var.sqrt();
                if scale <= MIN_SCALE * (1.0 + mean.abs()) {
                    day_ok = false;
                    break;
                }
                locs[f] = mean;
                scales[f] = scale;
            }
        }
        if !day_ok {
            for s in 0..n_stocks {
                panel.set_valid(t, s, false);
            }
            continue;
        }
        for &s in &members {
            let row = panel.feature_row_mut(t, s);
            for f in 0..n_features {
                let z = (row[f] - locs[f]) / scales[f];
                row[f] = z.clamp(-stats.clip, stats.clip);
            }
        }
    }
    (panel, stats)
}

/// The L x F window of features for stock `s` ending at date `t`, or
/// `None` when the history is too short or any day in it is invalid.
pub fn make_window(panel: &FeaturePanel, s: usize, t: usize, window: usize) -> Option<Array> {
    if !panel.window_available(s, t, window) {
        return None;
    }
    let f = panel.n_features();
    let mut data = Vec::with_capacity(window * f);
    for d in t + 1 - window..=t {
        data.extend_from_slice(panel.feature_row(d, s));
    }
    Some(Array::from_vec(window, f, data))
}

/// Chronological train/validation/test ranges over date indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Assign each date index t by its label date t+1: rows whose label falls
/// on or before `train_end` train, on or before `val_end` validate, and
/// everything later (including the unlabeled final row) tests.
pub fn split(panel: &FeaturePanel, train_end: NaiveDate, val_end: NaiveDate) -> Result<Splits> {
    if train_end >= val_end {
        return Err(Error::Config(format!(
            "train_end {train_end} must precede val_end {val_end}"
        )));
    }
    let dates = panel.dates();
    match dates.last() {
        Some(last) if val_end < *last => {}
        _ => {
            return Err(Error::Config(format!(
                "val_end {val_end} must precede the last panel date"
            )))
        }
    }
    let n = dates.len();
    let label_on_or_before = |bound: NaiveDate| -> usize {
        (0..n)
            .take_while(|&t| t + 1 < n && dates[t + 1] <= bound)
            .count()
    };
    let b1 = label_on_or_before(train_end);
    let b2 = label_on_or_before(val_end);
    let splits = Splits {
        train: 0..b1,
        val: b1..b2,
        test: b2..n,
    };
    if splits.train.is_empty() || splits.val.is_empty() || splits.test.is_empty() {
        return Err(Error::Config(format!(
            "degenerate split: train {}, val {}, test {} dates",
            splits.train.len(),
            splits.val.len(),
            splits.test.len()
        )));
    }
    Ok(splits)
}
