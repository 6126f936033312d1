//! Market data: ingestion, feature panels, and synthetic generation.
//!
//! All downstream code consumes a [`FeaturePanel`]: a dense date x stock x
//! feature block with a validity mask and next-day returns aligned to the
//! feature rows. Panels are immutable after construction.

pub mod features;
pub mod ohlcv;
pub mod synthetic;

pub use features::{compute_features, make_window, normalize, split, NormStats, Splits};
pub use ohlcv::{load_ohlcv, load_ohlcv_many, write_ohlcv};
pub use synthetic::{generate_synthetic, GroundTruth, SyntheticSpec};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One daily OHLCV bar. `shares_outstanding` is optional; turnover falls
/// back to a trailing volume average when it is absent.
#[derive(Clone, Debug, PartialEq)]
pub struct Bar {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
    pub shares_outstanding: Option<f64>,
}

impl Bar {
    /// Price/volume sanity: positive prices, low <= open/close <= high,
    /// non-negative volume, positive shares when present.
    pub fn validate(&self) -> Result<()> {
        let fields = [self.open, self.high, self.low, self.close, self.volume];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite bar field on {}", self.date)));
        }
        if self.low <= 0.0 {
            return Err(Error::Data(format!(
                "non-positive low {} on {}",
                self.low, self.date
            )));
        }
        if self.low > self.high {
            return Err(Error::Data(format!(
                "low {} above high {} on {}",
                self.low, self.high, self.date
            )));
        }
        if self.open < self.low || self.open > self.high {
            return Err(Error::Data(format!(
                "open {} outside [low, high] on {}",
                self.open, self.date
            )));
        }
        if self.close < self.low || self.close > self.high {
            return Err(Error::Data(format!(
                "close {} outside [low, high] on {}",
                self.close, self.date
            )));
        }
        if self.volume < 0.0 {
            return Err(Error::Data(format!(
                "negative volume {} on {}",
                self.volume, self.date
            )));
        }
        if let Some(shares) = self.shares_outstanding {
            let positive = shares > 0.0;
            if !positive {
                return Err(Error::Data(format!(
                    "non-positive shares outstanding {} on {}",
                    shares, self.date
                )));
            }
        }
        Ok(())
    }
}

/// Which per-day feature columns a panel carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    /// open/high/low ratios, daily return, log volume, turnover (width 6).
    Full,
    /// daily return only (width 1).
    ReturnOnly,
}

impl FeatureSet {
    pub fn width(&self) -> usize {
        match self {
            FeatureSet::Full => 6,
            FeatureSet::ReturnOnly => 1,
        }
    }
}

/// Dense date x stock x feature block plus validity and labels.
///
/// Layout is row-major over (date, stock, feature). `next_return` holds
/// the realized return of date t+1 aligned to row t, NaN where undefined
/// (final date, listing gaps).
#[derive(Clone, Debug)]
pub struct FeaturePanel {
    dates: Vec<NaiveDate>,
    tickers: Vec<String>,
    n_features: usize,
    features: Vec<f64>,
    valid: Vec<bool>,
    next_return: Vec<f64>,
}

impl FeaturePanel {
    pub(crate) fn new(
        dates: Vec<NaiveDate>,
        tickers: Vec<String>,
        n_features: usize,
    ) -> Self {
        let t = dates.len();
        let s = tickers.len();
        FeaturePanel {
            dates,
            tickers,
            n_features,
            features: vec![0.0; t * s * n_features],
            valid: vec![false; t * s],
            next_return: vec![f64::NAN; t * s],
        }
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_stocks(&self) -> usize {
        self.tickers.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn date(&self, t: usize) -> NaiveDate {
        self.dates[t]
    }

    /// Tickers in ascending order; stock indices refer to this list.
    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn ticker(&self, s: usize) -> &str {
        &self.tickers[s]
    }

    pub fn ticker_index(&self, name: &str) -> Option<usize> {
        self.tickers.binary_search_by(|t| t.as_str().cmp(name)).ok()
    }

    #[inline]
    fn cell(&self, t: usize, s: usize) -> usize {
        t * self.tickers.len() + s
    }

    #[inline]
    pub fn feature(&self, t: usize, s: usize, f: usize) -> f64 {
        self.features[self.cell(t, s) * self.n_features + f]
    }

    /// The feature vector of stock `s` on date `t`.
    pub fn feature_row(&self, t: usize, s: usize) -> &[f64] {
        let base = self.cell(t, s) * self.n_features;
        &self.features[base..base + self.n_features]
    }

    pub(crate) fn feature_row_mut(&mut self, t: usize, s: usize) -> &mut [f64] {
        let base = self.cell(t, s) * self.n_features;
        &mut self.features[base..base + self.n_features]
    }

    #[inline]
    pub fn valid(&self, t: usize, s: usize) -> bool {
        self.valid[self.cell(t, s)]
    }

    pub(crate) fn set_valid(&mut self, t: usize, s: usize, v: bool) {
        let idx = self.cell(t, s);
        self.valid[idx] = v;
    }

    /// Realized next-day return aligned to row `t`, when defined.
    pub fn next_return(&self, t: usize, s: usize) -> Option<f64> {
        let v = self.next_return[self.cell(t, s)];
        if v.is_finite() {
            Some(v)
        } else {
            None
        }
    }

    pub(crate) fn set_next_return(&mut self, t: usize, s: usize, v: f64) {
        let idx = self.cell(t, s);
        self.next_return[idx] = v;
    }

    /// True when the L-day window ending at `t` exists and every day in it
    /// is valid for stock `s`.
    pub fn window_available(&self, s: usize, t: usize, window: usize) -> bool {
        if window == 0 || t + 1 < window || t >= self.n_dates() {
            return false;
        }
        (t + 1 - window..=t).all(|d| self.valid(d, s))
    }
}
