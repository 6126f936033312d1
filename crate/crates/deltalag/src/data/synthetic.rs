//! Synthetic market panels with planted lead-lag structure.
//!
//! A handful of leader stocks move independently; every other stock copies
//! one leader's return with a fixed delay plus noise. The wiring is emitted
//! alongside the panel so detection quality can be scored exactly.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Bar;
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Daily volatility of leader returns.
const MARKET_SD: f64 = 0.02;
/// Intraday jitter volatility for synthetic high/low construction.
const JITTER_SD: f64 = 0.005;
/// Log-normal volume parameters: ln(volume) ~ Normal(ln 1e6, 0.5^2).
const LOG_VOLUME_SD: f64 = 0.5;
const BASE_VOLUME: f64 = 1e6;
const SHARES_OUTSTANDING: f64 = 5e7;
const BASE_PRICE: f64 = 100.0;

/// Parameters of a planted-structure synthetic market.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_stocks: usize,
    pub n_days: usize,
    pub n_leaders: usize,
    /// Inclusive bounds on planted lags.
    pub lag_range: (usize, usize),
    /// Coefficient applied to the leader's lagged return.
    pub signal_coef: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_stocks: 30,
            n_days: 1750,
            n_leaders: 10,
            lag_range: (1, 8),
            signal_coef: 1.0,
            noise_sd: 0.02,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.lag_range;
        if self.n_leaders == 0 || self.n_leaders >= self.n_stocks {
            return Err(Error::Config(format!(
                "n_leaders must be in 1..n_stocks, got {} of {}",
                self.n_leaders, self.n_stocks
            )));
        }
        if self.n_days == 0 {
            return Err(Error::Config("n_days must be positive".into()));
        }
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "lag_range must satisfy 1 <= lo <= hi, got ({lo}, {hi})"
            )));
        }
        if !self.signal_coef.is_finite() {
            return Err(Error::Config("signal_coef must be finite".into()));
        }
        if !self.noise_sd.is_finite() || self.noise_sd < 0.0 {
            return Err(Error::Config("noise_sd must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Planted wiring: each lagger's true leader and lag.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GroundTruth {
    map: BTreeMap<String, (String, usize)>,
}

impl GroundTruth {
    pub fn insert(&mut self, lagger: &str, leader: &str, lag: usize) -> Result<()> {
        if lagger == leader {
            return Err(Error::Data(format!("`{lagger}` cannot lead itself")));
        }
        if lag == 0 {
            return Err(Error::Data(format!("`{lagger}`: lag must be >= 1")));
        }
        if self
            .map
            .insert(lagger.to_string(), (leader.to_string(), lag))
            .is_some()
        {
            return Err(Error::Data(format!("duplicate lagger `{lagger}`")));
        }
        Ok(())
    }

    /// True (leader, lag) for a lagger, if it has one.
    pub fn get(&self, lagger: &str) -> Option<(&str, usize)> {
        self.map.get(lagger).map(|(l, tau)| (l.as_str(), *tau))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// (lagger, leader, lag) triples in lagger order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, usize)> {
        self.map
            .iter()
            .map(|(u, (l, tau))| (u.as_str(), l.as_str(), *tau))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let display = path.display().to_string();
        let mut writer =
            csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{display}: {e}")))?;
        writer
            .write_record(["lagger", "leader", "lag"])
            .map_err(|e| Error::Data(format!("{display}: {e}")))?;
        for (lagger, leader, lag) in self.iter() {
            writer
                .write_record([lagger, leader, &lag.to_string()])
                .map_err(|e| Error::Data(format!("{display}: {e}")))?;
        }
        writer.flush().map_err(|e| Error::io(display, e))?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<GroundTruth> {
        let display = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| match e.kind() {
                csv::ErrorKind::Io(_) => Error::io(
                    display.clone(),
                    std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
                ),
                _ => Error::Data(format!("{display}: {e}")),
            })?;
        {
            let headers = reader
                .headers()
                .map_err(|e| Error::Data(format!("{display}: {e}")))?;
            let got: Vec<&str> = headers.iter().collect();
            if got != ["lagger", "leader", "lag"] {
                return Err(Error::Parse {
                    path: display,
                    line: 1,
                    msg: format!("expected header lagger,leader,lag, found {:?}", got.join(",")),
                });
            }
        }
        let mut truth = GroundTruth::default();
        for record in reader.records() {
            let record = record.map_err(|e| Error::Data(format!("{display}: {e}")))?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            let parse = |msg: String| Error::Parse {
                path: display.clone(),
                line,
                msg,
            };
            if record.len() != 3 {
                return Err(parse(format!("expected 3 fields, found {}", record.len())));
            }
            let lag: usize = record[2]
                .parse()
                .map_err(|e| parse(format!("bad lag `{}`: {e}", &record[2])))?;
            truth
                .insert(&record[0], &record[1], lag)
                .map_err(|e| parse(e.to_string()))?;
        }
        Ok(truth)
    }
}

fn ticker_name(index: usize) -> String {
    format!("S{index:03}")
}

/// Weekday calendar starting Monday 2015-01-05.
fn trading_calendar(n_days: usize) -> Vec<NaiveDate> {
    let mut dates = Vec::with_capacity(n_days);
    let mut d = NaiveDate::from_ymd_opt(2015, 1, 5).unwrap();
    while dates.len() < n_days {
        if d.weekday().number_from_monday() <= 5 {
            dates.push(d);
        }
        d = d.succ_opt().unwrap();
    }
    dates
}

/// Generate a synthetic OHLCV panel and the wiring that produced it.
///
/// Leaders' daily returns are i.i.d. Normal(0, 0.02^2). Lagger u assigned
/// (leader, tau) satisfies r_u[d] = signal_coef * r_leader[d - tau] +
/// Normal(0, noise_sd^2) for every generated day d; leaders get `hi` extra
/// lead-in days internally so the identity needs no warm-up. Leaders are
/// assigned round-robin over laggers; lags are drawn uniformly from
/// `lag_range`. Prices compound from 100 with open = previous close and
/// high/low jittered off the open/close span.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(BTreeMap<String, Vec<Bar>>, GroundTruth)> {
    spec.validate()?;
    let (lo, hi) = spec.lag_range;
    let n_days = spec.n_days;
    let lead_in = hi;

    let mut truth = GroundTruth::default();
    let mut wiring = Vec::new(); // (leader index, lag) per lagger
    let mut lag_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "lags"));
    for (j, u) in (spec.n_leaders..spec.n_stocks).enumerate() {
        let leader = j % spec.n_leaders;
        let lag = lag_rng.gen_range(lo..=hi);
        truth.insert(&ticker_name(u), &ticker_name(leader), lag)?;
        wiring.push((leader, lag));
    }

    let market = Normal::new(0.0, MARKET_SD).unwrap();
    let mut ret_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "leader-returns"));
    let leader_returns: Vec<Vec<f64>> = (0..spec.n_leaders)
        .map(|_| (0..n_days + lead_in).map(|_| market.sample(&mut ret_rng)).collect())
        .collect();

    let noise = Normal::new(0.0, spec.noise_sd).unwrap();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "noise"));
    let mut returns = vec![vec![0.0; n_days]; spec.n_stocks];
    for (i, series) in leader_returns.iter().enumerate() {
        returns[i].copy_from_slice(&series[lead_in..]);
    }
    for (j, &(leader, lag)) in wiring.iter().enumerate() {
        let u = spec.n_leaders + j;
        for d in 0..n_days {
            returns[u][d] = spec.signal_coef * leader_returns[leader][lead_in + d - lag]
                + noise.sample(&mut noise_rng);
        }
    }

    let dates = trading_calendar(n_days);
    let jitter = Normal::new(0.0, JITTER_SD).unwrap();
    let volume_dist = Normal::new(BASE_VOLUME.ln(), LOG_VOLUME_SD).unwrap();
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "jitter"));
    let mut volume_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "volume"));
    let mut bars = BTreeMap::new();
    for (s, stock_returns) in returns.iter().enumerate() {
        let mut prev_close = BASE_PRICE;
        let mut series = Vec::with_capacity(n_days);
        for (d, &r) in stock_returns.iter().enumerate() {
            if 1.0 + r <= 0.0 {
                return Err(Error::Data(format!(
                    "stock {} day {d}: return {r} drives the price non-positive",
                    ticker_name(s)
                )));
            }
            let close = prev_close * (1.0 + r);
            let open = prev_close;
            // Cap keeps low strictly positive even for absurd jitter draws.
            let eta = jitter.sample(&mut jitter_rng).abs().min(0.5);
            let high = open.max(close) * (1.0 + eta);
            let low = open.min(close) * (1.0 - eta);
            let volume = volume_dist.sample(&mut volume_rng).exp().round();
            series.push(Bar {
                date: dates[d],
                open,
                high,
                low,
                close,
                volume,
                shares_outstanding: Some(SHARES_OUTSTANDING),
            });
            prev_close = close;
        }
        bars.insert(ticker_name(s), series);
    }
    Ok((bars, truth))
}
