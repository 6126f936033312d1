//! OHLCV CSV ingestion and emission.
//!
//! Schema: `ticker,date,open,high,low,close,volume,shares_outstanding`
//! with ISO-8601 dates; `shares_outstanding` may be empty. Bars must be
//! strictly ascending by date within each ticker.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;

use super::Bar;
use crate::error::{Error, Result};

const HEADER: [&str; 8] = [
    "ticker",
    "date",
    "open",
    "high",
    "low",
    "close",
    "volume",
    "shares_outstanding",
];

/// Load one OHLCV CSV into per-ticker bar series.
pub fn load_ohlcv(path: &Path) -> Result<BTreeMap<String, Vec<Bar>>> {
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
        if got != HEADER {
            return Err(Error::Parse {
                path: display,
                line: 1,
                msg: format!("expected header {:?}, found {:?}", HEADER.join(","), got.join(",")),
            });
        }
    }

    let mut out: BTreeMap<String, Vec<Bar>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("{display}: {e}")))?;
        let line = record
            .position()
            .map(|p| p.line())
            .unwrap_or(0);
        let parse_err = |msg: String| Error::Parse {
            path: display.clone(),
            line,
            msg,
        };
        if record.len() != HEADER.len() {
            return Err(parse_err(format!(
                "expected {} fields, found {}",
                HEADER.len(),
                record.len()
            )));
        }
        let ticker = record[0].trim();
        if ticker.is_empty() {
            return Err(parse_err("empty ticker".into()));
        }
        let date = NaiveDate::parse_from_str(record[1].trim(), "%Y-%m-%d")
            .map_err(|e| parse_err(format!("bad date `{}`: {e}", &record[1])))?;
        let num = |idx: usize, name: &str| -> Result<f64> {
            record[idx]
                .trim()
                .parse::<f64>()
                .map_err(|e| parse_err(format!("bad {name} `{}`: {e}", &record[idx])))
        };
        let shares_field = record[7].trim();
        let shares_outstanding = if shares_field.is_empty() {
            None
        } else {
            Some(num(7, "shares_outstanding")?)
        };
        let bar = Bar {
            date,
            open: num(2, "open")?,
            high: num(3, "high")?,
            low: num(4, "low")?,
            close: num(5, "close")?,
            volume: num(6, "volume")?,
            shares_outstanding,
        };
        bar.validate().map_err(|e| Error::Parse {
            path: display.clone(),
            line,
            msg: e.to_string(),
        })?;

        let series = out.entry(ticker.to_string()).or_default();
        if let Some(last) = series.last() {
            if bar.date <= last.date {
                return Err(Error::Data(format!(
                    "{display}: bars for `{ticker}` not strictly ascending at {} (previous {})",
                    bar.date, last.date
                )));
            }
        }
        series.push(bar);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{display}: no data rows")));
    }
    Ok(out)
}

/// Load and merge several OHLCV files; a ticker may appear in only one.
pub fn load_ohlcv_many(paths: &[impl AsRef<Path>]) -> Result<BTreeMap<String, Vec<Bar>>> {
    let mut merged: BTreeMap<String, Vec<Bar>> = BTreeMap::new();
    for path in paths {
        let part = load_ohlcv(path.as_ref())?;
        for (ticker, bars) in part {
            if merged.contains_key(&ticker) {
                return Err(Error::Data(format!(
                    "duplicate ticker `{ticker}` in {}",
                    path.as_ref().display()
                )));
            }
            merged.insert(ticker, bars);
        }
    }
    Ok(merged)
}

/// Write bars in the documented schema, tickers ascending then dates
/// ascending. Output is deterministic byte-for-byte for identical input.
pub fn write_ohlcv(path: &Path, bars: &BTreeMap<String, Vec<Bar>>) -> Result<()> {
    let display = path.display().to_string();
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{display}: {e}")))?;
    writer
        .write_record(HEADER)
        .map_err(|e| Error::Data(format!("{display}: {e}")))?;
    for (ticker, series) in bars {
        for bar in series {
            let shares = bar
                .shares_outstanding
                .map(|s| s.to_string())
                .unwrap_or_default();
            writer
                .write_record([
                    ticker.as_str(),
                    &bar.date.format("%Y-%m-%d").to_string(),
                    &bar.open.to_string(),
                    &bar.high.to_string(),
                    &bar.low.to_string(),
                    &bar.close.to_string(),
                    &bar.volume.to_string(),
                    &shares,
                ])
                .map_err(|e| Error::Data(format!("{display}: {e}")))?;
        }
    }
    writer
        .flush()
        .map_err(|e| Error::io(display, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_temp(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bars.csv");
        std::fs::write(&path, content).unwrap();
        (dir, path)
    }

    const GOOD: &str = "\
ticker,date,open,high,low,close,volume,shares_outstanding
AAA,2020-01-02,10,11,9.5,10.5,1000,50000
AAA,2020-01-03,10.5,10.8,10.1,10.2,900,50000
BBB,2020-01-02,20,21,19,20.5,500,
";

    #[test]
    fn loads_well_formed_bars() {
        let (_dir, path) = write_temp(GOOD);
        let bars = load_ohlcv(&path).unwrap();
        assert_eq!(bars.len(), 2);
        assert_eq!(bars["AAA"].len(), 2);
        assert_eq!(bars["AAA"][1].close, 10.2);
        assert_eq!(bars["BBB"][0].shares_outstanding, None);
        assert_eq!(bars["AAA"][0].shares_outstanding, Some(50000.0));
    }

    #[test]
    fn malformed_numeric_field_reports_line_number() {
        let (_dir, path) = write_temp(
            "ticker,date,open,high,low,close,volume,shares_outstanding\n\
             AAA,2020-01-02,10,11,9.5,10.5,1000,50000\n\
             AAA,2020-01-03,oops,10.8,10.1,10.2,900,50000\n",
        );
        match load_ohlcv(&path) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("open"), "msg: {msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn low_above_high_is_rejected_with_row_context() {
        let (_dir, path) = write_temp(
            "ticker,date,open,high,low,close,volume,shares_outstanding\n\
             AAA,2020-01-02,10,9.9,10.1,10,1000,\n",
        );
        match load_ohlcv(&path) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("low"), "msg: {msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_monotone_dates_are_rejected() {
        let (_dir, path) = write_temp(
            "ticker,date,open,high,low,close,volume,shares_outstanding\n\
             AAA,2020-01-03,10,11,9.5,10.5,1000,\n\
             AAA,2020-01-02,10,11,9.5,10.5,1000,\n",
        );
        assert!(matches!(load_ohlcv(&path), Err(Error::Data(_))));
    }

    #[test]
    fn duplicate_date_is_rejected() {
        let (_dir, path) = write_temp(
            "ticker,date,open,high,low,close,volume,shares_outstanding\n\
             AAA,2020-01-02,10,11,9.5,10.5,1000,\n\
             AAA,2020-01-02,10,11,9.5,10.5,1000,\n",
        );
        assert!(matches!(load_ohlcv(&path), Err(Error::Data(_))));
    }

    #[test]
    fn wrong_header_is_rejected() {
        let (_dir, path) = write_temp("symbol,date,o,h,l,c,v,s\nAAA,2020-01-02,1,2,0.5,1,1,\n");
        assert!(matches!(load_ohlcv(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn overlapping_tickers_across_files_error() {
        let (_dir1, path1) = write_temp(GOOD);
        let (_dir2, path2) = write_temp(
            "ticker,date,open,high,low,close,volume,shares_outstanding\n\
             BBB,2020-01-05,20,21,19,20.5,500,\n",
        );
        let err = load_ohlcv_many(&[&path1, &path2]).unwrap_err();
        match err {
            Error::Data(msg) => assert!(msg.contains("BBB"), "msg: {msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn write_then_load_round_trips() {
        let (_dir, path) = write_temp(GOOD);
        let bars = load_ohlcv(&path).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let out = dir2.path().join("out.csv");
        write_ohlcv(&out, &bars).unwrap();
        let reloaded = load_ohlcv(&out).unwrap();
        assert_eq!(bars, reloaded);
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(
            load_ohlcv(Path::new("/nonexistent/bars.csv")),
            Err(Error::Io { .. })
        ));
    }
}
