//! Daily price ingestion, date-range splitting and sliding-window normalization.
//!
//! Windows are normalized relative to their first price: `x_i = p_i / p_0 - 1`.
//! The target is the price one step after the window, normalized the same way.

use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;

use crate::error::{Error, Result};

/// Closing prices of one symbol, ordered by date.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub symbol: String,
    pub dates: Vec<NaiveDate>,
    pub close: Vec<f64>,
}

impl RawSeries {
    pub fn len(&self) -> usize {
        self.close.len()
    }

    pub fn is_empty(&self) -> bool {
        self.close.is_empty()
    }
}

/// One training or test sample.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedWindow {
    pub inputs: Vec<f64>,
    pub target: f64,
    pub base_price: f64,
    /// Index of the window's first price in the source series.
    pub origin_index: usize,
}

impl NormalizedWindow {
    /// Index of the target point in the source series.
    pub fn target_index(&self) -> usize {
        self.origin_index + self.inputs.len()
    }
}

/// Inclusive calendar date range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if start > end {
            return Err(Error::Argument(format!("date range {start}..{end} is reversed")));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<NormalizedWindow>,
    pub test: Vec<NormalizedWindow>,
    pub train_range: DateRange,
    pub test_range: DateRange,
    pub window: usize,
}

impl DatasetSplit {
    /// Number of training samples, the N_c used for the default L2 coefficient.
    pub fn train_count(&self) -> usize {
        self.train.len()
    }
}

const EXPECTED_COLUMNS: [&str; 6] = ["date", "open", "high", "low", "close", "volume"];

/// Reads a `Date,Open,High,Low,Close,Volume` file. Only `Close` is kept.
pub fn load_csv(path: impl AsRef<Path>, symbol: &str) -> Result<RawSeries> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, symbol)
}

/// Parses CSV text in the daily OHLCV schema. Line numbers in errors are 1-based
/// and count the header.
pub fn parse_csv(text: &str, symbol: &str) -> Result<RawSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let headers = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
        .clone();
    let names: Vec<String> = headers.iter().map(|h| h.to_ascii_lowercase()).collect();
    if names.len() != EXPECTED_COLUMNS.len() || names.iter().zip(EXPECTED_COLUMNS).any(|(a, b)| a != b) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header Date,Open,High,Low,Close,Volume, found {}", names.join(",")),
        });
    }

    let mut rows: Vec<(NaiveDate, f64)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        if record.len() != EXPECTED_COLUMNS.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected 6 fields, found {}", record.len()),
            });
        }
        let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d").map_err(|e| Error::Parse {
            line,
            message: format!("bad date {:?}: {e}", &record[0]),
        })?;
        let mut nums = [0.0f64; 5];
        for (k, slot) in nums.iter_mut().enumerate() {
            let field = &record[k + 1];
            *slot = field.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("column {} is not a number: {field:?}", EXPECTED_COLUMNS[k + 1]),
            })?;
        }
        let close = nums[3];
        if !close.is_finite() || close <= 0.0 {
            return Err(Error::Data(format!("line {line}: close price must be finite and > 0, got {close}")));
        }
        rows.push((date, close));
    }

    rows.sort_by_key(|r| r.0);
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Data(format!("duplicate date {}", w[0].0)));
    }

    let (dates, close) = rows.into_iter().unzip();
    Ok(RawSeries { symbol: symbol.to_string(), dates, close })
}

/// Normalizes `W + 1` prices into a window of `W` inputs and one target.
pub fn normalize_window(prices: &[f64], origin_index: usize) -> Result<NormalizedWindow> {
    if prices.len() < 2 {
        return Err(Error::Argument("a window needs at least two prices".into()));
    }
    let base = prices[0];
    if !base.is_finite() || base <= 0.0 {
        return Err(Error::Data(format!("base price must be finite and > 0, got {base}")));
    }
    if let Some(p) = prices.iter().find(|p| !p.is_finite()) {
        return Err(Error::Data(format!("non-finite price {p}")));
    }
    let w = prices.len() - 1;
    let inputs = prices[..w].iter().map(|p| p / base - 1.0).collect();
    Ok(NormalizedWindow {
        inputs,
        target: prices[w] / base - 1.0,
        base_price: base,
        origin_index,
    })
}

pub fn denormalize(value: f64, base_price: f64) -> f64 {
    debug_assert!(base_price > 0.0);
    base_price * (value + 1.0)
}

/// All `N - W` windows of a contiguous run of prices.
pub fn windows_from_segment(prices: &[f64], first_index: usize, window: usize) -> Result<Vec<NormalizedWindow>> {
    if window == 0 {
        return Err(Error::config("window.size", "must be at least 1"));
    }
    if prices.len() < window + 1 {
        return Err(Error::config(
            "window.size",
            format!("segment of {} points is shorter than window + 1 = {}", prices.len(), window + 1),
        ));
    }
    (0..prices.len() - window)
        .map(|s| normalize_window(&prices[s..=s + window], first_index + s))
        .collect()
}

/// Builds train/test windows. Each window lies entirely inside its range, so
/// its target date does too.
pub fn split_by_date(series: &RawSeries, train: DateRange, test: DateRange, window: usize) -> Result<DatasetSplit> {
    if train.end >= test.start {
        return Err(Error::config(
            "data.train_end",
            format!("train range must end before test range starts ({} >= {})", train.end, test.start),
        ));
    }
    let segment = |range: DateRange, key: &str| -> Result<Vec<NormalizedWindow>> {
        let idx: Vec<usize> = (0..series.len()).filter(|&i| range.contains(series.dates[i])).collect();
        let Some(&first) = idx.first() else {
            return Err(Error::config(key, format!("no data between {} and {}", range.start, range.end)));
        };
        let last = *idx.last().unwrap();
        windows_from_segment(&series.close[first..=last], first, window)
            .map_err(|e| e.context(format!("{key} segment {}..{}", range.start, range.end)))
    };
    Ok(DatasetSplit {
        train: segment(train, "data.train_start")?,
        test: segment(test, "data.test_start")?,
        train_range: train,
        test_range: test,
        window,
    })
}

/// Debug export: `origin_index,base_price,x_1..x_W,target`.
pub fn write_windows_csv<W: Write + ?Sized>(out: &mut W, windows: &[NormalizedWindow]) -> std::io::Result<()> {
    let w = windows.first().map_or(0, |x| x.inputs.len());
    write!(out, "origin_index,base_price")?;
    for k in 1..=w {
        write!(out, ",x_{k}")?;
    }
    writeln!(out, ",target")?;
    for win in windows {
        write!(out, "{},{}", win.origin_index, win.base_price)?;
        for v in &win.inputs {
            write!(out, ",{v}")?;
        }
        writeln!(out, ",{}", win.target)?;
    }
    Ok(())
}
