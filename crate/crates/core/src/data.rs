//! Price panels: ingestion, features, chronological splits, lookback
//! windows, and the synthetic planted-cluster generator.
//!
//! A panel holds aligned close prices for `n` tickers over a shared trading
//! calendar, plus the derived per-day feature channels: close and its 5-,
//! 10-, 20- and 30-day moving averages, each divided by that channel's
//! maximum over the training rows. The first `FEATURE_START` days carry no
//! features (not enough history for the longest average) and are excluded
//! from every model-facing range.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use chrono::{Datelike, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Moving-average windows, shortest first. The last one fixes the warmup.
pub const MA_WINDOWS: [usize; 4] = [5, 10, 20, 30];
/// Feature channels per stock-day: close plus one channel per MA window.
pub const NUM_FEATURES: usize = 1 + MA_WINDOWS.len();
/// First day index with a full feature vector.
pub const FEATURE_START: usize = 29;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("cannot parse date {0:?} (expected YYYY-MM-DD)")]
    BadDate(String),
    #[error("{path}: cannot locate date/close columns")]
    BadColumns { path: String },
    #[error("non-positive close for {ticker} on {date}")]
    NonPositiveClose { ticker: String, date: String },
    #[error("close is not finite for {ticker} on {date}")]
    NonFiniteClose { ticker: String, date: String },
    #[error("return ratio needs a positive previous close, got {prev}")]
    NonPositivePreviousClose { prev: f64 },
    #[error("panel has {have} days, need at least {need}")]
    TooFewDays { have: usize, need: usize },
    #[error("panel has no tickers after exclusions")]
    EmptyPanel,
    #[error("split ratios must be positive, got {0:?}")]
    BadRatios(Vec<f64>),
    #[error("{segment} segment is empty for this calendar")]
    EmptySegment { segment: &'static str },
    #[error("split date ranges overlap or are out of order")]
    OverlappingRanges,
    #[error("{segment} range lies outside the calendar")]
    RangeOutsideCalendar { segment: &'static str },
    #[error("training rows end before features start; nothing to normalize with")]
    NoUsableTrainingRows,
    #[error("{stocks} stocks cannot be split into {clusters} equal clusters")]
    ClustersDontDivide { stocks: usize, clusters: usize },
    #[error("ticker list {0} is empty")]
    EmptyTickerList(String),
}

/// One-day return: `(cur - prev) / prev`.
pub fn return_ratio(prev: f64, cur: f64) -> Result<f64, DataError> {
    if !(prev > 0.0) {
        return Err(DataError::NonPositivePreviousClose { prev });
    }
    Ok((cur - prev) / prev)
}

/// Chronological three-way partition of a calendar, as end-exclusive
/// boundary indices: train is `[0, train_end)`, validation is
/// `[train_end, valid_end)`, test is `[valid_end, len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Split {
    pub train_end: usize,
    pub valid_end: usize,
}

/// How to place the split boundaries.
#[derive(Debug, Clone)]
pub enum SplitSpec {
    /// Proportional split; any positive weights, normalized internally.
    Ratios([f64; 3]),
    /// Explicit inclusive date ranges, strictly ordered train < valid < test.
    Dates {
        train: (NaiveDate, NaiveDate),
        valid: (NaiveDate, NaiveDate),
        test: (NaiveDate, NaiveDate),
    },
}

/// Places split boundaries on a calendar. For date ranges the calendar is
/// expected to already be trimmed to the overall span (see
/// [`PricePanel::new`], which trims before calling this).
pub fn chronological_split(calendar: &[NaiveDate], spec: &SplitSpec) -> Result<Split, DataError> {
    let t = calendar.len();
    match spec {
        SplitSpec::Ratios(r) => {
            if r.iter().any(|&v| !(v > 0.0)) {
                return Err(DataError::BadRatios(r.to_vec()));
            }
            let total: f64 = r.iter().sum();
            let train_end = (t as f64 * r[0] / total).round() as usize;
            let valid_end = (t as f64 * (r[0] + r[1]) / total).round() as usize;
            check_boundaries(t, train_end, valid_end)?;
            Ok(Split {
                train_end,
                valid_end,
            })
        }
        SplitSpec::Dates { train, valid, test } => {
            if !(train.0 <= train.1
                && train.1 < valid.0
                && valid.0 <= valid.1
                && valid.1 < test.0
                && test.0 <= test.1)
            {
                return Err(DataError::OverlappingRanges);
            }
            let count_in = |range: &(NaiveDate, NaiveDate)| {
                calendar
                    .iter()
                    .filter(|d| range.0 <= **d && **d <= range.1)
                    .count()
            };
            let n_train = count_in(train);
            let n_valid = count_in(valid);
            let n_test = count_in(test);
            for (n, segment) in [(n_train, "train"), (n_valid, "valid"), (n_test, "test")] {
                if n == 0 {
                    return Err(DataError::RangeOutsideCalendar { segment });
                }
            }
            let train_end = calendar.partition_point(|d| *d <= train.1);
            let valid_end = calendar.partition_point(|d| *d <= valid.1);
            check_boundaries(t, train_end, valid_end)?;
            Ok(Split {
                train_end,
                valid_end,
            })
        }
    }
}

fn check_boundaries(t: usize, train_end: usize, valid_end: usize) -> Result<(), DataError> {
    if train_end == 0 {
        return Err(DataError::EmptySegment { segment: "train" });
    }
    if valid_end <= train_end {
        return Err(DataError::EmptySegment { segment: "valid" });
    }
    if valid_end >= t {
        return Err(DataError::EmptySegment { segment: "test" });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Train,
    Valid,
    Test,
}

impl Segment {
    pub fn name(&self) -> &'static str {
        match self {
            Segment::Train => "train",
            Segment::Valid => "valid",
            Segment::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Segment::Train),
            "valid" => Some(Segment::Valid),
            "test" => Some(Segment::Test),
            _ => None,
        }
    }
}

/// Aligned close prices and derived features for a fixed ticker set.
#[derive(Debug, Clone)]
pub struct PricePanel {
    tickers: Vec<String>,
    calendar: Vec<NaiveDate>,
    /// `n x t`, row-major per ticker.
    closes: Vec<f64>,
    /// `n x t x NUM_FEATURES`; zero before `FEATURE_START`.
    features: Vec<f64>,
    split: Split,
}

impl PricePanel {
    /// Builds a panel from aligned closes (`n x t`, positive and finite) and
    /// a split spec. With a date-based spec the calendar is first trimmed to
    /// the overall requested span.
    pub fn new(
        tickers: Vec<String>,
        mut calendar: Vec<NaiveDate>,
        mut closes: Vec<f64>,
        spec: &SplitSpec,
    ) -> Result<Self, DataError> {
        let n = tickers.len();
        if n == 0 {
            return Err(DataError::EmptyPanel);
        }
        assert_eq!(closes.len(), n * calendar.len(), "closes must be n x t");

        if let SplitSpec::Dates { train, test, .. } = spec {
            let lo = calendar.partition_point(|d| *d < train.0);
            let hi = calendar.partition_point(|d| *d <= test.1);
            if lo >= hi {
                return Err(DataError::RangeOutsideCalendar { segment: "train" });
            }
            let t_old = calendar.len();
            calendar = calendar[lo..hi].to_vec();
            let mut trimmed = Vec::with_capacity(n * calendar.len());
            for s in 0..n {
                trimmed.extend_from_slice(&closes[s * t_old + lo..s * t_old + hi]);
            }
            closes = trimmed;
        }

        let t = calendar.len();
        if t < MA_WINDOWS[MA_WINDOWS.len() - 1] {
            return Err(DataError::TooFewDays {
                have: t,
                need: MA_WINDOWS[MA_WINDOWS.len() - 1],
            });
        }
        for (s, ticker) in tickers.iter().enumerate() {
            for (d, date) in calendar.iter().enumerate() {
                let c = closes[s * t + d];
                if !c.is_finite() {
                    return Err(DataError::NonFiniteClose {
                        ticker: ticker.clone(),
                        date: date.to_string(),
                    });
                }
                if c <= 0.0 {
                    return Err(DataError::NonPositiveClose {
                        ticker: ticker.clone(),
                        date: date.to_string(),
                    });
                }
            }
        }

        let split = chronological_split(&calendar, spec)?;
        if split.train_end <= FEATURE_START {
            return Err(DataError::NoUsableTrainingRows);
        }
        let features = build_features(&closes, n, t, split.train_end)?;
        Ok(Self {
            tickers,
            calendar,
            closes,
            features,
            split,
        })
    }

    pub fn num_stocks(&self) -> usize {
        self.tickers.len()
    }

    pub fn num_days(&self) -> usize {
        self.calendar.len()
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn calendar(&self) -> &[NaiveDate] {
        &self.calendar
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn close(&self, stock: usize, day: usize) -> f64 {
        self.closes[stock * self.calendar.len() + day]
    }

    pub fn feature(&self, stock: usize, day: usize, channel: usize) -> f64 {
        self.features[(stock * self.calendar.len() + day) * NUM_FEATURES + channel]
    }

    pub fn segment_days(&self, segment: Segment) -> std::ops::Range<usize> {
        match segment {
            Segment::Train => 0..self.split.train_end,
            Segment::Valid => self.split.train_end..self.split.valid_end,
            Segment::Test => self.split.valid_end..self.calendar.len(),
        }
    }

    /// Days of `segment` that can anchor a lookback window: the window's
    /// rows all have features, and the previous close exists for the target.
    pub fn usable_days(&self, segment: Segment, lookback: usize) -> Vec<usize> {
        let earliest = FEATURE_START + lookback;
        self.segment_days(segment)
            .filter(|&d| d >= earliest)
            .collect()
    }

    /// Input window and target returns for day `t`: rows cover days
    /// `t-lookback .. t-1`, targets are day-`t` returns. Day `t` itself never
    /// contributes to the input.
    pub fn window(&self, day: usize, lookback: usize) -> LookbackWindow {
        assert!(
            day >= FEATURE_START + lookback && day < self.num_days(),
            "day {day} cannot anchor a {lookback}-day window"
        );
        let n = self.num_stocks();
        let mut x = Vec::with_capacity(n * lookback * NUM_FEATURES);
        for s in 0..n {
            for l in 0..lookback {
                let d = day - lookback + l;
                for c in 0..NUM_FEATURES {
                    x.push(self.feature(s, d, c));
                }
            }
        }
        let targets: Vec<f64> = (0..n)
            .map(|s| return_ratio(self.close(s, day - 1), self.close(s, day)).unwrap())
            .collect();
        LookbackWindow {
            day,
            stocks: n,
            lookback,
            x,
            targets,
        }
    }
}

/// Features for one anchored day: `stocks x lookback x NUM_FEATURES` inputs
/// plus the day's return per stock.
#[derive(Debug, Clone)]
pub struct LookbackWindow {
    pub day: usize,
    pub stocks: usize,
    pub lookback: usize,
    pub x: Vec<f64>,
    pub targets: Vec<f64>,
}

impl LookbackWindow {
    pub fn x_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_f64_slice(&[self.stocks, self.lookback, NUM_FEATURES], &self.x).unwrap()
    }

    pub fn targets_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_f64_slice(&[self.stocks], &self.targets).unwrap()
    }
}

/// Raw feature channels per day (close and moving averages), then each
/// channel divided by its maximum over the training rows that have features.
fn build_features(
    closes: &[f64],
    n: usize,
    t: usize,
    train_end: usize,
) -> Result<Vec<f64>, DataError> {
    if train_end <= FEATURE_START {
        return Err(DataError::NoUsableTrainingRows);
    }
    let mut features = vec![0.0; n * t * NUM_FEATURES];
    for s in 0..n {
        for d in FEATURE_START..t {
            let base = (s * t + d) * NUM_FEATURES;
            features[base] = closes[s * t + d];
            for (c, &w) in MA_WINDOWS.iter().enumerate() {
                let sum: f64 = closes[s * t + d + 1 - w..=s * t + d].iter().sum();
                features[base + 1 + c] = sum / w as f64;
            }
        }
    }
    for c in 0..NUM_FEATURES {
        let mut max = f64::NEG_INFINITY;
        for s in 0..n {
            for d in FEATURE_START..train_end {
                max = max.max(features[(s * t + d) * NUM_FEATURES + c]);
            }
        }
        debug_assert!(max > 0.0, "positive closes imply positive channel max");
        for s in 0..n {
            for d in FEATURE_START..t {
                features[(s * t + d) * NUM_FEATURES + c] /= max;
            }
        }
    }
    Ok(features)
}

// ── Synthetic panels ────────────────────────────────────────────────────

/// Synthetic panel with planted cluster structure, plus the ground-truth
/// cluster label per stock.
///
/// Stocks are assigned to equal-sized contiguous clusters. Each cluster
/// carries an AR(1) return factor; a stock's daily return is its cluster
/// factor plus `noise` times an idiosyncratic standard normal. Prices start
/// at 100.0 and compound. For a fixed seed the panel is reproducible to the
/// bit; with `noise == 0` stocks in one cluster have identical series.
pub fn synth_panel(
    stocks: usize,
    days: usize,
    clusters: usize,
    noise: f64,
    seed: u64,
) -> Result<(PricePanel, Vec<usize>), DataError> {
    let (tickers, calendar, closes, labels) = synth_closes(stocks, days, clusters, noise, seed)?;
    let panel = PricePanel::new(tickers, calendar, closes, &SplitSpec::Ratios([6.0, 2.0, 2.0]))?;
    Ok((panel, labels))
}

/// The raw synthetic series behind [`synth_panel`], for callers that write
/// CSVs or choose their own split.
pub fn synth_closes(
    stocks: usize,
    days: usize,
    clusters: usize,
    noise: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<NaiveDate>, Vec<f64>, Vec<usize>), DataError> {
    if stocks == 0 || clusters == 0 || stocks % clusters != 0 {
        return Err(DataError::ClustersDontDivide { stocks, clusters });
    }
    let per = stocks / clusters;
    let labels: Vec<usize> = (0..stocks).map(|i| i / per).collect();
    let tickers: Vec<String> = (0..stocks).map(|i| format!("S{i:04}")).collect();
    let calendar = business_days(NaiveDate::from_ymd_opt(2015, 1, 2).unwrap(), days);

    // AR(1) cluster factor: phi keeps some predictability in the panel.
    let phi = 0.6_f64;
    let sigma = 0.02;
    let innov = sigma * (1.0 - phi * phi).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut factor: Vec<f64> = (0..clusters)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut closes = vec![0.0; stocks * days];
    for s in 0..stocks {
        closes[s * days] = 100.0;
    }
    for d in 1..days {
        for f in factor.iter_mut() {
            *f = phi * *f + innov * rng.sample::<f64, _>(StandardNormal);
        }
        for s in 0..stocks {
            let idio: f64 = if noise == 0.0 {
                0.0
            } else {
                noise * rng.sample::<f64, _>(StandardNormal)
            };
            let r = (factor[labels[s]] + idio).max(-0.5);
            closes[s * days + d] = closes[s * days + d - 1] * (1.0 + r);
        }
    }
    Ok((tickers, calendar, closes, labels))
}

/// `count` weekdays starting at `start` (itself included if a weekday).
pub fn business_days(start: NaiveDate, count: usize) -> Vec<NaiveDate> {
    let mut days = Vec::with_capacity(count);
    let mut d = start;
    while days.len() < count {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            days.push(d);
        }
        d = d.succ_opt().expect("calendar stays in range");
    }
    days
}

// ── CSV ingestion ───────────────────────────────────────────────────────

/// Result of loading a CSV directory: the aligned inputs plus the tickers
/// dropped by the gap policy (a run of more than five missing days, or no
/// close before the first calendar day).
pub struct CsvLoad {
    pub tickers: Vec<String>,
    pub calendar: Vec<NaiveDate>,
    pub closes: Vec<f64>,
    pub excluded: Vec<String>,
}

/// Reads `<dir>/<ticker>.csv` for every name in `tickers_file` (one per
/// line). Files either have a header naming `date` and `close` columns, or
/// no header with the date first and the close in the fifth-of-six or
/// second-of-two column. Calendars are unioned; gaps of at most five days
/// forward-fill, longer gaps exclude the stock.
pub fn load_csv_dir(dir: &Path, tickers_file: &Path) -> Result<CsvLoad, DataError> {
    let listing = std::fs::read_to_string(tickers_file)?;
    let names: Vec<String> = listing
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if names.is_empty() {
        return Err(DataError::EmptyTickerList(
            tickers_file.display().to_string(),
        ));
    }

    let mut series: Vec<HashMap<NaiveDate, f64>> = Vec::with_capacity(names.len());
    let mut all_dates: Vec<NaiveDate> = Vec::new();
    for name in &names {
        let path = dir.join(format!("{name}.csv"));
        let s = read_close_series(&path)?;
        all_dates.extend(s.keys().copied());
        series.push(s);
    }
    all_dates.sort_unstable();
    all_dates.dedup();

    let t = all_dates.len();
    let mut tickers = Vec::new();
    let mut closes = Vec::new();
    let mut excluded = Vec::new();
    'ticker: for (name, s) in names.iter().zip(&series) {
        let mut row = Vec::with_capacity(t);
        let mut last: Option<f64> = None;
        let mut gap = 0usize;
        for date in &all_dates {
            match s.get(date) {
                Some(&c) => {
                    last = Some(c);
                    gap = 0;
                    row.push(c);
                }
                None => {
                    gap += 1;
                    match last {
                        Some(c) if gap <= 5 => row.push(c),
                        _ => {
                            excluded.push(name.clone());
                            continue 'ticker;
                        }
                    }
                }
            }
        }
        tickers.push(name.clone());
        closes.extend(row);
    }
    if tickers.is_empty() {
        return Err(DataError::EmptyPanel);
    }
    Ok(CsvLoad {
        tickers,
        calendar: all_dates,
        closes,
        excluded,
    })
}

fn read_close_series(path: &Path) -> Result<HashMap<NaiveDate, f64>, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let mut rows = reader.records();
    let first = match rows.next() {
        Some(r) => r?,
        None => return Ok(HashMap::new()),
    };

    let header: Vec<String> = first.iter().map(|f| f.trim().to_lowercase()).collect();
    let named = header.iter().position(|f| f == "date").and_then(|d| {
        header
            .iter()
            .position(|f| f == "close" || f == "adj close" || f == "adj_close")
            .map(|c| (d, c))
    });
    let mut out = HashMap::new();
    let (date_col, close_col) = match named {
        Some(cols) => cols,
        None => {
            // Headerless: date first; close is column 4 of wide OHLCV rows,
            // otherwise the second column.
            let close_col = if first.len() >= 6 { 4 } else { 1 };
            if first.len() < 2 {
                return Err(DataError::BadColumns {
                    path: path.display().to_string(),
                });
            }
            insert_row(&mut out, &first, 0, close_col, path)?;
            (0, close_col)
        }
    };
    for row in rows {
        let row = row?;
        insert_row(&mut out, &row, date_col, close_col, path)?;
    }
    Ok(out)
}

fn insert_row(
    out: &mut HashMap<NaiveDate, f64>,
    row: &csv::StringRecord,
    date_col: usize,
    close_col: usize,
    path: &Path,
) -> Result<(), DataError> {
    let get = |i: usize| {
        row.get(i).ok_or_else(|| DataError::BadColumns {
            path: path.display().to_string(),
        })
    };
    let date_str = get(date_col)?.trim();
    let date = NaiveDate::parse_from_str(date_str, "%Y-%m-%d")
        .map_err(|_| DataError::BadDate(date_str.to_string()))?;
    let close: f64 = get(close_col)?
        .trim()
        .parse()
        .map_err(|_| DataError::BadColumns {
            path: path.display().to_string(),
        })?;
    out.insert(date, close);
    Ok(())
}

/// Writes one `date,close` CSV per ticker plus a `tickers.txt` listing.
/// Closes are printed in shortest round-trip form, so reading the directory
/// back reproduces the panel bit for bit.
pub fn write_csv_dir(
    dir: &Path,
    tickers: &[String],
    calendar: &[NaiveDate],
    closes: &[f64],
) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    let t = calendar.len();
    let mut listing = std::fs::File::create(dir.join("tickers.txt"))?;
    for (s, name) in tickers.iter().enumerate() {
        writeln!(listing, "{name}")?;
        let mut w = csv::Writer::from_path(dir.join(format!("{name}.csv")))?;
        w.write_record(["date", "close"])?;
        for (d, date) in calendar.iter().enumerate() {
            w.write_record([date.to_string(), closes[s * t + d].to_string()])?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Reads a two-column `ticker,group` CSV (header optional) such as a sector
/// membership table.
pub fn load_membership_csv(path: &Path) -> Result<HashMap<String, String>, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    let mut map = HashMap::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let a = row.get(0).unwrap_or("").trim().to_string();
        let b = row.get(1).unwrap_or("").trim().to_string();
        if i == 0 && (a.to_lowercase() == "ticker" || b.to_lowercase() == "sector") {
            continue;
        }
        if a.is_empty() || b.is_empty() {
            return Err(DataError::BadColumns {
                path: path.display().to_string(),
            });
        }
        map.insert(a, b);
    }
    Ok(map)
}
