//! Preprocessing: ingestion onto a 15-minute grid, gap imputation, min-max
//! scaling, ADF stationarity tests, chronological splits and windowing.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::graph::FeatureGraph;

pub const CADENCE_MINUTES: i64 = 15;
/// Rows per day on the 15-minute grid.
pub const ROWS_PER_DAY: usize = 96;
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";
const TIMESTAMP_FORMATS: [&str; 4] = [
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M",
];

pub fn cadence() -> Duration {
    Duration::minutes(CADENCE_MINUTES)
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

pub fn format_timestamp(t: NaiveDateTime) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

// ---------------------------------------------------------------------------
// Frame
// ---------------------------------------------------------------------------

/// Multivariate series on a uniform 15-minute grid. Missing cells hold NaN
/// and are flagged in the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesFrame {
    start: NaiveDateTime,
    rows: usize,
    /// Row index of the first row within the frame this one was cut from.
    origin: usize,
    columns: Vec<String>,
    values: Vec<Vec<f64>>,
    missing: Vec<Vec<bool>>,
}

impl TimeSeriesFrame {
    /// Fully observed frame from column vectors.
    pub fn new(start: NaiveDateTime, columns: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        let missing = values.iter().map(|c| vec![false; c.len()]).collect();
        Self::with_missing(start, columns, values, missing)
    }

    /// Frame with an explicit missing mask; masked cells are overwritten with NaN.
    pub fn with_missing(
        start: NaiveDateTime,
        columns: Vec<String>,
        mut values: Vec<Vec<f64>>,
        missing: Vec<Vec<bool>>,
    ) -> Result<Self> {
        if columns.len() != values.len() || columns.len() != missing.len() {
            return Err(Error::Data(format!(
                "{} column names for {} value columns and {} mask columns",
                columns.len(),
                values.len(),
                missing.len()
            )));
        }
        let mut seen = HashSet::new();
        for c in &columns {
            if !seen.insert(c.as_str()) {
                return Err(Error::Data(format!("duplicate column '{c}'")));
            }
        }
        let rows = values.first().map_or(0, Vec::len);
        for ((name, v), m) in columns.iter().zip(&values).zip(&missing) {
            if v.len() != rows || m.len() != rows {
                return Err(Error::Data(format!("column '{name}' has {} rows, expected {rows}", v.len())));
            }
        }
        for (v, m) in values.iter_mut().zip(&missing) {
            for (x, &gap) in v.iter_mut().zip(m) {
                if gap {
                    *x = f64::NAN;
                } else if !x.is_finite() {
                    return Err(Error::Data("non-finite value in an observed cell".into()));
                }
            }
        }
        Ok(Self {
            start,
            rows,
            origin: 0,
            columns,
            values,
            missing,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn start(&self) -> NaiveDateTime {
        self.start
    }

    pub fn origin(&self) -> usize {
        self.origin
    }

    pub fn timestamp(&self, row: usize) -> NaiveDateTime {
        self.start + cadence() * row as i32
    }

    pub fn timestamps(&self) -> Vec<NaiveDateTime> {
        (0..self.rows).map(|r| self.timestamp(r)).collect()
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Data(format!("unknown column '{name}'")))
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.values[self.column_index(name)?])
    }

    pub fn column_at(&self, idx: usize) -> &[f64] {
        &self.values[idx]
    }

    pub fn missing_mask(&self, idx: usize) -> &[bool] {
        &self.missing[idx]
    }

    pub fn value(&self, row: usize, col: usize) -> Option<f64> {
        (!self.missing[col][row]).then(|| self.values[col][row])
    }

    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.missing[col][row]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[col][row] = value;
        self.missing[col][row] = false;
    }

    pub fn set_missing(&mut self, row: usize, col: usize) {
        self.values[col][row] = f64::NAN;
        self.missing[col][row] = true;
    }

    pub fn missing_count(&self, col: usize) -> usize {
        self.missing[col].iter().filter(|&&m| m).count()
    }

    pub fn total_missing(&self) -> usize {
        (0..self.columns.len()).map(|c| self.missing_count(c)).sum()
    }

    /// Consecutive rows as a new frame; `origin` tracks the offset.
    pub fn slice_rows(&self, range: Range<usize>) -> Result<Self> {
        if range.start > range.end || range.end > self.rows {
            return Err(Error::Data(format!("row range {range:?} outside 0..{}", self.rows)));
        }
        Ok(Self {
            start: self.timestamp(range.start),
            rows: range.len(),
            origin: self.origin + range.start,
            columns: self.columns.clone(),
            values: self.values.iter().map(|v| v[range.clone()].to_vec()).collect(),
            missing: self.missing.iter().map(|m| m[range.clone()].to_vec()).collect(),
        })
    }

    /// Subset and reorder columns.
    pub fn select_columns(&self, names: &[&str]) -> Result<Self> {
        let idx = names.iter().map(|n| self.column_index(n)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            start: self.start,
            rows: self.rows,
            origin: self.origin,
            columns: names.iter().map(|s| s.to_string()).collect(),
            values: idx.iter().map(|&i| self.values[i].clone()).collect(),
            missing: idx.iter().map(|&i| self.missing[i].clone()).collect(),
        })
    }

    /// Writes delimited text; missing cells become empty fields.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for r in 0..self.rows {
            record.clear();
            record.push(format_timestamp(self.timestamp(r)));
            for c in 0..self.columns.len() {
                record.push(match self.value(r, c) {
                    Some(v) => format!("{v:?}"),
                    None => String::new(),
                });
            }
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Reads a delimited file onto the 15-minute grid.
///
/// The first column holds ISO-8601 timestamps. With a schema, the remaining
/// columns must match it exactly (any order); output columns follow the
/// schema order.
pub fn load_timeseries(path: &Path, schema: Option<&[&str]>) -> Result<TimeSeriesFrame> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Ingest(format!("cannot open {}: {e}", path.display())))?;
    read_timeseries(file, schema)
}

pub fn read_timeseries<R: Read>(reader: R, schema: Option<&[&str]>) -> Result<TimeSeriesFrame> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.len() < 2 {
        return Err(Error::Ingest("expected a timestamp column and at least one series".into()));
    }
    let file_cols = &header[1..];
    let mut seen = HashSet::new();
    for c in file_cols {
        if !seen.insert(c.as_str()) {
            return Err(Error::Ingest(format!("duplicate column '{c}'")));
        }
    }
    let order: Vec<usize> = match schema {
        Some(schema) => {
            for c in file_cols {
                if !schema.contains(&c.as_str()) {
                    return Err(Error::Ingest(format!("unknown column '{c}'")));
                }
            }
            schema
                .iter()
                .map(|s| {
                    file_cols
                        .iter()
                        .position(|c| c == s)
                        .ok_or_else(|| Error::Ingest(format!("missing column '{s}'")))
                })
                .collect::<Result<_>>()?
        }
        None => (0..file_cols.len()).collect(),
    };
    let columns: Vec<String> = order.iter().map(|&i| file_cols[i].clone()).collect();

    let mut start: Option<NaiveDateTime> = None;
    let mut last: Option<(NaiveDateTime, usize)> = None;
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); columns.len()];
    let mut missing: Vec<Vec<bool>> = vec![Vec::new(); columns.len()];
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Ingest(format!("row {line}: expected {} fields, found {}", header.len(), rec.len())));
        }
        let ts = parse_timestamp(&rec[0])
            .ok_or_else(|| Error::Ingest(format!("row {line}: bad timestamp '{}'", &rec[0])))?;
        let start_ts = *start.get_or_insert(ts);
        if let Some((prev, prev_line)) = last {
            if ts == prev {
                return Err(Error::Ingest(format!(
                    "row {line}: duplicate timestamp {} (also on row {prev_line})",
                    format_timestamp(ts)
                )));
            }
            if ts < prev {
                return Err(Error::Ingest(format!("row {line}: timestamp {} goes backwards", format_timestamp(ts))));
            }
        }
        let offset = (ts - start_ts).num_seconds();
        if offset % (CADENCE_MINUTES * 60) != 0 {
            return Err(Error::Ingest(format!(
                "row {line}: timestamp {} is off the 15-minute grid",
                format_timestamp(ts)
            )));
        }
        let row = (offset / (CADENCE_MINUTES * 60)) as usize;
        // grid completion: absent quarter-hours become all-missing rows
        while values[0].len() < row {
            for c in 0..columns.len() {
                values[c].push(f64::NAN);
                missing[c].push(true);
            }
        }
        for (c, &src) in order.iter().enumerate() {
            let field = &rec[src + 1];
            if field.is_empty() {
                values[c].push(f64::NAN);
                missing[c].push(true);
            } else {
                let v: f64 = field.parse().map_err(|_| {
                    Error::Ingest(format!("row {line}, column '{}': cannot parse '{field}'", columns[c]))
                })?;
                if !v.is_finite() {
                    return Err(Error::Ingest(format!("row {line}, column '{}': non-finite value", columns[c])));
                }
                values[c].push(v);
                missing[c].push(false);
            }
        }
        last = Some((ts, line));
    }
    let start = start.ok_or_else(|| Error::Ingest("no data rows".into()))?;
    TimeSeriesFrame::with_missing(start, columns, values, missing)
}

// ---------------------------------------------------------------------------
// Imputation
// ---------------------------------------------------------------------------

/// Neighbour offsets in rows: -48h, -24h, +24h, +48h.
pub const IMPUTATION_OFFSETS: [isize; 4] = [
    -2 * ROWS_PER_DAY as isize,
    -(ROWS_PER_DAY as isize),
    ROWS_PER_DAY as isize,
    2 * ROWS_PER_DAY as isize,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilledCell {
    pub row: usize,
    pub timestamp: String,
    pub value: f64,
    /// Rows whose values were averaged.
    pub sources: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnfilledCell {
    pub row: usize,
    pub timestamp: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImputationLog {
    pub column: String,
    pub filled: Vec<FilledCell>,
    pub unfilled: Vec<UnfilledCell>,
}

impl ImputationLog {
    /// Filled cells whose neighbour days lie on the other side of `cut`.
    pub fn straddling(&self, cut: usize) -> Vec<&FilledCell> {
        self.filled
            .iter()
            .filter(|f| f.sources.iter().any(|&s| (s < cut) != (f.row < cut)))
            .collect()
    }
}

/// Fills gaps in `column` with the mean of the same quarter-hour one and
/// two days before and after, using only originally observed neighbours.
pub fn impute_directional_mean(frame: &TimeSeriesFrame, column: &str) -> Result<(TimeSeriesFrame, ImputationLog)> {
    let c = frame.column_index(column)?;
    let mut out = frame.clone();
    let mut log = ImputationLog {
        column: column.to_string(),
        ..Default::default()
    };
    let n = frame.rows() as isize;
    for row in 0..frame.rows() {
        if !frame.is_missing(row, c) {
            continue;
        }
        let mut sum = 0.0;
        let mut sources = Vec::new();
        for off in IMPUTATION_OFFSETS {
            let j = row as isize + off;
            if (0..n).contains(&j) {
                if let Some(v) = frame.value(j as usize, c) {
                    sum += v;
                    sources.push(j as usize);
                }
            }
        }
        let ts = format_timestamp(frame.timestamp(row));
        if sources.is_empty() {
            log::warn!("{column}: no neighbour days available for {ts}; left missing");
            log.unfilled.push(UnfilledCell { row, timestamp: ts });
        } else {
            let value = sum / sources.len() as f64;
            out.set(row, c, value);
            log.filled.push(FilledCell {
                row,
                timestamp: ts,
                value,
                sources,
            });
        }
    }
    Ok((out, log))
}

/// Imputes every column; returns the logs in column order.
pub fn impute_all(frame: &TimeSeriesFrame) -> Result<(TimeSeriesFrame, Vec<ImputationLog>)> {
    let mut out = frame.clone();
    let mut logs = Vec::new();
    for name in frame.columns() {
        // neighbours come from the original frame, so columns are independent
        let (filled, log) = impute_directional_mean(frame, name)?;
        let c = frame.column_index(name)?;
        for f in &log.filled {
            out.set(f.row, c, filled.column_at(c)[f.row]);
        }
        logs.push(log);
    }
    Ok((out, logs))
}

// ---------------------------------------------------------------------------
// Min-max scaling
// ---------------------------------------------------------------------------

/// Spread below which a column is treated as constant.
pub const SCALE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub columns: Vec<String>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub fit_range: (usize, usize),
}

pub fn minmax_fit(frame: &TimeSeriesFrame, columns: &[&str], fit_rows: Range<usize>) -> Result<ScalerParams> {
    if fit_rows.is_empty() || fit_rows.end > frame.rows() {
        return Err(Error::Data(format!("fit rows {fit_rows:?} invalid for {} rows", frame.rows())));
    }
    let mut min = Vec::new();
    let mut max = Vec::new();
    for name in columns {
        let c = frame.column_index(name)?;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for r in fit_rows.clone() {
            let v = frame
                .value(r, c)
                .ok_or_else(|| Error::Data(format!("missing value in '{name}' at fit row {r}")))?;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi - lo < SCALE_EPS {
            log::warn!("column '{name}' is constant over the fit range; it will scale to 0");
        }
        min.push(lo);
        max.push(hi);
    }
    Ok(ScalerParams {
        columns: columns.iter().map(|s| s.to_string()).collect(),
        min,
        max,
        fit_range: (fit_rows.start, fit_rows.end),
    })
}

impl ScalerParams {
    pub fn index_of(&self, column: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == column)
            .ok_or_else(|| Error::Data(format!("scaler has no column '{column}'")))
    }

    pub fn transform_value(&self, idx: usize, v: f64) -> f64 {
        let span = self.max[idx] - self.min[idx];
        if span < SCALE_EPS {
            0.0
        } else {
            (v - self.min[idx]) / span
        }
    }

    pub fn inverse_value(&self, idx: usize, v: f64) -> f64 {
        let span = self.max[idx] - self.min[idx];
        if span < SCALE_EPS {
            self.min[idx]
        } else {
            v * span + self.min[idx]
        }
    }

    pub fn transform(&self, frame: &TimeSeriesFrame) -> Result<TimeSeriesFrame> {
        self.map_frame(frame, |s, i, v| s.transform_value(i, v))
    }

    pub fn inverse(&self, frame: &TimeSeriesFrame) -> Result<TimeSeriesFrame> {
        self.map_frame(frame, |s, i, v| s.inverse_value(i, v))
    }

    fn map_frame(&self, frame: &TimeSeriesFrame, f: impl Fn(&Self, usize, f64) -> f64) -> Result<TimeSeriesFrame> {
        let mut out = frame.clone();
        for (i, name) in self.columns.iter().enumerate() {
            let c = frame.column_index(name)?;
            for v in out.values[c].iter_mut() {
                if !v.is_nan() {
                    *v = f(self, i, *v);
                }
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Augmented Dickey-Fuller
// ---------------------------------------------------------------------------

pub const DEFAULT_ADF_LAGS: usize = 4;
pub const DEFAULT_SIGNIFICANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stationarity {
    Stationary,
    NonStationary,
}

impl fmt::Display for Stationarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stationarity::Stationary => "stationary",
            Stationarity::NonStationary => "non-stationary",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdfReport {
    pub column: String,
    pub statistic: f64,
    pub p_value: f64,
    pub lags: usize,
    pub nobs: usize,
    pub significance: f64,
    pub conclusion: Stationarity,
}

/// ADF test with a constant, no trend and a fixed lag order.
pub fn adf_test(series: &[f64], max_lags: usize) -> Result<AdfReport> {
    adf_test_with(series, max_lags, DEFAULT_SIGNIFICANCE)
}

pub fn adf_test_with(series: &[f64], lags: usize, significance: f64) -> Result<AdfReport> {
    let n = series.len();
    if n < 25 + lags {
        return Err(Error::Domain(format!("ADF needs at least {} observations, got {n}", 25 + lags)));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("ADF input contains missing or non-finite values".into()));
    }
    let dy: Vec<f64> = series.windows(2).map(|w| w[1] - w[0]).collect();
    if dy.iter().all(|&d| d == 0.0) {
        return Err(Error::Domain("ADF input is constant; the test is degenerate".into()));
    }
    // rows t = lags..dy.len(): dy[t] ~ 1 + y[t] + dy[t-1..t-lags]
    let nobs = dy.len() - lags;
    let k = 2 + lags;
    let lvl_mean = series[lags..lags + nobs].iter().sum::<f64>() / nobs as f64;
    let mut xtx = vec![0.0; k * k];
    let mut xty = vec![0.0; k];
    let mut yy = 0.0;
    let mut row = vec![0.0; k];
    for t in lags..dy.len() {
        row[0] = 1.0;
        // centring the level regressor leaves its coefficient unchanged
        row[1] = series[t] - lvl_mean;
        for i in 1..=lags {
            row[1 + i] = dy[t - i];
        }
        let y = dy[t];
        for a in 0..k {
            xty[a] += row[a] * y;
            for b in 0..k {
                xtx[a * k + b] += row[a] * row[b];
            }
        }
        yy += y * y;
    }
    let inv = invert_spd(&xtx, k)
        .ok_or_else(|| Error::Domain("ADF regression is singular (degenerate series)".into()))?;
    let beta: Vec<f64> = (0..k).map(|a| (0..k).map(|b| inv[a * k + b] * xty[b]).sum()).collect();
    let explained: f64 = beta.iter().zip(&xty).map(|(b, v)| b * v).sum();
    let ssr = (yy - explained).max(0.0);
    let dof = nobs - k;
    let sigma2 = ssr / dof as f64;
    let se = (sigma2 * inv[k + 1]).sqrt();
    if !(se > 0.0) {
        return Err(Error::Domain("ADF residual variance is zero (degenerate series)".into()));
    }
    let statistic = beta[1] / se;
    let p_value = mackinnon_p(statistic);
    let conclusion = if p_value < significance {
        Stationarity::Stationary
    } else {
        Stationarity::NonStationary
    };
    Ok(AdfReport {
        column: String::new(),
        statistic,
        p_value,
        lags,
        nobs,
        significance,
        conclusion,
    })
}

pub fn adf_test_column(frame: &TimeSeriesFrame, column: &str, lags: usize, significance: f64) -> Result<AdfReport> {
    let c = frame.column_index(column)?;
    if frame.missing_count(c) > 0 {
        return Err(Error::Domain(format!("column '{column}' still has missing values")));
    }
    let mut report = adf_test_with(frame.column_at(c), lags, significance)?;
    report.column = column.to_string();
    Ok(report)
}

/// Approximate p-value for the constant-only ADF statistic with one
/// integrated regressor (MacKinnon 1994 response-surface fit).
pub fn mackinnon_p(stat: f64) -> f64 {
    const MAX: f64 = 2.74;
    const MIN: f64 = -18.83;
    const STAR: f64 = -1.61;
    const SMALL: [f64; 3] = [2.1659, 1.4412, 0.038269];
    const LARGE: [f64; 4] = [1.7339, 0.93202, -0.12745, -0.010368];
    if stat > MAX {
        return 1.0;
    }
    if stat < MIN {
        return 0.0;
    }
    let coef: &[f64] = if stat <= STAR { &SMALL } else { &LARGE };
    let z = coef.iter().rev().fold(0.0, |acc, &c| acc * stat + c);
    Normal::standard().cdf(z)
}

/// Gauss-Jordan inverse with partial pivoting; `None` when singular.
fn invert_spd(a: &[f64], k: usize) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; k * k];
    for i in 0..k {
        inv[i * k + i] = 1.0;
    }
    let scale = (0..k).map(|i| a[i * k + i].abs()).fold(0.0, f64::max);
    for col in 0..k {
        let piv = (col..k).max_by(|&x, &y| m[x * k + col].abs().total_cmp(&m[y * k + col].abs()))?;
        if m[piv * k + col].abs() <= 1e-13 * scale {
            return None;
        }
        if piv != col {
            for j in 0..k {
                m.swap(piv * k + j, col * k + j);
                inv.swap(piv * k + j, col * k + j);
            }
        }
        let d = m[col * k + col];
        for j in 0..k {
            m[col * k + j] /= d;
            inv[col * k + j] /= d;
        }
        for r in 0..k {
            if r != col {
                let f = m[r * k + col];
                if f != 0.0 {
                    for j in 0..k {
                        m[r * k + j] -= f * m[col * k + j];
                        inv[r * k + j] -= f * inv[col * k + j];
                    }
                }
            }
        }
    }
    Some(inv)
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// First row of the test part: `floor(fraction * rows)`.
pub fn split_index(rows: usize, train_fraction: f64) -> Result<usize> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let cut = (train_fraction * rows as f64).floor() as usize;
    if cut == 0 || cut >= rows {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} leaves an empty side for {rows} rows"
        )));
    }
    Ok(cut)
}

pub fn chronological_split(frame: &TimeSeriesFrame, train_fraction: f64) -> Result<(TimeSeriesFrame, TimeSeriesFrame)> {
    let cut = split_index(frame.rows(), train_fraction)?;
    Ok((frame.slice_rows(0..cut)?, frame.slice_rows(cut..frame.rows())?))
}

// ---------------------------------------------------------------------------
// Windows
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `T x F` per window, for the recurrent model.
    Flat,
    /// `T x N_n x 1` per window, nodes in graph order.
    PerNode,
}

/// Sliding windows over a scaled frame. Rows are stored once; window `i`
/// is the contiguous block of rows `[i, i + T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    layout: Layout,
    seq_len: usize,
    columns: Vec<String>,
    target_index: usize,
    data: Vec<f64>,
    targets: Vec<f64>,
    source_indices: Vec<usize>,
}

/// Builds `rows - T` windows; window `i` covers rows `[i, i+T)` and its
/// target is row `i+T` of `target_column`.
///
/// With a graph, columns follow the graph's node order (required for the
/// per-node layout); otherwise the frame's order.
pub fn make_windows(
    frame: &TimeSeriesFrame,
    target_column: &str,
    seq_len: usize,
    layout: Layout,
    graph: Option<&FeatureGraph>,
) -> Result<WindowedDataset> {
    if seq_len == 0 {
        return Err(Error::Config("sequence length must be at least 1".into()));
    }
    let columns: Vec<String> = match (layout, graph) {
        (_, Some(g)) => g.nodes().to_vec(),
        (Layout::Flat, None) => frame.columns().to_vec(),
        (Layout::PerNode, None) => {
            return Err(Error::Config("per-node windows need a graph for node order".into()));
        }
    };
    if frame.rows() <= seq_len {
        return Err(Error::Data(format!("{} rows cannot form windows of length {seq_len}", frame.rows())));
    }
    let idx = columns.iter().map(|c| frame.column_index(c)).collect::<Result<Vec<_>>>()?;
    let target_index = columns
        .iter()
        .position(|c| c == target_column)
        .ok_or_else(|| Error::Data(format!("target column '{target_column}' not among inputs")))?;

    let mut gaps = Vec::new();
    for (k, &c) in idx.iter().enumerate() {
        for r in 0..frame.rows() {
            if frame.is_missing(r, c) {
                gaps.push(format!("{}@{}", columns[k], format_timestamp(frame.timestamp(r))));
            }
        }
    }
    if !gaps.is_empty() {
        let shown = gaps.iter().take(10).cloned().collect::<Vec<_>>().join(", ");
        return Err(Error::Data(format!("{} missing cells remain: {shown}", gaps.len())));
    }

    let width = columns.len();
    let mut data = Vec::with_capacity(frame.rows() * width);
    for r in 0..frame.rows() {
        for &c in &idx {
            data.push(frame.column_at(c)[r]);
        }
    }
    let windows = frame.rows() - seq_len;
    let targets = (0..windows).map(|i| data[(i + seq_len) * width + target_index]).collect();
    let source_indices = (0..windows).map(|i| frame.origin() + i + seq_len).collect();
    Ok(WindowedDataset {
        layout,
        seq_len,
        columns,
        target_index,
        data,
        targets,
        source_indices,
    })
}

const MAGIC: &[u8; 4] = b"GHWD";
pub const CONTAINER_VERSION: u32 = 1;

impl WindowedDataset {
    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Values per time step (features, or nodes with one feature each).
    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn target_index(&self) -> usize {
        self.target_index
    }

    pub fn target_column(&self) -> &str {
        &self.columns[self.target_index]
    }

    /// `T x width` row-major block of window `i`.
    pub fn window(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.data[i * w..(i + self.seq_len) * w]
    }

    pub fn target(&self, i: usize) -> f64 {
        self.targets[i]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Original frame row of each target.
    pub fn source_indices(&self) -> &[usize] {
        &self.source_indices
    }

    /// Same numbers under the other layout.
    pub fn with_layout(&self, layout: Layout) -> Self {
        Self {
            layout,
            ..self.clone()
        }
    }

    /// Documented little-endian container; see the README for the layout.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
        w.write_all(&[match self.layout {
            Layout::Flat => 0u8,
            Layout::PerNode => 1u8,
        }])?;
        let rows = self.data.len() / self.width();
        for v in [self.seq_len, self.width(), rows, self.len(), self.target_index] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for c in &self.columns {
            w.write_all(&(c.len() as u32).to_le_bytes())?;
            w.write_all(c.as_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.targets {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in &self.source_indices {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        fn bad(msg: &str) -> Error {
            Error::Data(format!("invalid dataset container: {msg}"))
        }
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("wrong magic"));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CONTAINER_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut lb = [0u8; 1];
        r.read_exact(&mut lb)?;
        let layout = match lb[0] {
            0 => Layout::Flat,
            1 => Layout::PerNode,
            _ => return Err(bad("unknown layout")),
        };
        let mut read_u64 = |r: &mut R| -> Result<usize> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8) as usize)
        };
        let seq_len = read_u64(&mut r)?;
        let width = read_u64(&mut r)?;
        let rows = read_u64(&mut r)?;
        let windows = read_u64(&mut r)?;
        let target_index = read_u64(&mut r)?;
        if width == 0 || target_index >= width || rows != windows + seq_len || seq_len == 0 {
            return Err(bad("inconsistent header"));
        }
        let mut columns = Vec::with_capacity(width);
        for _ in 0..width {
            r.read_exact(&mut b4)?;
            let mut s = vec![0u8; u32::from_le_bytes(b4) as usize];
            r.read_exact(&mut s)?;
            columns.push(String::from_utf8(s).map_err(|_| bad("column name is not UTF-8"))?);
        }
        let read_f64s = |r: &mut R, n: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b)?;
                out.push(f64::from_le_bytes(b));
            }
            Ok(out)
        };
        let data = read_f64s(&mut r, rows * width)?;
        let targets = read_f64s(&mut r, windows)?;
        let mut source_indices = Vec::with_capacity(windows);
        for _ in 0..windows {
            r.read_exact(&mut b8)?;
            source_indices.push(u64::from_le_bytes(b8) as usize);
        }
        Ok(Self {
            layout,
            seq_len,
            columns,
            target_index,
            data,
            targets,
            source_indices,
        })
    }
}
