//! Multivariate series data model, CSV ingestion, normalization and
//! time-delay embedding.
//!
//! Time is a uniform integer grid `0..n`. Calendar timestamps from a CSV are
//! kept only as labels for writing the series back out.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diagnostics::Warning;
use crate::error::{Error, Result};

/// An `n x d` matrix of observations with a per-cell missing mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MultivariateSeries {
    n: usize,
    d: usize,
    // row-major, missing cells hold NaN
    values: Vec<f64>,
    missing: Vec<bool>,
    names: Vec<String>,
    start_index: i64,
    time_labels: Option<Vec<String>>,
}

impl MultivariateSeries {
    /// Builds a series from row-major `values` (length `n * d`) and a matching
    /// mask. Values under the mask are ignored.
    pub fn new(names: Vec<String>, values: Vec<f64>, missing: Vec<bool>, start_index: i64) -> Result<Self> {
        let d = names.len();
        if d == 0 {
            return Err(Error::Config("series needs at least one variable".into()));
        }
        let unique: HashSet<&str> = names.iter().map(String::as_str).collect();
        if unique.len() != d {
            return Err(Error::Config("variable names must be unique".into()));
        }
        if !values.len().is_multiple_of(d) || values.len() != missing.len() {
            return Err(Error::Config(format!(
                "value buffer of length {} does not match {} variables and mask of length {}",
                values.len(),
                d,
                missing.len()
            )));
        }
        let n = values.len() / d;
        if n == 0 {
            return Err(Error::Config("series needs at least one time step".into()));
        }
        let mut values = values;
        for (i, (v, &m)) in values.iter_mut().zip(&missing).enumerate() {
            if m {
                *v = f64::NAN;
            } else if !v.is_finite() {
                return Err(Error::Config(format!(
                    "non-finite value at t={}, variable {}",
                    i / d,
                    names[i % d]
                )));
            }
        }
        Ok(Self {
            n,
            d,
            values,
            missing,
            names,
            start_index,
            time_labels: None,
        })
    }

    /// Builds a series from rows, treating NaN entries as missing.
    pub fn from_rows(names: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let d = names.len();
        if let Some((t, _)) = rows.iter().enumerate().find(|(_, r)| r.len() != d) {
            return Err(Error::Config(format!("row {t} does not have {d} values")));
        }
        let values: Vec<f64> = rows.iter().flatten().copied().collect();
        let missing = values.iter().map(|v| v.is_nan()).collect();
        Self::new(names, values, missing, 0)
    }

    /// Convenience constructor with generated names `x1..xd`.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let d = columns.len();
        let n = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != n) {
            return Err(Error::Config("columns differ in length".into()));
        }
        let rows: Vec<Vec<f64>> = (0..n).map(|t| columns.iter().map(|c| c[t]).collect()).collect();
        Self::from_rows(default_names(d), &rows)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn start_index(&self) -> i64 {
        self.start_index
    }

    pub fn time_labels(&self) -> Option<&[String]> {
        self.time_labels.as_deref()
    }

    /// Value at `(t, j)`; NaN when missing.
    #[inline]
    pub fn value(&self, t: usize, j: usize) -> f64 {
        self.values[t * self.d + j]
    }

    #[inline]
    pub fn get(&self, t: usize, j: usize) -> Option<f64> {
        if self.missing[t * self.d + j] {
            None
        } else {
            Some(self.values[t * self.d + j])
        }
    }

    #[inline]
    pub fn is_missing(&self, t: usize, j: usize) -> bool {
        self.missing[t * self.d + j]
    }

    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.d..(t + 1) * self.d]
    }

    pub fn row_complete(&self, t: usize) -> bool {
        !self.missing[t * self.d..(t + 1) * self.d].iter().any(|&m| m)
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    /// Observed values of variable `j`, in time order.
    pub fn observed(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).filter_map(move |t| self.get(t, j))
    }

    pub(crate) fn set(&mut self, t: usize, j: usize, v: f64) {
        self.values[t * self.d + j] = v;
        self.missing[t * self.d + j] = false;
    }

    #[cfg(test)]
    pub(crate) fn set_missing(&mut self, t: usize, j: usize) {
        self.values[t * self.d + j] = f64::NAN;
        self.missing[t * self.d + j] = true;
    }

    /// Copy of this series with the given time labels attached.
    pub fn with_time_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n {
            return Err(Error::Config(format!(
                "{} time labels for {} rows",
                labels.len(),
                self.n
            )));
        }
        self.time_labels = Some(labels);
        Ok(self)
    }

    fn time_label(&self, t: usize) -> String {
        match &self.time_labels {
            Some(labels) => labels[t].clone(),
            None => (self.start_index + t as i64).to_string(),
        }
    }
}

pub(crate) fn default_names(d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("x{j}")).collect()
}

/// Reads a series from a CSV file (header `time,<name>...`).
pub fn load_csv(path: impl AsRef<Path>) -> Result<MultivariateSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file)
}

pub fn read_csv<R: Read>(reader: R) -> Result<MultivariateSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: format!("malformed header: {e}"),
        })?
        .clone();
    if header.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            message: "header has no data columns".into(),
        });
    }
    if header.iter().any(str::is_empty) {
        return Err(Error::Parse {
            line: 1,
            message: "header contains an empty column name".into(),
        });
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let d = names.len();

    let mut values = Vec::new();
    let mut missing = Vec::new();
    let mut labels = Vec::new();
    let mut keys: Vec<TimeKey> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Parse {
                line,
                message: e.to_string(),
            }
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let time = &record[0];
        let key = parse_time(time).ok_or_else(|| Error::Parse {
            line,
            message: format!("unrecognized time value {time:?}"),
        })?;
        if let Some(prev) = keys.last() {
            if !key.after(prev) {
                return Err(Error::Parse {
                    line,
                    message: format!("time index is not strictly increasing at {time:?}"),
                });
            }
        }
        keys.push(key);
        labels.push(time.to_owned());
        for (j, cell) in record.iter().skip(1).enumerate() {
            if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                values.push(f64::NAN);
                missing.push(true);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                message: format!("column {:?}: cannot parse {cell:?} as a number", names[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("column {:?}: non-finite value {cell:?}", names[j]),
                });
            }
            values.push(v);
            missing.push(false);
        }
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "no data rows".into(),
        });
    }

    // Contiguous integer times collapse to a start index; anything else is kept verbatim.
    let contiguous = match keys.first() {
        Some(TimeKey::Int(first)) => keys
            .iter()
            .enumerate()
            .all(|(i, k)| matches!(k, TimeKey::Int(v) if *v == first + i as i64)),
        _ => false,
    };
    let start_index = match (contiguous, keys.first()) {
        (true, Some(TimeKey::Int(first))) => *first,
        _ => 0,
    };
    let series = MultivariateSeries::new(names, values, missing, start_index).map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    debug_assert_eq!(series.d, d);
    if contiguous {
        Ok(series)
    } else {
        series.with_time_labels(labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum TimeKey {
    Int(i64),
    Instant(i64),
}

impl TimeKey {
    fn after(&self, prev: &TimeKey) -> bool {
        match (self, prev) {
            (TimeKey::Int(a), TimeKey::Int(b)) | (TimeKey::Instant(a), TimeKey::Instant(b)) => a > b,
            _ => false,
        }
    }
}

fn parse_time(s: &str) -> Option<TimeKey> {
    use chrono::{DateTime, NaiveDate, NaiveDateTime};
    if let Ok(v) = s.parse::<i64>() {
        return Some(TimeKey::Int(v));
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(TimeKey::Instant(dt.timestamp_millis()));
    }
    for fmt in [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(TimeKey::Instant(dt.and_utc().timestamp_millis()));
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| TimeKey::Instant(dt.and_utc().timestamp_millis()))
}

pub fn write_csv(series: &MultivariateSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = std::io::BufWriter::new(file);
    write_csv_to(series, &mut buf).map_err(|e| Error::io(path, e))?;
    buf.flush().map_err(|e| Error::io(path, e))
}

/// Writes finite cells with the shortest representation that parses back to
/// the same `f64`; missing cells are left empty.
pub fn write_csv_to<W: Write>(series: &MultivariateSeries, out: W) -> std::io::Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let header = std::iter::once("time").chain(series.names.iter().map(String::as_str));
    wtr.write_record(header)?;
    let mut record = Vec::with_capacity(series.d + 1);
    for t in 0..series.n {
        record.clear();
        record.push(series.time_label(t));
        for j in 0..series.d {
            record.push(series.get(t, j).map(|v| v.to_string()).unwrap_or_default());
        }
        wtr.write_record(&record)?;
    }
    wtr.flush()
}

/// Per-variable affine transform applied by [`zscore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn apply(&self, series: &MultivariateSeries) -> MultivariateSeries {
        self.map(series, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, series: &MultivariateSeries) -> MultivariateSeries {
        self.map(series, |v, m, s| v * s + m)
    }

    fn map(&self, series: &MultivariateSeries, f: impl Fn(f64, f64, f64) -> f64) -> MultivariateSeries {
        let mut out = series.clone();
        for t in 0..series.n {
            for j in 0..series.d {
                if !series.is_missing(t, j) {
                    out.values[t * series.d + j] = f(series.value(t, j), self.mean[j], self.scale[j]);
                }
            }
        }
        out
    }
}

/// Standardizes each variable to zero mean and unit sample standard deviation
/// over its observed cells.
pub fn zscore(series: &MultivariateSeries) -> Result<(MultivariateSeries, Normalization, Vec<Warning>)> {
    let mut mean = Vec::with_capacity(series.d);
    let mut scale = Vec::with_capacity(series.d);
    let mut warnings = Vec::new();
    for j in 0..series.d {
        let (count, sum) = series.observed(j).fold((0usize, 0.0), |(c, s), v| (c + 1, s + v));
        if count < 2 {
            return Err(Error::Config(format!(
                "variable {:?} has {count} observed values, need at least 2",
                series.names[j]
            )));
        }
        let m = sum / count as f64;
        let ss: f64 = series.observed(j).map(|v| (v - m) * (v - m)).sum();
        let sd = (ss / (count - 1) as f64).sqrt();
        mean.push(m);
        if sd > 0.0 && sd.is_finite() {
            scale.push(sd);
        } else {
            warnings.push(Warning::ConstantVariable {
                variable: series.names[j].clone(),
            });
            scale.push(1.0);
        }
    }
    let norm = Normalization { mean, scale };
    Ok((norm.apply(series), norm, warnings))
}

/// Half-open interval `[start, end)` of time steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interval {
    #[serde(rename = "a")]
    pub start: usize,
    #[serde(rename = "b")]
    pub end: usize,
}

impl Interval {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start >= end {
            return Err(Error::Config(format!("empty interval [{start}, {end})")));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    #[inline]
    pub fn contains(&self, t: usize) -> bool {
        self.start <= t && t < self.end
    }

    pub fn intersects(&self, other: &Interval) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn intersection_len(&self, other: &Interval) -> usize {
        self.end.min(other.end).saturating_sub(self.start.max(other.start))
    }

    /// Intersection over union.
    pub fn iou(&self, other: &Interval) -> f64 {
        let inter = self.intersection_len(other);
        let union = self.len() + other.len() - inter;
        inter as f64 / union as f64
    }

    pub fn check_within(&self, n: usize) -> Result<()> {
        if self.end > n {
            return Err(Error::Config(format!(
                "interval [{}, {}) exceeds series length {n}",
                self.start, self.end
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for Interval {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

impl std::str::FromStr for Interval {
    type Err = Error;

    /// Parses `a:b`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed interval {s:?}, expected a:b"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let a = a.trim().parse().map_err(|_| bad())?;
        let b = b.trim().parse().map_err(|_| bad())?;
        Interval::new(a, b)
    }
}

/// Time-delay embedding dimension and lag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub kappa: usize,
    pub tau: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self { kappa: 3, tau: 1 }
    }
}

impl EmbeddingConfig {
    pub fn new(kappa: usize, tau: usize) -> Result<Self> {
        let cfg = Self { kappa, tau };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kappa == 0 || self.tau == 0 {
            return Err(Error::Config(format!(
                "embedding needs kappa >= 1 and tau >= 1, got kappa={} tau={}",
                self.kappa, self.tau
            )));
        }
        Ok(())
    }

    /// Number of leading time steps with no complete history, `(kappa - 1) * tau`.
    pub fn span(&self) -> usize {
        (self.kappa - 1) * self.tau
    }

    pub fn validate_for(&self, n: usize) -> Result<()> {
        self.validate()?;
        if self.span() >= n {
            return Err(Error::Config(format!(
                "embedding span (kappa-1)*tau = {} must be below series length {n}",
                self.span()
            )));
        }
        Ok(())
    }
}

/// Embedded sample matrix. Row `r` is anchored at time `r + span` and holds
/// `x_t, x_{t-tau}, ..., x_{t-(kappa-1)tau}` concatenated.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub rows: Vec<f64>,
    pub missing: Vec<bool>,
    pub width: usize,
    pub span: usize,
}

impl Embedding {
    pub fn height(&self) -> usize {
        self.missing.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.rows[r * self.width..(r + 1) * self.width]
    }

    pub fn anchor_time(&self, r: usize) -> usize {
        r + self.span
    }
}

pub fn embed(series: &MultivariateSeries, cfg: EmbeddingConfig) -> Result<Embedding> {
    cfg.validate_for(series.n)?;
    let span = cfg.span();
    let d = series.d;
    let width = cfg.kappa * d;
    let height = series.n - span;
    let mut rows = Vec::with_capacity(height * width);
    let mut missing = Vec::with_capacity(height);
    for t in span..series.n {
        let mut any_missing = false;
        for k in 0..cfg.kappa {
            let src = t - k * cfg.tau;
            rows.extend_from_slice(series.row(src));
            any_missing |= !series.row_complete(src);
        }
        missing.push(any_missing);
    }
    Ok(Embedding {
        rows,
        missing,
        width,
        span,
    })
}
