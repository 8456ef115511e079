//! Dataset ingestion, chronological splitting, z-score normalization,
//! sliding-window forecast samples, and seeded synthetic fixtures.

use std::fmt;
use std::io::Write;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{standard_normal, Tensor};

/// Which contiguous segment of the series to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Per-channel statistics estimated on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// A normalized multivariate series with split boundaries.
///
/// `values` has shape [N, T_total, C]. Benchmarks load as a single long
/// instance (N = 1); the training batch axis comes from cropped windows,
/// not from distinct instances.
#[derive(Clone, Debug)]
pub struct SeriesDataset {
    values: Tensor,
    feature_names: Vec<String>,
    split: Option<(usize, usize)>,
    norm_stats: Option<NormStats>,
}

/// One (look-back window, future target) pair.
///
/// The window immediately precedes the target and neither crosses a split
/// boundary. `origin` is (instance index, window start time index).
#[derive(Clone, Debug)]
pub struct ForecastSample {
    pub window: Tensor,
    pub target: Tensor,
    pub origin: (usize, usize),
}

impl SeriesDataset {
    pub fn from_values(values: Tensor, feature_names: Vec<String>) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::Dim(format!(
                "series values must be [N, T, C], got {:?}",
                values.shape()
            )));
        }
        if feature_names.len() != values.shape()[2] {
            return Err(Error::Dim(format!(
                "{} feature names for {} channels",
                feature_names.len(),
                values.shape()[2]
            )));
        }
        Ok(SeriesDataset {
            values,
            feature_names,
            split: None,
            norm_stats: None,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn instances(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn total_len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn split_bounds(&self) -> Option<(usize, usize)> {
        self.split
    }

    pub fn norm_stats(&self) -> Option<&NormStats> {
        self.norm_stats.as_ref()
    }

    /// Set contiguous chronological split boundaries at
    /// floor(r1*T) and floor((r1+r2)*T).
    pub fn split(mut self, ratios: (f64, f64, f64)) -> Result<Self> {
        let (r1, r2, r3) = ratios;
        if !(r1 > 0.0 && r2 > 0.0 && r3 > 0.0) {
            return Err(Error::Param(format!(
                "split ratios must all be positive, got {ratios:?}"
            )));
        }
        if ((r1 + r2 + r3) - 1.0).abs() > 1e-9 {
            return Err(Error::Param(format!(
                "split ratios must sum to 1, got {ratios:?}"
            )));
        }
        let t = self.total_len();
        let train_end = (r1 * t as f64).floor() as usize;
        let val_end = ((r1 + r2) * t as f64).floor() as usize;
        if train_end == 0 || val_end <= train_end || val_end >= t {
            return Err(Error::Sizing(format!(
                "length {t} with ratios {ratios:?} leaves an empty split"
            )));
        }
        self.split = Some((train_end, val_end));
        Ok(self)
    }

    fn time_range(&self, split: Split) -> Result<(usize, usize)> {
        let (train_end, val_end) = self
            .split
            .ok_or_else(|| Error::Usage("split boundaries not set".into()))?;
        Ok(match split {
            Split::Train => (0, train_end),
            Split::Val => (train_end, val_end),
            Split::Test => (val_end, self.total_len()),
        })
    }

    pub fn split_len(&self, split: Split) -> Result<usize> {
        let (a, b) = self.time_range(split)?;
        Ok(b - a)
    }

    /// Z-score every channel using statistics from the training split only,
    /// storing the stats for the inverse transform.
    pub fn normalize(mut self) -> Result<Self> {
        let (train_end, _) = self
            .split
            .ok_or_else(|| Error::Usage("normalize requires split boundaries".into()))?;
        let (n, t, c) = (self.instances(), self.total_len(), self.channels());
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        let count = (n * train_end) as f64;
        for i in 0..n {
            for ti in 0..train_end {
                for ch in 0..c {
                    mean[ch] += self.values.at3(i, ti, ch);
                }
            }
        }
        for m in mean.iter_mut() {
            *m /= count;
        }
        for i in 0..n {
            for ti in 0..train_end {
                for ch in 0..c {
                    let d = self.values.at3(i, ti, ch) - mean[ch];
                    std[ch] += d * d;
                }
            }
        }
        for (ch, s) in std.iter_mut().enumerate() {
            *s = (*s / count).sqrt();
            if *s < 1e-12 {
                return Err(Error::Param(format!(
                    "channel '{}' is constant on the training split",
                    self.feature_names[ch]
                )));
            }
        }
        for i in 0..n {
            for ti in 0..t {
                for ch in 0..c {
                    let idx = self.values.idx3(i, ti, ch);
                    let v = self.values.data()[idx];
                    self.values.data_mut()[idx] = (v - mean[ch]) / std[ch];
                }
            }
        }
        self.norm_stats = Some(NormStats { mean, std });
        Ok(self)
    }

    /// Inverse of `normalize` applied to any [..., C] tensor.
    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        let stats = self
            .norm_stats
            .as_ref()
            .ok_or_else(|| Error::Usage("dataset was never normalized".into()))?;
        let c = self.channels();
        if x.shape().last() != Some(&c) {
            return Err(Error::Dim(format!(
                "trailing axis must be {c} channels, got {:?}",
                x.shape()
            )));
        }
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = i % c;
            *v = *v * stats.std[ch] + stats.mean[ch];
        }
        Ok(out)
    }

    /// Copy rows [from, to) of one instance into a [to-from, C] tensor.
    pub fn window(&self, instance: usize, from: usize, to: usize) -> Result<Tensor> {
        let (_, t, c) = (self.instances(), self.total_len(), self.channels());
        if instance >= self.instances() || from >= to || to > t {
            return Err(Error::Dim(format!(
                "window [{from}, {to}) of instance {instance} out of range"
            )));
        }
        let mut data = Vec::with_capacity((to - from) * c);
        for ti in from..to {
            for ch in 0..c {
                data.push(self.values.at3(instance, ti, ch));
            }
        }
        Tensor::new(vec![to - from, c], data)
    }

    /// All stride-1 (window, target) pairs inside one split:
    /// count per instance = split_length - lookback - horizon + 1.
    pub fn make_forecast_samples(
        &self,
        lookback: usize,
        horizon: usize,
        split: Split,
    ) -> Result<Vec<ForecastSample>> {
        if lookback == 0 || horizon == 0 {
            return Err(Error::Param("lookback and horizon must be >= 1".into()));
        }
        let (start, end) = self.time_range(split)?;
        let len = end - start;
        if len < lookback + horizon {
            return Err(Error::Sizing(format!(
                "{split} split has {len} steps, needs at least lookback + horizon = {}",
                lookback + horizon
            )));
        }
        let mut out = Vec::new();
        for instance in 0..self.instances() {
            for s in start..=(end - lookback - horizon) {
                out.push(ForecastSample {
                    window: self.window(instance, s, s + lookback)?,
                    target: self.window(instance, s + lookback, s + lookback + horizon)?,
                    origin: (instance, s),
                });
            }
        }
        Ok(out)
    }
}

// ── CSV ingestion ────────────────────────────────────────────────────

enum DateOrder {
    Integer(i64),
    DateTime(NaiveDateTime),
    Lexicographic(String),
}

fn parse_date_cell(s: &str) -> DateOrder {
    if let Ok(v) = s.trim().parse::<i64>() {
        return DateOrder::Integer(v);
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y/%m/%d %H:%M"] {
        if let Ok(v) = NaiveDateTime::parse_from_str(s.trim(), fmt) {
            return DateOrder::DateTime(v);
        }
    }
    if let Ok(v) = NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d") {
        return DateOrder::DateTime(v.and_hms_opt(0, 0, 0).unwrap());
    }
    DateOrder::Lexicographic(s.to_string())
}

fn dates_increasing(prev: &DateOrder, cur: &DateOrder) -> bool {
    match (prev, cur) {
        (DateOrder::Integer(a), DateOrder::Integer(b)) => a < b,
        (DateOrder::DateTime(a), DateOrder::DateTime(b)) => a < b,
        (DateOrder::Lexicographic(a), DateOrder::Lexicographic(b)) => a < b,
        // Mixed representations fall back to never-increasing so the
        // monotonicity check fails loudly instead of guessing.
        _ => false,
    }
}

/// Load an ETT-format CSV: header row, a leading date/timestamp column
/// (checked for strictly increasing order, otherwise ignored), then numeric
/// feature columns. Returns a single-instance dataset [1, rows, C].
pub fn load_csv(path: &Path, date_column: &str) -> Result<SeriesDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Ingest(format!("missing header row: {e}")))?
        .clone();
    if headers.is_empty() {
        return Err(Error::Ingest("empty header row".into()));
    }
    if headers.get(0) != Some(date_column) {
        return Err(Error::Ingest(format!(
            "expected first column '{date_column}', found '{}'",
            headers.get(0).unwrap_or("")
        )));
    }
    let feature_names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let c = feature_names.len();
    if c == 0 {
        return Err(Error::Ingest("no feature columns after the date column".into()));
    }

    let mut data: Vec<f64> = Vec::new();
    let mut rows = 0usize;
    let mut prev_date: Option<DateOrder> = None;
    for (ri, record) in reader.records().enumerate() {
        // 1-based data row index as a human would count below the header.
        let row_no = ri + 2;
        let record = record.map_err(|e| Error::Ingest(format!("row {row_no}: {e}")))?;
        if record.len() != c + 1 {
            return Err(Error::Ingest(format!(
                "row {row_no} has {} cells, expected {}",
                record.len(),
                c + 1
            )));
        }
        let date = parse_date_cell(record.get(0).unwrap());
        if let Some(prev) = &prev_date {
            if !dates_increasing(prev, &date) {
                return Err(Error::Ingest(format!(
                    "non-monotone date at row {row_no} (column '{date_column}')"
                )));
            }
        }
        prev_date = Some(date);
        for (ci, cell) in record.iter().skip(1).enumerate() {
            let parsed: f64 = cell.trim().parse().map_err(|_| {
                Error::Ingest(format!(
                    "row {row_no}, column '{}': cannot parse '{cell}' as a number",
                    feature_names[ci]
                ))
            })?;
            if !parsed.is_finite() {
                return Err(Error::Ingest(format!(
                    "row {row_no}, column '{}': non-finite value '{cell}'",
                    feature_names[ci]
                )));
            }
            data.push(parsed);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Ingest("no data rows".into()));
    }
    let values = Tensor::new(vec![1, rows, c], data)?;
    SeriesDataset::from_values(values, feature_names)
}

/// Write a single-instance dataset as an ETT-format CSV with a synthetic
/// hourly timestamp column.
pub fn write_csv(ds: &SeriesDataset, path: &Path, date_column: &str) -> Result<()> {
    if ds.instances() != 1 {
        return Err(Error::Usage(format!(
            "CSV export supports a single instance, got {}",
            ds.instances()
        )));
    }
    let base = NaiveDate::from_ymd_opt(2016, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write!(w, "{date_column}")?;
    for name in ds.feature_names() {
        write!(w, ",{name}")?;
    }
    writeln!(w)?;
    for t in 0..ds.total_len() {
        let stamp = base + chrono::Duration::hours(t as i64);
        write!(w, "{}", stamp.format("%Y-%m-%d %H:%M:%S"))?;
        for ch in 0..ds.channels() {
            write!(w, ",{}", ds.values().at3(0, t, ch))?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

// ── synthetic fixtures ──────────────────────────────────────────────

/// One sinusoidal component of a synthetic channel.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SineComponent {
    pub period: f64,
    pub amplitude: f64,
}

/// Recipe for seeded synthetic series: a sum of sinusoids (random phase per
/// channel) plus AR(1) noise driven by Gaussian innovations of the given
/// standard deviation.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub sines: Vec<SineComponent>,
    pub noise_std: f64,
    pub ar_coeff: f64,
}

/// Generate a deterministic synthetic dataset: identical seeds give
/// bit-identical tensors.
pub fn synth_generate(
    seed: u64,
    instances: usize,
    t_total: usize,
    channels: usize,
    spec: &SynthSpec,
) -> Result<SeriesDataset> {
    if instances == 0 || t_total == 0 || channels == 0 {
        return Err(Error::Param("instances, length, channels must all be >= 1".into()));
    }
    for s in &spec.sines {
        if !s.period.is_finite() || !s.amplitude.is_finite() || s.period <= 0.0 {
            return Err(Error::Param(format!(
                "bad sine component: period {}, amplitude {}",
                s.period, s.amplitude
            )));
        }
    }
    if !(spec.noise_std >= 0.0) || !spec.noise_std.is_finite() {
        return Err(Error::Param(format!("noise std must be >= 0, got {}", spec.noise_std)));
    }
    if !(spec.ar_coeff.abs() < 1.0) {
        return Err(Error::Param(format!(
            "|AR coefficient| must be < 1 for a stationary fixture, got {}",
            spec.ar_coeff
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; instances * t_total * channels];
    for i in 0..instances {
        for ch in 0..channels {
            let phases: Vec<f64> = spec
                .sines
                .iter()
                .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                .collect();
            let mut ar = 0.0;
            for t in 0..t_total {
                let mut v = 0.0;
                for (s, phase) in spec.sines.iter().zip(&phases) {
                    // (t mod period) keeps the argument small so integer
                    // periods are exactly periodic in float arithmetic.
                    let frac = (t as f64) % s.period / s.period;
                    v += s.amplitude * (std::f64::consts::TAU * frac + phase).sin();
                }
                let innovation: f64 = standard_normal(&mut rng);
                ar = spec.ar_coeff * ar + spec.noise_std * innovation;
                data[(i * t_total + t) * channels + ch] = v + ar;
            }
        }
    }
    let names = (0..channels).map(|ch| format!("ch{ch}")).collect();
    SeriesDataset::from_values(Tensor::new(vec![instances, t_total, channels], data)?, names)
}
