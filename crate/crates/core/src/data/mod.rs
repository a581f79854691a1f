//! Series ingestion, min-max normalization, sliding windows, and the
//! synthetic benchmark generator.

mod csv_io;
mod synth;

use thiserror::Error;

pub use csv_io::{load_csv, read_csv, write_csv};
pub use synth::{
    synth, AnomalyKind, AnomalySegment, AnomalySpec, BenchmarkSpec, SignalModel, SynthBenchmark,
    DEFAULT_BENCHMARK_SPEC,
};

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}, column {column} ({name}): cannot parse {value:?} as a finite number")]
    Parse {
        row: usize,
        column: usize,
        name: String,
        value: String,
    },
    #[error("row {row}: expected {expected} fields, found {found}")]
    Ragged { row: usize, expected: usize, found: usize },
    #[error("row {row}: label must be 0 or 1, found {value:?}")]
    Label { row: usize, value: String },
    #[error("label column {0:?} not found in header")]
    MissingLabelColumn(String),
    #[error("series needs at least one observation and one variable")]
    Empty,
    #[error("window length {window} exceeds series length {len}")]
    WindowTooLong { window: usize, len: usize },
    #[error("window length must be at least 1")]
    ZeroWindow,
    #[error("series has {found} variables, normalization statistics have {expected}")]
    VariableCount { expected: usize, found: usize },
    #[error("invalid anomaly spec: {0}")]
    Spec(String),
}

/// N observations of K variables, row-major, with optional point labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    values: Vec<f64>,
    n_points: usize,
    n_vars: usize,
    names: Vec<String>,
    labels: Option<Vec<bool>>,
}

impl RawSeries {
    pub fn new(values: Vec<f64>, n_vars: usize, labels: Option<Vec<bool>>) -> Result<Self> {
        let names = (0..n_vars).map(|j| format!("x{j}")).collect();
        Self::with_names(values, names, labels)
    }

    pub fn with_names(values: Vec<f64>, names: Vec<String>, labels: Option<Vec<bool>>) -> Result<Self> {
        let n_vars = names.len();
        if n_vars == 0 || values.is_empty() || values.len() % n_vars != 0 {
            return Err(DataError::Empty);
        }
        let n_points = values.len() / n_vars;
        if let Some(l) = &labels {
            if l.len() != n_points {
                return Err(DataError::Spec(format!(
                    "{} labels for {n_points} observations",
                    l.len()
                )));
            }
        }
        Ok(Self {
            values,
            n_points,
            n_vars,
            names,
            labels,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(DataError::Empty);
        }
        Self::new(rows.concat(), k, None)
    }

    pub fn len(&self) -> usize {
        self.n_points
    }

    pub fn is_empty(&self) -> bool {
        self.n_points == 0
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_vars..(t + 1) * self.n_vars]
    }

    /// Rows `start..end` as one contiguous slice.
    pub fn rows(&self, start: usize, end: usize) -> &[f64] {
        &self.values[start * self.n_vars..end * self.n_vars]
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().skip(j).step_by(self.n_vars).copied()
    }

    pub fn labels(&self) -> Option<&[bool]> {
        self.labels.as_deref()
    }

    pub fn set_labels(&mut self, labels: Option<Vec<bool>>) -> Result<()> {
        if let Some(l) = &labels {
            if l.len() != self.n_points {
                return Err(DataError::Spec(format!(
                    "{} labels for {} observations",
                    l.len(),
                    self.n_points
                )));
            }
        }
        self.labels = labels;
        Ok(())
    }
}

/// Per-variable minimum and maximum of the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

pub fn fit_normalize(train: &RawSeries) -> NormalizationStats {
    let k = train.n_vars();
    let mut min = vec![f64::INFINITY; k];
    let mut max = vec![f64::NEG_INFINITY; k];
    for t in 0..train.len() {
        for (j, &v) in train.row(t).iter().enumerate() {
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    NormalizationStats { min, max }
}

/// `(x - min) / (max - min)` per variable. Test values are not clipped, so
/// they may leave `[0, 1]`. A constant training column uses a denominator
/// of 1, which maps it to 0.
pub fn apply_normalize(series: &RawSeries, stats: &NormalizationStats) -> Result<RawSeries> {
    if stats.min.len() != series.n_vars() {
        return Err(DataError::VariableCount {
            expected: stats.min.len(),
            found: series.n_vars(),
        });
    }
    let k = series.n_vars();
    let values = series
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let j = i % k;
            let range = stats.max[j] - stats.min[j];
            let denom = if range > 0.0 { range } else { 1.0 };
            (v - stats.min[j]) / denom
        })
        .collect();
    Ok(RawSeries {
        values,
        n_points: series.n_points,
        n_vars: k,
        names: series.names.clone(),
        labels: series.labels.clone(),
    })
}

/// Stride-1 sliding windows of length `W` over a series.
///
/// Windows are views: window `i` covers timestamps `i..=i + W - 1`, which is a
/// contiguous block of the row-major series.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    series: RawSeries,
    window_len: usize,
}

pub fn window(series: &RawSeries, window_len: usize) -> Result<WindowedDataset> {
    if window_len == 0 {
        return Err(DataError::ZeroWindow);
    }
    if window_len > series.len() {
        return Err(DataError::WindowTooLong {
            window: window_len,
            len: series.len(),
        });
    }
    Ok(WindowedDataset {
        series: series.clone(),
        window_len,
    })
}

impl WindowedDataset {
    /// `N - W + 1`.
    pub fn len(&self) -> usize {
        self.series.len() - self.window_len + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn n_vars(&self) -> usize {
        self.series.n_vars()
    }

    pub fn series(&self) -> &RawSeries {
        &self.series
    }

    /// `W x K` values of window `i`, row-major.
    pub fn window(&self, i: usize) -> &[f64] {
        self.series.rows(i, i + self.window_len)
    }

    /// Timestamp of the last row of window `i`.
    pub fn end_index(&self, i: usize) -> usize {
        i + self.window_len - 1
    }

    /// All windows as one `(N - W + 1) x W x K` buffer.
    pub fn to_dense(&self) -> Vec<f64> {
        (0..self.len()).flat_map(|i| self.window(i).iter().copied()).collect()
    }
}
