//! Measurement ingestion: CSV loading, row standardization and sliding windows.
//!
//! A [`RawSeriesSet`] is node-major: row `i` is the time series of node `i`.
//! Windows are standardized independently, each one being treated as a fresh
//! random-matrix sample.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DMatrixView};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Physical quantity carried by a series set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Quantity {
    ActivePower,
    VoltageMagnitude,
    Current,
}

#[derive(Debug, Clone)]
pub struct RawSeriesSet {
    pub node_ids: Vec<String>,
    /// Seconds per sample; `None` when fewer than two samples were read.
    pub sample_period: Option<f64>,
    /// Sample timestamps as read. Kept for output only, never used in the math.
    pub timestamps: Vec<f64>,
    pub values: DMatrix<f64>,
    pub quantity: Quantity,
}

impl RawSeriesSet {
    pub fn new(
        node_ids: Vec<String>,
        values: DMatrix<f64>,
        quantity: Quantity,
        sample_period: Option<f64>,
    ) -> Result<Self> {
        if node_ids.len() != values.nrows() {
            return Err(Error::Shape(format!(
                "{} node ids for {} rows",
                node_ids.len(),
                values.nrows()
            )));
        }
        if values.ncols() == 0 {
            return Err(Error::InsufficientData {
                window: 1,
                available: 0,
            });
        }
        check_unique(&node_ids)?;
        let timestamps = (0..values.ncols())
            .map(|k| k as f64 * sample_period.unwrap_or(1.0))
            .collect();
        Ok(Self {
            node_ids,
            sample_period,
            timestamps,
            values,
            quantity,
        })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    pub fn row(&self, node: usize) -> Vec<f64> {
        self.values.row(node).iter().copied().collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.node_ids.iter().position(|n| n == id)
    }

    /// Writes the set in the format accepted by [`load_csv`].
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.node_ids.iter().cloned());
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(self.n() + 1);
        for k in 0..self.len() {
            record.clear();
            record.push(format_num(self.timestamps[k]));
            record.extend(self.values.column(k).iter().map(|&v| format_num(v)));
            w.write_record(&record)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn format_num(v: f64) -> String {
    // Shortest round-trip representation keeps files exact and diffable.
    format!("{v:?}")
}

fn check_unique(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    Ok(())
}

/// Reads a CSV whose header is `timestamp,<id_1>,...,<id_N>` and whose records
/// are uniformly spaced samples.
pub fn load_csv(path: &Path, quantity: Quantity) -> Result<RawSeriesSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let header = reader.headers()?.clone();
    if header.len() < 2 {
        return Err(Error::Format(
            "header must contain a timestamp column and at least one node id".into(),
        ));
    }
    let node_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    check_unique(&node_ids)?;
    let n = node_ids.len();

    let mut timestamps = Vec::new();
    let mut flat = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        // Row numbers are 1-based and count the header, like a spreadsheet.
        let row = r + 2;
        if rec.len() != n + 1 {
            return Err(Error::Parse {
                row,
                column: rec.len().min(n + 1),
                message: format!("expected {} fields, found {}", n + 1, rec.len()),
            });
        }
        for (col, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: col + 1,
                message: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: col + 1,
                    message: "missing or non-finite value".into(),
                });
            }
            if col == 0 {
                timestamps.push(v);
            } else {
                flat.push(v);
            }
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Format("no data rows".into()));
    }
    let sample_period = infer_period(&timestamps)?;
    let t_total = timestamps.len();
    // `flat` is time-major; a column-major N x T matrix has the same layout.
    let values = DMatrix::from_vec(n, t_total, flat);
    Ok(RawSeriesSet {
        node_ids,
        sample_period,
        timestamps,
        values,
        quantity,
    })
}

fn infer_period(ts: &[f64]) -> Result<Option<f64>> {
    if ts.len() < 2 {
        return Ok(None);
    }
    let dt = ts[1] - ts[0];
    if dt <= 0.0 {
        return Err(Error::Format(format!(
            "timestamps must increase, got step {dt}"
        )));
    }
    for (k, w) in ts.windows(2).enumerate() {
        let d = w[1] - w[0];
        if (d - dt).abs() > 0.01 * dt {
            return Err(Error::Format(format!(
                "non-uniform timestamps: step {d} at data row {} deviates from {dt} by more than 1%",
                k + 2
            )));
        }
    }
    Ok(Some(dt))
}

/// How to handle rows with zero sample variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Jitter {
    #[default]
    Off,
    /// Add seeded Gaussian noise of relative size 1e-6 before standardizing.
    Seeded(u64),
}

const JITTER_REL: f64 = 1e-6;

fn row_moments(row: impl Iterator<Item = f64> + Clone, len: usize) -> (f64, f64) {
    let n = len as f64;
    let mean = row.clone().sum::<f64>() / n;
    let var = row.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn is_degenerate(mean: f64, var: f64) -> bool {
    let sd = var.sqrt();
    sd == 0.0 || sd <= 1e-13 * mean.abs()
}

/// Standardizes every row to mean 0 and population variance 1.
///
/// `labels` only serve error messages. With [`Jitter::Seeded`], degenerate
/// rows get Gaussian noise with standard deviation `1e-6 * |mean|` (or `1e-6`
/// for an all-zero row) before standardizing.
pub fn standardize_rows(
    raw: DMatrixView<'_, f64>,
    labels: Option<&[String]>,
    jitter: Jitter,
) -> Result<DMatrix<f64>> {
    let (n, t) = raw.shape();
    let mut out = DMatrix::zeros(n, t);
    standardize_into(raw, &mut out, 0, labels, jitter)?;
    Ok(out)
}

/// Standardizes `raw` into rows `offset..offset + raw.nrows()` of `out`.
pub(crate) fn standardize_into(
    raw: DMatrixView<'_, f64>,
    out: &mut DMatrix<f64>,
    offset: usize,
    labels: Option<&[String]>,
    jitter: Jitter,
) -> Result<()> {
    let (n, t) = raw.shape();
    if t == 0 {
        return Err(Error::InsufficientData {
            window: 1,
            available: 0,
        });
    }
    for i in 0..n {
        let row = raw.row(i);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input row"));
        }
        let (mut mean, mut var) = row_moments(row.iter().copied(), t);
        let mut noisy: Option<Vec<f64>> = None;
        if is_degenerate(mean, var) {
            match jitter {
                Jitter::Off => {
                    let node = labels
                        .and_then(|l| l.get(i).cloned())
                        .unwrap_or_else(|| format!("row {i}"));
                    return Err(Error::DegenerateRow { node });
                }
                Jitter::Seeded(seed) => {
                    let scale = if mean == 0.0 {
                        JITTER_REL
                    } else {
                        JITTER_REL * mean.abs()
                    };
                    let mut r = rng::stream(seed, &[i as u64]);
                    let v: Vec<f64> = row
                        .iter()
                        .map(|&x| {
                            let z: f64 = StandardNormal.sample(&mut r);
                            x + scale * z
                        })
                        .collect();
                    (mean, var) = row_moments(v.iter().copied(), t);
                    noisy = Some(v);
                }
            }
        }
        let sd = var.sqrt();
        match noisy {
            Some(v) => {
                for (k, x) in v.into_iter().enumerate() {
                    out[(offset + i, k)] = (x - mean) / sd;
                }
            }
            None => {
                for (k, &x) in row.iter().enumerate() {
                    out[(offset + i, k)] = (x - mean) / sd;
                }
            }
        }
    }
    Ok(())
}

/// An N x T block of standardized measurements.
#[derive(Debug, Clone)]
pub struct TimeSeriesWindow {
    pub data: DMatrix<f64>,
    pub start_index: usize,
}

impl TimeSeriesWindow {
    /// Wraps an already standardized matrix, rejecting N > T.
    pub fn new(data: DMatrix<f64>, start_index: usize) -> Result<Self> {
        let (rows, cols) = data.shape();
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("empty window {rows}x{cols}")));
        }
        if rows > cols {
            return Err(Error::AspectRatio { rows, cols });
        }
        Ok(Self { data, start_index })
    }

    /// Standardizes `raw` row-wise and wraps it.
    pub fn from_raw(raw: DMatrixView<'_, f64>, start_index: usize, jitter: Jitter) -> Result<Self> {
        let (rows, cols) = raw.shape();
        if rows > cols {
            return Err(Error::AspectRatio { rows, cols });
        }
        Self::new(standardize_rows(raw, None, jitter)?, start_index)
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn t(&self) -> usize {
        self.data.ncols()
    }

    pub fn c(&self) -> f64 {
        self.n() as f64 / self.t() as f64
    }

    /// Exclusive end sample of the window, used to index traces.
    pub fn end_index(&self) -> usize {
        self.start_index + self.t()
    }
}

/// Number of windows of length `t` with stride `step` over `total` samples.
pub fn window_count(total: usize, t: usize, step: usize) -> Result<usize> {
    if step == 0 {
        return Err(Error::Config("window step must be at least 1".into()));
    }
    if t == 0 || t > total {
        return Err(Error::InsufficientData {
            window: t,
            available: total,
        });
    }
    Ok((total - t) / step + 1)
}

/// Lazily standardized sliding windows over a series set.
pub struct SlidingWindows<'a> {
    set: &'a RawSeriesSet,
    t: usize,
    step: usize,
    next: usize,
    count: usize,
    jitter: Jitter,
}

impl<'a> SlidingWindows<'a> {
    /// Enables seeded jitter for degenerate rows; each window gets its own
    /// stream derived from the seed and its start index.
    pub fn with_jitter(mut self, jitter: Jitter) -> Self {
        self.jitter = jitter;
        self
    }
}

impl Iterator for SlidingWindows<'_> {
    type Item = Result<TimeSeriesWindow>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.count {
            return None;
        }
        let start = self.next * self.step;
        self.next += 1;
        let jitter = match self.jitter {
            Jitter::Off => Jitter::Off,
            Jitter::Seeded(s) => Jitter::Seeded(rng::derive_seed(s, &[start as u64])),
        };
        let raw = self.set.values.columns(start, self.t);
        let res = standardize_rows(raw, Some(&self.set.node_ids), jitter)
            .and_then(|data| TimeSeriesWindow::new(data, start));
        Some(res)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.count - self.next;
        (left, Some(left))
    }
}

impl ExactSizeIterator for SlidingWindows<'_> {}

pub fn sliding_windows(set: &RawSeriesSet, t: usize, step: usize) -> Result<SlidingWindows<'_>> {
    let count = window_count(set.len(), t, step)?;
    if set.n() > t {
        return Err(Error::AspectRatio {
            rows: set.n(),
            cols: t,
        });
    }
    Ok(SlidingWindows {
        set,
        t,
        step,
        next: 0,
        count,
        jitter: Jitter::Off,
    })
}

const SIDECAR_MAGIC: &[u8; 4] = b"RMTW";

/// Writes a matrix as `RMTW`, u32 rows, u32 cols, row-major little-endian f64.
pub fn write_sidecar(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let rows = u32::try_from(m.nrows()).map_err(|_| Error::Shape("too many rows".into()))?;
    let cols = u32::try_from(m.ncols()).map_err(|_| Error::Shape("too many columns".into()))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(SIDECAR_MAGIC)?;
    put(&rows.to_le_bytes())?;
    put(&cols.to_le_bytes())?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            put(&m[(i, j)].to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sidecar(path: &Path) -> Result<DMatrix<f64>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != SIDECAR_MAGIC {
        return Err(Error::Format("missing RMTW header".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload = &bytes[12..];
    if payload.len() != rows * cols * 8 {
        return Err(Error::Format(format!(
            "RMTW payload has {} bytes, expected {}",
            payload.len(),
            rows * cols * 8
        )));
    }
    let vals = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    Ok(DMatrix::from_row_iterator(rows, cols, vals))
}
