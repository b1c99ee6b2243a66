//! CSV ingestion, standardization and splitting.

use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;

use crate::dynamics::SequenceBatch;
use crate::error::{Error, Result};
use crate::ndcore::Tensor;
use crate::rng::{tag, NoiseStream};

pub mod synthetic;

/// Which columns of a CSV play which role.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub targets: Vec<String>,
    /// Feature columns; `None` means every column that is neither a target nor the time column.
    pub features: Option<Vec<String>>,
    /// Column of times in hours; its presence makes the file a time series.
    pub time_column: Option<String>,
    pub delimiter: u8,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            targets: vec!["y".into()],
            features: None,
            time_column: None,
            delimiter: b',',
        }
    }
}

/// Per-column affine map to zero mean and unit standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardizer {
    /// Column statistics of `x`; constant columns get std 1.
    pub fn fit(x: &Tensor) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        let n = x.rows() as f64;
        let means = x.column_means().into_vec();
        let stds = (0..x.cols())
            .map(|c| {
                let v = (0..x.rows()).map(|r| (x.get(r, c) - means[c]).powi(2)).sum::<f64>() / n;
                if v > 0.0 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { means, stds })
    }

    pub fn identity(cols: usize) -> Self {
        Standardizer {
            means: vec![0.0; cols],
            stds: vec![1.0; cols],
        }
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.means.len() {
            return Err(Error::Schema(format!(
                "expected {} columns, got {}",
                self.means.len(),
                x.cols()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        Ok(Tensor::from_fn(x.rows(), x.cols(), |r, c| (x.get(r, c) - self.means[c]) / self.stds[c]))
    }

    pub fn inverse(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        Ok(Tensor::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) * self.stds[c] + self.means[c]))
    }

    /// Scales variances back to original units.
    pub fn inverse_variance(&self, v: &Tensor) -> Result<Tensor> {
        self.check(v)?;
        Ok(Tensor::from_fn(v.rows(), v.cols(), |r, c| v.get(r, c) * self.stds[c].powi(2)))
    }

    /// `Σ_c log σ_c`: the change of log density from standardized to original units, per point.
    pub fn log_jacobian(&self) -> f64 {
        self.stds.iter().map(|s| s.ln()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub feature_names: Vec<String>,
    pub target_names: Vec<String>,
    /// N×d.
    pub x: Tensor,
    /// N×η.
    pub y: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    pub names: Vec<String>,
    /// Hours, strictly increasing.
    pub times: Vec<f64>,
    /// len×η.
    pub values: Tensor,
    /// Row-major, `true` where observed rather than interpolated.
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Tabular(TabularDataset),
    TimeSeries(TimeSeriesDataset),
}

struct RawTable {
    header: Vec<String>,
    /// Row-major cells; `None` for missing.
    cells: Vec<Vec<Option<f64>>>,
    /// Source line of each row.
    lines: Vec<usize>,
}

fn parse_cell(s: &str) -> std::result::Result<Option<f64>, String> {
    let t = s.trim();
    if t.is_empty() || t == "NA" {
        return Ok(None);
    }
    let v = t.parse::<f64>().map_err(|_| format!("cannot parse `{t}` as a number"))?;
    if v.is_finite() {
        Ok(Some(v))
    } else {
        Err(format!("non-finite value `{t}`"))
    }
}

fn read_raw(path: &Path, delimiter: u8) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(true)
        .comment(Some(b'#'))
        .from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(Error::Parse {
            line: 1,
            message: "missing header row".into(),
        });
    }
    let mut cells = Vec::new();
    let mut lines = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let row = record
            .iter()
            .map(parse_cell)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|message| Error::Parse { line, message })?;
        cells.push(row);
        lines.push(line);
    }
    if cells.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(RawTable { header, cells, lines })
}

impl RawTable {
    fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found")))
    }

    fn check_not_all_missing(&self, cols: &[usize]) -> Result<()> {
        for &c in cols {
            if self.cells.iter().all(|r| r[c].is_none()) {
                return Err(Error::Schema(format!("column `{}` has no values", self.header[c])));
            }
        }
        Ok(())
    }
}

fn resolve(raw: &RawTable, schema: &Schema) -> Result<(Vec<usize>, Vec<usize>)> {
    if schema.targets.is_empty() {
        return Err(Error::Schema("at least one target column is required".into()));
    }
    let targets = schema.targets.iter().map(|t| raw.column(t)).collect::<Result<Vec<_>>>()?;
    let time = schema.time_column.as_deref().map(|t| raw.column(t)).transpose()?;
    let features = match &schema.features {
        Some(names) => names.iter().map(|f| raw.column(f)).collect::<Result<Vec<_>>>()?,
        None => (0..raw.header.len())
            .filter(|c| !targets.contains(c) && Some(*c) != time)
            .collect(),
    };
    Ok((features, targets))
}

/// Reads a table or, when the schema names a time column, a time series.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    if schema.time_column.is_some() {
        load_time_series(path, schema).map(Dataset::TimeSeries)
    } else {
        load_tabular(path, schema).map(Dataset::Tabular)
    }
}

/// Rows with a missing feature or target are dropped with a warning.
pub fn load_tabular(path: impl AsRef<Path>, schema: &Schema) -> Result<TabularDataset> {
    let raw = read_raw(path.as_ref(), schema.delimiter)?;
    let (features, targets) = resolve(&raw, schema)?;
    if features.is_empty() {
        return Err(Error::Schema("no feature columns".into()));
    }
    raw.check_not_all_missing(&features)?;
    raw.check_not_all_missing(&targets)?;
    let keep: Vec<usize> = (0..raw.cells.len())
        .filter(|&r| features.iter().chain(&targets).all(|&c| raw.cells[r][c].is_some()))
        .collect();
    if keep.len() < raw.cells.len() {
        let lines: Vec<String> = (0..raw.cells.len())
            .filter(|r| !keep.contains(r))
            .take(5)
            .map(|r| raw.lines[r].to_string())
            .collect();
        warn!(
            "dropped {} rows with missing values (lines {}{})",
            raw.cells.len() - keep.len(),
            lines.join(", "),
            if raw.cells.len() - keep.len() > 5 { ", ..." } else { "" }
        );
    }
    if keep.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let take = |cols: &[usize]| Tensor::from_fn(keep.len(), cols.len(), |r, c| raw.cells[keep[r]][cols[c]].unwrap());
    Ok(TabularDataset {
        feature_names: features.iter().map(|&c| raw.header[c].clone()).collect(),
        target_names: targets.iter().map(|&c| raw.header[c].clone()).collect(),
        x: take(&features),
        y: take(&targets),
    })
}

/// Linearly interpolates interior gaps; leading and trailing gaps take the
/// nearest observed value. Returns the filled column and its observed flags.
pub fn interpolate(times: &[f64], values: &[Option<f64>]) -> Result<(Vec<f64>, Vec<bool>)> {
    let observed: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_some()).collect();
    let (&first, &last) = match (observed.first(), observed.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::Schema("column has no values".into())),
    };
    let mut out = vec![0.0; values.len()];
    for (i, o) in out.iter_mut().enumerate() {
        *o = match values[i] {
            Some(v) => v,
            None if i < first => values[first].unwrap(),
            None if i > last => values[last].unwrap(),
            None => {
                let k = observed.partition_point(|&j| j < i);
                let (a, b) = (observed[k - 1], observed[k]);
                let (va, vb) = (values[a].unwrap(), values[b].unwrap());
                va + (vb - va) * (times[i] - times[a]) / (times[b] - times[a])
            }
        };
    }
    Ok((out, values.iter().map(Option::is_some).collect()))
}

/// Reads a multivariate series; missing values are interpolated and masked.
/// The observed series are the schema's targets plus its features, if listed.
pub fn load_time_series(path: impl AsRef<Path>, schema: &Schema) -> Result<TimeSeriesDataset> {
    let raw = read_raw(path.as_ref(), schema.delimiter)?;
    let time_name = schema
        .time_column
        .as_deref()
        .ok_or_else(|| Error::Schema("time series need a time column".into()))?;
    let tc = raw.column(time_name)?;
    let (features, targets) = resolve(&raw, schema)?;
    let mut cols = targets.clone();
    if schema.features.is_some() {
        cols.extend(features.iter().filter(|c| !targets.contains(c)));
    }
    raw.check_not_all_missing(&cols)?;
    let mut times = Vec::with_capacity(raw.cells.len());
    for (r, row) in raw.cells.iter().enumerate() {
        let t = row[tc].ok_or_else(|| Error::Parse {
            line: raw.lines[r],
            message: format!("missing time in column `{time_name}`"),
        })?;
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(Error::Parse {
                    line: raw.lines[r],
                    message: format!("time {t} does not increase (previous {prev})"),
                });
            }
        }
        times.push(t);
    }
    let len = times.len();
    let mut values = Tensor::zeros(len, cols.len());
    let mut mask = vec![true; len * cols.len()];
    let mut filled = 0;
    for (j, &c) in cols.iter().enumerate() {
        let column: Vec<Option<f64>> = raw.cells.iter().map(|r| r[c]).collect();
        let (v, m) = interpolate(&times, &column)
            .map_err(|_| Error::Schema(format!("column `{}` has no values", raw.header[c])))?;
        for i in 0..len {
            values.set(i, j, v[i]);
            mask[i * cols.len() + j] = m[i];
            filled += usize::from(!m[i]);
        }
    }
    if filled > 0 {
        warn!("interpolated {filled} missing values");
    }
    Ok(TimeSeriesDataset {
        names: cols.iter().map(|&c| raw.header[c].clone()).collect(),
        times,
        values,
        mask,
    })
}

/// Shortest representation that parses back to the same bits.
fn fmt(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_tabular(ds: &TabularDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ds.feature_names.iter().chain(&ds.target_names))?;
    for r in 0..ds.x.rows() {
        w.write_record(ds.x.row_slice(r).iter().chain(ds.y.row_slice(r)).map(|&v| fmt(v)))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the series with interpolated entries left empty.
pub fn write_time_series(ds: &TimeSeriesDataset, time_column: &str, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(std::iter::once(time_column).chain(ds.names.iter().map(String::as_str)))?;
    let eta = ds.values.cols();
    for (i, &t) in ds.times.iter().enumerate() {
        let row = std::iter::once(fmt(t)).chain((0..eta).map(|j| {
            if ds.mask[i * eta + j] {
                fmt(ds.values.get(i, j))
            } else {
                String::new()
            }
        }));
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Standardization fitted on a training portion.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessing {
    /// Original feature columns retained (constant ones are dropped).
    pub kept_features: Vec<usize>,
    pub x: Standardizer,
    pub y: Standardizer,
}

impl Preprocessing {
    /// Fits on `train`; zero-variance features are dropped with a warning.
    pub fn fit(train: &TabularDataset) -> Result<Self> {
        if train.x.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        let full = Standardizer::fit(&train.x)?;
        let kept_features: Vec<usize> = (0..train.x.cols())
            .filter(|&c| {
                let constant = (0..train.x.rows()).all(|r| train.x.get(r, c) == train.x.get(0, c));
                if constant {
                    warn!("dropping constant feature `{}`", train.feature_names[c]);
                }
                !constant
            })
            .collect();
        if kept_features.is_empty() {
            return Err(Error::Schema("every feature is constant on the training data".into()));
        }
        Ok(Preprocessing {
            x: Standardizer {
                means: kept_features.iter().map(|&c| full.means[c]).collect(),
                stds: kept_features.iter().map(|&c| full.stds[c]).collect(),
            },
            y: Standardizer::fit(&train.y)?,
            kept_features,
        })
    }

    pub fn transform(&self, ds: &TabularDataset) -> Result<TabularDataset> {
        if ds.x.cols() <= *self.kept_features.iter().max().unwrap_or(&0) {
            return Err(Error::Schema(format!(
                "dataset has {} feature columns, preprocessing expects at least {}",
                ds.x.cols(),
                self.kept_features.iter().max().unwrap_or(&0) + 1
            )));
        }
        let x = Tensor::from_fn(ds.x.rows(), self.kept_features.len(), |r, c| ds.x.get(r, self.kept_features[c]));
        Ok(TabularDataset {
            feature_names: self.kept_features.iter().map(|&c| ds.feature_names[c].clone()).collect(),
            target_names: ds.target_names.clone(),
            x: self.x.apply(&x)?,
            y: self.y.apply(&ds.y)?,
        })
    }
}

impl TabularDataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn select(&self, idx: &[usize]) -> TabularDataset {
        TabularDataset {
            feature_names: self.feature_names.clone(),
            target_names: self.target_names.clone(),
            x: self.x.select_rows(idx),
            y: self.y.select_rows(idx),
        }
    }
}

/// Seeded random partition into `fraction` train and the rest test.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::contract(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let n_train = (fraction * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::contract(format!(
            "split of {n} rows at {fraction} leaves an empty side"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut NoiseStream::new(seed).rng(&[tag::SHUFFLE]));
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

pub fn split(ds: &TabularDataset, fraction: f64, seed: u64) -> Result<(TabularDataset, TabularDataset)> {
    let (train, test) = split_indices(ds.len(), fraction, seed)?;
    Ok((ds.select(&train), ds.select(&test)))
}

impl TimeSeriesDataset {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> TimeSeriesDataset {
        let eta = self.values.cols();
        TimeSeriesDataset {
            names: self.names.clone(),
            times: self.times[range.clone()].to_vec(),
            values: self.values.slice(range.clone(), 0..eta),
            mask: self.mask[range.start * eta..range.end * eta].to_vec(),
        }
    }

    /// Splits at row `at` into a leading and a trailing part.
    pub fn split_at(&self, at: usize) -> Result<(TimeSeriesDataset, TimeSeriesDataset)> {
        if at == 0 || at >= self.len() {
            return Err(Error::contract(format!("cannot split a series of {} rows at {at}", self.len())));
        }
        Ok((self.slice(0..at), self.slice(at..self.len())))
    }

    pub fn standardize_with(&self, s: &Standardizer) -> Result<TimeSeriesDataset> {
        Ok(TimeSeriesDataset {
            values: s.apply(&self.values)?,
            ..self.clone()
        })
    }

    pub fn to_batch(&self) -> Result<SequenceBatch> {
        let b = SequenceBatch {
            times: self.times.clone(),
            observations: self.values.clone(),
            mask: self.mask.clone(),
        };
        b.validate()?;
        Ok(b)
    }
}
